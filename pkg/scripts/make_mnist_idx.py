"""Convert the 5000-image MNIST subset shipped with mlxtend into IDX files.

The CSV holds one image per row: 784 pixel values (0-255) followed by the
label. Writes images.idx (uint8, 5000x28x28) and labels.idx (uint8, 5000).

    python scripts/make_mnist_idx.py --source mlxtend-0.24.0-py3-none-any.whl --out data/mnist5k
"""
import argparse
import gzip
import io
import os
import zipfile

import numpy as np

from lfbm.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(source):
    """CSV text from a wheel, a .csv.gz file, or the installed mlxtend package."""
    if source is None:
        import mlxtend.data
        source = os.path.join(os.path.dirname(mlxtend.data.__file__), "data", "mnist_5k.csv.gz")
    if source.endswith(".whl"):
        with zipfile.ZipFile(source) as zf:
            return gzip.decompress(zf.read(MEMBER)).decode()
    with gzip.open(source, "rt") as fh:
        return fh.read()


def convert(source, out_dir):
    table = np.loadtxt(io.StringIO(read_csv_gz(source)), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    paths = os.path.join(out_dir, "images.idx"), os.path.join(out_dir, "labels.idx")
    write_idx(paths[0], images)
    write_idx(paths[1], labels)
    return paths


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", help="mlxtend wheel or mnist_5k.csv.gz (default: installed mlxtend)")
    ap.add_argument("--out", default="data/mnist5k")
    args = ap.parse_args()
    for p in convert(args.source, args.out):
        print(os.path.abspath(p))


if __name__ == "__main__":
    main()
