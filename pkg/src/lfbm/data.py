"""Datasets, masks, and the on-disk formats (IDX, checkpoint, PGM, CSV)."""
import csv
import gzip
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CKPT_MAGIC = b"LFBM"
CKPT_VERSION = 1


@dataclass
class Dataset:
    examples: np.ndarray
    labels: np.ndarray = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2 or self.examples.shape[0] < 1:
            raise DataError(f"dataset {self.name!r} must be a non-empty (N, D) matrix")
        if np.any(np.abs(self.examples) > 1.0) or not np.all(np.isfinite(self.examples)):
            raise DataError(f"dataset {self.name!r} has values outside [-1, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.examples.shape[0],):
                raise DataError("labels must have one entry per example")

    @property
    def dim(self):
        return self.examples.shape[1]

    def __len__(self):
        return self.examples.shape[0]

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.examples[idx], None if self.labels is None else self.labels[idx],
                       name or self.name, dict(self.meta))


# --- synthetic families -------------------------------------------------------


def _family_extent(kind, spec):
    if kind == "gaussian_mixture":
        means = np.asarray(spec["means"], dtype=np.float64)
        covs = np.asarray(spec["cov"], dtype=np.float64)
        if covs.ndim == 0:
            covs = covs * np.ones(len(means))
        if covs.ndim == 1:
            sds = np.sqrt(covs)
        else:
            sds = np.sqrt(np.linalg.eigvalsh(covs).max(axis=-1))
        return float(np.max(np.abs(means).max(axis=1) + 4.0 * sds))
    if kind == "two_rings":
        return float(max(spec["radii"]) + 4.0 * spec.get("noise", 0.0))
    return 1.0


def gen_synthetic(family, n, seed=0):
    """Sample a synthetic dataset.

    ``family`` is a dict with ``kind`` in {gaussian_mixture, two_rings,
    linear_gaussian}. Mixture and ring data are divided by a scale fixed from
    the family parameters (max |mean| + 4 sd) so they land in (-1, 1); the
    scale is stored in ``meta['scale']``. linear_gaussian draws
    x = z A + b + noise * eps, z ~ N(0, I), unscaled.
    """
    kind = family.get("kind")
    rng = np.random.default_rng(seed)
    n = int(n)
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    labels = None
    try:
        if kind == "gaussian_mixture":
            means = np.asarray(family["means"], dtype=np.float64)
            k, dim = means.shape
            w = np.asarray(family.get("weights", np.ones(k) / k), dtype=np.float64)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ConfigError("mixture weights must be non-negative and sum to 1")
            cov = np.asarray(family["cov"], dtype=np.float64)
            if cov.ndim == 0:
                cov = np.broadcast_to(cov * np.eye(dim), (k, dim, dim))
            elif cov.ndim == 1:
                cov = np.stack([c * np.eye(dim) for c in cov])
            elif cov.ndim == 2:
                cov = np.broadcast_to(cov, (k, dim, dim))
            chol = np.linalg.cholesky(cov)
            labels = rng.choice(k, size=n, p=w)
            eps = rng.standard_normal((n, dim))
            x = means[labels] + np.einsum("nij,nj->ni", chol[labels], eps)
        elif kind == "two_rings":
            radii = np.asarray(family["radii"], dtype=np.float64)
            noise = float(family.get("noise", 0.05))
            labels = rng.integers(0, len(radii), size=n)
            theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
            r = radii[labels] + noise * rng.standard_normal(n)
            x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        elif kind == "linear_gaussian":
            A = np.asarray(family["A"], dtype=np.float64)
            b = np.asarray(family["b"], dtype=np.float64)
            z = rng.standard_normal((n, A.shape[0]))
            x = z @ A + b + float(family.get("noise", 0.0)) * rng.standard_normal((n, A.shape[1]))
        else:
            raise ConfigError(f"unknown synthetic family {kind!r}")
    except (KeyError, ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid parameters for family {kind!r}: {exc}") from exc
    scale = 1.0 if kind == "linear_gaussian" else _family_extent(kind, family)
    x = np.clip(x / scale, -1.0, 1.0)
    return Dataset(x, labels, name=kind, meta={"scale": scale, "family": family})


# --- IDX ----------------------------------------------------------------------------


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: wrong magic 0x{magic:08x} at byte offset 0 "
                        f"(expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimension block at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise DataError(f"{path}: truncated payload at byte offset {len(raw)} "
                        f"(need {header + count} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims)


def read_idx_raw(path, expected_magic):
    return _parse_idx(_read_bytes(path), expected_magic, path)


def load_idx(images_path, labels_path=None, name="idx"):
    """Read IDX images (u8, N x rows x cols) into a (-1, 1) dataset: x = 2 v / 255 - 1."""
    img = read_idx_raw(images_path, IDX_IMAGES_MAGIC)
    n, rows, cols = img.shape
    x = 2.0 * (img.reshape(n, rows * cols).astype(np.float64) / 255.0) - 1.0
    labels = None
    if labels_path is not None:
        labels = read_idx_raw(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != n:
            raise DataError(f"{labels_path}: {labels.shape[0]} labels for {n} images "
                            f"(count field at byte offset 4)")
    return Dataset(x, labels, name=name, meta={"shape": (rows, cols)})


def write_idx(path, array):
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise DataError("IDX writer expects uint8 data")
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


# --- masks ----------------------------------------------------------------------------


@dataclass
class MaskSpec:
    """``kind`` 'region' (side, placement center|random) or 'salt_pepper' (fraction)."""

    kind: str
    side: int = 0
    placement: str = "random"
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "region":
            if self.side < 1:
                raise ConfigError("region mask side must be >= 1")
            if self.placement not in ("center", "random"):
                raise ConfigError(f"unknown region placement {self.placement!r}")
        elif self.kind == "salt_pepper":
            if not 0.0 < self.fraction < 1.0:
                raise ConfigError("salt-and-pepper fraction must lie in (0, 1)")
        else:
            raise ConfigError(f"unknown mask kind {self.kind!r}")


def make_masks(spec, n, shape):
    """(n, H*W) visibility masks, 1 = visible."""
    H, W = shape
    D = H * W
    rng = np.random.default_rng(spec.seed)
    masks = np.ones((n, H, W))
    if spec.kind == "region":
        s = spec.side
        if s > H or s > W:
            raise ConfigError(f"region side {s} exceeds image size {H}x{W}")
        for i in range(n):
            if spec.placement == "center":
                top, left = (H - s) // 2, (W - s) // 2
            else:
                top, left = rng.integers(0, H - s + 1), rng.integers(0, W - s + 1)
            masks[i, top:top + s, left:left + s] = 0.0
        return masks.reshape(n, D)
    # salt-and-pepper: exactly round(fraction * D) occluded pixels per image
    k = int(round(spec.fraction * D))
    if k >= D:
        raise ConfigError("salt-and-pepper fraction leaves no visible pixel")
    flat = masks.reshape(n, D)
    for i in range(n):
        flat[i, rng.choice(D, size=k, replace=False)] = 0.0
    return flat


def apply_mask(ds, spec, shape=None):
    """Occlude a dataset of H x W images; occluded pixels become 0."""
    shape = shape or ds.meta.get("shape")
    if shape is None:
        side = int(round(np.sqrt(ds.dim)))
        # non-square vectors are treated as a single row of pixels
        shape = (side, side) if side * side == ds.dim else (1, ds.dim)
    if shape[0] * shape[1] != ds.dim:
        raise ConfigError(f"image shape {shape} does not match dimension {ds.dim}")
    masks = make_masks(spec, len(ds), shape)
    occluded = Dataset(ds.examples * masks, ds.labels, ds.name + "-occluded", dict(ds.meta, shape=tuple(shape)))
    return occluded, masks


# --- checkpoints --------------------------------------------------------------------------


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict


def save_checkpoint(path, meta, arrays):
    """Write a checkpoint.

    Layout (all integers little-endian): b"LFBM", u32 version, u32 metadata
    length, UTF-8 JSON metadata, u32 array count, then per array: u16 name
    length, name, u8 ndim, ndim x u32 dims, float64 LE payload.
    """
    meta_blob = json.dumps(meta, sort_keys=True, default=str).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated checkpoint while reading {what} at byte offset {pos}")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise DataError(f"{path}: not an LFBM checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise DataError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    try:
        meta = json.loads(take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt metadata block: {exc}") from exc
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        buf = take(8 * size, f"payload of {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after last array")
    return Checkpoint(meta, arrays)


# --- image grids and CSV ----------------------------------------------------------------


def to_pixels(v):
    return np.round(255.0 * (np.clip(v, -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)


def export_grid(images, cols, path, shape=None, sep=2):
    """Tile images row-major into a binary PGM (P5) with ``sep``-pixel gaps."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        if shape is None:
            side = int(round(np.sqrt(imgs.shape[1])))
            shape = (side, side)
        if shape[0] * shape[1] != imgs.shape[1]:
            raise DataError(f"image shape {shape} does not match {imgs.shape[1]} values")
        imgs = imgs.reshape(-1, *shape)
    n, H, W = imgs.shape
    cols = max(1, min(int(cols), n))
    rows = -(-n // cols)
    canvas = np.zeros((rows * H + (rows - 1) * sep, cols * W + (cols - 1) * sep), dtype=np.uint8)
    px = to_pixels(imgs)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (H + sep):r * (H + sep) + H, c * (W + sep):c * (W + sep) + W] = px[i]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode())
            fh.write(canvas.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return canvas


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    payload = raw[m.end():]
    if len(payload) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes at byte offset {m.end()}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
