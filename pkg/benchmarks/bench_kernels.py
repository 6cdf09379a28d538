"""Compiled (numba) vs pure-numpy kernels.

Each backend runs in its own subprocess because the switch is read once at
import. Times are the median of ``--repeats`` calls after one warm-up call,
so numba compilation is excluded.

    python benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _cases():
    from lfbm.evaluation import mmd
    from lfbm.flow import FlowModel
    from lfbm.inference import LangevinConfig, sample_posterior
    from lfbm.model import Generator

    rng = np.random.default_rng(0)

    def chain(d, D, depth, fh, hidden, n, K):
        prior = FlowModel(d, depth, fh, rng=1).randomize(np.random.default_rng(2), 0.3)
        gen = Generator(d, D, hidden, sigma=0.3, rng=3)
        x = rng.uniform(-1, 1, (n, D))
        cfg = LangevinConfig(K, 0.01)
        return lambda: sample_posterior(prior, gen, x, cfg)

    X2, Y2 = rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2)) + 0.5
    return {
        "langevin toy (d=2, L=5, n=100, K=20)": chain(2, 2, 5, 16, (64, 64), 100, 20),
        "langevin image (d=100, L=5, D=784, n=100, K=20)": chain(100, 784, 5, 64, (256, 256), 100, 20),
        "mmd (n=m=2000, dim 2)": lambda: mmd(X2, Y2),
    }


def _child(repeats):
    from lfbm._accel import backend

    out = {}
    for name, fn in _cases().items():
        fn()
        times = []
        for _ in range(repeats):
            t = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t)
        out[name] = float(np.median(times))
    print(json.dumps({"backend": backend(), "times": out}))


def _run(disable, repeats):
    env = dict(os.environ)
    if disable:
        env["LFBM_DISABLE_NUMBA"] = "1"
    else:
        env.pop("LFBM_DISABLE_NUMBA", None)
    res = subprocess.run([sys.executable, __file__, "--child", "--repeats", str(repeats)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description="numba vs numpy kernel timings")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        _child(args.repeats)
        return
    fast, slow = _run(False, args.repeats), _run(True, args.repeats)
    width = max(len(k) for k in fast["times"])
    print(f"{'case':<{width}}  {fast['backend']:>10}  {slow['backend']:>10}  speedup")
    for name, t_fast in fast["times"].items():
        t_slow = slow["times"][name]
        print(f"{name:<{width}}  {t_fast * 1e3:8.2f}ms  {t_slow * 1e3:8.2f}ms  {t_slow / t_fast:6.2f}x")


if __name__ == "__main__":
    main()
