"""Command-line entry point.

stdout carries only the paths of written artifacts, one per line; diagnostics
go to stderr. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""
import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from .errors import ConfigError, DataError, NumericFailure
from .evaluation import mmd, mse, write_metrics_csv
from .flow import flow_sample
from .inference import LangevinConfig, sample_posterior
from .model import decode
from .protocols import anomaly_run, sample_mmd
from .training import (config_from_meta, load_run, save_run, train_mcmc, train_recovery,
                       train_vae)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SWEEP_PARAMS = {"steps": ("langevin", "train_steps", int), "step_size": ("langevin", "step_size", float),
                "latent_dim": ("model", "latent_dim", int), "flow_depth": ("model", "flow_depth", int)}


def _emit(path):
    print(os.path.abspath(path), flush=True)


def _is_image(ds):
    shape = ds.meta.get("shape")
    return shape is not None and shape[0] > 1


def _write_points(path, x):
    D.write_csv(path, [f"x{j}" for j in range(x.shape[1])], x.tolist())


def _export_samples(path_base, x, ds_like):
    """PGM grid for image data, CSV points otherwise; returns the written path."""
    if _is_image(ds_like):
        path = path_base + ".pgm"
        D.export_grid(x, int(np.ceil(np.sqrt(len(x)))), path, shape=ds_like.meta["shape"])
    else:
        path = path_base + ".csv"
        _write_points(path, x)
    return path


def _occlude(ds, cfg):
    spec = C.mask_spec(cfg)
    return D.apply_mask(ds, spec, ds.meta.get("shape"))


def _load(ckpt):
    run = load_run(ckpt)
    if "run_config" not in run.meta:
        raise DataError(f"{ckpt}: checkpoint has no run configuration (not written by 'train')")
    cfg = run.meta["run_config"]
    return run, cfg, config_from_meta(run.meta)


def _train(cfg):
    """Run the configured training mode; returns (tcfg, ds, prior, gen, net, log, extras)."""
    tcfg = C.to_train_config(cfg)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"])
    extras = {}
    if tcfg.mode == "mcmc":
        prior, gen, log = train_mcmc(ds, tcfg)
        net = None
    elif tcfg.mode == "vae":
        prior, gen, net, log = train_vae(ds, tcfg)
    else:
        occ, masks = _occlude(ds, cfg)
        prior, gen, recovered, log = train_recovery(occ, masks, tcfg, truth=ds)
        extras["recovered"] = recovered
        net = None
    return tcfg, ds, prior, gen, net, log, extras


def cmd_train(args):
    cfg = C.resolve(C.load_config(args.config), args.seed, args.out)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    _emit(os.path.join(out, "config.json"))
    tcfg, ds, prior, gen, net, log, extras = _train(cfg)
    ckpt = os.path.join(out, "final.lfbm")
    save_run(ckpt, tcfg, prior, gen, net=net, extra_meta={"run_config": cfg})
    _emit(ckpt)
    log_path = os.path.join(out, "runlog.csv")
    log.to_csv(log_path)
    _emit(log_path)
    n = 64 if _is_image(ds) else 1000
    z = flow_sample(prior, n, np.random.default_rng([tcfg.seed, 21]))
    _emit(_export_samples(os.path.join(out, "samples"), decode(gen, z), ds))
    if "recovered" in extras:
        _emit(_export_samples(os.path.join(out, "recovered"), extras["recovered"][:64], ds))
    return 0


def cmd_sample(args):
    run, cfg, tcfg = _load(args.ckpt)
    z = flow_sample(run.prior, args.n, np.random.default_rng([args.seed, 21]))
    x = decode(run.gen, z)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"])
    base, ext = os.path.splitext(args.out)
    if _is_image(ds):
        if ext.lower() != ".pgm":
            base = args.out
        path = base + ".pgm"
        D.export_grid(x, int(np.ceil(np.sqrt(len(x)))), path, shape=ds.meta["shape"])
    else:
        path = args.out
        _write_points(path, x)
    _emit(path)
    side = path + ".mmd.csv"
    write_metrics_csv(side, [("mmd_to_train", mmd(x, ds.examples), args.seed, tcfg.hash)])
    _emit(side)
    return 0


def _infer(run, x, tcfg, masks=None, keys=None, seed=0):
    lcfg = dataclasses.replace(tcfg.test_langevin, seed=(int(seed), 31))
    z, _ = sample_posterior(run.prior, run.gen, x, lcfg, m=masks, keys=keys)
    return z


def _test_cfg(tcfg, steps):
    if steps is None:
        return tcfg
    return dataclasses.replace(tcfg, test_langevin=LangevinConfig(steps, tcfg.test_langevin.step_size))


def cmd_reconstruct(args):
    run, cfg, tcfg = _load(args.ckpt)
    tcfg = _test_cfg(tcfg, args.steps)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"])
    x = ds.examples[:args.n]
    recon = decode(run.gen, _infer(run, x, tcfg, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    per = ((recon - x) ** 2).mean(axis=1)
    p = os.path.join(args.out, "reconstruction_mse.csv")
    D.write_csv(p, ["index", "mse"], [[i, float(v)] for i, v in enumerate(per)])
    _emit(p)
    p = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(p, [("reconstruction_mse", mse(recon, x), args.seed, tcfg.hash)])
    _emit(p)
    if _is_image(ds):
        k = min(len(x), 16)
        p = os.path.join(args.out, "reconstruction.pgm")
        D.export_grid(np.concatenate([x[:k], recon[:k]]), k, p, shape=ds.meta["shape"])
        _emit(p)
    return 0


def cmd_inpaint(args):
    run, cfg, tcfg = _load(args.ckpt)
    tcfg = _test_cfg(tcfg, args.steps)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"]).subset(np.arange(args.n))
    if args.mask_kind == "none":
        masks = np.ones_like(ds.examples)
    else:
        spec = D.MaskSpec(args.mask_kind, side=args.side, placement=args.placement,
                          fraction=args.fraction, seed=args.seed)
        masks = D.apply_mask(ds, spec, ds.meta.get("shape"))[1]
    M = args.samples_per_image
    x, n = ds.examples, len(ds)
    xm = x * masks
    rep = np.repeat(np.arange(n), M)
    # chain keys i*M + j give M independent initialisations per image
    z = _infer(run, xm[rep], tcfg, masks=masks[rep], keys=np.arange(n * M), seed=args.seed)
    gen_x = decode(run.gen, z)
    completions = masks[rep] * xm[rep] + (1 - masks[rep]) * gen_x
    os.makedirs(args.out, exist_ok=True)
    hidden = 1.0 - masks[rep]
    value = mse(completions, x[rep], hidden) if hidden.sum() > 0 else mse(gen_x, x[rep])
    name = "masked_mse" if hidden.sum() > 0 else "reconstruction_mse"
    p = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(p, [(name, value, args.seed, tcfg.hash)])
    _emit(p)
    p = os.path.join(args.out, "completions.csv")
    D.write_csv(p, ["image", "sample"] + [f"x{j}" for j in range(x.shape[1])],
                [[int(i), int(j)] + row for (i, j), row in zip(((r // M, r % M) for r in range(n * M)),
                                                                completions.tolist())])
    _emit(p)
    if _is_image(ds):
        rows = [np.concatenate([x[i:i + 1], xm[i:i + 1], completions[i * M:(i + 1) * M]]) for i in range(n)]
        p = os.path.join(args.out, "inpainting.pgm")
        D.export_grid(np.concatenate(rows), M + 2, p, shape=ds.meta["shape"])
        _emit(p)
    return 0


def cmd_anomaly(args):
    cfg = C.resolve(C.load_config(args.config), args.seed, args.out)
    if args.prior == "gaussian":
        cfg["model"]["flow_depth"] = 0
    tcfg = C.to_train_config(cfg)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"])
    rows, values = [], []
    for r in range(args.repeats):
        seed = cfg["seed"] + r
        value, _, _ = anomaly_run(ds, args.heldout, tcfg, seed)
        print(f"repeat {r}: seed {seed} auprc {value:.4f}", file=sys.stderr)
        values.append(value)
        rows.append(("auprc", value, seed, tcfg.hash))
    rows.append(("auprc_mean", float(np.mean(values)), cfg["seed"], tcfg.hash))
    rows.append(("auprc_sd", float(np.std(values)), cfg["seed"], tcfg.hash))
    os.makedirs(cfg["out_dir"], exist_ok=True)
    p = os.path.join(cfg["out_dir"], f"anomaly_heldout{args.heldout}.csv")
    write_metrics_csv(p, rows)
    _emit(p)
    return 0


def cmd_recover_eval(args):
    run, cfg, tcfg = _load(args.ckpt)
    if cfg["mode"] != "recovery":
        raise ConfigError("recover-eval needs a checkpoint trained in recovery mode")
    tcfg = _test_cfg(tcfg, args.steps)
    ds = C.load_dataset(cfg["dataset"], cfg["seed"])
    occ, masks = _occlude(ds, cfg)
    z = _infer(run, occ.examples, tcfg, masks=masks, seed=args.seed)
    recovered = decode(run.gen, z)
    os.makedirs(args.out, exist_ok=True)
    p = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(p, [("masked_mse", mse(recovered, ds.examples, 1.0 - masks), args.seed, tcfg.hash)])
    _emit(p)
    if _is_image(ds):
        k = min(len(ds), 16)
        p = os.path.join(args.out, "recovery.pgm")
        D.export_grid(np.concatenate([ds.examples[:k], occ.examples[:k], recovered[:k]]), k, p,
                      shape=ds.meta["shape"])
        _emit(p)
    return 0


def cmd_sweep(args):
    base = C.resolve(C.load_config(args.config), args.seed, args.out)
    if base["mode"] != "mcmc":
        raise ConfigError("sweep runs mcmc-mode training only")
    block, key, cast = SWEEP_PARAMS[args.param]
    try:
        values = [cast(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values list: {exc}") from exc
    if not values:
        raise ConfigError("--values is empty")
    rows = []
    for v in values:
        cfg = json.loads(json.dumps(base))
        cfg[block][key] = v
        cfg["out_dir"] = os.path.join(base["out_dir"], f"{args.param}={v}")
        tcfg, ds, prior, gen, _, log, _ = _train(cfg)
        save_run(os.path.join(cfg["out_dir"], "final.lfbm"), tcfg, prior, gen, extra_meta={"run_config": cfg})
        ref = ds.examples[:2000]
        rows.append([v, sample_mmd(prior, gen, ref, seed=tcfg.seed), log[len(log) - 1]["recon_mse"]])
        print(f"{args.param}={v}: mmd {rows[-1][1]:.5g} mse {rows[-1][2]:.5g}", file=sys.stderr)
    os.makedirs(base["out_dir"], exist_ok=True)
    p = os.path.join(base["out_dir"], f"sweep_{args.param}.csv")
    D.write_csv(p, ["value", "final_mmd", "final_mse"], rows)
    _emit(p)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="lfbm", description="Latent flow prior generator models.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="ancestral samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("-n", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    for name, func, help_ in (("reconstruct", cmd_reconstruct, "reconstruct training examples"),
                              ("recover-eval", cmd_recover_eval, "masked MSE of recovered training images")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, help="override the test-time Langevin steps")
        if name == "reconstruct":
            p.add_argument("-n", type=int, default=100)
        p.set_defaults(func=func)

    p = sub.add_parser("inpaint", help="complete occluded images with several chains each")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--samples-per-image", type=int, default=10)
    p.add_argument("--mask-kind", choices=("region", "salt_pepper", "none"), default="region")
    p.add_argument("--side", type=int, default=14)
    p.add_argument("--placement", choices=("center", "random"), default="center")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="override the test-time Langevin steps")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("anomaly", help="held-out-class anomaly detection, repeated over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--heldout", type=int, required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--prior", choices=("flow", "gaussian"), default="flow")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_anomaly)

    p = sub.add_parser("sweep", help="one training run per value of an ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated list")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        msg = f"numeric failure: {exc}"
        if getattr(exc, "checkpoint", None):
            msg += f" (last good state saved to {exc.checkpoint})"
        print(msg, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
