"""JSON run configuration: schema, hyperparameter profiles, and conversion to TrainConfig.

A config names a ``profile`` (default ``svhn``). Omitted hyperparameters come
from that profile's column of the MCMC table, or of the VAE table when
``mode`` is ``vae``. Unknown keys anywhere are rejected.
"""
import copy
import json
import os

import numpy as np

from . import data as D
from .errors import ConfigError
from .inference import LangevinConfig
from .training import TrainConfig

# Key hyperparameters of the MCMC-trained model, per dataset profile.
MCMC_PROFILES = {
    "svhn": {"train_steps": 20, "test_steps": 400, "step_size": 0.1, "batch_size": 100, "latent_dim": 100,
             "sigma": 1.0, "lr_generator": 4e-4, "lr_prior": 4e-4, "decay": 0.998},
    "cifar10": {"train_steps": 40, "test_steps": 800, "step_size": 0.1, "batch_size": 100, "latent_dim": 128,
                "sigma": 1.0, "lr_generator": 3.8e-4, "lr_prior": 3.8e-4, "decay": 0.998},
    "celeba": {"train_steps": 20, "test_steps": 400, "step_size": 0.1, "batch_size": 100, "latent_dim": 100,
               "sigma": 1.0, "lr_generator": 3e-4, "lr_prior": 3e-4, "decay": 0.998},
}

# Key hyperparameters of the variational baseline, per dataset profile.
VAE_PROFILES = {
    "svhn": {"batch_size": 100, "latent_dim": 100, "sigma": 0.5, "lr_generator": 0.008, "lr_prior": 0.0006,
             "lr_inference": 0.0004, "decay": 0.99, "inner_update_steps": 1},
    "cifar10": {"batch_size": 100, "latent_dim": 128, "sigma": 0.25, "lr_generator": 0.002, "lr_prior": 0.0012,
                "lr_inference": 0.0002, "decay": 0.99, "inner_update_steps": 6},
    "celeba": {"batch_size": 256, "latent_dim": 100, "sigma": 0.25, "lr_generator": 0.002, "lr_prior": 0.00015,
               "lr_inference": 0.0001, "decay": 0.99, "inner_update_steps": 6},
}

SCHEMA = {
    "mode": None, "profile": None, "seed": None, "out_dir": None,
    "dataset": {"kind", "path", "labels_path", "n", "seed", "means", "cov", "weights", "radii", "noise",
                "A", "b", "exclude_labels", "limit"},
    "model": {"latent_dim", "flow_depth", "flow_hidden", "decoder_hidden", "sigma", "out_act",
              "encoder_hidden", "iaf_steps", "iaf_hidden"},
    "langevin": {"train_steps", "test_steps", "step_size"},
    "optim": {"lr_prior", "lr_generator", "lr_inference", "decay", "batch_size", "iterations",
              "inner_update_steps"},
    "mask": {"kind", "side", "placement", "fraction", "seed"},
    "logging": {"log_every", "diag_size", "diag_groups", "checkpoint_every_epochs"},
}

DEFAULT_ITERATIONS = 1000


def _check_keys(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in cfg.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"config block {key!r} must be an object")
        extra = sorted(set(value) - allowed)
        if extra:
            raise ConfigError(f"unknown key(s) {extra} in config block {key!r}")


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _check_keys(cfg)
    return cfg


def resolve(cfg, seed=None, out_dir=None):
    """Fill defaults from the profile and apply CLI overrides; returns a new dict."""
    _check_keys(cfg)
    cfg = copy.deepcopy(cfg)
    mode = cfg.setdefault("mode", "mcmc")
    profile = cfg.setdefault("profile", "svhn")
    if profile not in MCMC_PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(MCMC_PROFILES)}")
    mc = MCMC_PROFILES[profile]
    table = VAE_PROFILES[profile] if mode == "vae" else mc
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    cfg.setdefault("out_dir", "runs/default")
    model = cfg.setdefault("model", {})
    model.setdefault("latent_dim", table["latent_dim"])
    model.setdefault("sigma", table["sigma"])
    model.setdefault("flow_depth", 5)
    model.setdefault("flow_hidden", 128)
    model.setdefault("decoder_hidden", [256, 256])
    model.setdefault("out_act", "tanh")
    lang = cfg.setdefault("langevin", {})
    for key in ("train_steps", "test_steps", "step_size"):
        lang.setdefault(key, mc[key])
    opt = cfg.setdefault("optim", {})
    for key in ("lr_prior", "lr_generator", "decay", "batch_size"):
        opt.setdefault(key, table[key])
    opt.setdefault("iterations", DEFAULT_ITERATIONS)
    if mode == "vae":
        opt.setdefault("lr_inference", table["lr_inference"])
        opt.setdefault("inner_update_steps", table["inner_update_steps"])
        model.setdefault("encoder_hidden", [256, 256])
        model.setdefault("iaf_steps", 2)
        model.setdefault("iaf_hidden", 64)
    cfg.setdefault("logging", {})
    if "dataset" not in cfg or "kind" not in cfg["dataset"]:
        raise ConfigError("config needs a dataset block with a 'kind'")
    if mode == "recovery" and "mask" not in cfg:
        raise ConfigError("recovery mode needs a mask block")
    return cfg


def mask_spec(cfg):
    m = cfg.get("mask")
    if m is None:
        return None
    try:
        return D.MaskSpec(**m)
    except TypeError as exc:
        raise ConfigError(f"bad mask block: {exc}") from exc


def to_train_config(cfg):
    """TrainConfig from a resolved config dict."""
    model, lang, opt, log = cfg["model"], cfg["langevin"], cfg["optim"], cfg["logging"]
    try:
        kw = dict(
            mode=cfg["mode"], iterations=int(opt["iterations"]), batch_size=int(opt["batch_size"]),
            lr_prior=float(opt["lr_prior"]), lr_generator=float(opt["lr_generator"]), decay=float(opt["decay"]),
            langevin=LangevinConfig(int(lang["train_steps"]), float(lang["step_size"])),
            test_langevin=LangevinConfig(int(lang["test_steps"]), float(lang["step_size"])),
            latent_dim=int(model["latent_dim"]), flow_depth=int(model["flow_depth"]),
            flow_hidden=int(model["flow_hidden"]), decoder_hidden=tuple(model["decoder_hidden"]),
            out_act=model["out_act"], sigma=float(model["sigma"]), seed=int(cfg["seed"]),
            mask_spec=mask_spec(cfg) if cfg["mode"] == "recovery" else None,
            checkpoint_dir=os.path.join(cfg["out_dir"], "checkpoints"),
            **{k: log[k] for k in ("log_every", "diag_size", "diag_groups", "checkpoint_every_epochs") if k in log},
        )
        if cfg["mode"] == "vae":
            kw.update(lr_inference=float(opt["lr_inference"]), inner_update_steps=int(opt["inner_update_steps"]),
                      encoder_hidden=tuple(model["encoder_hidden"]), iaf_steps=int(model["iaf_steps"]),
                      iaf_hidden=int(model["iaf_hidden"]))
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_dataset(ds_cfg, seed=0):
    """Dataset described by a config's dataset block."""
    kind = ds_cfg["kind"]
    if kind == "idx":
        if "path" not in ds_cfg:
            raise ConfigError("idx dataset needs 'path'")
        ds = D.load_idx(ds_cfg["path"], ds_cfg.get("labels_path"), name=os.path.basename(ds_cfg["path"]))
        if "exclude_labels" in ds_cfg:
            if ds.labels is None:
                raise ConfigError("exclude_labels needs labels_path")
            keep = ~np.isin(ds.labels, ds_cfg["exclude_labels"])
            ds = ds.subset(np.flatnonzero(keep))
        if "limit" in ds_cfg:
            ds = ds.subset(np.arange(min(int(ds_cfg["limit"]), len(ds))))
        return ds
    family = {k: v for k, v in ds_cfg.items() if k not in ("n", "seed")}
    return D.gen_synthetic(family, ds_cfg.get("n", 1000), ds_cfg.get("seed", seed))

