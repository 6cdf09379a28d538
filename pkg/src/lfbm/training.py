"""Maximum-likelihood learning with short-run Langevin inference, plus the
variational baseline, recovery training from occluded data, and the
estimating-equation diagnostics.

Every run is a pure function of (data, config): model initialisation, batch
order, Langevin streams and diagnostic samples each draw from their own
``default_rng([seed, purpose, ...])`` stream.
"""
import dataclasses
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .core import MLP, AdamState, ParamGroup, Tensor, adam_step
from .core import tensor as T
from .errors import ConfigError, ContractError, DataError, NumericFailure
from .evaluation import mmd, mse
from .flow import LOG_2PI, ARPosteriorFlow, FlowModel, flow_sample
from .inference import LangevinConfig, sample_posterior
from .model import Generator, as_mask, decode

MODES = ("mcmc", "vae", "recovery")

# stream purposes for default_rng([seed, purpose, ...])
_S_INIT, _S_BATCH, _S_LANGEVIN, _S_DIAG, _S_EPS, _S_RECOVER = range(6)


@dataclass
class TrainConfig:
    mode: str = "mcmc"
    iterations: int = 1000
    batch_size: int = 100
    lr_prior: float = 4e-4
    lr_generator: float = 4e-4
    decay: float = 0.998
    langevin: LangevinConfig = field(default_factory=lambda: LangevinConfig(20, 0.1))
    test_langevin: LangevinConfig = field(default_factory=lambda: LangevinConfig(400, 0.1))
    latent_dim: int = 100
    flow_depth: int = 5
    flow_hidden: int = 128
    decoder_hidden: tuple = (256, 256)
    out_act: str = "tanh"
    sigma: float = 1.0
    seed: int = 0
    # vae mode only
    lr_inference: float = None
    inner_update_steps: int = None
    encoder_hidden: tuple = (256, 256)
    iaf_steps: int = 2
    iaf_hidden: int = 64
    # recovery mode only
    mask_spec: D.MaskSpec = None
    # logging and persistence
    log_every: int = 100
    diag_size: int = None
    diag_groups: int = 10
    checkpoint_dir: str = None
    checkpoint_every_epochs: int = 10

    def __post_init__(self):
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("iterations", "batch_size", "latent_dim", "log_every", "diag_groups",
                     "checkpoint_every_epochs", "flow_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.flow_depth < 0:
            raise ConfigError("flow_depth must be >= 0")
        for name in ("lr_prior", "lr_generator"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        vae_fields = (self.lr_inference, self.inner_update_steps)
        if self.mode == "vae":
            if any(v is None for v in vae_fields):
                raise ConfigError("vae mode needs lr_inference and inner_update_steps")
            if self.lr_inference < 0 or self.inner_update_steps < 1:
                raise ConfigError("lr_inference must be >= 0 and inner_update_steps >= 1")
        elif any(v is not None for v in vae_fields):
            raise ConfigError("lr_inference / inner_update_steps are only valid in vae mode")
        if (self.mode == "recovery") != (self.mask_spec is not None):
            raise ConfigError("mask_spec is required in recovery mode and invalid otherwise")

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def hash(self):
        cfg = self.to_dict()
        for key in ("checkpoint_dir", "log_every", "diag_size", "diag_groups", "checkpoint_every_epochs"):
            cfg.pop(key)
        return D.config_hash(cfg)


# --- run log ------------------------------------------------------------------------

LOG_FIELDS = ("iteration", "epoch", "recon_mse", "mean_log_prior", "prior_residual", "prior_residual_se",
              "generator_residual", "generator_residual_se", "mmd_prior_posterior", "masked_mse", "wall_clock")


class RunLog:
    """Append-only per-iteration diagnostics."""

    def __init__(self):
        self._records = []

    def append(self, record):
        missing = set(LOG_FIELDS) - set(record)
        if missing:
            raise ContractError(f"log record lacks {sorted(missing)}")
        self._records.append({k: record[k] for k in LOG_FIELDS})

    def __len__(self):
        return len(self._records)

    def __getitem__(self, i):
        return dict(self._records[i])

    def column(self, name):
        return np.array([r[name] for r in self._records], dtype=np.float64)

    def deterministic_rows(self):
        """Records without wall-clock time, for reproducibility comparisons."""
        return [tuple(r[k] for k in LOG_FIELDS if k != "wall_clock") for r in self._records]

    def to_csv(self, path):
        D.write_csv(path, LOG_FIELDS, [[r[k] for k in LOG_FIELDS] for r in self._records])


@dataclass
class UpdateStats:
    objective: float
    grad_norm: float


# --- parameter updates -----------------------------------------------------------------


def _ascend(params, objective, opt):
    """Adam ascent on a scalar tensor objective over ``params``."""
    plist = list(params)
    grads = T.grad(objective, plist)
    sq = 0.0
    for p, g in zip(plist, grads):
        p.grad = -g
        sq += float(np.sum(g * g))
    adam_step(params, opt)
    return UpdateStats(float(objective.data), float(np.sqrt(sq)))


def _detached(z):
    if isinstance(z, Tensor):
        z = z.data
    return np.array(z, dtype=np.float64)


def update_prior(prior, z_inferred, opt):
    """One Adam ascent step on mean log p_alpha(z_inferred).

    A prior whose ActNorm layers are still uninitialised gets its
    data-dependent initialisation from this batch first (skipped when the
    learning rate is zero, so a zero-rate run never touches the prior).
    """
    z = _detached(z_inferred)
    if not prior.trainable:
        return UpdateStats(float(np.mean(prior.log_prob_t(Tensor(z)).data)), 0.0)
    if not prior.initialized and opt.effective_lr > 0:
        prior.log_prob_t(Tensor(z), data_init=True)
    objective = T.mean(prior.log_prob_t(Tensor(z)))
    return _ascend(prior.params, objective, opt)


def update_generator(gen, x, z_inferred, opt, mask=None):
    """One Adam ascent step on mean log p_beta(x|z_inferred) (visible pixels only if masked)."""
    x = np.asarray(x, dtype=np.float64)
    z = _detached(z_inferred)
    objective = T.mean(gen.log_likelihood_t(Tensor(x), Tensor(z), mask))
    return _ascend(gen.params, objective, opt)


# --- diagnostics ----------------------------------------------------------------------------


@dataclass
class DiagRecord:
    prior_residual: float
    prior_residual_se: float
    generator_residual: float
    generator_residual_se: float
    mean_log_prior: float
    mmd: float


def estimating_residuals(prior, gen, x, z, mask=None, groups=10):
    """Norms of the mean prior and generator gradients and their Monte Carlo standard errors.

    Standard errors come from batch means: the batch is cut into ``groups``
    contiguous chunks with mean gradients g_b, and the norm's Monte Carlo
    scale is sqrt(sum_j var_b(g_bj) / B).
    """
    x = np.asarray(x, dtype=np.float64)
    z = _detached(z)
    n = x.shape[0]
    B = max(1, min(int(groups), n))
    bounds = np.linspace(0, n, B + 1).round().astype(int)
    chunks = [slice(bounds[i], bounds[i + 1]) for i in range(B)]
    sizes = np.array([c.stop - c.start for c in chunks], dtype=np.float64)

    def residual(params, make_obj):
        plist = list(params)
        if not plist:
            return 0.0, 0.0
        rows = []
        for c in chunks:
            gs = T.grad(make_obj(c), plist)
            rows.append(np.concatenate([g.reshape(-1) for g in gs]))
        G = np.array(rows)
        mean = (sizes[:, None] * G).sum(0) / n
        if B < 2:
            return float(np.linalg.norm(mean)), float("nan")
        var = ((G - mean) ** 2).sum(0) / (B - 1)
        return float(np.linalg.norm(mean)), float(np.sqrt(var.sum() / B))

    def prior_obj(c):
        return T.mean(prior.log_prob_t(Tensor(z[c])))

    def gen_obj(c):
        m = None if mask is None else mask[c]
        return T.mean(gen.log_likelihood_t(Tensor(x[c]), Tensor(z[c]), m))

    pr, pr_se = residual(prior.params, prior_obj)
    gr, gr_se = residual(gen.params, gen_obj)
    return pr, pr_se, gr, gr_se


def diagnostics_step(prior, gen, x_batch, z_inferred, mask=None, groups=10, rng=None):
    """Estimating-equation residuals, mean log-prior, and MMD(prior samples, z_inferred)."""
    z = _detached(z_inferred)
    pr, pr_se, gr, gr_se = estimating_residuals(prior, gen, x_batch, z, mask, groups)
    mean_lp = float(np.mean(prior.log_prob_t(Tensor(z)).data))
    rng = np.random.default_rng(rng)
    z_prior = flow_sample(prior, z.shape[0], rng)
    return DiagRecord(pr, pr_se, gr, gr_se, mean_lp, mmd(z_prior, z) if z.shape[0] >= 2 else float("nan"))


# --- model construction and run checkpoints ------------------------------------------------------


def build_models(cfg, data_dim):
    rng = np.random.default_rng([cfg.seed, _S_INIT])
    prior = FlowModel(cfg.latent_dim, cfg.flow_depth, cfg.flow_hidden, rng=rng)
    gen = Generator(cfg.latent_dim, data_dim, cfg.decoder_hidden, cfg.sigma, cfg.out_act, rng=rng)
    return prior, gen


class InferenceNet:
    """Variational posterior q(z|x): Gaussian encoder followed by an autoregressive flow."""

    def __init__(self, data_dim, latent_dim, hidden=(256, 256), iaf_steps=2, iaf_hidden=64, rng=None):
        rng = np.random.default_rng(rng)
        self.latent_dim = int(latent_dim)
        self.encoder = MLP((data_dim,) + tuple(hidden) + (2 * latent_dim,), "leaky_relu", "linear", rng)
        self.flow = ARPosteriorFlow(latent_dim, iaf_steps, iaf_hidden, rng=rng)
        self.params = ParamGroup()
        self.params.extend(self.encoder.params, "enc.")
        self.params.extend(self.flow.params, "flow.")

    def sample_t(self, x, eps):
        """Reparameterised z and log q(z|x) for base noise ``eps``."""
        d = self.latent_dim
        out = self.encoder(x)
        mu = T.take_cols(out, np.arange(d))
        raw = T.take_cols(out, np.arange(d, 2 * d))
        # log-variance held smoothly inside [-8, 4]
        logvar = T.add(T.mul(T.tanh(T.mul(T.add(raw, 2.0), 1.0 / 6.0)), 6.0), -2.0)
        z0 = T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), eps))
        log_q0 = T.mul(T.add(T.sum(logvar, axis=1), np.sum(eps * eps, axis=1) + d * LOG_2PI), -0.5)
        z, ld = self.flow.apply_t(z0)
        return z, T.sub(log_q0, ld)


def elbo_t(prior, gen, net, x, eps, mask=None):
    """Per-example single-sample ELBO: log p(x|z) + log p(z) - log q(z|x)."""
    z, log_q = net.sample_t(Tensor(x), eps)
    return T.sub(T.add(gen.log_likelihood_t(Tensor(x), z, mask), prior.log_prob_t(z)), log_q), z


def elbo(prior, gen, net, x, eps):
    return elbo_t(prior, gen, net, np.asarray(x, dtype=np.float64), eps)[0].data


def _model_meta(cfg, data_dim, prior, gen):
    return {
        "mode": cfg.mode, "latent_dim": cfg.latent_dim, "data_dim": int(data_dim),
        "flow_depth": cfg.flow_depth, "flow_hidden": cfg.flow_hidden,
        "decoder_hidden": list(cfg.decoder_hidden), "out_act": cfg.out_act, "sigma": cfg.sigma,
        "actnorm_initialized": bool(prior.initialized), "config_hash": cfg.hash, "config": cfg.to_dict(),
    }


def save_run(path, cfg, prior, gen, opts=None, net=None, progress=None, extra_meta=None):
    """Checkpoint models (and optionally optimizer state) through the data-module format."""
    meta = _model_meta(cfg, gen.data_dim, prior, gen)
    meta["progress"] = progress or {}
    meta.update(extra_meta or {})
    arrays = {}
    for tag, group in (("prior", prior.params), ("gen", gen.params)) + ((("inf", net.params),) if net else ()):
        for name, t in group.items():
            arrays[f"{tag}/{name}"] = t.data
    meta["optimizers"] = {}
    for tag, opt in (opts or {}).items():
        meta["optimizers"][tag] = opt.scalars()
        for key, arr in opt.arrays().items():
            arrays[f"opt.{tag}/{key}"] = arr
    D.save_checkpoint(path, meta, arrays)


@dataclass
class LoadedRun:
    prior: FlowModel
    gen: Generator
    meta: dict
    opts: dict
    net: InferenceNet = None


def load_run(path, expect=None):
    """Rebuild models from a checkpoint.

    ``expect`` (a TrainConfig) is the run context: mismatched dimensions are
    rejected, a differing config hash only warns.
    """
    ck = D.load_checkpoint(path)
    m = ck.meta
    try:
        d, Dd, L = int(m["latent_dim"]), int(m["data_dim"]), int(m["flow_depth"])
        hidden = tuple(m["decoder_hidden"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: checkpoint metadata incomplete ({exc})") from exc
    if expect is not None:
        for key, have, want in (("latent_dim", d, expect.latent_dim), ("flow_depth", L, expect.flow_depth),
                                ("decoder_hidden", hidden, expect.decoder_hidden)):
            if have != want:
                raise DataError(f"{path}: checkpoint {key}={have} does not fit run context {key}={want} "
                                f"(latent shape ({d},) vs ({expect.latent_dim},))")
        if m.get("config_hash") != expect.hash:
            warnings.warn(f"{path}: config hash {m.get('config_hash')} differs from run config {expect.hash}")
    prior = FlowModel(d, L, int(m["flow_hidden"]), rng=0)
    gen = Generator(d, Dd, hidden, float(m["sigma"]), m["out_act"], rng=0)

    def fill(group, tag):
        state = {k.split("/", 1)[1]: v for k, v in ck.arrays.items() if k.startswith(tag + "/")}
        try:
            group.load_state(state)
        except ContractError as exc:
            raise DataError(f"{path}: {exc}") from exc

    fill(prior.params, "prior")
    fill(gen.params, "gen")
    if m.get("actnorm_initialized"):
        prior.mark_initialized()
    net = None
    if any(k.startswith("inf/") for k in ck.arrays):
        cfg = m["config"]
        net = InferenceNet(Dd, d, tuple(cfg["encoder_hidden"]), cfg["iaf_steps"], cfg["iaf_hidden"], rng=0)
        fill(net.params, "inf")
    opts = {}
    for tag, scalars in m.get("optimizers", {}).items():
        prefix = f"opt.{tag}/"
        opts[tag] = AdamState.restore(scalars, {k[len(prefix):]: v for k, v in ck.arrays.items()
                                                if k.startswith(prefix)})
    return LoadedRun(prior, gen, m, opts, net)


def config_from_meta(meta):
    """TrainConfig stored inside a checkpoint."""
    cfg = dict(meta["config"])
    cfg["langevin"] = LangevinConfig(**cfg["langevin"])
    cfg["test_langevin"] = LangevinConfig(**cfg["test_langevin"])
    if cfg.get("mask_spec") is not None:
        cfg["mask_spec"] = D.MaskSpec(**cfg["mask_spec"])
    return TrainConfig(**cfg)


# --- training loops -------------------------------------------------------------------------


def _batches(n_data, batch_size, seed):
    """Endless (epoch_end, indices) stream: a fresh permutation per epoch, remainder dropped."""
    rng = np.random.default_rng([seed, _S_BATCH])
    bs = min(batch_size, n_data)
    per_epoch = n_data // bs
    while True:
        perm = rng.permutation(n_data)
        for b in range(per_epoch):
            yield b == per_epoch - 1, perm[b * bs:(b + 1) * bs]


def _langevin_for(cfg, t, salt=_S_LANGEVIN):
    return dataclasses.replace(cfg.langevin, seed=(int(cfg.seed), salt, int(t)))


def _validate_data(data, cfg):
    x = data.examples if isinstance(data, D.Dataset) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError("training data must be a non-empty (N, D) matrix")
    return x


class _Checkpointer:
    def __init__(self, cfg):
        self.cfg = cfg
        self.dir = cfg.checkpoint_dir
        if self.dir:
            os.makedirs(self.dir, exist_ok=True)

    def periodic(self, epoch, *args, **kw):
        if self.dir and epoch % self.cfg.checkpoint_every_epochs == 0:
            save_run(os.path.join(self.dir, "last.lfbm"), self.cfg, *args, **kw)

    def abort(self, *args, **kw):
        if not self.dir:
            return None
        path = os.path.join(self.dir, "abort.lfbm")
        save_run(path, self.cfg, *args, **kw)
        return path


def _diag_indices(cfg, n_data, batch_idx, t):
    if cfg.diag_size is None:
        return batch_idx
    rng = np.random.default_rng([cfg.seed, _S_DIAG, t, 0])
    k = min(cfg.diag_size, n_data)
    return np.sort(rng.choice(n_data, size=k, replace=False))


def _alg1(x, masks, truth, cfg):
    """Shared loop of the mcmc and recovery modes."""
    N, Dd = x.shape
    prior, gen = build_models(cfg, Dd)
    opt_p = AdamState(lr=cfg.lr_prior, decay=cfg.decay)
    opt_g = AdamState(lr=cfg.lr_generator, decay=cfg.decay)
    log = RunLog()
    ckpt = _Checkpointer(cfg)
    batches = _batches(N, cfg.batch_size, cfg.seed)
    recovered = None
    start = time.perf_counter()
    epoch = 0
    for t in range(cfg.iterations):
        epoch_end, idx = next(batches)
        xb = x[idx]
        mb = None if masks is None else masks[idx]
        try:
            lcfg = _langevin_for(cfg, t)
            z, _ = sample_posterior(prior, gen, xb, lcfg, m=mb, keys=idx)
            if t % cfg.log_every == 0 or t == cfg.iterations - 1:
                rec = _diagnostics(cfg, prior, gen, x, masks, idx, z, t, epoch, start)
                if truth is not None:
                    recovered, rec["masked_mse"] = _recover(cfg, prior, gen, x, masks, truth, t)
                log.append(rec)
            update_prior(prior, z, opt_p)
            update_generator(gen, xb, z, opt_g, mb)
        except NumericFailure as exc:
            exc.checkpoint = ckpt.abort(prior, gen, {"prior": opt_p, "generator": opt_g},
                                        progress={"iteration": t, "epoch": epoch})
            exc.iteration = t
            raise
        if epoch_end:
            epoch += 1
            opt_p.end_epoch()
            opt_g.end_epoch()
            ckpt.periodic(epoch, prior, gen, {"prior": opt_p, "generator": opt_g},
                          progress={"iteration": t + 1, "epoch": epoch})
    return prior, gen, log, recovered, (opt_p, opt_g)


def _diagnostics(cfg, prior, gen, x, masks, idx, z, t, epoch, start):
    didx = _diag_indices(cfg, x.shape[0], idx, t)
    mb = None if masks is None else masks[didx]
    if didx is idx:
        zd = z
    else:
        zd, _ = sample_posterior(prior, gen, x[didx], _langevin_for(cfg, t, _S_DIAG), m=mb, keys=didx)
    rec = diagnostics_step(prior, gen, x[didx], zd, mb, cfg.diag_groups, rng=[cfg.seed, _S_DIAG, t, 1])
    return {
        "iteration": t, "epoch": epoch, "recon_mse": mse(decode(gen, zd), x[didx], mb),
        "mean_log_prior": rec.mean_log_prior, "prior_residual": rec.prior_residual,
        "prior_residual_se": rec.prior_residual_se, "generator_residual": rec.generator_residual,
        "generator_residual_se": rec.generator_residual_se, "mmd_prior_posterior": rec.mmd,
        "masked_mse": float("nan"), "wall_clock": time.perf_counter() - start,
    }


def _recover(cfg, prior, gen, x, masks, truth, t):
    """Recovered training images and their MSE to ground truth on occluded pixels."""
    keys = np.arange(x.shape[0])
    z, _ = sample_posterior(prior, gen, x, _langevin_for(cfg, t, _S_RECOVER), m=masks, keys=keys)
    images = decode(gen, z)
    hidden = 1.0 - masks
    if hidden.sum() == 0:
        return images, float("nan")
    return images, mse(images, truth, hidden)


def train_mcmc(data, cfg):
    """Algorithm 1: Langevin posterior sampling, then one Adam step each for prior and generator."""
    if cfg.mode != "mcmc":
        raise ContractError(f"train_mcmc needs mode 'mcmc', got {cfg.mode!r}")
    x = _validate_data(data, cfg)
    prior, gen, log, _, _ = _alg1(x, None, None, cfg)
    return prior, gen, log


def train_recovery(data_occluded, masks, cfg, truth=None):
    """Algorithm 1 on occluded images: inference and generator updates see only visible pixels.

    ``truth`` (clean images) enables the per-interval masked-region MSE of the
    recovered images ``g(z_inferred)``. Returns (prior, gen, recovered, log).
    """
    if cfg.mode != "recovery":
        raise ContractError(f"train_recovery needs mode 'recovery', got {cfg.mode!r}")
    x = _validate_data(data_occluded, cfg)
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape != x.shape:
        raise DataError(f"mask shape {masks.shape} does not match data {x.shape}")
    empty = np.flatnonzero(masks.sum(axis=1) == 0)
    if empty.size:
        raise DataError(f"example {int(empty[0])} has no visible pixel")
    as_mask(masks, x.shape[0], x.shape[1])
    if truth is not None:
        truth = truth.examples if isinstance(truth, D.Dataset) else np.asarray(truth, dtype=np.float64)
    prior, gen, log, recovered, _ = _alg1(x, masks, truth, cfg)
    if recovered is None:
        keys = np.arange(x.shape[0])
        z, _ = sample_posterior(prior, gen, x, _langevin_for(cfg, cfg.iterations, _S_RECOVER), m=masks, keys=keys)
        recovered = decode(gen, z)
    return prior, gen, recovered, log


def train_vae(data, cfg):
    """Variational baseline: maximise the single-sample ELBO jointly over prior, generator and q.

    Each outer iteration makes ``inner_update_steps`` updates of the prior and
    inference network; the generator takes one step, on the last of them.
    """
    if cfg.mode != "vae":
        raise ContractError(f"train_vae needs mode 'vae', got {cfg.mode!r}")
    x = _validate_data(data, cfg)
    N, Dd = x.shape
    prior, gen = build_models(cfg, Dd)
    net = InferenceNet(Dd, cfg.latent_dim, cfg.encoder_hidden, cfg.iaf_steps, cfg.iaf_hidden,
                       rng=[cfg.seed, _S_INIT, 1])
    opts = {"prior": AdamState(lr=cfg.lr_prior, decay=cfg.decay),
            "generator": AdamState(lr=cfg.lr_generator, decay=cfg.decay),
            "inference": AdamState(lr=cfg.lr_inference, decay=cfg.decay)}
    log = RunLog()
    ckpt = _Checkpointer(cfg)
    batches = _batches(N, cfg.batch_size, cfg.seed)
    start = time.perf_counter()
    epoch = 0
    for t in range(cfg.iterations):
        epoch_end, idx = next(batches)
        xb = x[idx]
        try:
            if t % cfg.log_every == 0 or t == cfg.iterations - 1:
                eps = np.random.default_rng([cfg.seed, _S_DIAG, t]).standard_normal((len(idx), cfg.latent_dim))
                z = elbo_t(prior, gen, net, xb, eps)[1].data
                rec = diagnostics_step(prior, gen, xb, z, None, cfg.diag_groups, rng=[cfg.seed, _S_DIAG, t, 1])
                log.append({
                    "iteration": t, "epoch": epoch, "recon_mse": mse(decode(gen, z), xb),
                    "mean_log_prior": rec.mean_log_prior, "prior_residual": rec.prior_residual,
                    "prior_residual_se": rec.prior_residual_se, "generator_residual": rec.generator_residual,
                    "generator_residual_se": rec.generator_residual_se, "mmd_prior_posterior": rec.mmd,
                    "masked_mse": float("nan"), "wall_clock": time.perf_counter() - start})
            for s in range(cfg.inner_update_steps):
                eps = np.random.default_rng([cfg.seed, _S_EPS, t, s]).standard_normal((len(idx), cfg.latent_dim))
                if prior.trainable and not prior.initialized and opts["prior"].effective_lr > 0:
                    z0 = net.sample_t(Tensor(xb), eps)[0].data
                    prior.log_prob_t(Tensor(z0), data_init=True)
                last = s == cfg.inner_update_steps - 1
                groups = [("prior", prior.params), ("inference", net.params)]
                if last:
                    groups.append(("generator", gen.params))
                objective = T.mean(elbo_t(prior, gen, net, xb, eps)[0])
                plist = [p for _, g in groups for p in g]
                grads = T.grad(objective, plist)
                for p, g in zip(plist, grads):
                    p.grad = -g
                for tag, group in groups:
                    if len(group):
                        adam_step(group, opts[tag])
        except NumericFailure as exc:
            exc.checkpoint = ckpt.abort(prior, gen, opts, net=net, progress={"iteration": t, "epoch": epoch})
            exc.iteration = t
            raise
        if epoch_end:
            epoch += 1
            for opt in opts.values():
                opt.end_epoch()
            ckpt.periodic(epoch, prior, gen, opts, net=net, progress={"iteration": t + 1, "epoch": epoch})
    return prior, gen, net, log
