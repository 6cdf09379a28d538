"""Short-run Langevin posterior sampling for the latent variables.

Each call starts every chain afresh from the base N(0, I) and runs K
unadjusted steps

    z <- z + step_size * d/dz log p(z|x) + sqrt(2 step_size) * eps.

Chain i draws its initial state and all of its noise from its own stream
``default_rng([seed, key_i])`` so results do not depend on batch
composition or evaluation order.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, NumericFailure
from .model import as_mask


@dataclass
class LangevinConfig:
    steps: int = 20
    step_size: float = 0.1
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError(f"Langevin steps must be >= 0, got {self.steps}")
        if not self.step_size > 0:
            raise ContractError(f"Langevin step size must be > 0, got {self.step_size}")


@dataclass
class LangevinTrace:
    grad_norm: np.ndarray
    log_prob: np.ndarray
    samples: np.ndarray = field(default=None)

    def rows(self):
        return [(k, float(g), float(l)) for k, (g, l) in enumerate(zip(self.grad_norm, self.log_prob))]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mean_grad_norm", "mean_joint_log_prob"])
            for k, g, l in self.rows():
                w.writerow([k, repr(g), repr(l)])


def chain_streams(seed, keys, steps, dim):
    """Initial states (n, d) and noise (K, n, d), one RNG stream per chain key."""
    keys = np.asarray(keys, dtype=np.int64)
    n = keys.shape[0]
    z0 = np.empty((n, dim))
    noise = np.empty((steps, n, dim))
    base = [int(s) for s in np.atleast_1d(seed)]
    for i, key in enumerate(keys):
        rng = np.random.default_rng(base + [int(key)])
        z0[i] = rng.standard_normal(dim)
        if steps:
            noise[:, i, :] = rng.standard_normal((steps, dim))
    return z0, noise


def kernel_args(prior, gen):
    fa = prior.arrays()
    ws, bs = gen.arrays()
    flow_args = (fa["log_scale"], fa["bias"], fa["even"], fa["odd"], fa["a_src"], fa["b_src"], fa["clamp"],
                 fa["scale0"], fa["scale1"], fa["scale2"], fa["scale3"], fa["scale4"], fa["scale5"],
                 fa["shift0"], fa["shift1"], fa["shift2"], fa["shift3"], fa["shift4"], fa["shift5"])
    gen_args = (tuple(np.ascontiguousarray(w) for w in ws), tuple(np.ascontiguousarray(b) for b in bs),
                gen.out_act == "tanh")
    return flow_args, gen_args


def posterior_score(prior, gen, x, z, m=None):
    """Compiled-path joint log-prob and z-gradient (same quantity as model.posterior_grad_z)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    mask = np.ones_like(x) if m is None else np.ascontiguousarray(as_mask(m, x.shape[0], gen.data_dim))
    flow_args, (ws, bs, out_tanh) = kernel_args(prior, gen)
    lp_p, g_p = kernels.flow_logp_score(z, *flow_args)
    lp_l, g_l = kernels.decoder_logp_score(z, x, mask, gen.sigma, ws, bs, out_tanh)
    return lp_p + lp_l, g_p + g_l


def sample_posterior(prior, gen, x, cfg, m=None, keys=None, record=None):
    """Run cfg.steps Langevin steps from fresh N(0, I) chains, one per row of x.

    ``keys`` identify the chains' RNG streams (default: row index).
    ``record=(start, every)`` additionally stores the states after steps
    start, start+every, ... in ``trace.samples`` with shape (R, n, d).
    Returns (z, trace).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != gen.data_dim:
        raise ContractError(f"expected (n, {gen.data_dim}) observations, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("observations contain non-finite values")
    n, d = x.shape[0], prior.dim
    if keys is None:
        keys = np.arange(n)
    elif len(keys) != n:
        raise ContractError("one chain key per observation required")
    mask = np.ones_like(x) if m is None else np.ascontiguousarray(as_mask(m, n, gen.data_dim))
    z, noise = chain_streams(cfg.seed, keys, cfg.steps, d)
    if record is None:
        rec_start, rec_every, n_slots = 0, 0, 0
    else:
        rec_start, rec_every = int(record[0]), int(record[1])
        n_slots = 0 if cfg.steps < rec_start else (cfg.steps - rec_start) // rec_every + 1
    rec = np.empty((n_slots, n, d))
    if cfg.steps == 0:
        return z, LangevinTrace(np.zeros(0), np.zeros(0), rec)
    flow_args, gen_args = kernel_args(prior, gen)
    gnorm, lp, bad, n_rec = kernels.langevin_chain(
        z, x, mask, noise, float(cfg.step_size), bool(cfg.noise), float(gen.sigma),
        *flow_args, *gen_args, rec, rec_start, rec_every)
    if bad >= 0:
        raise NumericFailure("Langevin posterior sampling", step=int(bad),
                             detail=f"step_size={cfg.step_size}, last mean |grad|={gnorm[bad]:.4g}")
    return z, LangevinTrace(gnorm, lp, rec[:n_rec])
