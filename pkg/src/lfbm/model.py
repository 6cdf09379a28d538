"""Top-down Gaussian decoder p(x|z) = N(g(z), sigma^2 I) and the joint density."""
import numpy as np

from .core import MLP, Tensor
from .core import tensor as T
from .errors import ContractError
from .flow import LOG_2PI, _rng


class Generator:
    """Decoder MLP d -> D with leaky-ReLU hidden layers and a fixed residual sigma.

    ``hidden=()`` with ``out_act="linear"`` gives the affine generator
    g(z) = z A + b used by the linear-Gaussian checks.
    """

    def __init__(self, latent_dim, data_dim, hidden=(256, 256), sigma=1.0, out_act="tanh", rng=None):
        if sigma <= 0:
            raise ContractError(f"sigma must be positive, got {sigma}")
        self.latent_dim = int(latent_dim)
        self.data_dim = int(data_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.sigma = float(sigma)
        self.out_act = out_act
        self.mlp = MLP((self.latent_dim,) + self.hidden + (self.data_dim,), "leaky_relu", out_act, _rng(rng))
        self.params = self.mlp.params

    def decode_t(self, z):
        return self.mlp(z)

    def log_likelihood_t(self, x, z, mask=None):
        """Per-example log p(x|z); with a mask only visible coordinates count."""
        resid = T.sub(x, self.decode_t(z))
        sq = T.square(resid)
        s2 = self.sigma * self.sigma
        if mask is None:
            quad = T.sum(sq, axis=1)
            count = float(self.data_dim)
        else:
            quad = T.masked_sum(sq, mask, axis=1)
            count = np.sum(mask, axis=1, dtype=np.float64)
        return T.sub(T.mul(quad, -0.5 / s2), 0.5 * count * np.log(2.0 * np.pi * s2))

    def arrays(self):
        return ([w.data for w in self.mlp.weights], [b.data for b in self.mlp.biases])


def _batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractError(f"{what}: expected (n, {dim}) batch, got shape {x.shape}")
    return x


def as_mask(m, n, data_dim):
    """Validate a 0/1 visibility mask and broadcast it to (n, D)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != data_dim:
        raise ContractError(f"mask has {m.shape[-1]} entries, data has {data_dim}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContractError("mask entries must be 0 or 1")
    m = np.broadcast_to(m, (n, data_dim))
    if np.any(m.sum(axis=1) == 0):
        bad = int(np.flatnonzero(m.sum(axis=1) == 0)[0])
        raise ContractError(f"mask for example {bad} hides every pixel")
    return m


def decode(gen, z):
    z = _batch(z, gen.latent_dim, "decode")
    return gen.decode_t(Tensor(z)).data


def log_likelihood(gen, x, z):
    x = _batch(x, gen.data_dim, "log_likelihood")
    z = _batch(z, gen.latent_dim, "log_likelihood")
    return gen.log_likelihood_t(Tensor(x), Tensor(z)).data


def masked_log_likelihood(gen, x_m, z, m):
    x_m = _batch(x_m, gen.data_dim, "masked_log_likelihood")
    z = _batch(z, gen.latent_dim, "masked_log_likelihood")
    m = as_mask(m, x_m.shape[0], gen.data_dim)
    return gen.log_likelihood_t(Tensor(x_m), Tensor(z), m).data


def joint_log_prob_t(prior, gen, x, z, mask=None):
    return T.add(prior.log_prob_t(z), gen.log_likelihood_t(x, z, mask))


def joint_log_prob(prior, gen, x, z, m=None):
    """log p(z) + log p(x|z) per example: the anomaly decision score."""
    x = _batch(x, gen.data_dim, "joint_log_prob")
    z = _batch(z, prior.dim, "joint_log_prob")
    if m is not None:
        m = as_mask(m, x.shape[0], gen.data_dim)
    return joint_log_prob_t(prior, gen, Tensor(x), Tensor(z), m).data


def posterior_grad_z(prior, gen, x, z, m=None):
    """d/dz [log p(z) + log p(x|z)], reverse-mode reference path.

    The Langevin sampler uses a hand-derived compiled version of the same
    gradient; this one is the slow, obviously-correct route.
    """
    x = _batch(x, gen.data_dim, "posterior_grad_z")
    z = _batch(z, prior.dim, "posterior_grad_z")
    if m is not None:
        m = as_mask(m, x.shape[0], gen.data_dim)
    zt = Tensor(z, requires_grad=True)
    total = T.sum(joint_log_prob_t(prior, gen, Tensor(x), zt, m))
    return T.grad(total, [zt])[0]
