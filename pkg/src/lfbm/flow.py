"""Normalizing flows over the latent space.

``FlowModel`` is the prior: a stack of Glow-style steps (ActNorm, fixed
reverse permutation, affine coupling) on top of a standard normal base.
``ARPosteriorFlow`` is the masked autoregressive affine flow used by the
variational baseline's inference model.

Conventions: ``forward`` maps base samples z0 to latents z; ``inverse`` maps
z back to z0. ``log_det`` is always log|det dz/dz0|, so
log p(z) = log N(inverse(z); 0, I) - log_det.
"""
import numpy as np

from .core import MLP, ParamGroup, Tensor
from .core import tensor as T
from .errors import ContractError

LOG_2PI = float(np.log(2.0 * np.pi))


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_dim(z, d, what):
    if z.ndim != 2 or z.shape[1] != d:
        raise ContractError(f"{what}: expected (n, {d}) batch, got shape {z.shape}")


def std_normal_log_prob(z0):
    d = z0.shape[1]
    return T.sub(T.mul(T.sum(T.square(z0), axis=1), -0.5), 0.5 * d * LOG_2PI)


class ActNorm:
    """Per-dimension affine map y = z * exp(log_scale) + bias."""

    def __init__(self, dim, params, prefix):
        self.dim = dim
        self.log_scale = params.add(prefix + "log_scale", np.zeros(dim))
        self.bias = params.add(prefix + "bias", np.zeros(dim))
        self.initialized = False

    def forward(self, z):
        y = T.add(T.mul(z, T.exp(self.log_scale)), self.bias)
        ld = T.sum(self.log_scale)
        return y, ld

    def inverse(self, y):
        z = T.mul(T.sub(y, self.bias), T.exp(T.neg(self.log_scale)))
        return z, T.neg(T.sum(self.log_scale))

    def init_from(self, y, min_std=1e-3):
        """Data-dependent init: the inverse output of batch ``y`` becomes standardized."""
        y = np.asarray(y)
        self.bias.data = y.mean(axis=0)
        self.log_scale.data = np.log(np.maximum(y.std(axis=0), min_std))
        self.initialized = True


class CouplingLayer:
    """Affine coupling on a fixed even/odd split of the (permuted) coordinates.

    ``a_src``/``b_src`` are the input columns feeding the conditioning and the
    transformed halves; the output is written in permuted order, even
    positions carrying the conditioning half.
    """

    def __init__(self, dim, perm, hidden, clamp, rng, params, prefix):
        self.dim = dim
        self.clamp = float(clamp)
        self.even = np.arange(0, dim, 2)
        self.odd = np.arange(1, dim, 2)
        self.a_src = perm[self.even]
        self.b_src = perm[self.odd]
        da, db = len(self.even), len(self.odd)
        self.scale_net = self.shift_net = None
        if db:
            self.scale_net = MLP((da, hidden, hidden, db), "tanh", "linear", rng, zero_last=True)
            self.shift_net = MLP((da, hidden, hidden, db), "tanh", "linear", rng, zero_last=True)
            params.extend(self.scale_net.params, prefix + "scale.")
            params.extend(self.shift_net.params, prefix + "shift.")

    def _st(self, a):
        s = T.soft_clamp(self.scale_net(a), self.clamp)
        return s, self.shift_net(a)

    def forward(self, y):
        a = T.take_cols(y, self.a_src)
        if self.scale_net is None:
            return T.place_cols([a], [self.even], self.dim), None
        b = T.take_cols(y, self.b_src)
        s, t = self._st(a)
        b_new = T.add(T.mul(b, T.exp(s)), t)
        out = T.place_cols([a, b_new], [self.even, self.odd], self.dim)
        return out, T.sum(s, axis=1)

    def inverse(self, out):
        a = T.take_cols(out, self.even)
        if self.scale_net is None:
            return T.place_cols([a], [self.a_src], self.dim), None
        ob = T.take_cols(out, self.odd)
        s, t = self._st(a)
        b = T.mul(T.sub(ob, t), T.exp(T.neg(s)))
        y = T.place_cols([a, b], [self.a_src, self.b_src], self.dim)
        return y, T.neg(T.sum(s, axis=1))


class FlowStep:
    def __init__(self, dim, hidden, clamp, rng, params, prefix):
        self.actnorm = ActNorm(dim, params, prefix + "actnorm.")
        self.permutation = np.arange(dim)[::-1].copy()
        self.coupling = CouplingLayer(dim, self.permutation, hidden, clamp, rng, params, prefix + "coupling.")

    def forward(self, z):
        y, ld_an = self.actnorm.forward(z)
        out, ld_c = self.coupling.forward(y)
        ld = ld_an if ld_c is None else T.add(ld_c, ld_an)
        return out, ld

    def inverse(self, out, data_init=False):
        y, ld_c = self.coupling.inverse(out)
        if data_init and not self.actnorm.initialized:
            self.actnorm.init_from(y.data)
        z, ld_an = self.actnorm.inverse(y)
        ld = ld_an if ld_c is None else T.add(ld_c, ld_an)
        return z, ld


class FlowModel:
    """Latent prior p(z): z = f(z0), z0 ~ N(0, I_d), f a stack of FlowSteps.

    ``depth=0`` is the plain standard-normal prior (the Gaussian-prior
    baseline); it has no parameters.
    """

    def __init__(self, dim, depth=5, hidden=128, clamp=2.0, rng=None):
        if dim < 1:
            raise ContractError("latent dimension must be >= 1")
        if depth < 0:
            raise ContractError("flow depth must be >= 0")
        rng = _rng(rng)
        self.dim = int(dim)
        self.depth = int(depth)
        self.hidden = int(hidden)
        self.clamp = float(clamp)
        self.params = ParamGroup()
        self.steps = [FlowStep(self.dim, self.hidden, self.clamp, rng, self.params, f"step{i}.")
                      for i in range(self.depth)]

    @property
    def trainable(self):
        return self.depth > 0

    @property
    def initialized(self):
        return all(s.actnorm.initialized for s in self.steps)

    def mark_initialized(self):
        for s in self.steps:
            s.actnorm.initialized = True

    def randomize(self, rng, scale=1.0, actnorm_scale=0.3):
        """Random parameters everywhere (test helper); actnorm counts as initialized."""
        rng = _rng(rng)
        for s in self.steps:
            s.actnorm.log_scale.data = actnorm_scale * rng.standard_normal(self.dim)
            s.actnorm.bias.data = actnorm_scale * rng.standard_normal(self.dim)
            s.actnorm.initialized = True
            if s.coupling.scale_net is not None:
                s.coupling.scale_net.randomize(rng, scale)
                s.coupling.shift_net.randomize(rng, scale)
        return self

    # --- tensor-level passes (differentiable) ---------------------------------

    def forward_t(self, z0):
        z = z0
        total = None
        for step in self.steps:
            z, ld = step.forward(z)
            total = ld if total is None else T.add(total, ld)
        if total is None:
            total = Tensor(np.zeros(z0.shape[0]))
        elif total.ndim == 0:
            total = T.add(total, np.zeros(z0.shape[0]))
        return z, total

    def inverse_t(self, z, data_init=False):
        total = None
        for step in reversed(self.steps):
            z, ld = step.inverse(z, data_init=data_init)
            total = ld if total is None else T.add(total, ld)
        n = z.shape[0]
        if total is None:
            total = Tensor(np.zeros(n))
        elif total.ndim == 0:
            total = T.add(total, np.zeros(n))
        return z, total

    def log_prob_t(self, z, data_init=False):
        z0, ld_inv = self.inverse_t(z, data_init=data_init)
        return T.add(std_normal_log_prob(z0), ld_inv)

    def arrays(self):
        """Stacked parameter arrays for the compiled Langevin kernel."""
        d, L, h = self.dim, self.depth, self.hidden
        da = (d + 1) // 2
        db = d // 2
        out = {
            "log_scale": np.zeros((L, d)), "bias": np.zeros((L, d)),
            "even": np.arange(0, d, 2), "odd": np.arange(1, d, 2),
            "a_src": np.arange(d)[::-1][0::2].copy(), "b_src": np.arange(d)[::-1][1::2].copy(),
            "clamp": self.clamp,
        }
        shapes = [(da, h), (h,), (h, h), (h,), (h, db), (db,)]
        for net in ("scale", "shift"):
            for j, shp in enumerate(shapes):
                out[f"{net}{j}"] = np.zeros((L,) + shp)
        for l, step in enumerate(self.steps):
            out["log_scale"][l] = step.actnorm.log_scale.data
            out["bias"][l] = step.actnorm.bias.data
            if db == 0:
                continue
            for net, mlp in (("scale", step.coupling.scale_net), ("shift", step.coupling.shift_net)):
                for k in range(3):
                    out[f"{net}{2 * k}"][l] = mlp.weights[k].data
                    out[f"{net}{2 * k + 1}"][l] = mlp.biases[k].data
        return out


# --- array-level operations ----------------------------------------------------


def flow_forward(model, z0):
    z0 = np.asarray(z0, dtype=np.float64)
    _check_dim(z0, model.dim, "flow_forward")
    z, ld = model.forward_t(Tensor(z0))
    return z.data, ld.data


def flow_inverse(model, z):
    z = np.asarray(z, dtype=np.float64)
    _check_dim(z, model.dim, "flow_inverse")
    z0, ld = model.inverse_t(Tensor(z))
    return z0.data, ld.data


def flow_log_prob(model, z):
    z = np.asarray(z, dtype=np.float64)
    _check_dim(z, model.dim, "flow_log_prob")
    return model.log_prob_t(Tensor(z)).data


def flow_sample(model, n, rng=None):
    if n < 1:
        raise ContractError("sample count must be >= 1")
    z0 = _rng(rng).standard_normal((int(n), model.dim))
    return flow_forward(model, z0)[0]


def grad_log_prob_z(model, z):
    """Per-example score d/dz log p(z), by reverse-mode through the inverse pass."""
    z = np.asarray(z, dtype=np.float64)
    _check_dim(z, model.dim, "grad_log_prob_z")
    zt = Tensor(z, requires_grad=True)
    lp = T.sum(model.log_prob_t(zt))
    return T.grad(lp, [zt])[0]


# --- autoregressive posterior flow ------------------------------------------------


class _MADE:
    """One-hidden-layer masked network: output i sees only inputs < i."""

    def __init__(self, dim, hidden, rng, params, prefix):
        self.dim = dim
        in_deg = np.arange(1, dim + 1)
        hid_deg = np.arange(hidden) % max(dim - 1, 1) + 1
        self.mask_in = (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)
        self.mask_out = (in_deg[None, :] > hid_deg[:, None]).astype(np.float64)
        self.w_in = params.add(prefix + "W_in", rng.standard_normal((dim, hidden)) / np.sqrt(dim))
        self.b_in = params.add(prefix + "b_in", np.zeros(hidden))
        self.w_s = params.add(prefix + "W_s", np.zeros((hidden, dim)))
        self.b_s = params.add(prefix + "b_s", np.zeros(dim))
        self.w_m = params.add(prefix + "W_m", np.zeros((hidden, dim)))
        self.b_m = params.add(prefix + "b_m", np.zeros(dim))

    def __call__(self, z):
        h = T.tanh(T.add(T.matmul(z, T.mul(self.w_in, self.mask_in)), self.b_in))
        s = T.add(T.matmul(h, T.mul(self.w_s, self.mask_out)), self.b_s)
        m = T.add(T.matmul(h, T.mul(self.w_m, self.mask_out)), self.b_m)
        return s, m


class ARPosteriorFlow:
    """Inverse-autoregressive affine flow z_i' = z_i exp(s_i(z_<i)) + m_i(z_<i).

    Coordinates are reversed between steps. Zero-initialised output layers
    make a fresh flow the identity.
    """

    def __init__(self, dim, steps=2, hidden=64, clamp=2.0, rng=None):
        rng = _rng(rng)
        self.dim = int(dim)
        self.n_steps = int(steps)
        self.clamp = float(clamp)
        self.params = ParamGroup()
        self.nets = [_MADE(self.dim, hidden, rng, self.params, f"iaf{i}.") for i in range(self.n_steps)]
        self.reverse = np.arange(self.dim)[::-1].copy()

    def randomize(self, rng, scale=1.0):
        rng = _rng(rng)
        for net in self.nets:
            for p in (net.w_in, net.b_in, net.w_s, net.b_s, net.w_m, net.b_m):
                p.data = scale * rng.standard_normal(p.shape) / np.sqrt(max(p.shape[0], 1))
        return self

    def apply_t(self, z0):
        z = z0
        total = None
        for i, net in enumerate(self.nets):
            s, m = net(z)
            s = T.soft_clamp(s, self.clamp)
            z = T.add(T.mul(z, T.exp(s)), m)
            ld = T.sum(s, axis=1)
            total = ld if total is None else T.add(total, ld)
            if i < self.n_steps - 1:
                z = T.take_cols(z, self.reverse)
        if total is None:
            total = Tensor(np.zeros(z0.shape[0]))
        return z, total

    def invert(self, z):
        """Sequential inverse (one coordinate sweep per step); numpy only."""
        x = np.array(z, dtype=np.float64)
        for i in reversed(range(self.n_steps)):
            if i < self.n_steps - 1:
                x = x[:, self.reverse]
            net = self.nets[i]
            y = x
            x = np.zeros_like(y)
            for j in range(self.dim):
                s, m = net(Tensor(x))
                s = self.clamp * np.tanh(s.data / self.clamp)
                x[:, j] = (y[:, j] - m.data[:, j]) * np.exp(-s[:, j])
        return x


def ar_flow_apply(flow, z0):
    z0 = np.asarray(z0, dtype=np.float64)
    _check_dim(z0, flow.dim, "ar_flow_apply")
    z, ld = flow.apply_t(Tensor(z0))
    return z.data, ld.data
