"""Adam with bias correction and per-epoch multiplicative learning-rate decay."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    t: int = 0
    epochs: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def effective_lr(self):
        return self.lr * self.decay ** self.epochs

    def end_epoch(self):
        self.epochs += 1

    def arrays(self):
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def scalars(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "decay": self.decay, "t": self.t, "epochs": self.epochs}

    @classmethod
    def restore(cls, scalars, arrays):
        st = cls(**{k: scalars[k] for k in ("lr", "beta1", "beta2", "eps", "decay")})
        st.t = int(scalars["t"])
        st.epochs = int(scalars["epochs"])
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = np.array(arr, dtype=np.float64)
        return st


def adam_step(params, state):
    """One descent step on the gradients stored in ``params``; zeroes them after."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.effective_lr / (1.0 - b1 ** state.t)
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - step * m / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
    return state
