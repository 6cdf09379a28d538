"""Fully-connected building blocks on top of the tensor primitives."""
import numpy as np

from . import tensor as T
from .params import ParamGroup

_ACTS = {
    "tanh": T.tanh,
    "leaky_relu": T.leaky_relu,
    "linear": None,
}


class MLP:
    """x -> act(x W0 + b0) -> ... -> out_act(h W_last + b_last).

    Weights are LeCun-normal; ``zero_last`` starts the output layer at zero so
    the network initially emits exactly zero (identity couplings, identity
    posterior flows).
    """

    def __init__(self, sizes, hidden_act="tanh", out_act="linear", rng=None, zero_last=False, prefix=""):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        if hidden_act not in _ACTS or out_act not in _ACTS:
            raise ValueError(f"unknown activation {hidden_act!r}/{out_act!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden_act = hidden_act
        self.out_act = out_act
        self.params = ParamGroup()
        self.weights, self.biases = [], []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(max(fan_in, 1))
            self.weights.append(self.params.add(f"{prefix}W{i}", w))
            self.biases.append(self.params.add(f"{prefix}b{i}", np.zeros(fan_out)))

    def __call__(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            act = _ACTS[self.out_act if i == last else self.hidden_act]
            if act is not None:
                h = act(h)
        return h

    def randomize(self, rng, scale=1.0):
        """Overwrite every weight and bias with random values (test helper)."""
        for w, b in zip(self.weights, self.biases):
            w.data = scale * rng.standard_normal(w.shape) / np.sqrt(max(w.shape[0], 1))
            b.data = 0.1 * scale * rng.standard_normal(b.shape)
