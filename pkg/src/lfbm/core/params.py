from collections import OrderedDict

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class ParamGroup:
    """Ordered name -> Tensor map of trainable arrays (insertion order kept)."""

    def __init__(self):
        self._entries = OrderedDict()

    def add(self, name, value):
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def extend(self, other, prefix=""):
        for name, t in other.items():
            self.add(prefix + name, t)
        return self

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def num_values(self):
        return sum(t.size for t in self._entries.values())

    def state(self):
        """Copy of every array, keyed by name."""
        return OrderedDict((k, t.data.copy()) for k, t in self._entries.items())

    def load_state(self, state):
        for k, t in self._entries.items():
            if k not in state:
                raise ContractError(f"missing parameter {k!r}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ContractError(f"shape mismatch for {k!r}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def grads(self):
        return OrderedDict((k, t.grad) for k, t in self._entries.items())

    def flat_grad(self):
        parts = []
        for k, t in self._entries.items():
            g = np.zeros(t.shape) if t.grad is None else t.grad
            parts.append(g.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)
