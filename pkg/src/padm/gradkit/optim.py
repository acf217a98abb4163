"""Named parameter store and Adam."""

from __future__ import annotations

import numpy as np

from padm.gradkit.tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor mapping with per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, array, dtype=np.float32) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=dtype), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flat view of parameters and optimizer state for serialization."""
        out = {}
        for name, t in self.params.items():
            out[f"param/{name}"] = t.data
            out[f"adam_m/{name}"] = self._m[name]
            out[f"adam_v/{name}"] = self._v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name, t in self.params.items():
            keys = [f"param/{name}", f"adam_m/{name}", f"adam_v/{name}"]
            for key in keys:
                if key not in tensors:
                    raise ValueError(f"checkpoint is missing {key!r}")
            if tensors[keys[0]].shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {tensors[keys[0]].shape} vs {t.data.shape}")
            t.data = tensors[keys[0]].astype(t.data.dtype, copy=True)
            self._m[name] = tensors[keys[1]].astype(t.data.dtype, copy=True)
            self._v[name] = tensors[keys[2]].astype(t.data.dtype, copy=True)
        self.step_count = int(step_count)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter with a gradient.

    Gradients are left untouched; the caller zeroes them.
    """
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
