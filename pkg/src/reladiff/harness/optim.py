"""Adam with bias correction, operating in place on parameter tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def tables(self, prefix: str) -> dict:
        out = {f"{prefix}.m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tables(cls, arrays: dict, prefix: str, step: int) -> "AdamState":
        st = cls(step=step)
        for key, arr in arrays.items():
            if key.startswith(f"{prefix}.m."):
                st.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(f"{prefix}.v."):
                st.v[key[len(prefix) + 3:]] = arr.copy()
        return st


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Update ``params`` (name -> Tensor) from ``grads`` (name -> ndarray).

    Parameters missing from ``grads`` are treated as having zero gradient so
    their moments still decay.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
