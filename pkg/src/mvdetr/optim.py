"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    """Decoupled weight decay: w <- w - lr*wd*w, applied separately from the
    moment update; betas (0.9, 0.999), epsilon 1e-8. Parameters with no
    gradient this step are treated as zero-gradient (decay still applies).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.names = list(params)
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for name in self.names:
            self.params[name].grad = None

    # -- checkpoint plumbing -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": self.m[n].astype(np.float32) for n in self.names}
        out.update({f"v.{n}": self.v[n].astype(np.float32) for n in self.names})
        out["t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.names:
            self.m[n] = arrays[f"m.{n}"].astype(self.params[n].data.dtype, copy=True)
            self.v[n] = arrays[f"v.{n}"].astype(self.params[n].data.dtype, copy=True)
        self.t = int(arrays["t"][0])


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
