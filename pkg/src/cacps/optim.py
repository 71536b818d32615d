"""AdamW with decoupled weight decay, written against the tensor core."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimError(Exception):
    pass


class AdamW:
    """Standard AdamW over a name->Tensor parameter dict.

    Update per parameter: bias-corrected moments m_hat, v_hat, then
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    The decay is decoupled: it never passes through the moment estimates.
    Parameters with a None grad are skipped entirely (no decay either), so
    untouched networks stay bit-identical.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        weight_decay: float = 0.1,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise OptimError(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise OptimError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise OptimError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
            if not np.isfinite(g).all():
                raise OptimError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) - self.lr * self.weight_decay * p.data

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Moment arrays in a stable order for checkpointing."""
        out = []
        for name in self.params:
            out.append((f"m.{name}", self.m[name]))
            out.append((f"v.{name}", self.v[name]))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            for prefix, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise OptimError(f"missing optimizer state '{key}'")
                if arrays[key].shape != store[name].shape:
                    raise OptimError(f"optimizer state '{key}' has wrong shape {arrays[key].shape}")
                store[name] = arrays[key].astype(np.float64, copy=True)
        self.step_count = int(step_count)
