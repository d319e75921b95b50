"""AdamW optimizer and finite-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor, no_grad
from .nn import Parameter


class OptimError(RuntimeError):
    """Raised when optimization cannot proceed (e.g. non-finite gradients)."""


class AdamW:
    """Adam with decoupled weight decay.

    Decay scales a parameter by (1 - lr * weight_decay) before the moment
    update is applied. Parameters marked non-trainable and parameters without
    gradients are left untouched.
    """

    def __init__(self, params: dict[str, Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient in parameter '{name}' "
                                 f"at step {self.t}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ======================================================================
# Gradient verification
# ======================================================================

@dataclass
class GradCheckReport:
    eps: float
    tolerance: float
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def finite_diff_check(f: Callable[[], Tensor], params: dict[str, Parameter],
                      eps: float = 1e-3, tolerance: float = 1e-3,
                      max_coords: int = 16, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central differences.

    f must be a deterministic closure over params returning a scalar Tensor.
    Up to max_coords coordinates per parameter are probed (chosen from a fixed
    seed). Relative error uses a small floor so exact zeros on both routes
    count as agreement.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradCheckReport(eps=eps, tolerance=tolerance, max_rel_err=0.0)
    for name, p in params.items():
        rng = rngmod.stream(seed, "gradcheck", name)
        size = p.data.size
        coords = (np.arange(size) if size <= max_coords
                  else rng.choice(size, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                f_plus = float(f().data)
            flat[c] = orig - eps
            with no_grad():
                f_minus = float(f().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            ad = analytic[name].reshape(-1)[c]
            denom = max(abs(fd), abs(ad), 1e-8)
            rel = abs(fd - ad) / denom
            if abs(fd) < 1e-10 and abs(ad) < 1e-10:
                rel = 0.0
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
