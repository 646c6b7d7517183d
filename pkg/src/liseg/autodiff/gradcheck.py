"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward

MAX_ELEMENTS = 10_000


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_input: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def rel_error(a, f):
    a, f = np.asarray(a), np.asarray(f)
    return np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))


def grad_check(fn, inputs, seed=0, tolerance=1e-4, h=1e-5, name=None) -> GradCheckReport:
    """Compare backprop against central differences for every input element.

    ``fn`` maps a list of Tensors to a Tensor. Non-scalar outputs are contracted with a
    fixed random projection so that every output element contributes to the check.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    if sum(a.size for a in arrays) > MAX_ELEMENTS:
        raise ValueError(f"grad_check is limited to {MAX_ELEMENTS} input elements")
    rng = np.random.default_rng(seed)
    proj = None

    def objective(tensors):
        nonlocal proj
        out = fn(tensors)
        if out.size == 1:
            return out
        if proj is None:
            proj = rng.standard_normal(out.shape)
        return (out * Tensor(proj)).sum()

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(objective(tensors))
    errs = []
    for i, a in enumerate(arrays):
        fd = np.empty_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = objective([Tensor(b) for b in arrays]).item()
            flat[j] = orig - h
            fm = objective([Tensor(b) for b in arrays]).item()
            flat[j] = orig
            fd.reshape(-1)[j] = (fp - fm) / (2 * h)
        errs.append(float(rel_error(tensors[i].grad, fd).max()) if a.size else 0.0)
    return GradCheckReport(name or getattr(fn, "__name__", "op"), max(errs, default=0.0), errs, tolerance)
