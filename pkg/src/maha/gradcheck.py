"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ShapeError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    def failures(self):
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol={self.tolerance:g})"]
        for name, err in self.errors.items():
            mark = "ok " if err < self.tolerance else "BAD"
            lines.append(f"  {mark} {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def _scalar(out):
    value = np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)
    if value.size != 1:
        raise ShapeError(f"gradient check needs a scalar function, got shape {value.shape}")
    value = float(value.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError("function under check returned a non-finite value")
    return value


def finite_diff_check(f, params, eps=1e-6, tol=1e-4):
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``f`` receives a dict of name -> Tensor and returns a scalar Tensor.
    ``params`` maps names to arrays; it is not modified.  The relative error
    per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = f(leaves)
    _scalar(out)
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def evaluate(name, idx, delta):
        vals = {k: Tensor(v) for k, v in base.items()}
        pert = base[name].copy()
        pert[idx] += delta
        vals[name] = Tensor(pert)
        with no_grad():
            return _scalar(f(vals))

    report = GradCheckReport(tolerance=tol)
    for name, arr in base.items():
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            numeric = (evaluate(name, idx, eps) - evaluate(name, idx, -eps)) / (2.0 * eps)
            a = float(analytic[name][idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report.errors[name] = worst
    return report
