"""Central finite-difference verification of analytic gradients.

Checks run in double precision with step 1e-5. The reported error per
input is max over elements of |analytic - numeric| / max(1, |analytic|,
|numeric|), i.e. relative above magnitude 1 and absolute below it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tolerance: float
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self):
        worst = max(self.max_rel_err.values()) if self.max_rel_err else 0.0
        status = "ok" if self.ok else "FAIL " + "; ".join(self.failures)
        return f"grad_check worst={worst:.3e} tol={self.tolerance:.1e} [{status}]"


def grad_check(op, inputs: dict[str, Tensor], tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued op against central differences.

    op receives the inputs dict and must return a scalar Tensor built from
    the same Tensor objects (so the graph reaches them). Inputs are cast to
    float64 for the check.
    """
    work = {k: Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=True) for k, t in inputs.items()}
    out = op(work)
    if out.data.size != 1:
        raise ValueError("grad_check expects a scalar-valued op")
    for t in work.values():
        t.grad = None
    out.backward()

    errs: dict[str, float] = {}
    failures: list[str] = []
    for name, t in work.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            bad = np.argwhere(~np.isfinite(analytic))[0]
            failures.append(f"{name}: non-finite analytic gradient at {tuple(bad)}")
            errs[name] = float("inf")
            continue
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(op(work).data)
            flat[i] = orig - step
            f_minus = float(op(work).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        errs[name] = worst
        if worst > tolerance:
            failures.append(f"{name}: rel err {worst:.3e} > {tolerance:.1e}")
    return GradCheckReport(max_rel_err=errs, tolerance=tolerance, failures=failures)
