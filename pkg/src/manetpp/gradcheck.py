"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    excluded: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.excluded)} kink coord(s) excluded" if self.excluded else ""
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} coords{extra})")


def numerical_gradient(f, x, step=1e-5, kink_tol=1e-3):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored).

    Returns (grad, kinks) where ``kinks`` is a boolean mask of coordinates
    whose one-sided slopes disagree, i.e. where ``f`` is not differentiable.
    """
    grad = np.zeros_like(x)
    kinks = np.zeros(x.shape, dtype=bool)
    f0 = f()
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
        right, left = (fp - f0) / step, (f0 - fm) / step
        if abs(right - left) > kink_tol * max(1.0, abs(right) + abs(left)):
            kinks[idx] = True
    return grad, kinks


def relative_error(analytic, numeric, floor=1e-5):
    # the floor keeps exactly-zero gradients (FD noise ~1e-10) from reading as 100% error
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def gradcheck(f, inputs, analytic, name="op", tolerance=1e-4, step=1e-5):
    """Compare ``analytic`` gradients against central differences.

    ``f()`` evaluates the scalar objective reading the arrays in ``inputs``
    (a dict name -> float64 array); ``analytic`` maps the same names to
    gradient arrays computed at the unperturbed point.
    """
    worst = 0.0
    checked = 0
    excluded = []
    numeric = {}
    for key, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 inputs, {key} is {arr.dtype}")
        numeric[key] = numerical_gradient(f, arr, step)
    # components tiny next to the largest gradient of the check are judged on that
    # scale: central differences cannot resolve them any better
    scale = max(float(np.abs(n).max()) for n, _ in numeric.values())
    floor = 1e-5 * max(1.0, scale)
    for key, (num, kinks) in numeric.items():
        err = relative_error(np.asarray(analytic[key], dtype=np.float64), num, floor)
        ok = ~kinks
        if ok.any():
            worst = max(worst, float(err[ok].max()))
        checked += int(ok.sum())
        excluded += [(key, tuple(int(i) for i in idx)) for idx in np.argwhere(kinks)]
    return GradcheckReport(name, worst, tolerance, checked, excluded)
