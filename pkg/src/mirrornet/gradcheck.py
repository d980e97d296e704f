"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonDifferentiablePoint(ValueError):
    """The probe crossed a kink (relu, max, sort tie) within one step."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"gradcheck {status}: max_rel_error={self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}) over {self.n_checked} coords")


def grad_check(func, x, analytic, h=1e-6, tolerance=1e-4, max_checks=None,
               kink_tol=1e-3, rng=None) -> GradCheckReport:
    """Compare ``analytic`` against central differences of scalar ``func`` at ``x``.

    The relative error is ``max_i |a_i - n_i| / max_i |n_i|``: the worst
    absolute discrepancy measured against the gradient's own scale, which
    keeps near-zero entries from dominating.

    A coordinate whose second difference exceeds ``kink_tol * h * (1 + |slope|)``
    straddles a non-differentiable point and raises NonDifferentiablePoint.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != input shape {x.shape}")
    coords = list(np.ndindex(x.shape))
    if max_checks is not None and len(coords) > max_checks:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    f0 = float(func(x))
    numeric = np.zeros(len(coords))
    for k, idx in enumerate(coords):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(func(x))
        x[idx] = orig - h
        fm = float(func(x))
        x[idx] = orig
        slope = (fp - fm) / (2 * h)
        if abs(fp - 2 * f0 + fm) > kink_tol * h * (1 + abs(slope)):
            raise NonDifferentiablePoint(f"kink within {h:g} of coordinate {idx}")
        numeric[k] = slope

    a = np.array([analytic[idx] for idx in coords])
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-300)
    diff = np.abs(a - numeric)
    worst = int(diff.argmax()) if len(coords) else 0
    return GradCheckReport(float(diff.max(initial=0.0) / scale), len(coords), tolerance,
                           coords[worst] if coords else ())
