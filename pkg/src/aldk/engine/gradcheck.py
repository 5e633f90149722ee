"""Central-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, grad, precision


@dataclass
class FDReport:
    """Per-argument max relative error between analytic and numeric grads.

    The error for one argument is ``max|analytic - numeric| / max|numeric|``
    over the checked coordinates (denominator floored at ``1e-12``).
    """

    errors: list[float]
    tol: float
    checked: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def fd_check(f, point, h: float = 1e-4, tol: float = 1e-2, max_coords: int | None = 64,
             rng: np.random.Generator | None = None, dtype=np.float64) -> FDReport:
    """Compare gradients of scalar ``f(*tensors)`` to central differences.

    ``point`` is a sequence of arrays.  Each is wrapped as a leaf requiring
    grad for the analytic pass; the numeric pass perturbs one coordinate at a
    time by +-h.  At most ``max_coords`` coordinates per argument are probed
    (chosen with ``rng``); pass None to probe all of them.

    Both passes run in ``dtype`` (float64 by default) so that rounding in the
    forward value does not swamp the difference quotient.
    """
    with precision(dtype):
        return _fd_check(f, point, h, tol, max_coords, rng or np.random.default_rng(0), np.dtype(dtype).type)


def _fd_check(f, point, h, tol, max_coords, rng, dt) -> FDReport:
    arrays = [np.array(p, dtype=dt) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    analytic = grad(out, leaves)

    def evaluate(args):
        return float(f(*[Tensor(a, requires_grad=True) for a in args]).data.astype(np.float64).sum())

    errors, checked = [], []
    for i, a in enumerate(arrays):
        ga = np.zeros(a.size) if analytic[i] is None else analytic[i].data.astype(np.float64).ravel()
        idx = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            idx = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        numeric = np.empty(len(idx))
        for j, flat in enumerate(idx):
            args = [x.copy() for x in arrays]
            view = args[i].reshape(-1)
            base = view[flat]
            view[flat] = base + dt(h)
            fp = evaluate(args)
            view[flat] = base - dt(h)
            fm = evaluate(args)
            # the perturbation actually applied after rounding, not the nominal one
            step = float(np.float64(dt(base + dt(h))) - np.float64(dt(base - dt(h))))
            numeric[j] = (fp - fm) / step
        denom = max(np.abs(numeric).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(ga[idx] - numeric).max(initial=0.0) / denom))
        checked.append(len(idx))
    return FDReport(errors=errors, tol=tol, checked=checked)
