"""Central-difference verification of analytic gradients (run in float64)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor, backward, precision, record_branches


class GradcheckError(FloatingPointError):
    pass


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    kinked: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.passed or self.worst is None else f" at={self.worst[0]}{list(self.worst[1])}"
        return f"{status} max_rel_err={self.max_rel_err:.3e}{where} checked={self.checked} kinked={self.kinked}"


def gradcheck(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare backward() against finite differences for entries of ``params``.

    The numeric derivative is the Richardson combination of central
    differences at ``eps`` and ``2 * eps``, accurate to fourth order.

    ``f`` is re-evaluated on a float64 copy of ``params``.  With
    ``max_per_param`` set, a random subset of that many scalar positions is
    probed in each entry (all positions otherwise).

    A probe whose perturbed evaluations flip a ReLU, max or clamp branch
    relative to the unperturbed pass straddles a kink, where the finite
    difference does not estimate the derivative.  Such probes are counted in
    ``kinked`` and left out of the error.

    Relative errors are taken against ``max(|analytic|, |numeric|, floor)``.
    Two float64 evaluations of a deep loss of size ``|L|`` differ by rounding
    noise of up to about ``1e-12 * |L|``, so a numeric derivative carries
    noise ``1e-12 * |L| / eps``.  ``floor`` is ``1e4`` times that, so rounding
    alone stays well under the default tolerance for near-zero gradients.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside [1e-4, 1e-2]")
    rng = rng or np.random.default_rng(0)
    p64 = params.astype(np.float64)
    with precision(np.float64):
        with record_branches() as ref:
            loss = f(p64)
        _require_finite(loss.item(), "analytic pass", None)
        floor = max(1e-6, 1e-8 * max(1.0, abs(loss.item())) / eps)
        backward(loss, params=p64)
        analytic = {name: t.grad.copy() for name, t in p64.items()}

        worst_err, worst_at, checked, kinked = 0.0, None, 0, 0
        per_param: dict[str, float] = {}
        for name, t in p64.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
            a_flat = analytic[name].reshape(-1)
            param_worst = 0.0
            for i in idx:
                orig = flat[i]
                values, patterns = [], []
                for step in (eps, -eps, 2 * eps, -2 * eps):
                    flat[i] = orig + step
                    with record_branches() as seen:
                        values.append(f(p64).item())
                    patterns.append(seen)
                flat[i] = orig
                where = (name, tuple(int(v) for v in np.unravel_index(i, t.shape)))
                for v in values:
                    _require_finite(v, "perturbed pass", where)
                if not all(_same(ref, seen) for seen in patterns):
                    kinked += 1
                    continue
                # Richardson extrapolation of the eps and 2*eps central differences
                d1 = (values[0] - values[1]) / (2 * eps)
                d2 = (values[2] - values[3]) / (4 * eps)
                num = (4 * d1 - d2) / 3
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                checked += 1
                param_worst = max(param_worst, err)
                if err > worst_err:
                    worst_err, worst_at = err, where
            per_param[name] = param_worst
    return GradcheckReport(worst_err, worst_at, checked, tol, per_param, kinked)


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _require_finite(v: float, stage: str, where) -> None:
    if not np.isfinite(v):
        loc = "" if where is None else f" at {where[0]}{list(where[1])}"
        raise GradcheckError(f"non-finite loss in {stage}{loc}")
