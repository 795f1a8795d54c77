"""Privacy bookkeeping: Gaussian RDP, composition, RDP to (eps, delta) conversion,
the order-optimized budget of the data-sensitive annotation, and the ledger."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from scipy import optimize

MAX_ORDER = 1e7
_ORDER_GRID = 400


def l2_sensitivity(beta: float, n_classes: int) -> float:
    """Sensitivity of a sum of per-example normalized gradients of length ``n_classes``."""
    return 2.0 * beta * math.sqrt(n_classes)


def rdp_gaussian(sensitivity: float, sigma: float, order: float) -> float:
    """RDP of the Gaussian mechanism with noise std ``sigma``: q S^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0; a noiseless Gaussian mechanism has unbounded RDP")
    if order <= 1:
        raise ValueError(f"RDP order must be > 1, got {order}")
    return order * sensitivity ** 2 / (2.0 * sigma ** 2)


def rdp_compose(entries: Iterable[tuple[float, float]]) -> tuple[float | None, float]:
    """Sum RDP guarantees that share one order. Empty input composes to 0."""
    entries = list(entries)
    if not entries:
        return None, 0.0
    orders = {q for q, _ in entries}
    if len(orders) > 1:
        raise ValueError(f"cannot compose RDP at mixed orders {sorted(orders)}")
    return entries[0][0], math.fsum(eps for _, eps in entries)


def rdp_self_compose(order: float, rdp_eps: float, times: int) -> tuple[float, float]:
    """``rdp_compose`` of ``times`` identical entries without materializing them."""
    if times < 0:
        raise ValueError("times must be >= 0")
    # one correctly rounded product equals the correctly rounded sum of the repeats
    return order, times * rdp_eps


def rdp_to_dp(order: float, rdp_eps: float, delta: float) -> float:
    if order <= 1:
        raise ValueError(f"RDP order must be > 1, got {order}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return rdp_eps + math.log((order - 1.0) / order) - (math.log(delta) + math.log(order)) / (order - 1.0)


def dpsd_epsilon_at(order: float, beta: float, n_classes: int, batch_size: int, iterations: int,
                    sigma: float, delta: float) -> float:
    """Closed-form (eps, delta) bound at a fixed order, written out directly."""
    q = order
    return (2.0 * beta ** 2 * n_classes * batch_size * iterations * q / sigma ** 2
            + math.log((q - 1.0) / q) - (math.log(delta) + math.log(q)) / (q - 1.0))


def dpsd_epsilon_composed(order: float, beta: float, n_classes: int, batch_size: int, iterations: int,
                          sigma: float, delta: float) -> float:
    """The same bound assembled from the generic Gaussian/compose/convert pieces."""
    per_query = rdp_gaussian(l2_sensitivity(beta, n_classes), sigma, order)
    _, total = rdp_self_compose(order, per_query, batch_size * iterations)
    return rdp_to_dp(order, total, delta)


class Budget(NamedTuple):
    epsilon: float
    order: float


def _check_budget_args(beta, n_classes, batch_size, iterations, sigma, delta):
    if sigma <= 0:
        raise ValueError("sigma must be > 0 for a finite budget")
    if beta <= 0 or n_classes < 1 or batch_size < 1 or iterations < 0:
        raise ValueError("beta, n_classes and batch_size must be positive and iterations >= 0")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def dpsd_budget(beta: float, n_classes: int, batch_size: int, iterations: int, sigma: float,
                delta: float) -> Budget:
    """Smallest epsilon over real orders q in (1, 1e7] and the minimizing order.

    The objective is searched in ``u = log(q - 1)``: a log-spaced grid brackets
    the minimum, then bounded Brent refines it to relative tolerance 1e-9.
    """
    _check_budget_args(beta, n_classes, batch_size, iterations, sigma, delta)
    slope = 2.0 * beta ** 2 * n_classes * batch_size * iterations / sigma ** 2

    def objective(u: float) -> float:
        q = 1.0 + math.exp(u)
        return slope * q + math.log((q - 1.0) / q) - (math.log(delta) + math.log(q)) / (q - 1.0)

    lo, hi = math.log(1e-6), math.log(MAX_ORDER - 1.0)
    step = (hi - lo) / _ORDER_GRID
    grid = [lo + i * step for i in range(_ORDER_GRID + 1)]
    values = [objective(u) for u in grid]
    best = min(range(len(grid)), key=values.__getitem__)
    a, b = grid[max(best - 1, 0)], grid[min(best + 1, _ORDER_GRID)]
    res = optimize.minimize_scalar(objective, bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-12, "maxiter": 500})
    u_star, eps = (res.x, res.fun) if res.fun <= values[best] else (grid[best], values[best])
    order = 1.0 + math.exp(u_star)
    # report the value of the closed form at the returned order so both agree exactly
    return Budget(dpsd_epsilon_at(order, beta, n_classes, batch_size, iterations, sigma, delta), order)


def budget_infimum(delta: float) -> float:
    """Limit of the budget as sigma grows without bound (no Gaussian term)."""
    return dpsd_budget(1.0, 1, 1, 0, 1.0, delta).epsilon


def calibrate_sigma(target_epsilon: float, beta: float, n_classes: int, batch_size: int, iterations: int,
                    delta: float) -> float:
    """Noise scale whose budget equals ``target_epsilon`` to within 1e-6 and
    never exceeds it.

    The budget is strictly decreasing in sigma, so a root bracket found by
    doubling is refined with Brent's method on log(sigma).
    """
    floor = budget_infimum(delta)
    if not target_epsilon > floor:
        raise ValueError(f"target epsilon {target_epsilon} is unreachable; the infimum over sigma is {floor:.6g}")
    if iterations == 0:
        raise ValueError("with zero iterations every sigma gives the infimum; nothing to calibrate")

    def gap(log_sigma: float) -> float:
        return dpsd_budget(beta, n_classes, batch_size, iterations, math.exp(log_sigma), delta).epsilon - target_epsilon

    lo = hi = 0.0
    while gap(hi) > 0:
        hi += math.log(2.0)
    while gap(lo) < 0:
        lo -= math.log(2.0)
    log_sigma = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    # step to the safe side of the root so the reported budget is <= target
    step = 1e-15
    while gap(log_sigma) > 0 and step < 1e-6:
        log_sigma += step
        step *= 2.0
    sigma = math.exp(log_sigma)
    if abs(gap(log_sigma)) >= 1e-6:
        raise RuntimeError(f"calibration did not converge: residual {gap(log_sigma):.3g}")
    return sigma


# --------------------------------------------------------------------------
# ledger
# --------------------------------------------------------------------------


@dataclass
class PrivacyLedger:
    """Running privacy account of one transcription run.

    In ``DP`` mode every annotated example is one Gaussian query; the budget is
    recomputed from the stored tuple. In ``LabelDP`` mode the randomized
    response budget is registered once and never changes.
    """

    mode: str
    beta: float | None = None
    n_classes: int | None = None
    batch_size: int | None = None
    sigma: float | None = None
    delta: float | None = None
    iterations: int = 0
    epsilon_rr: float | None = None
    queries: int = 0
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_data(cls, beta: float, n_classes: int, batch_size: int, sigma: float, delta: float) -> "PrivacyLedger":
        return cls("DP", beta=beta, n_classes=n_classes, batch_size=batch_size, sigma=sigma, delta=delta)

    @classmethod
    def for_labels(cls, epsilon_rr: float) -> "PrivacyLedger":
        ledger = cls("LabelDP")
        ledger.register_labels(epsilon_rr)
        return ledger

    def register_labels(self, epsilon_rr: float) -> None:
        if self.mode != "LabelDP":
            raise ValueError("randomized response budgets belong to a LabelDP ledger")
        if not epsilon_rr > 0:
            raise ValueError(f"epsilon_rr must be > 0, got {epsilon_rr}")
        if self.epsilon_rr is not None and self.epsilon_rr != epsilon_rr:
            raise ValueError(f"ledger already holds epsilon_rr={self.epsilon_rr}; refusing {epsilon_rr}")
        self.epsilon_rr = float(epsilon_rr)

    def record_annotation(self, count: int) -> None:
        """Account for one annotated batch of ``count`` examples."""
        if self.mode == "DP":
            if count != self.batch_size:
                raise ValueError(f"ledger expects batches of {self.batch_size}, got {count}")
            self.iterations += 1
        self.queries += count

    @property
    def epsilon(self) -> float:
        return self.budget().epsilon

    def budget(self) -> Budget:
        if self.mode == "LabelDP":
            return Budget(self.epsilon_rr, float("nan"))
        if self.sigma == 0:
            return Budget(math.inf, float("nan"))
        key = (self.beta, self.n_classes, self.batch_size, self.iterations, self.sigma, self.delta)
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, dpsd_budget(*key))
        return self._cache[1]

    def to_dict(self) -> dict:
        eps, order = self.budget()
        if self.mode == "LabelDP":
            return {"mode": "LabelDP", "parameters": {"epsilon_rr": self.epsilon_rr, "queries": self.queries},
                    "epsilon": eps, "delta": 0.0, "q_opt": None}
        params = {"beta": self.beta, "n_classes": self.n_classes, "batch_size": self.batch_size,
                  "iterations": self.iterations, "sigma": self.sigma, "queries": self.queries}
        return {"mode": "DP", "parameters": params, "epsilon": _json_float(eps), "delta": self.delta,
                "q_opt": _json_float(order)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def render(self) -> str:
        d = self.to_dict()
        lines = [f"mode: {d['mode']}"]
        lines += [f"  {k}: {v}" for k, v in d["parameters"].items()]
        lines.append(f"epsilon: {d['epsilon']}")
        lines.append(f"delta: {d['delta']}")
        if d["q_opt"] is not None:
            lines.append(f"optimal order: {d['q_opt']}")
        return "\n".join(lines)


def _json_float(x: float):
    if x is None or math.isnan(x):
        return None
    if math.isinf(x):
        return "inf"
    return x
