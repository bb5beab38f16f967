"""Rank controller: discretized-exponential importances and the rank they imply.

The importance of rank index ``j`` under rate ``nu`` is the mass

    f(j; nu) = (1 - e^{-nu (j+1)}) - (1 - e^{-nu j}) = e^{-nu j} (1 - e^{-nu})

and the effective rank is the ``q``-quantile of that distribution, capped at
the layer's buffer capacity.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

SNAP_TOL = 1e-9


def _check_nu(nu: float) -> None:
    if not nu > 0:
        raise ValueError(f"rank rate must be positive, got {nu}")


def _check_q(q: float) -> None:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")


def pmf(j: int, nu: float) -> float:
    _check_nu(nu)
    if j < 0:
        raise ValueError(f"rank index must be >= 0, got {j}")
    return math.exp(-nu * j) * -math.expm1(-nu)


def effective_rank(nu: float, q: float, r_max: int) -> int:
    """Smallest integer covering ``-ln(1-q)/nu``, clamped to ``[1, r_max]``.

    ``t`` is snapped to the nearest integer when within 1e-9 of it, so that
    ``effective_rank(nu_target(q, r), q, r_max) == r`` despite rounding.
    """
    _check_nu(nu)
    _check_q(q)
    if r_max < 1:
        raise ValueError(f"r_max must be >= 1, got {r_max}")
    t = -math.log1p(-q) / nu
    if not math.isfinite(t):
        return r_max
    nearest = round(t)
    if abs(t - nearest) < SNAP_TOL:
        t = float(nearest)
    return int(min(max(math.ceil(t), 1), r_max))


def nu_target(q: float, r_target: int) -> float:
    _check_q(q)
    if r_target < 1:
        raise ValueError(f"r_target must be >= 1, got {r_target}")
    return -math.log1p(-q) / r_target


def truncated_mass(nu: float, d: int | float) -> float:
    """sum_{j=1}^{d} f(j; nu) in closed form; ``d = math.inf`` gives e^{-nu}."""
    _check_nu(nu)
    if math.isinf(d):
        return math.exp(-nu)
    return math.exp(-nu) - math.exp(-nu * (d + 1))


def importance_values(nu: float, d: int) -> np.ndarray:
    """Plain-float importances f(1..d; nu)."""
    _check_nu(nu)
    j = np.arange(1, d + 1, dtype=np.float64)
    return np.exp(-nu * j) * -math.expm1(-nu)


def importance_diagonal(nu: ad.Variable, d: int) -> ad.Variable:
    """Differentiable column vector [f(1; nu), ..., f(d; nu)].

    ``d`` is a plain integer: the rank itself carries no gradient.
    """
    if d < 1:
        raise ValueError(f"rank must be >= 1, got {d}")
    _check_nu(nu.item())
    j = ad.Variable(np.arange(1, d + 1, dtype=np.float64))
    decay = ad.exp(ad.scale(ad.matmul(j, nu), -1.0))  # e^{-nu j}, d x 1
    head = ad.subtract(ad.Variable(1.0), ad.exp(ad.scale(nu, -1.0)))  # 1 - e^{-nu}
    return ad.matmul(decay, head)


def kaiming_std(nu: float, d: int) -> float:
    """Rescaled Kaiming std: sqrt(2) / sqrt(sum_j f(j)^2)."""
    f = importance_values(nu, d)
    return math.sqrt(2.0) / math.sqrt(float(f @ f))


class RankParameter:
    """Learnable rank rate with softplus positivity and a cached effective rank."""

    def __init__(self, nu: float, q: float = 0.9, r_max: int = 512):
        _check_nu(nu)
        _check_q(q)
        self.q = q
        self.r_max = r_max
        # inverse softplus: log(e^nu - 1)
        self.raw = ad.Variable(0.0, requires_grad=True, name="raw_nu")
        self.set_nu(nu)
        self.d = effective_rank(self.nu, q, r_max)

    @property
    def nu(self) -> float:
        raw = self.raw.item()
        # an explicitly set rate is reported exactly until raw moves
        if raw == self._pinned[0]:
            return self._pinned[1]
        return float(np.logaddexp(0.0, raw))

    def nu_var(self) -> ad.Variable:
        out = ad.softplus(self.raw)
        out.value[...] = self.nu
        return out

    def set_nu(self, nu: float) -> None:
        _check_nu(nu)
        raw = math.log(math.expm1(nu))
        self.raw.value[...] = raw
        self._pinned = (raw, float(nu))

    def target_rank(self) -> int:
        return effective_rank(self.nu, self.q, self.r_max)

    def __repr__(self) -> str:
        return f"RankParameter(nu={self.nu:.6g}, d={self.d}, q={self.q}, r_max={self.r_max})"
