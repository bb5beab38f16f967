"""Training losses and the closed-form prior diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

# keeps 0 * log(0) at exactly 0 without producing nan gradients
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class HyperPrior:
    mu_lambda: float = 0.0
    sigma_lambda: float = 1.0
    sigma_theta: float = 1.0

    def __post_init__(self):
        if not (self.sigma_lambda > 0 and self.sigma_theta > 0):
            raise ValueError("prior standard deviations must be positive")


@dataclass
class LossBreakdown:
    mse: float
    reg: float
    entropy: float
    weight: float
    total: float
    per_layer_reg: list[float] = field(default_factory=list)
    total_var: ad.Variable | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return dict(
            total=self.total, mse=self.mse, reg=self.reg, entropy=self.entropy, weight=self.weight
        )


def mse_loss(pred: ad.Variable, target) -> ad.Variable:
    """Mean over rows of the squared Euclidean row error."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    return ad.scale(ad.sum_all(ad.square(ad.subtract(pred, ad.Variable(target)))), 1.0 / n)


def rank_reg_loss(nus: Sequence[ad.Variable], nu_tgt: float) -> ad.Variable:
    if not nu_tgt > 0:
        raise ValueError(f"target rate must be positive, got {nu_tgt}")
    stacked = ad.concat_rows(list(nus))
    return ad.sum_all(ad.abs_(ad.add_scalar(stacked, -nu_tgt)))


def attention_entropy_loss(maps: Sequence[ad.Variable]) -> ad.Variable:
    """Mean over maps of the row-averaged Shannon entropy (nats)."""
    if not maps:
        raise ValueError("attention_entropy_loss needs at least one attention map")
    terms = []
    for p in maps:
        rows = p.value.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-9:
            raise ValueError("attention map rows must sum to 1")
        plogp = ad.multiply(p, ad.log(ad.add_scalar(p, _LOG_FLOOR)))
        terms.append(ad.scale(ad.sum_all(plogp), -1.0 / p.shape[0]))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return ad.scale(out, 1.0 / len(terms))


def _active_factors(layer) -> list[ad.Variable]:
    d = layer.d
    return [ad.slice_cols(layer.b, 0, d), ad.slice_rows(layer.a, 0, d)]


def weight_prior_loss(layers, sigma_theta: float = 1.0) -> ad.Variable:
    """Gaussian-prior penalty sum(w^2) / (2 sigma^2) over live factor entries."""
    if not sigma_theta > 0:
        raise ValueError("sigma_theta must be positive")
    parts = [ad.sum_all(ad.square(f)) for layer in layers for f in _active_factors(layer)]
    out = ad.Variable(0.0)
    for p in parts:
        out = ad.add(out, p)
    return ad.scale(out, 1.0 / (2.0 * sigma_theta**2))


def total_loss(
    mse: ad.Variable,
    reg: ad.Variable | None = None,
    entropy: ad.Variable | None = None,
    weight: ad.Variable | None = None,
    lambda_r: float = 0.0,
    lambda_e: float = 0.0,
    lambda_w: float = 0.0,
    per_layer_reg: Sequence[float] = (),
) -> LossBreakdown:
    """Compose ``mse + lambda_r reg + lambda_e entropy + lambda_w weight``.

    Missing terms count as zero; they are still reported when given even if
    their weight is zero.
    """
    if min(lambda_r, lambda_e, lambda_w) < 0:
        raise ValueError("loss weights must be non-negative")
    total = mse
    for term, lam in ((reg, lambda_r), (entropy, lambda_e), (weight, lambda_w)):
        if term is not None and lam != 0.0:
            total = ad.add(total, ad.scale(term, lam))

    def val(v):
        return 0.0 if v is None else v.item()

    return LossBreakdown(
        mse=val(mse),
        reg=val(reg),
        entropy=val(entropy),
        weight=val(weight),
        total=total.item(),
        per_layer_reg=list(per_layer_reg),
        total_var=total,
    )


def variational_diagnostic(nus: Sequence[float], layers, prior: HyperPrior) -> dict[str, float]:
    """Log prior-to-posterior ratios at the variational means.

    The unit-variance posterior densities evaluated at their own means are
    constant and cancel, leaving the Gaussian log prior terms.
    """
    s_l, s_t = prior.sigma_lambda, prior.sigma_theta
    rank_term = sum(-math.log(s_l) - (nu - prior.mu_lambda) ** 2 / (2 * s_l**2) for nu in nus)
    sq = 0.0
    count = 0
    for layer in layers:
        for w in (layer.b_active(), layer.a_active()):
            sq += float(np.sum(w * w))
            count += w.size
    weight_term = -count * math.log(s_t) - sq / (2 * s_t**2)
    return {"rank_term": rank_term, "weight_term": weight_term, "entries": count}
