"""Adaptive-rank LoRA layer: ``W* x + B (Lambda (A x))``.

Factor storage is allocated once at capacity ``r_max``.  Only the first ``d``
columns of ``B`` and rows of ``A`` are live; the rest are held at zero and the
forward pass always contracts over the full capacity, so growing the rank
(with zero new ``B`` columns) leaves outputs bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .rank import RankParameter, effective_rank, importance_diagonal, kaiming_std, nu_target

KINDS = (
    "self_attn_q",
    "self_attn_k",
    "self_attn_v",
    "self_attn_o",
    "cross_attn_q",
    "cross_attn_k",
    "cross_attn_v",
    "cross_attn_o",
    "mlp",
)


@dataclass(eq=False)
class FrozenLinear:
    w_star: np.ndarray
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.w_star = np.asarray(self.w_star, dtype=np.float64)
        if self.w_star.ndim != 2 or 0 in self.w_star.shape:
            raise ValueError(f"{self.name}: degenerate weight shape {self.w_star.shape}")
        self._var = ad.Variable(self.w_star)

    @property
    def m(self) -> int:
        return self.w_star.shape[0]

    @property
    def n(self) -> int:
        return self.w_star.shape[1]

    def forward(self, x: ad.Variable) -> ad.Variable:
        return ad.matmul(self._var, x)


@dataclass
class ResizeReport:
    old_d: int
    new_d: int

    @property
    def changed(self) -> bool:
        return self.old_d != self.new_d


class AdaptiveLoraLayer:
    """Frozen linear map plus a rank-adaptive low-rank update.

    In ``fixed`` mode the layer is plain LoRA: the importance diagonal is
    dropped (``delta = B A``) and the rank never changes.
    """

    def __init__(
        self,
        base: FrozenLinear,
        rank: RankParameter,
        b: np.ndarray,
        a: np.ndarray,
        *,
        fixed: bool = False,
        grow_b_random: bool = False,
        rng: np.random.Generator | None = None,
    ):
        self.base = base
        self.rank = rank
        self.b = ad.Variable(b, requires_grad=True, name=f"{base.name}.B")
        self.a = ad.Variable(a, requires_grad=True, name=f"{base.name}.A")
        self.fixed = fixed
        self.grow_b_random = grow_b_random
        self.rng = rng if rng is not None else np.random.default_rng()
        self.generation = 0

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def kind(self) -> str:
        return self.base.kind

    @property
    def d(self) -> int:
        return self.rank.d

    @property
    def capacity(self) -> int:
        return self.b.shape[1]

    def parameters(self) -> list[ad.Variable]:
        if self.fixed:
            return [self.b, self.a]
        return [self.b, self.a, self.rank.raw]

    def b_active(self) -> np.ndarray:
        return self.b.value[:, : self.d]

    def a_active(self) -> np.ndarray:
        return self.a.value[: self.d]

    def importance(self, nu: ad.Variable | None = None) -> ad.Variable:
        """Full-capacity diagonal: f(1..d; nu) followed by zeros.

        ``nu`` overrides the layer's own rate node (gradient checks use this).
        """
        if self.fixed:
            diag = np.zeros((self.capacity, 1))
            diag[: self.d] = 1.0
            return ad.Variable(diag)
        lam = importance_diagonal(self.rank.nu_var() if nu is None else nu, self.d)
        pad = self.capacity - self.d
        if pad == 0:
            return lam
        return ad.concat_rows([lam, ad.Variable(np.zeros((pad, 1)))])

    def __repr__(self) -> str:
        return (
            f"AdaptiveLoraLayer({self.name!r}, {self.base.m}x{self.base.n}, d={self.d}, "
            f"nu={self.rank.nu:.4g}, fixed={self.fixed})"
        )


def init_adapter(
    base: FrozenLinear,
    r_init: int,
    q: float = 0.9,
    r_max: int = 512,
    seed: int | np.random.Generator | None = None,
    *,
    fixed: bool = False,
    grow_b_random: bool = False,
) -> AdaptiveLoraLayer:
    """Fresh adapter with ``B = 0`` and Gaussian ``A`` rows.

    Adaptive layers draw ``A`` with the rescaled Kaiming std at
    ``nu = nu_target(q, r_init)``; fixed-rank layers use plain Kaiming on the
    input width.
    """
    if not 1 <= r_init <= r_max:
        raise ValueError(f"r_init={r_init} must lie in [1, r_max={r_max}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rank = RankParameter(nu_target(q, r_init), q=q, r_max=r_max)
    rank.d = r_init
    std = math.sqrt(2.0 / base.n) if fixed else kaiming_std(rank.nu, r_init)
    b = np.zeros((base.m, r_max))
    a = np.zeros((r_max, base.n))
    a[:r_init] = rng.normal(0.0, std, size=(r_init, base.n))
    return AdaptiveLoraLayer(base, rank, b, a, fixed=fixed, grow_b_random=grow_b_random, rng=rng)


def delta_weight(layer: AdaptiveLoraLayer, nu: ad.Variable | None = None) -> ad.Variable:
    """Dense ``B[:, :d] diag(Lambda) A[:d]``; differentiable in B, A and nu."""
    d = layer.d
    b = ad.slice_cols(layer.b, 0, d)
    a = ad.slice_rows(layer.a, 0, d)
    if layer.fixed:
        return ad.matmul(b, a)
    lam = importance_diagonal(layer.rank.nu_var() if nu is None else nu, d)
    return ad.matmul(b, ad.diag_left(lam, a))


def adapted_forward(
    layer: AdaptiveLoraLayer, x: ad.Variable, nu: ad.Variable | None = None
) -> ad.Variable:
    """``W* x + B (Lambda (A x))`` for ``x`` of shape ``[n, batch]``; never forms ``B Lambda A``."""
    if x.shape[0] != layer.base.n:
        raise ad.ShapeError(
            f"{layer.name}: input has {x.shape[0]} rows, layer expects {layer.base.n}"
        )
    h = ad.diag_left(layer.importance(nu), ad.matmul(layer.a, x))
    return ad.add(layer.base.forward(x), ad.matmul(layer.b, h))


def refresh_rank(
    layer: AdaptiveLoraLayer, seed: int | np.random.Generator | None = None
) -> ResizeReport:
    """Re-derive ``d`` from the current rate and grow or shrink the live slots.

    Growth draws the new ``A`` rows from the rescaled Kaiming law at the new
    ``(nu, d)`` and zeroes the new ``B`` columns (random ones if the layer was
    built with ``grow_b_random``).  Shrinking zeroes the dropped slots.
    """
    old = layer.d
    if layer.fixed:
        return ResizeReport(old, old)
    new = effective_rank(layer.rank.nu, layer.rank.q, layer.rank.r_max)
    if new == old:
        return ResizeReport(old, old)
    rng = layer.rng if seed is None else (
        seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    )
    if new > old:
        std = kaiming_std(layer.rank.nu, new)
        layer.a.value[old:new] = rng.normal(0.0, std, size=(new - old, layer.base.n))
        if layer.grow_b_random:
            layer.b.value[:, old:new] = rng.normal(
                0.0, math.sqrt(2.0 / new), size=(layer.base.m, new - old)
            )
        else:
            layer.b.value[:, old:new] = 0.0
    else:
        layer.a.value[new:old] = 0.0
        layer.b.value[:, new:old] = 0.0
    layer.rank.d = new
    layer.generation += 1
    return ResizeReport(old, new)


def _layers_of(model) -> Iterable[AdaptiveLoraLayer]:
    return model.layers if hasattr(model, "layers") else model


def active_param_count(model) -> dict[str, int]:
    """Live adapter parameters (factors plus one rate per layer) and checkpoint bytes."""
    from .checkpoint import checkpoint_size

    layers = list(_layers_of(model))
    params = sum(l.d * (l.base.m + l.base.n) for l in layers) + len(layers)
    return {"params": params, "bytes": checkpoint_size(layers)}
