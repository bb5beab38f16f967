"""Desk-scale conditional network and planted-rank teacher.

Each sample is ``n_slots`` token vectors of width ``d_model`` (flattened to a
row of ``n_slots * d_model``) plus ``k_tokens`` condition tokens.  The net is

    self-attention (Q, K, V, O) -> cross-attention (Q, K, V, O) -> linear MLP

with residual connections, every linear carrying one adapter.  Tokens are
stored as matrix columns throughout so that every layer computes ``W x``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import KINDS, AdaptiveLoraLayer, FrozenLinear, adapted_forward, init_adapter

DEFAULT_PLANTED_RANKS = (1, 2, 4, 8, 2, 1, 4, 2, 6)


@dataclass(frozen=True)
class ToyNetSpec:
    d_model: int = 32
    k_tokens: int = 4
    d_cond: int = 32
    n_slots: int = 4

    def __post_init__(self):
        if min(self.d_model, self.k_tokens, self.d_cond, self.n_slots) < 1:
            raise ValueError(f"all toy dimensions must be positive: {self}")

    @property
    def width(self) -> int:
        return self.n_slots * self.d_model

    def layer_shape(self, kind: str) -> tuple[int, int]:
        if kind in ("cross_attn_k", "cross_attn_v"):
            return self.d_model, self.d_cond
        return self.d_model, self.d_model


class ToyNet:
    def __init__(self, spec: ToyNetSpec, layers: list[AdaptiveLoraLayer]):
        self.spec = spec
        self.layers = layers
        self._by_kind = {l.kind: l for l in layers}

    def parameters(self) -> list[ad.Variable]:
        return [p for l in self.layers for p in l.parameters()]

    def layer(self, kind: str) -> AdaptiveLoraLayer:
        return self._by_kind[kind]

    def forward(self, x, c, adapters: bool = True) -> tuple[ad.Variable, list[ad.Variable]]:
        """Predict ``[N, width]`` outputs and return the cross-attention map.

        ``x`` is ``[N, n_slots * d_model]``, ``c`` is ``[N, k_tokens, d_cond]``.
        The single cross-attention map stacks every sample's ``[n_slots, k_tokens]``
        probabilities row-wise.
        """
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != s.width:
            raise ad.ShapeError(f"inputs must be [N, {s.width}], got {x.shape}")
        if c.shape != (x.shape[0], s.k_tokens, s.d_cond):
            raise ad.ShapeError(f"conditions must be [N, {s.k_tokens}, {s.d_cond}], got {c.shape}")
        n = x.shape[0]
        tokens = ad.Variable(x.reshape(n * s.n_slots, s.d_model).T)
        cond = ad.Variable(c.reshape(n * s.k_tokens, s.d_cond).T)

        def lin(kind, v):
            layer = self._by_kind[kind]
            return adapted_forward(layer, v) if adapters else layer.base.forward(v)

        inv = 1.0 / math.sqrt(s.d_model)

        def attend(q, k, v, nq, nk):
            outs, maps = [], []
            for i in range(n):
                qi = ad.slice_cols(q, i * nq, (i + 1) * nq)
                ki = ad.slice_cols(k, i * nk, (i + 1) * nk)
                vi = ad.slice_cols(v, i * nk, (i + 1) * nk)
                p = ad.softmax_rows(ad.scale(ad.matmul(ad.transpose(qi), ki), inv))
                outs.append(ad.matmul(vi, ad.transpose(p)))
                maps.append(p)
            return ad.concat_cols(outs), maps

        h = tokens
        sa, _ = attend(lin("self_attn_q", h), lin("self_attn_k", h), lin("self_attn_v", h),
                       s.n_slots, s.n_slots)
        h = ad.add(h, lin("self_attn_o", sa))
        ca, maps = attend(lin("cross_attn_q", h), lin("cross_attn_k", cond),
                          lin("cross_attn_v", cond), s.n_slots, s.k_tokens)
        h = ad.add(h, lin("cross_attn_o", ca))
        h = ad.add(h, lin("mlp", h))
        pred = ad.reshape(ad.transpose(h), (n, s.width))
        return pred, [ad.concat_rows(maps)]

    def predict(self, x, c, adapters: bool = True) -> np.ndarray:
        return self.forward(x, c, adapters)[0].value


def build_toy_net(
    spec: ToyNetSpec = ToyNetSpec(),
    seed: int = 0,
    *,
    r_init: int = 4,
    q: float = 0.9,
    r_max: int = 512,
    fixed: bool = False,
    grow_b_random: bool = False,
) -> ToyNet:
    """Gaussian frozen base (std 1/sqrt(fan_in)) with one fresh adapter per linear.

    Base weights depend only on ``seed``; adapter draws use a separate stream,
    so nets differing only in adapter settings share the same base.
    """
    base_rng = np.random.default_rng([seed, 0])
    layers = []
    for idx, kind in enumerate(KINDS):
        m, n = spec.layer_shape(kind)
        w = base_rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n))
        base = FrozenLinear(w, name=kind, kind=kind)
        layers.append(
            init_adapter(base, r_init, q, r_max, np.random.default_rng([seed, 1, idx]),
                         fixed=fixed, grow_b_random=grow_b_random)
        )
    return ToyNet(spec, layers)


@dataclass
class Teacher:
    net: ToyNet
    deltas: dict[str, np.ndarray]
    ranks: dict[str, int]
    scale: float
    seed: int

    def forward(self, x, c) -> np.ndarray:
        return self.net.predict(x, c, adapters=False)

    def cross_attention(self, x, c) -> np.ndarray:
        return self.net.forward(x, c, adapters=False)[1][0].value


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    # sign fix makes the factor a deterministic function of the draw
    return q * np.sign(np.diag(r))


def plant_teacher(
    model: ToyNet, ranks=DEFAULT_PLANTED_RANKS, scale: float = 0.5, seed: int = 0
) -> Teacher:
    """Frozen copy of ``model``'s base with ``scale * B* A*`` added per layer.

    ``B*`` and ``A*`` have orthonormal columns/rows, so every planted delta has
    exactly its declared rank with all nonzero singular values equal to ``scale``.
    """
    ranks = list(ranks)
    if len(ranks) != len(model.layers):
        raise ValueError(f"need {len(model.layers)} planted ranks, got {len(ranks)}")
    rng = np.random.default_rng([seed, 2])
    net = copy.deepcopy(model)
    deltas, declared = {}, {}
    for layer, r in zip(net.layers, ranks):
        m, n = layer.base.m, layer.base.n
        if not 0 <= r <= min(m, n):
            raise ValueError(f"{layer.name}: planted rank {r} exceeds min({m}, {n})")
        if r == 0:
            delta = np.zeros((m, n))
        else:
            delta = scale * _orthonormal(rng, m, r) @ _orthonormal(rng, n, r).T
        layer.base = FrozenLinear(layer.base.w_star + delta, layer.name, layer.kind)
        deltas[layer.name] = delta
        declared[layer.name] = r
    return Teacher(net, deltas, declared, scale, seed)


@dataclass
class Dataset:
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    seed: int = 0
    sigma_obs: float = 0.0

    def __len__(self) -> int:
        return self.x.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.x[idx], self.c[idx], self.y[idx]

    @property
    def nbytes(self) -> int:
        return self.x.nbytes + self.c.nbytes + self.y.nbytes

    def to_csv(self, path) -> None:
        """One row per sample: inputs, flattened conditions, then targets."""
        s_x, s_c, s_y = self.x.shape[1], self.c.shape[1] * self.c.shape[2], self.y.shape[1]
        header = ([f"x{i}" for i in range(s_x)] + [f"c{i}" for i in range(s_c)]
                  + [f"y{i}" for i in range(s_y)])
        rows = np.hstack([self.x, self.c.reshape(len(self), -1), self.y])
        np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="",
                   fmt="%.17g")


def sample_dataset(teacher: Teacher, n: int = 256, sigma_obs: float = 0.0, seed: int = 0) -> Dataset:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    spec = teacher.net.spec
    rng = np.random.default_rng([seed, 3])
    x = rng.normal(size=(n, spec.width))
    c = rng.normal(size=(n, spec.k_tokens, spec.d_cond))
    y = teacher.forward(x, c)
    if sigma_obs > 0:
        y = y + rng.normal(0.0, sigma_obs, size=y.shape)
    return Dataset(x, c, y, seed, sigma_obs)
