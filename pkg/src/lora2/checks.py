"""Finite-difference and property suites behind ``lora2 gradcheck`` / ``lora2 selftest``."""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import FrozenLinear, adapted_forward, delta_weight, init_adapter, refresh_rank
from .checkpoint import checkpoint_size, save_checkpoint
from .losses import (
    attention_entropy_loss,
    mse_loss,
    rank_reg_loss,
    total_loss,
    weight_prior_loss,
)
from .rank import effective_rank, nu_target, pmf, truncated_mass


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    ok: bool

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<40s} {self.value:.3e} (tol {self.tol:.0e})"


def random_layer(rng: np.random.Generator, m=None, n=None, d=None, r_max=8):
    """Small adapter with nonzero ``B`` and a rate comfortably away from any rank boundary."""
    m = m or int(rng.integers(2, 7))
    n = n or int(rng.integers(2, 7))
    d = d or int(rng.integers(1, 5))
    base = FrozenLinear(rng.normal(size=(m, n)) / math.sqrt(n), "probe", "mlp")
    layer = init_adapter(base, d, 0.9, r_max, rng)
    layer.b.value[:, :d] = rng.normal(size=(m, d))
    # keep d unchanged by the perturbations below
    layer.rank.set_nu(nu_target(0.9, d) * float(rng.uniform(0.93, 0.99)))
    layer.rank.d = d
    return layer


def layer_total_loss(layer, x, y, nu=None, lambdas=(1e-1, 1e-1, 1e-2), nu_tgt=0.3):
    """L_total of one adapter whose output rows also feed a softmax attention map."""
    out = adapted_forward(layer, x, nu=nu)
    pred = ad.transpose(out)
    nu_node = layer.rank.nu_var() if nu is None else nu
    maps = [ad.softmax_rows(pred)]
    return total_loss(
        mse_loss(pred, y),
        rank_reg_loss([nu_node], nu_tgt),
        attention_entropy_loss(maps),
        weight_prior_loss([layer]),
        *lambdas,
    ).total_var


def gradcheck_suite(trials: int = 50, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Finite-difference checks of L_total wrt B, A and nu, plus entropy wrt logits."""
    rng = np.random.default_rng(seed)
    worst = {"B": 0.0, "A": 0.0, "nu": 0.0, "entropy": 0.0}
    for _ in range(trials):
        layer = random_layer(rng)
        batch = int(rng.integers(1, 4))
        x = ad.Variable(rng.normal(size=(layer.base.n, batch)))
        y = rng.normal(size=(batch, layer.base.m))

        b0 = layer.b

        def f_b(v):
            layer.b = v
            try:
                return layer_total_loss(layer, x, y)
            finally:
                layer.b = b0

        worst["B"] = max(worst["B"], ad.grad_check(f_b, b0.value.copy(), h))

        a0 = layer.a

        def f_a(v):
            layer.a = v
            try:
                return layer_total_loss(layer, x, y)
            finally:
                layer.a = a0

        worst["A"] = max(worst["A"], ad.grad_check(f_a, a0.value.copy(), h))
        worst["nu"] = max(
            worst["nu"],
            ad.grad_check(lambda v: layer_total_loss(layer, x, y, nu=v), [[layer.rank.nu]], h),
        )
        logits = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(2, 6))))
        worst["entropy"] = max(
            worst["entropy"],
            ad.grad_check(lambda v: attention_entropy_loss([ad.softmax_rows(v)]), logits, h),
        )
    tols = {"B": 1e-4, "A": 1e-4, "nu": 1e-4, "entropy": 1e-5}
    return [
        CheckResult(f"grad L_total wrt {k} ({trials} layers)" if k != "entropy"
                    else f"grad entropy wrt logits ({trials} maps)", v, tols[k], v <= tols[k])
        for k, v in worst.items()
    ]


def property_suite(seed: int = 0) -> list[CheckResult]:
    """Fast structural checks: rank controller, init, resize, checkpoint size."""
    rng = np.random.default_rng(seed)
    results = []

    misses = sum(
        effective_rank(nu_target(q, r), q, 512) != r for q in (0.5, 0.9, 0.99) for r in range(1, 513)
    )
    results.append(CheckResult("effective_rank(nu_target(q, r)) == r", misses, 0, misses == 0))

    nus = rng.uniform(1e-4, 10, 2000)
    ds = rng.integers(1, 513, 2000)
    tel = max(
        abs(sum(pmf(j, nu) for j in range(1, d + 1)) - truncated_mass(nu, d))
        for nu, d in zip(nus, ds)
    )
    results.append(CheckResult("telescoping sum vs closed form", tel, 1e-12, tel <= 1e-12))

    zero_bad = 0
    grow_bad = 0
    bound_slack = math.inf
    for _ in range(100):
        layer = random_layer(rng, r_max=16)
        fresh = init_adapter(layer.base, layer.d, 0.9, 16, rng)
        x = ad.Variable(rng.normal(size=(layer.base.n, 3)))
        zero_bad += not np.array_equal(
            adapted_forward(fresh, x).value, layer.base.forward(x).value
        )
        layer.rank.set_nu(nu_target(0.9, min(layer.d + 3, 16)))
        before = adapted_forward(layer, x).value
        refresh_rank(layer, rng)
        grow_bad += not np.array_equal(adapted_forward(layer, x).value, before)
        # shrink back and compare with the column-wise bound at the shrink-time rate
        layer.b.value[:, : layer.d] = rng.normal(size=(layer.base.m, layer.d))
        d_old = layer.d
        layer.rank.set_nu(nu_target(0.9, 1 + int(rng.integers(0, d_old))))
        f = [pmf(j, layer.rank.nu) for j in range(1, d_old + 1)]
        bound = sum(
            f[j] * np.linalg.norm(layer.b.value[:, j]) * np.linalg.norm(layer.a.value[j])
            for j in range(layer.rank.target_rank(), d_old)
        )
        dw_before = delta_weight(layer).value
        refresh_rank(layer, rng)
        dw_after = delta_weight(layer).value
        change = abs(np.linalg.norm(dw_before) - np.linalg.norm(dw_after))
        bound_slack = min(bound_slack, bound * (1 + 1e-12) - change)
    results.append(CheckResult("zero-init output equals base (bitwise)", zero_bad, 0, zero_bad == 0))
    results.append(CheckResult("growth leaves output unchanged (bitwise)", grow_bad, 0, grow_bad == 0))
    results.append(CheckResult("shrink change within truncation bound", -bound_slack, 0,
                               bound_slack >= 0))

    size_bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(20):
            layers = [random_layer(rng) for _ in range(int(rng.integers(0, 4)))]
            for k, l in enumerate(layers):
                l.base.name = f"layer{k}"
            written = save_checkpoint(layers, Path(tmp) / f"m{i}.alr2")
            size_bad += not (written == checkpoint_size(layers)
                             == (Path(tmp) / f"m{i}.alr2").stat().st_size)
    results.append(CheckResult("checkpoint size formula", size_bad, 0, size_bad == 0))
    return results
