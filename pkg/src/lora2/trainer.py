"""Training loop: Adam on factors and rank rates, per-step rank refresh, sweeps."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import active_param_count, refresh_rank
from .checkpoint import encode
from .config import TrainConfig
from .losses import (
    LossBreakdown,
    attention_entropy_loss,
    mse_loss,
    rank_reg_loss,
    total_loss,
    weight_prior_loss,
)
from .rank import nu_target
from .toy import Dataset, Teacher, ToyNet, ToyNetSpec, build_toy_net, plant_teacher, sample_dataset

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Loss went non-finite; ``diagnostics`` holds the state at the failing step."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class Adam:
    """Bias-corrected Adam over whole parameter buffers.

    Moments live per buffer entry, so slots that carry no gradient and have
    zeroed moments never move.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, lrs=None):
        self.params = list(params)
        self.lr = lr
        self.lrs = dict(lrs or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.value) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        adam_update(self.params, [p.grad for p in self.params], self, self.t)

    def reset_slots(self, layer, lo: int, hi: int) -> None:
        for p, sl in ((layer.b, np.s_[:, lo:hi]), (layer.a, np.s_[lo:hi])):
            if id(p) in self.m:
                self.m[id(p)][sl] = 0.0
                self.v[id(p)][sl] = 0.0


def adam_update(params, grads, state: Adam, step: int) -> None:
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, g in zip(params, grads):
        k = id(p)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = state.lrs.get(k, state.lr)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Task:
    """Everything a run needs besides the config: student, teacher, data."""

    model: ToyNet
    teacher: Teacher
    data: Dataset


def build_task(config: TrainConfig, spec: ToyNetSpec = ToyNetSpec()) -> Task:
    fixed = config.fixed_rank
    model = build_toy_net(
        spec,
        seed=config.seed,
        r_init=fixed if fixed is not None else config.r_init,
        q=config.q,
        r_max=config.r_max,
        fixed=fixed is not None,
        grow_b_random=config.grow_b_random,
    )
    teacher = plant_teacher(model, config.planted_ranks, config.teacher_scale, seed=config.seed)
    data = sample_dataset(teacher, config.n_train, config.sigma_obs, seed=config.seed)
    return Task(model, teacher, data)


def make_optimizer(model: ToyNet, config: TrainConfig) -> Adam:
    params = model.parameters()
    lrs = {id(l.rank.raw): config.nu_lr for l in model.layers if not l.fixed}
    return Adam(params, config.learning_rate, lrs=lrs)


def compute_losses(model: ToyNet, x, c, y, config: TrainConfig) -> LossBreakdown:
    pred, maps = model.forward(x, c)
    mse = mse_loss(pred, y)
    entropy = attention_entropy_loss(maps)
    reg, per_layer = None, []
    adaptive = [l for l in model.layers if not l.fixed]
    if adaptive:
        tgt = nu_target(config.q, config.r_target)
        reg = rank_reg_loss([l.rank.nu_var() for l in adaptive], tgt)
        per_layer = [abs(l.rank.nu - tgt) for l in adaptive]
    weight = weight_prior_loss(model.layers, config.sigma_theta)
    return total_loss(
        mse, reg, entropy, weight,
        config.lambda_r, config.lambda_e, config.lambda_w,
        per_layer_reg=per_layer,
    )


def _diagnostics(model: ToyNet, step: int) -> dict:
    return {
        "step": step,
        "layers": {
            l.name: {
                "nu": l.rank.nu,
                "d": l.d,
                "b_norm": float(np.linalg.norm(l.b.value)),
                "a_norm": float(np.linalg.norm(l.a.value)),
            }
            for l in model.layers
        },
    }


def train_step(model: ToyNet, batch, config: TrainConfig, step: int, optimizer: Adam,
               resize_log: list | None = None) -> LossBreakdown:
    """One optimisation step; ``step`` counts from 1.

    forward -> total loss -> backward -> Adam -> rank refresh (every
    ``rank_refresh_interval`` steps).
    """
    x, c, y = batch
    out = compute_losses(model, x, c, y, config)
    if not math.isfinite(out.total):
        diag = _diagnostics(model, step)
        raise TrainingAborted(f"non-finite loss at step {step}: {out.as_row()}", diag)
    ad.zero_grads(optimizer.params)
    ad.backward(out.total_var)
    optimizer.step()
    if step % config.rank_refresh_interval == 0:
        for layer in model.layers:
            report = refresh_rank(layer)
            if report.changed:
                optimizer.reset_slots(layer, min(report.old_d, report.new_d),
                                      max(report.old_d, report.new_d))
                if resize_log is not None:
                    resize_log.append((step, layer.name, report.old_d, report.new_d))
    out.total_var = None
    return out


def evaluate(model: ToyNet, data: Dataset) -> dict[str, float]:
    """Full-dataset MSE and mean cross-attention entropy."""
    pred, maps = model.forward(data.x, data.c)
    return {
        "mse": mse_loss(pred, data.y).item(),
        "entropy": attention_entropy_loss(maps).item(),
    }


@dataclass
class TrainHistory:
    config: TrainConfig
    layer_names: list[str]
    layer_kinds: list[str]
    rows: list[dict] = field(default_factory=list)
    ranks: list[list[int]] = field(default_factory=list)
    nus: list[list[float]] = field(default_factory=list)
    resizes: list[tuple] = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    checkpoint: bytes = b""
    model: ToyNet | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final_ranks(self) -> list[int]:
        return [l.d for l in self.model.layers] if self.model else (self.ranks[-1] if self.ranks else [])


def train_run(config: TrainConfig, task: Task | None = None) -> TrainHistory:
    """Train a fresh student against the planted teacher; deterministic given ``seed``."""
    task = task or build_task(config)
    model, data = task.model, task.data
    opt = make_optimizer(model, config)
    rng = np.random.default_rng([config.seed, 4])
    hist = TrainHistory(config, [l.name for l in model.layers], [l.kind for l in model.layers],
                        model=model)
    hist.initial = evaluate(model, data) | active_param_count(model)
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(data), size=config.batch_size, replace=False)
        out = train_step(model, data.batch(idx), config, step, opt, hist.resizes)
        counts = active_param_count(model)
        hist.rows.append(
            {"step": step, **out.as_row(), "active_params": counts["params"],
             "bytes": counts["bytes"], "wall_time": time.perf_counter() - t0}
        )
        hist.ranks.append([l.d for l in model.layers])
        hist.nus.append([l.rank.nu for l in model.layers])
    hist.final = evaluate(model, data) | active_param_count(model)
    hist.checkpoint = encode(model)
    log.info("run done: mse %.4g -> %.4g, ranks %s", hist.initial["mse"], hist.final["mse"],
             hist.final_ranks)
    return hist


@dataclass
class SweepRow:
    label: str
    rank: int | None
    final_mse: float
    params: int
    bytes: int
    ranks: list[int]


def sweep(config: TrainConfig, ranks=(8, 16, 32, 64, 128, 256, 512)) -> list[SweepRow]:
    """One fixed-rank run per entry of ``ranks`` plus one adaptive run."""
    rows = []
    for r in ranks:
        if not 1 <= r <= config.r_max:
            raise ValueError(f"sweep rank {r} outside [1, {config.r_max}]")
        h = train_run(config.replace(mode=f"fixed_rank({r})"))
        rows.append(SweepRow(f"fixed_rank({r})", r, h.final["mse"], h.final["params"],
                             h.final["bytes"], h.final_ranks))
    h = train_run(config.replace(mode="adaptive"))
    rows.append(SweepRow("adaptive", None, h.final["mse"], h.final["params"], h.final["bytes"],
                         h.final_ranks))
    return rows
