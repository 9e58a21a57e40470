"""Warmup plus main training loop with Adam and step LR decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoders
from .dataset import PairFeatures, batches
from .diagnostics import (EpochMonitor, ExperimentRecord, FiltrationQuality, Histogram,
                          LOSS_NAMES, retrieval_metrics)
from .diffkernel import Tape
from .encoders import EncoderParams
from .losses import Components, SremHyper, total_objective

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs_total: int = 50
    warmup_epochs: int = 5
    batch_size: int = 128
    lr: float = 2e-4
    lr_decay_factor: float = 0.1
    lr_decay_epoch: int = 25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 2.0
    reset_adam_after_warmup: bool = False
    seed: int = 0
    embed_dim: int = 32
    hidden_dim: int | None = None
    logit_scale: float = 10.0
    learn_scale: bool = False
    hyper: SremHyper = field(default_factory=SremHyper)
    components: Components = field(default_factory=Components)

    def problems(self) -> list[str]:
        out = []
        if self.epochs_total < 1:
            out.append(f"epochs_total must be >= 1, got {self.epochs_total}")
        if not 0 <= self.warmup_epochs < self.epochs_total:
            out.append(f"warmup_epochs ({self.warmup_epochs}) must be below epochs_total ({self.epochs_total})")
        if not self.lr > 0:
            out.append(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            out.append(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            out.append("adam betas must lie in [0, 1)")
        if not self.logit_scale > 0:
            out.append(f"logit_scale must be positive, got {self.logit_scale}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            out.append(f"grad_clip must be positive, got {self.grad_clip}")
        return out

    def phase(self, epoch: int) -> str:
        return "warmup" if epoch <= self.warmup_epochs else "train"

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor if epoch > self.lr_decay_epoch else self.lr


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and advances ``state``."""
    t = state.step + 1
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at step {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.step = t
    return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


@dataclass
class TrainResult:
    best_params: EncoderParams
    final_params: EncoderParams
    records: list[ExperimentRecord]
    best_epoch: int
    best_val_r_sum: float


def train_step(params: EncoderParams, image_feats, text_feats, config: TrainConfig,
               phase: str, state: AdamState, lr: float):
    tape = Tape()
    logits, bound = encoders.forward(params, image_feats, text_feats, tape, trainable=True)
    breakdown = total_objective(logits, config.hyper, phase, config.components)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss {breakdown.total}")
    tape.backward(breakdown.objective)
    grads = clip_global_norm({name: bound[name].grad for name in params.names}, config.grad_clip)
    new = adam_step(params.values(), grads, state, lr,
                    config.adam_beta1, config.adam_beta2, config.adam_eps)
    params.update(new)
    return breakdown, logits.F.value


def run_training(config: TrainConfig, train: PairFeatures, val=None,
                 monitor: EpochMonitor | None = None, on_epoch=None) -> TrainResult:
    """Train from scratch. ``val`` is ``(image_feats, text_feats)`` in matched order."""
    problems = config.problems() + config.hyper.problems()
    if problems:
        raise ValueError("invalid training config: " + "; ".join(problems))
    params = encoders.init_params(train.image_feats.shape[1], train.text_feats.shape[1],
                                  config.embed_dim, config.hidden_dim, config.seed,
                                  config.logit_scale, config.learn_scale)
    state = AdamState()
    records: list[ExperimentRecord] = []
    best_params, best_epoch, best_r_sum = params.copy(), 0, -np.inf
    empty_hist = Histogram(np.zeros(0, dtype=np.int64), np.zeros(0))

    for epoch in range(1, config.epochs_total + 1):
        phase = config.phase(epoch)
        lr = config.lr_at(epoch)
        if config.reset_adam_after_warmup and phase == "train" and config.phase(epoch - 1) == "warmup":
            state = AdamState()
        sums = dict.fromkeys(LOSS_NAMES, 0.0)
        plan = batches(len(train), config.batch_size, epoch_seed(config.seed, epoch))
        for b, idx in enumerate(plan):
            img, txt = train.take(idx)
            try:
                breakdown, F = train_step(params, img, txt, config, phase, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            for name in LOSS_NAMES:
                sums[name] += getattr(breakdown, name)
            if monitor is not None:
                monitor.observe(epoch, idx, breakdown, F)

        if val is not None:
            metrics = retrieval_metrics(encoders.similarity_matrix(params, *val))
        else:
            metrics = {f"{d}_r{k}": 0.0 for d in ("i2t", "t2i") for k in (1, 5, 10)}
            metrics["r_sum"] = 0.0
        diag = monitor.finish() if monitor is not None else {}
        r_sum = metrics.pop("r_sum")
        # the noisy-gradient ratio is reported for post-warmup epochs only
        ratio = diag.get("noisy_grad_ratio") if phase == "train" else None
        record = ExperimentRecord(
            epoch=epoch, phase=phase, lr=lr, r_at=metrics, r_sum=r_sum,
            noisy_grad_ratio=ratio,
            energy_hist_clean=diag.get("energy_hist_clean", empty_hist),
            energy_hist_noisy=diag.get("energy_hist_noisy", empty_hist),
            filtration=diag.get("filtration", FiltrationQuality(None, 0.0, None)),
            losses={k: v / len(plan) for k, v in sums.items()},
            energy_mean_clean=diag.get("energy_mean_clean"),
            energy_mean_noisy=diag.get("energy_mean_noisy"),
            energy_overlap=diag.get("energy_overlap"),
            n_batches=len(plan),
        )
        records.append(record)
        log.info("epoch %d (%s) lr=%g loss=%.4f r_sum=%.4f", epoch, phase, lr,
                 record.losses["total"], r_sum)
        if r_sum > best_r_sum:
            best_params, best_epoch, best_r_sum = params.copy(), epoch, r_sum
        if on_epoch is not None:
            on_epoch(record, params)

    return TrainResult(best_params, params.copy(), records, best_epoch, float(best_r_sum))
