"""Optimizer, learning-rate schedule, training loop and transfer loading."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .audio import load_record
from .curate import duration_filter
from .frontend import AugmentConfig, extract, spec_augment, speed_perturb
from .loss import AAMConfig, aam_loss, compute_class_weights, weight_vector, weighted_ce
from .manifest import UtteranceRecord
from .metrics import TrialScores, bac, eer, micro_acc
from .nn import (Batch, CheckpointError, Model, ModelConfig, ParameterSet, init_params,
                 param_layout, read_checkpoint, save_checkpoint, softmax)
from .nn.params import HEAD_PREFIX

log = logging.getLogger(__name__)

LOSSES = ("ce_equal", "ce_weighted", "aam")
CHECKPOINT_METRICS = ("val_loss", "micro_acc")


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with decoupled weight decay.

    Each tensor moves by ``-lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``,
    both terms evaluated at the pre-step value. Math runs in float64 and is
    stored back in each tensor's own dtype.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p = params[name]
        p64 = np.asarray(p, dtype=np.float64)
        new = p64 - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps) - lr * weight_decay * p64
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"update produced non-finite values in {name}")
        params[name] = new.astype(p.dtype, copy=False)


# --- schedule ------------------------------------------------------------------


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(round(warmup_ratio * total_steps))


def cosine_lr(step: int, total_steps: int, lr: float, min_lr: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup from 0, then cosine annealing to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return lr * step / w
    if total_steps == w:
        return lr
    tau = (step - w) / (total_steps - w)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * tau))


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 100
    warmup_ratio: float = 0.1
    min_lr: float = 1e-7
    min_duration: float = 0.3
    max_duration: float = 16.0
    loss: str = "ce_weighted"
    checkpoint_metric: str = "val_loss"
    keep_top: int = 3
    seed: int = 0
    augment: bool = True
    speed_prob: float = 0.5
    speed_range: tuple[float, float] = (0.95, 1.05)
    freq_masks: int = 3
    freq_width: int = 4
    time_masks: int = 5
    time_width: float = 0.03
    aam_scale: float = 30.0
    aam_margin: float = 0.01
    bn_momentum: float = 0.1
    positive_class: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "speed_range", tuple(self.speed_range))
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 <= self.min_lr <= self.lr:
            raise ValueError("need 0 <= min_lr <= lr")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.checkpoint_metric not in CHECKPOINT_METRICS:
            raise ValueError(f"checkpoint_metric must be one of {CHECKPOINT_METRICS}")
        if self.keep_top < 1:
            raise ValueError("keep_top must be >= 1")

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.speed_prob, self.speed_range, self.freq_masks, self.freq_width,
                             self.time_masks, self.time_width)

    @property
    def aam_config(self) -> AAMConfig:
        return AAMConfig(self.aam_scale, self.aam_margin)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# initial training on the full training pool
INITIAL_RECIPE = TrainConfig()
# fine-tuning on the curated development split
FINETUNE_RECIPE = TrainConfig(batch_size=96, lr=1e-4, weight_decay=1e-3, min_lr=1e-6,
                              max_duration=6.0, loss="ce_equal", checkpoint_metric="micro_acc")
RECIPES = {"initial": INITIAL_RECIPE, "finetune": FINETUNE_RECIPE}


def load_train_config(path, base: TrainConfig = INITIAL_RECIPE) -> TrainConfig:
    """Read a key = value TOML file; an optional ``recipe`` key picks the base."""
    with open(path, "rb") as f:
        d = tomllib.load(f)
    recipe = d.pop("recipe", None)
    if recipe is not None:
        base = RECIPES[recipe]
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    return base.replace(**d)


# --- training loop -------------------------------------------------------------


@dataclass
class CheckpointRecord:
    path: str | None
    epoch: int
    metric: float
    val_eer: float
    config_digest: str
    params: ParameterSet | None = field(default=None, repr=False)


@dataclass
class FitResult:
    checkpoints: list[CheckpointRecord]
    best: CheckpointRecord
    params: ParameterSet
    model_cfg: ModelConfig
    history: list[dict]


def epochs_to_bar(history: Sequence[dict], acc: float = 0.95, max_eer: float = 0.05) -> int | None:
    for row in history:
        if row["val_acc"] >= acc and row["val_eer"] <= max_eer:
            return row["epoch"]
    return None


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a lone utterance gives degenerate batch statistics
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _loss_and_grads(model: Model, cfg: TrainConfig, logits, cache, targets, weights):
    if cfg.loss == "aam":
        P, caches = cache
        loss, demb, dhead = aam_loss(caches["emb"], targets, P["decoder.head.weight"], cfg.aam_config)
        return loss, model.backward(cache, demb=demb, dhead=dhead)
    loss, dlog = weighted_ce(logits, targets, weights)
    return loss, model.backward(cache, dlogits=dlog)


def _val_loss(cfg: TrainConfig, logits, cache, targets, weights) -> float:
    if cfg.loss == "aam":
        P, caches = cache
        return aam_loss(caches["emb"], targets, P["decoder.head.weight"], cfg.aam_config)[0]
    return weighted_ce(logits, targets, weights)[0]


def evaluate(model: Model, params: ParameterSet, feats, targets, cfg: TrainConfig, weights,
             utt_ids, batch_size: int = 64) -> dict:
    logits, losses, sizes = [], [], []
    for i in range(0, len(feats), batch_size):
        b = Batch.from_features(feats[i : i + batch_size])
        lg, cache = model.forward(params, b)
        logits.append(lg)
        losses.append(_val_loss(cfg, lg, cache, targets[i : i + batch_size], weights))
        sizes.append(len(b.lengths))
    logits = np.concatenate(logits)
    trials = TrialScores(utt_ids, softmax(logits, axis=1), targets, model.cfg.labels)
    pos = cfg.positive_class if cfg.positive_class in model.cfg.labels else model.cfg.labels[0]
    return {
        "val_loss": float(np.average(losses, weights=sizes)),
        "val_acc": micro_acc(trials),
        "val_eer": eer(trials, pos),
        "val_bac": bac(trials),
        "trials": trials,
    }


def fit(train_records: Sequence[UtteranceRecord], val_records: Sequence[UtteranceRecord],
        model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, init: ParameterSet | None = None,
        log_path=None) -> FitResult:
    """Train and return the retained top-k checkpoints plus the final model.

    After every epoch the validation set is scored; the ``keep_top`` best
    epochs by ``cfg.checkpoint_metric`` are retained and the final model is
    the retained one with minimum validation EER.
    """
    train_records = duration_filter(train_records, cfg.min_duration, cfg.max_duration)
    if not train_records:
        raise ValueError("no training records left after duration filtering")
    if not val_records:
        raise ValueError("empty validation manifest")
    if cfg.loss == "aam" and model_cfg.head != "cosine":
        log.info("aam loss: switching the classifier head to scaled cosine")
        model_cfg = model_cfg.replace(head="cosine", cosine_scale=cfg.aam_scale)
    labels = model_cfg.labels
    index = {lab: i for i, lab in enumerate(labels)}
    weights = None
    if cfg.loss == "ce_weighted":
        weights = weight_vector(compute_class_weights(train_records, labels), labels)
    model = Model(model_cfg)
    params = init.copy() if init is not None else init_params(model_cfg, seed=cfg.seed)
    aug = cfg.augment_config

    train_audio = [load_record(r) for r in train_records]
    train_y = np.array([index[r.label] for r in train_records])
    plain_train = None if cfg.augment else [extract(b).values for b in train_audio]
    val_feats = [extract(load_record(r)).values for r in val_records]
    val_y = np.array([index[r.label] for r in val_records])
    val_ids = [r.utt_id for r in val_records]

    order_rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    steps_per_epoch = len(_batches(np.arange(len(train_records)), cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    state = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is None:
            log_path = out_dir / "metrics.jsonl"
    log_f = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    higher_better = cfg.checkpoint_metric == "micro_acc"
    kept: list[tuple[tuple, CheckpointRecord]] = []
    history = []
    step = 0
    digest = model_cfg.digest()
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for idx in _batches(order_rng.permutation(len(train_records)), cfg.batch_size):
                if cfg.augment:
                    feats = []
                    for i in idx:
                        F = extract(speed_perturb(train_audio[i], aug, aug_rng))
                        feats.append(spec_augment(F, aug, aug_rng).values)
                else:
                    feats = [plain_train[i] for i in idx]
                logits, cache = model.forward(params, Batch.from_features(feats), train=True,
                                              rng=drop_rng, momentum=cfg.bn_momentum)
                loss, grads = _loss_and_grads(model, cfg, logits, cache, train_y[idx], weights)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"training diverged: loss {loss} at epoch {epoch}")
                step += 1
                lr = cosine_lr(step, total, cfg.lr, cfg.min_lr, cfg.warmup_ratio)
                adam_step(params.values, grads, state, lr, cfg.weight_decay)
                losses.append(loss)
            ev = evaluate(model, params, val_feats, val_y, cfg, weights, val_ids)
            metric = ev["val_acc"] if higher_better else ev["val_loss"]
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_metric": metric,
                   "lr": lr, "val_loss": ev["val_loss"], "val_acc": ev["val_acc"],
                   "val_eer": ev["val_eer"], "val_bac": ev["val_bac"]}
            history.append(row)
            log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})
            if log_f is not None:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
            key = ((-metric if higher_better else metric), epoch)
            rec = CheckpointRecord(None, epoch, metric, ev["val_eer"], digest, params.copy())
            kept.append((key, rec))
            kept.sort(key=lambda kr: kr[0])
            if out_dir is not None and any(r is rec for _, r in kept[: cfg.keep_top]):
                rec.path = str(out_dir / f"epoch_{epoch:03d}.ckpt")
                save_checkpoint(rec.path, params, model_cfg)
            for _, dropped in kept[cfg.keep_top :]:
                if dropped.path is not None:
                    Path(dropped.path).unlink(missing_ok=True)
            kept = kept[: cfg.keep_top]
    finally:
        if log_f is not None:
            log_f.close()
    records = [r for _, r in kept]
    best = min(kept, key=lambda kr: (kr[1].val_eer, kr[0]))[1]
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", best.params, model_cfg)
    return FitResult(records, best, best.params, model_cfg, history)


# --- transfer ------------------------------------------------------------------


def load_for_finetune(checkpoint, model_cfg: ModelConfig, reinit_head: bool = False,
                      seed: int = 0) -> ParameterSet:
    """Load checkpoint tensors into ``model_cfg``'s layout.

    With ``reinit_head`` the final classification layer is freshly
    initialized (so a different class count is allowed); every other tensor
    must match by name and shape.
    """
    _, digest, stored = read_checkpoint(checkpoint)
    if not reinit_head and digest != model_cfg.digest():
        raise CheckpointError(f"{checkpoint}: config digest mismatch; pass reinit_head to transfer")
    fresh = init_params(model_cfg, seed=seed)
    for name, shape, _ in param_layout(model_cfg):
        if reinit_head and name.startswith(HEAD_PREFIX):
            continue
        if name not in stored:
            raise CheckpointError(f"{checkpoint}: missing tensor {name}")
        if stored[name].shape != shape:
            raise CheckpointError(f"{checkpoint}: {name} has shape {stored[name].shape}, expected {shape}")
        fresh[name] = stored[name].copy()
    return fresh
