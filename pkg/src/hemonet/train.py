"""Three-stage training protocol with selective parameter freezing.

Stage 1 trains the segmentation branch alone (encoder + decoder, pixel
loss only).  Stage 2 freezes everything except the final dense layer of
the classification head.  Stage 3 trains the whole network end to end on
the blended loss.  The blend weights are fixed per stage: 1.0, 0.0, 0.5.
The single-branch variant instead runs one end-to-end pass with blend 0.

Each stage gets a fresh optimizer state; the decay period defaults to one
epoch's worth of optimizer steps, resolved at stage start.  Everything is
deterministic given (dataset seed, init seed, shuffle seed) at thread
count 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .losses import (
    STAGE_SEG_WEIGHTS,
    LossConfig,
    classification_loss,
    combined_loss,
    segmentation_loss,
)
from .metrics import roc_auc
from .model import ArchConfig, Model, build_model
from .optim import AdamState, adam_step
from .phantom import DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH, Study
from .tensor import NumericalError, backward, zero_grads
from .windows import context_indices


@dataclass(frozen=True)
class StageConfig:
    """One stage of the protocol; the stage number pins the blend weight."""

    stage: int
    epochs: int
    batch_size: int = 8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_SEG_WEIGHTS:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def seg_weight(self) -> float:
        return STAGE_SEG_WEIGHTS[self.stage]


@dataclass(frozen=True)
class ProtocolConfig:
    """Desk-scale training hyperparameters."""

    stage_epochs: tuple[int, int, int] = (8, 4, 8)
    single_stage_epochs: Optional[int] = None  # None -> sum(stage_epochs)
    batch_size: int = 8
    base_lr: float = 1e-4
    decay_rate: float = 0.96
    decay_period: Optional[int] = None  # None -> steps per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    negatives_per_positive: Optional[float] = 3.0  # None -> every window each epoch
    max_positives_per_epoch: Optional[int] = None
    init_seed: int = 0
    shuffle_seed: int = 0
    eval_batch_size: int = 32
    select_best_epoch: bool = True
    window_level: float = DEFAULT_WINDOW_LEVEL
    window_width: float = DEFAULT_WINDOW_WIDTH
    pixel_label_smoothing: float = 0.0
    positive_class_weight: Optional[float] = None

    def __post_init__(self):
        if len(self.stage_epochs) != 3 or min(self.stage_epochs) < 0:
            raise ValueError("stage_epochs must give three non-negative epoch counts")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.negatives_per_positive is not None and self.negatives_per_positive <= 0:
            raise ValueError("negatives_per_positive must be positive or None")

    def resolved_single_stage_epochs(self) -> int:
        if self.single_stage_epochs is not None:
            return self.single_stage_epochs
        return sum(self.stage_epochs)

    def loss_config(self, seg_weight: float) -> LossConfig:
        return LossConfig(
            seg_weight=seg_weight,
            pixel_label_smoothing=self.pixel_label_smoothing,
            positive_class_weight=self.positive_class_weight,
        )


def freeze_mask(model: Model, stage: int) -> set[str]:
    """Names of the parameters a stage is allowed to update."""
    if stage not in STAGE_SEG_WEIGHTS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    names = set(model.params)
    if stage in (1, 2) and not model.arch.has_decoder:
        raise ValueError(f"stage {stage} needs a decoder; variant is {model.arch.variant!r}")
    if stage == 1:
        return {n for n in names if not n.startswith("head.")}
    if stage == 2:
        return {"head.out.w", "head.out.b"}
    return names


# ---------------------------------------------------------------------------
# training-side window store
# ---------------------------------------------------------------------------

class WindowBank:
    """Display-windowed studies plus flat (study, slice) sample indexing.

    Keeps one float32 volume per study and assembles context batches on
    demand, so no per-window copies persist.
    """

    def __init__(self, studies: Sequence[Study], k: int,
                 window_level: float = DEFAULT_WINDOW_LEVEL,
                 window_width: float = DEFAULT_WINDOW_WIDTH):
        from .phantom import apply_brain_window

        if not studies:
            raise ValueError("empty study list")
        if k < 1 or k % 2 == 0:
            raise ValueError(f"context size must be odd and positive, got {k}")
        volumes = {s.voxel_volume for s in studies}
        if len(volumes) != 1:
            raise ValueError(f"studies mix voxel volumes: {sorted(volumes)}")
        self.k = k
        self.voxel_volume = volumes.pop()
        self.display = [
            apply_brain_window(s.slices, window_level, window_width).astype(np.float32)
            for s in studies
        ]
        self.masks = [s.masks for s in studies]
        self.samples = [(si, ci) for si, s in enumerate(studies) for ci in range(s.n_slices)]
        self.labels = np.array(
            [int(studies[si].slice_labels[ci]) for si, ci in self.samples], dtype=np.int64
        )
        self.study_ids = [s.study_id for s in studies]

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(contexts, labels, masks) for the given sample indices."""
        xs, ms = [], []
        for i in indices:
            si, ci = self.samples[i]
            vol = self.display[si]
            xs.append(vol[context_indices(ci, len(vol), self.k)])
            ms.append(self.masks[si][ci])
        x = np.stack(xs)
        y = self.labels[np.asarray(indices)].astype(np.float64)
        m = np.stack(ms).astype(np.float64)
        return x, y, m


def _epoch_order(bank: WindowBank, cfg: ProtocolConfig, stage: int, epoch: int) -> np.ndarray:
    """Stratified, shuffled sample indices for one epoch; deterministic."""
    rng = np.random.default_rng([cfg.shuffle_seed, stage, epoch])
    pos = np.flatnonzero(bank.labels == 1)
    neg = np.flatnonzero(bank.labels == 0)
    if cfg.negatives_per_positive is None or len(pos) == 0 or len(neg) == 0:
        return rng.permutation(len(bank))
    pos = rng.permutation(pos)
    if cfg.max_positives_per_epoch is not None:
        pos = pos[: cfg.max_positives_per_epoch]
    n_neg = min(len(neg), int(round(len(pos) * cfg.negatives_per_positive)))
    neg = rng.choice(neg, size=n_neg, replace=False)
    return rng.permutation(np.concatenate([pos, neg]))


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["kind", "stage", "epoch", "step", "seg_weight", "effective_lr",
               "loss_cls", "loss_seg", "loss_total", "val_auc"]


@dataclass
class TrainLog:
    """Per-step losses and per-epoch validation AUC, protocol-wide."""

    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def record_step(self, stage, epoch, step, seg_weight, effective_lr,
                    loss_cls, loss_seg, loss_total):
        self.steps.append(
            {"stage": stage, "epoch": epoch, "step": step, "seg_weight": seg_weight,
             "effective_lr": effective_lr, "loss_cls": loss_cls, "loss_seg": loss_seg,
             "loss_total": loss_total}
        )

    def record_epoch(self, stage, epoch, val_auc):
        self.epochs.append({"stage": stage, "epoch": epoch, "val_auc": val_auc})

    def stage_seg_weights(self) -> list[float]:
        out = []
        for row in self.steps:
            if not out or out[-1][0] != row["stage"]:
                out.append((row["stage"], row["seg_weight"]))
        return [w for _, w in out]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        merged = [("step", r) for r in self.steps] + [("epoch", r) for r in self.epochs]
        # stable order: steps in execution order, each epoch row after its steps
        def sort_key(item):
            kind, r = item
            step = r.get("step", math.inf if kind == "epoch" else 0)
            return (r["stage"], r["epoch"], 0 if kind == "step" else 1, step)

        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for kind, r in sorted(merged, key=sort_key):
                if kind == "step":
                    seg = r["loss_seg"]
                    w.writerow([
                        "step", r["stage"], r["epoch"], r["step"],
                        repr(float(r["seg_weight"])), repr(float(r["effective_lr"])),
                        repr(float(r["loss_cls"])),
                        "" if seg is None else repr(float(seg)),
                        repr(float(r["loss_total"])), "",
                    ])
                else:
                    auc = r["val_auc"]
                    w.writerow(["epoch", r["stage"], r["epoch"], "", "", "", "", "", "",
                                "" if auc is None else repr(float(auc))])
        return path


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

class _BestTracker:
    def __init__(self):
        self.auc = -math.inf
        self.snapshot = None
        self.where = None

    def consider(self, model, stage, epoch, auc):
        if auc is not None and auc > self.auc:
            self.auc = auc
            self.snapshot = model.snapshot()
            self.where = (stage, epoch)


def _validation_auc(model: Model, bank: Optional[WindowBank], cfg: ProtocolConfig):
    if bank is None:
        return None
    labels = bank.labels
    if labels.sum() in (0, len(labels)):
        return None
    scores = []
    for start in range(0, len(bank), cfg.eval_batch_size):
        idx = range(start, min(start + cfg.eval_batch_size, len(bank)))
        x, _, _ = bank.batch(idx)
        preds = model.forward(x, voxel_volume=bank.voxel_volume)
        scores.append(preds.cls_prob.data.astype(np.float64))
    return roc_auc(labels, np.concatenate(scores))


def _run_stage(model, bank, stage_cfg: StageConfig, loss_cfg: LossConfig,
               adam: AdamState, proto: ProtocolConfig, log: TrainLog,
               trainable: set[str], step_base: int,
               val_bank=None, tracker=None) -> int:
    """Train one stage; returns the next global step index."""
    params = model.parameters()
    unknown = trainable - set(params)
    if unknown:
        raise ValueError(f"trainable names not in model: {sorted(unknown)}")
    trainable_params = {n: params[n] for n in params if n in trainable}
    flags = {n: p.requires_grad for n, p in params.items()}
    for n, p in params.items():
        p.requires_grad = n in trainable
    step = step_base
    needs_seg = model.arch.has_decoder
    try:
        for epoch in range(stage_cfg.epochs):
            order = _epoch_order(bank, proto, stage_cfg.stage, epoch)
            if adam.decay_period is None:  # pragma: no cover - resolved before entry
                raise RuntimeError("decay period must be resolved")
            for start in range(0, len(order), stage_cfg.batch_size):
                idx = order[start : start + stage_cfg.batch_size]
                x, y, m = bank.batch(idx)
                preds = model.forward(x, voxel_volume=bank.voxel_volume)
                l_cls = classification_loss(y, preds.cls_prob,
                                            loss_cfg.positive_class_weight)
                l_seg = (
                    segmentation_loss(m, preds.seg_probs, loss_cfg.pixel_label_smoothing)
                    if needs_seg
                    else None
                )
                total = combined_loss(l_cls, l_seg if l_seg is not None else 0.0,
                                      loss_cfg.seg_weight)
                lr = adam.effective_lr()
                values = (l_cls.item(), None if l_seg is None else l_seg.item(), total.item())
                if not math.isfinite(values[2]):
                    err = NumericalError(
                        f"non-finite loss in stage {stage_cfg.stage} epoch {epoch} "
                        f"step {step}; last good step {step - 1}"
                    )
                    err.train_log = log
                    raise err
                zero_grads(params.values())
                grads = backward(total, params=trainable_params)
                try:
                    adam_step(trainable_params, grads, adam)
                except NumericalError as err:
                    err.train_log = log
                    raise
                log.record_step(stage_cfg.stage, epoch, step, loss_cfg.seg_weight, lr,
                                values[0], values[1], values[2])
                step += 1
            val_auc = _validation_auc(model, val_bank, proto)
            log.record_epoch(stage_cfg.stage, epoch, val_auc)
            if tracker is not None:
                tracker.consider(model, stage_cfg.stage, epoch, val_auc)
    finally:
        for n, p in params.items():
            p.requires_grad = flags[n]
    return step


def train_stage(model: Model, bank: WindowBank, stage_cfg: StageConfig,
                loss_cfg: LossConfig, adam: AdamState,
                proto: Optional[ProtocolConfig] = None,
                val_bank: Optional[WindowBank] = None,
                log: Optional[TrainLog] = None) -> tuple[Model, TrainLog]:
    """Run one protocol stage on its own; checks the stage/blend binding."""
    if loss_cfg.seg_weight != stage_cfg.seg_weight:
        raise ValueError(
            f"stage {stage_cfg.stage} binds blend weight {stage_cfg.seg_weight}, "
            f"got {loss_cfg.seg_weight}"
        )
    proto = proto or ProtocolConfig(batch_size=stage_cfg.batch_size,
                                    shuffle_seed=stage_cfg.shuffle_seed)
    log = log if log is not None else TrainLog()
    trainable = freeze_mask(model, stage_cfg.stage)
    if adam.decay_period is None:
        raise ValueError("AdamState.decay_period must be set")
    _run_stage(model, bank, stage_cfg, loss_cfg, adam, proto, log, trainable, 0,
               val_bank=val_bank)
    return model, log


def _steps_per_epoch(bank, proto, stage) -> int:
    return max(1, math.ceil(len(_epoch_order(bank, proto, stage, 0)) / proto.batch_size))


def _make_adam(proto: ProtocolConfig, decay_period: int) -> AdamState:
    return AdamState(
        base_lr=proto.base_lr,
        decay_rate=proto.decay_rate,
        decay_period=decay_period,
        beta1=proto.beta1,
        beta2=proto.beta2,
        epsilon=proto.epsilon,
    )


def run_protocol(
    train_studies: Sequence[Study],
    val_studies: Sequence[Study],
    arch: ArchConfig,
    proto: ProtocolConfig = ProtocolConfig(),
) -> tuple[Model, TrainLog, dict]:
    """Full training recipe for one variant; returns (model, log, summary).

    The returned model carries the best-validation-AUC epoch's parameters
    when best-epoch selection is on (ties keep the earliest epoch).
    """
    bank = WindowBank(train_studies, arch.input_slices, proto.window_level, proto.window_width)
    val_bank = (
        WindowBank(val_studies, arch.input_slices, proto.window_level, proto.window_width)
        if val_studies
        else None
    )
    model = build_model(arch, proto.init_seed)
    log = TrainLog()
    tracker = _BestTracker()
    step = 0

    if arch.variant == "single_task":
        stage_cfg = StageConfig(stage=3, epochs=proto.resolved_single_stage_epochs(),
                                batch_size=proto.batch_size, shuffle_seed=proto.shuffle_seed)
        adam = _make_adam(proto, proto.decay_period or _steps_per_epoch(bank, proto, 3))
        loss_cfg = proto.loss_config(seg_weight=0.0)
        _run_stage(model, bank, stage_cfg, loss_cfg, adam, proto, log,
                   trainable=set(model.params), step_base=step,
                   val_bank=val_bank, tracker=tracker)
    else:
        for stage, epochs in zip((1, 2, 3), proto.stage_epochs):
            stage_cfg = StageConfig(stage=stage, epochs=epochs,
                                    batch_size=proto.batch_size,
                                    shuffle_seed=proto.shuffle_seed)
            adam = _make_adam(proto, proto.decay_period or _steps_per_epoch(bank, proto, stage))
            loss_cfg = proto.loss_config(seg_weight=stage_cfg.seg_weight)
            step = _run_stage(model, bank, stage_cfg, loss_cfg, adam, proto, log,
                              trainable=freeze_mask(model, stage), step_base=step,
                              val_bank=val_bank, tracker=tracker)

    if proto.select_best_epoch and tracker.snapshot is not None:
        model.restore(tracker.snapshot)
    summary = {
        "variant": arch.variant,
        "best_val_auc": None if tracker.snapshot is None else tracker.auc,
        "best_at": tracker.where,
        "final_val_auc": _validation_auc(model, val_bank, proto),
    }
    return model, log, summary
