"""Training: semi-random minibatch sampling, the pretrain/finetune loops and
cross-validation split plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import NumericError, UsageError
from ..metrics import agreement
from ..psg_io import ChannelRole, Recording, Stage
from . import tensor as T
from .checkpoint import Checkpoint
from .infer import channel_pairs
from .model import USleep, forward
from .optim import Adam

UNKNOWN = int(Stage.UNKNOWN)
LOG_COLUMNS = ("epoch", "split", "loss", "kappa", "lr")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule settings. ``None`` fields take the mode's default."""

    mode: str = "finetune"
    lr: float | None = None
    batch_size: int = 64
    segment_epochs: int = 35
    minibatches_per_epoch: int | None = None
    plateau_patience: int = 40
    plateau_factor: float = 0.5
    early_stop_patience: int | None = None
    max_epochs: int | None = None
    val_max_pairs: int | None = None
    seed: int = 0

    _DEFAULTS = {
        "pretrain": {"lr": 1e-4, "minibatches_per_epoch": 886, "early_stop_patience": 80, "max_epochs": 100000},
        "finetune": {"lr": 1e-5, "minibatches_per_epoch": 50, "early_stop_patience": 10, "max_epochs": 50},
    }

    def __post_init__(self):
        if self.mode not in self._DEFAULTS:
            raise UsageError(f"mode must be pretrain or finetune, got {self.mode!r}")
        for name, value in self._DEFAULTS[self.mode].items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        for name in ("batch_size", "segment_epochs", "minibatches_per_epoch",
                     "early_stop_patience", "max_epochs", "plateau_patience"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise UsageError("plateau_factor must lie in (0, 1)")

    @property
    def uses_scheduler(self) -> bool:
        return self.mode == "pretrain"


# --------------------------------------------------------------------------
# data


@dataclass
class TrainRecord:
    """A preprocessed night ready for sampling (float32 signals at the model rate).

    ``pairs`` lists (EEG, EOG) positions in the canonical inference order.
    """

    id: str
    subject: str
    eeg: list[np.ndarray]
    eog: list[np.ndarray]
    labels: np.ndarray
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            self.pairs = [(e, o) for e in range(len(self.eeg)) for o in range(len(self.eog))]

    @classmethod
    def from_recording(cls, rec: Recording, subject: str | None = None, dtype=np.float32) -> "TrainRecord":
        if rec.hypnogram is None:
            raise UsageError(f"recording {rec.id!r} has no hypnogram")
        subject = subject or rec.meta.get("subject") or rec.id
        eeg_idx = rec.channels_with_role(ChannelRole.EEG)
        eog_idx = rec.channels_with_role(ChannelRole.EOG)
        pairs = []
        if eeg_idx and eog_idx:
            pairs = [(eeg_idx.index(e), eog_idx.index(o)) for e, o in channel_pairs(rec)]
        eeg = [rec.channels[i].samples.astype(dtype) for i in eeg_idx]
        eog = [rec.channels[i].samples.astype(dtype) for i in eog_idx]
        return cls(rec.id, str(subject), eeg, eog, rec.hypnogram.stages.astype(np.int64), pairs)

    def n_epochs(self, epoch_samples: int) -> int:
        if not self.eeg or not self.eog:
            return 0
        length = min(min(a.size for a in self.eeg), min(a.size for a in self.eog))
        return min(self.labels.size, length // epoch_samples)


Datasets = Mapping[str, Sequence[TrainRecord]]


class Sampler:
    """Hierarchical sampler: dataset -> subject -> record -> channel pair ->
    anchor stage -> window, each level uniform.

    Records shorter than one segment or missing EEG/EOG are dropped.
    """

    def __init__(self, datasets: Datasets, segment_epochs: int = 35, epoch_samples: int = 3840):
        self.segment_epochs = segment_epochs
        self.epoch_samples = epoch_samples
        self.tree: list[list[list[tuple[TrainRecord, int, list[np.ndarray]]]]] = []
        for name in sorted(datasets):
            subjects: dict[str, list] = {}
            for rec in datasets[name]:
                n = rec.n_epochs(epoch_samples)
                if n < segment_epochs:
                    continue
                labels = rec.labels[:n]
                present = sorted(int(s) for s in np.unique(labels) if s != UNKNOWN)
                anchors = [np.flatnonzero(labels == s) for s in present] or [np.arange(n)]
                subjects.setdefault(rec.subject, []).append((rec, n, anchors))
            if subjects:
                self.tree.append([subjects[k] for k in sorted(subjects)])
        if not self.tree:
            raise UsageError(f"no record offers {segment_epochs} epochs with an EEG and an EOG channel")

    def draw(self, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        seg = self.segment_epochs
        es = self.epoch_samples
        x = np.empty((batch_size, 2, seg * es), dtype=np.float32)
        y = np.empty((batch_size, seg), dtype=np.int64)
        for b in range(batch_size):
            subjects = self.tree[rng.integers(len(self.tree))]
            records = subjects[rng.integers(len(subjects))]
            rec, n, anchors = records[rng.integers(len(records))]
            eeg = rec.eeg[rng.integers(len(rec.eeg))]
            eog = rec.eog[rng.integers(len(rec.eog))]
            pool = anchors[rng.integers(len(anchors))]
            centre = int(pool[rng.integers(pool.size)])
            start = min(max(centre - seg // 2, 0), n - seg)
            x[b, 0] = eeg[start * es : (start + seg) * es]
            x[b, 1] = eog[start * es : (start + seg) * es]
            y[b] = rec.labels[start : start + seg]
        return x, y


def sample_minibatch(
    datasets: Datasets,
    rng: np.random.Generator,
    batch_size: int = 64,
    segment_epochs: int = 35,
    epoch_samples: int = 3840,
) -> tuple[np.ndarray, np.ndarray]:
    """One ``(batch, 2, segment*epoch_samples)`` batch and its ``(batch, segment)`` labels."""
    return Sampler(datasets, segment_epochs, epoch_samples).draw(rng, batch_size)


# --------------------------------------------------------------------------
# training loop


class TrainingDiverged(NumericError):
    """Raised on a non-finite loss or gradient; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint | None, log: list[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_kappa: float = float("nan")

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows: Sequence[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def evaluate(model: USleep, records: Sequence[TrainRecord], max_pairs: int | None = None) -> tuple[float, float]:
    """Mean per-night loss and kappa, summing probabilities over channel pairs."""
    losses, kappas = [], []
    es = model.config.epoch_samples
    for rec in records:
        n = rec.n_epochs(es)
        if n < 1:
            continue
        pairs = rec.pairs
        if max_pairs is not None:
            pairs = pairs[:max_pairs]
        total = None
        for e, o in pairs:
            sig = np.stack([rec.eeg[e][: n * es], rec.eog[o][: n * es]])
            _, p = forward(model, sig)
            total = p.astype(np.float64) if total is None else total + p
        probs = total / total.sum(axis=1, keepdims=True)
        labels = rec.labels[:n]
        valid = labels != UNKNOWN
        if not valid.any():
            continue
        picked = probs[np.flatnonzero(valid), labels[valid]]
        losses.append(float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean()))
        kappas.append(agreement(labels, probs.argmax(axis=1)).cohen_kappa)
    if not kappas:
        return float("nan"), float("nan")
    return float(np.mean(losses)), float(np.mean(kappas))


def train(
    model: USleep,
    train_sets: Datasets,
    val_records: Sequence[TrainRecord],
    config: TrainConfig = TrainConfig(),
    source: str = "scratch",
    progress=None,
) -> TrainResult:
    """Run the mode's schedule and return the best-validation checkpoint.

    Validation kappa (mean per night) is checked after every epoch; training
    stops after ``early_stop_patience`` epochs without improvement. In
    pretrain mode the learning rate is scaled by ``plateau_factor`` after
    ``plateau_patience`` stagnant epochs.
    """
    if not val_records:
        raise UsageError("training needs a validation split")
    rng = np.random.default_rng(config.seed)
    sampler = Sampler(train_sets, config.segment_epochs, model.config.epoch_samples)
    opt = Adam(model.params, lr=config.lr)
    log: list[dict] = []
    meta = {"seed": config.seed, "mode": config.mode, "source": source}
    best = Checkpoint.from_model(model, epochs=0, **meta)
    best_kappa = -math.inf
    best_epoch = 0
    stale = 0
    plateau = 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        cm_ref, cm_pred = [], []
        for _ in range(config.minibatches_per_epoch):
            x, y = sampler.draw(rng, config.batch_size)
            model.zero_grad()
            _, probs = model(x, training=True)
            loss = T.masked_cross_entropy(probs, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}", best, log)
            loss.backward()
            try:
                opt.step()
            except NumericError as exc:
                raise TrainingDiverged(f"{exc} in epoch {epoch}", best, log) from exc
            losses.append(value)
            cm_ref.append(y.ravel())
            cm_pred.append(probs.data.argmax(axis=1).ravel())
        ref = np.concatenate(cm_ref)
        train_kappa = agreement(ref, np.concatenate(cm_pred)).cohen_kappa if (ref != UNKNOWN).any() else float("nan")
        log.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                    "kappa": float(train_kappa), "lr": float(opt.lr)})
        val_loss, val_kappa = evaluate(model, val_records, config.val_max_pairs)
        log.append({"epoch": epoch, "split": "val", "loss": val_loss, "kappa": val_kappa, "lr": float(opt.lr)})
        if progress is not None:
            progress(log[-2], log[-1])
        if val_kappa > best_kappa:
            best_kappa = val_kappa
            best_epoch = epoch
            best = Checkpoint.from_model(model, epochs=epoch, val_kappa=val_kappa, **meta)
            stale = 0
            plateau = 0
        else:
            stale += 1
            plateau += 1
        if stale >= config.early_stop_patience:
            break
        if config.uses_scheduler and plateau >= config.plateau_patience:
            opt.lr *= config.plateau_factor
            plateau = 0
    return TrainResult(best, log, best_epoch, best_kappa)


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class Fold:
    index: int
    test: dict[str, list[str]]
    val: dict[str, list[str]]
    train: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {"index": self.index, "test": self.test, "val": self.val, "train": self.train}


def make_cv_splits(
    subjects_by_dataset: Mapping[str, Sequence[str]],
    folds: int = 10,
    val_subjects: int = 10,
    seed: int | np.random.Generator = 0,
) -> list[Fold]:
    """Per-dataset, per-subject k-fold plan with a validation draw per fold."""
    if folds < 2:
        raise UsageError("folds must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    plan = [Fold(k, {}, {}, {}) for k in range(folds)]
    for name in sorted(subjects_by_dataset):
        subjects = sorted(set(subjects_by_dataset[name]))
        if len(subjects) <= folds:
            raise UsageError(f"dataset {name!r} has {len(subjects)} subjects; need more than {folds}")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        chunks = np.array_split(np.arange(len(order)), folds)
        for k, chunk in enumerate(chunks):
            test = [order[i] for i in chunk]
            rest = [s for s in order if s not in set(test)]
            if len(rest) <= val_subjects:
                raise UsageError(
                    f"dataset {name!r}: {len(rest)} non-test subjects cannot spare {val_subjects} for validation")
            pick = rng.choice(len(rest), size=val_subjects, replace=False)
            val = sorted(rest[i] for i in pick)
            plan[k].test[name] = sorted(test)
            plan[k].val[name] = val
            plan[k].train[name] = sorted(set(rest) - set(val))
    return plan


__all__ = [
    "Fold", "Sampler", "TrainConfig", "TrainRecord", "TrainResult", "TrainingDiverged",
    "evaluate", "format_log", "make_cv_splits", "sample_minibatch", "train",
]
