"""Mini-batch training and evaluation for one triage stage."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .dicom import read_dicom, to_hu
from .labels import SliceLabel, stage1_target, stage2_target
from .model import CbamdrnModel, predict_batch
from .preprocess import PreprocessConfig, preprocess_slice, stack_windows
from .triage import DatasetManifest

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass
class SliceDataset:
    """Preprocessed slices: ``inputs`` is N×windows×1×H×W float32."""

    inputs: np.ndarray
    labels: np.ndarray
    patient_ids: list[str] = field(default_factory=list)
    slice_ids: list[str] = field(default_factory=list)
    truth: list[SliceLabel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def select(self, idx) -> "SliceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda xs: [xs[i] for i in idx] if xs else []  # noqa: E731
        return SliceDataset(
            self.inputs[idx], self.labels[idx], pick(self.patient_ids), pick(self.slice_ids), pick(self.truth)
        )

    def window_batch(self, idx) -> list[np.ndarray]:
        x = self.inputs[idx]
        return [np.ascontiguousarray(x[:, w]) for w in range(x.shape[1])]


def stage_labels(truth: Sequence[SliceLabel], stage: int) -> tuple[np.ndarray, np.ndarray]:
    """(row indices kept, binary targets) for a stage's relabeling."""
    if stage == 1:
        keep = np.arange(len(truth))
        return keep, np.array([stage1_target(t) for t in truth], dtype=np.int64)
    if stage == 2:
        keep = np.array([i for i, t in enumerate(truth) if t.is_disease], dtype=np.int64)
        return keep, np.array([stage2_target(truth[i]) for i in keep], dtype=np.int64)
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def _load_row(path: str, cfg: PreprocessConfig, windows: Sequence[str]) -> np.ndarray:
    return stack_windows(preprocess_slice(to_hu(read_dicom(path)), cfg, windows))


def dataset_from_manifest(
    manifest: DatasetManifest,
    windows: Sequence[str],
    cfg: PreprocessConfig | None = None,
    jobs: int = 1,
) -> SliceDataset:
    """Read and preprocess every manifest row; labels are the three-way truth as 0..2 codes.

    Use :func:`for_stage` to obtain the binary view a stage trains on.
    """
    cfg = cfg or PreprocessConfig()
    rows = list(manifest)
    if not rows:
        raise EmptyDataset("manifest has no rows")
    load = lambda r: _load_row(r.path, cfg, windows)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            arrays = list(pool.map(load, rows))
    else:
        arrays = [load(r) for r in rows]
    truth = [r.label for r in rows]
    codes = np.array([[SliceLabel.WNL, SliceLabel.OTHER, SliceLabel.PE].index(t) for t in truth])
    return SliceDataset(np.stack(arrays), codes, [r.patient_id for r in rows], [r.path for r in rows], truth)


def for_stage(ds: SliceDataset, stage: int) -> SliceDataset:
    keep, targets = stage_labels(ds.truth, stage)
    out = ds.select(keep)
    out.labels = targets
    return out


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    class_weights: tuple[float, float] | None = None
    balance_classes: bool = False  # weights inversely proportional to class frequency
    bn_recalibration: int = 128  # slices used to re-estimate batch-norm statistics after each epoch; 0 disables


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int


def _class_weights(labels: np.ndarray, cfg: TrainConfig):
    if cfg.class_weights is not None:
        return np.asarray(cfg.class_weights, dtype=np.float64)
    if not cfg.balance_classes:
        return None
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    counts[counts == 0] = 1.0
    return counts.sum() / (2.0 * counts)


def infer_logits(model: CbamdrnModel, ds: SliceDataset, batch_size: int = 32) -> np.ndarray:
    was = model.training
    model.train_mode(False)
    out = []
    try:
        with nn.no_grad():
            for start in range(0, len(ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(ds)))
                out.append(model.forward(ds.window_batch(idx)).data)
    finally:
        model.train_mode(was)
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)


def recalibrate_batch_norm(model: CbamdrnModel, ds: SliceDataset, batches: Sequence[np.ndarray]) -> None:
    """Replace running statistics with a cumulative average over ``batches``.

    Momentum averages lag behind weights that moved a lot during the epoch,
    which shows up as a train-mode/eval-mode accuracy gap.
    """
    for name, p in model.params.items():
        if name.endswith(".running_mean") or name.endswith(".num_batches"):
            p.data[...] = 0
        elif name.endswith(".running_var"):
            p.data[...] = 1
    was = model.training
    model.train_mode(True)
    try:
        with nn.no_grad():
            for idx in batches:
                model.forward(ds.window_batch(idx))
    finally:
        model.train_mode(was)


def accuracy(model: CbamdrnModel, ds: SliceDataset) -> float:
    return float((predict_batch(infer_logits(model, ds)) == ds.labels).mean())


def train(
    model: CbamdrnModel,
    train_set: SliceDataset,
    cfg: TrainConfig | None = None,
    val_set: SliceDataset | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Adam + cross-entropy, seeded shuffling.

    With a validation set the model is left holding the parameters of the
    epoch with the best validation accuracy (latest epoch wins ties);
    otherwise the final parameters.
    """
    cfg = cfg or TrainConfig()
    if len(train_set) == 0:
        raise EmptyDataset("no training slices")
    if train_set.labels.min() < 0 or train_set.labels.max() >= model.config.num_classes:
        raise LabelOutOfRange("training labels must be 0 or 1")
    if train_set.inputs.shape[1] != len(model.windows):
        raise ValueError(f"dataset has {train_set.inputs.shape[1]} windows, model expects {len(model.windows)}")
    rng = np.random.default_rng(cfg.seed)
    opt = nn.Adam(model.trainable(), nn.AdamConfig(lr=cfg.lr))
    weights = _class_weights(train_set.labels, cfg)
    history: list[EpochStats] = []
    best = (-1.0, -1, None)
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        model.train_mode(True)
        order = rng.permutation(n)
        batches = [order[s : s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            # batch norm needs two samples; fold a stray one into the previous batch
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        loss_sum, correct = 0.0, 0
        for idx in batches:
            opt.zero_grad()
            logits = model.forward(train_set.window_batch(idx))
            loss = nn.softmax_cross_entropy(logits, train_set.labels[idx], weights)
            loss.backward()
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((predict_batch(logits) == train_set.labels[idx]).sum())
        if cfg.bn_recalibration > 0:
            keep, used = [], 0
            for idx in batches:
                if used >= cfg.bn_recalibration:
                    break
                keep.append(idx)
                used += len(idx)
            recalibrate_batch_norm(model, train_set, keep)
        stats = EpochStats(epoch, loss_sum / n, correct / n)
        if val_set is not None and len(val_set):
            stats.val_accuracy = accuracy(model, val_set)
            if stats.val_accuracy >= best[0]:
                best = (stats.val_accuracy, epoch, model.snapshot())
        history.append(stats)
        log.info(
            "epoch %d loss %.4f train_acc %.3f val_acc %s",
            epoch,
            stats.loss,
            stats.train_accuracy,
            "-" if stats.val_accuracy is None else f"{stats.val_accuracy:.3f}",
        )
        if on_epoch is not None:
            on_epoch(stats)
    model.train_mode(False)
    if best[2] is not None:
        model.restore(best[2])
        return TrainResult(history, best[1])
    return TrainResult(history, cfg.epochs)


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_from(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    return Confusion(
        tp=int((pred & truth).sum()),
        tn=int((~pred & ~truth).sum()),
        fp=int((pred & ~truth).sum()),
        fn=int((~pred & truth).sum()),
    )


def evaluate(model: CbamdrnModel, ds: SliceDataset) -> Confusion:
    return confusion_from(predict_batch(infer_logits(model, ds)), ds.labels)
