"""Two-stage triage, per-patient OR aggregation, metrics and dataset manifests."""

from __future__ import annotations

import enum
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import STAGE1_CLASSES, STAGE2_CLASSES, SliceLabel
from .model import CbamdrnModel, classify, predict


class EmptyInput(ValueError):
    pass


class EmptySliceSet(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class ManifestError(ValueError):
    pass


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


# --------------------------------------------------------------------------
# predictions


@dataclass(frozen=True)
class SlicePrediction:
    slice_id: str
    stage1: str  # "WNL" | "Disease"
    stage2: str | None = None  # "PE" | "OtherDisease", only when stage1 == "Disease"
    stage1_logits: tuple[float, float] = (0.0, 0.0)
    stage2_logits: tuple[float, float] | None = None

    def __post_init__(self):
        if self.stage1 not in STAGE1_CLASSES:
            raise ValueError(f"bad stage-1 decision {self.stage1!r}")
        if (self.stage2 is not None) != (self.stage1 == "Disease"):
            raise ValueError("stage 2 must be present exactly when stage 1 says Disease")
        if self.stage2 is not None and self.stage2 not in STAGE2_CLASSES:
            raise ValueError(f"bad stage-2 decision {self.stage2!r}")

    @property
    def label(self) -> SliceLabel:
        if self.stage1 == "WNL":
            return SliceLabel.WNL
        return SliceLabel.PE if self.stage2 == "PE" else SliceLabel.OTHER

    @classmethod
    def from_logits(cls, slice_id: str, logits1, logits2=None) -> "SlicePrediction":
        l1 = tuple(float(v) for v in np.asarray(logits1).reshape(-1))
        if predict(l1) == 0:
            return cls(slice_id, "WNL", None, l1, None)
        if logits2 is None:
            raise ValueError("stage-1 predicted Disease but no stage-2 logits were given")
        l2 = tuple(float(v) for v in np.asarray(logits2).reshape(-1))
        return cls(slice_id, "Disease", STAGE2_CLASSES[predict(l2)], l1, l2)


def triage_slice(
    windows: Sequence, stage1_model: CbamdrnModel, stage2_model: CbamdrnModel, slice_id: str = ""
) -> SlicePrediction:
    """Stage 1 on every slice; stage 2 only on slices stage 1 calls Disease."""
    logits1 = classify(windows, stage1_model)
    if predict(logits1) == 0:
        return SlicePrediction.from_logits(slice_id, logits1)
    return SlicePrediction.from_logits(slice_id, logits1, classify(windows, stage2_model))


_PRECEDENCE = (SliceLabel.PE, SliceLabel.OTHER, SliceLabel.WNL)


def aggregate_labels(labels: Iterable, precedence: Sequence = _PRECEDENCE):
    """Highest-precedence label present: PE if any PE, else OTHER if any, else WNL."""
    present = set(labels)
    if not present:
        raise EmptySliceSet("no slices to aggregate")
    for lab in precedence:
        if lab in present:
            return lab
    raise ValueError(f"labels {present} not covered by precedence {precedence}")


@dataclass(frozen=True)
class PatientTriage:
    patient_id: str
    predictions: tuple[SlicePrediction, ...]
    final: SliceLabel


def triage_patient(predictions: Sequence[SlicePrediction], patient_id: str = "") -> PatientTriage:
    if not predictions:
        raise EmptySliceSet(f"patient {patient_id!r} has no slices")
    final = aggregate_labels(p.label for p in predictions)
    return PatientTriage(patient_id, tuple(predictions), final)


# --------------------------------------------------------------------------
# metrics


def percent_half_up(numerator: int, denominator: int, places: int = 1) -> Decimal:
    if denominator <= 0:
        raise EmptyInput("ratio with empty denominator")
    exact = Decimal(numerator * 100) / Decimal(denominator)
    return exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class Ratio:
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        return self.numerator / self.denominator if self.denominator else float("nan")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.numerator, self.denominator)

    def percent(self) -> Decimal | None:
        return percent_half_up(self.numerator, self.denominator) if self.denominator else None

    def __str__(self) -> str:
        pct = self.percent()
        return f"{'n/a' if pct is None else f'{pct}%'} ({self.numerator}/{self.denominator})"

    def to_dict(self) -> dict:
        pct = self.percent()
        return {
            "numerator": self.numerator,
            "denominator": self.denominator,
            "percent": None if pct is None else float(pct),
        }


@dataclass(frozen=True)
class MetricsReport:
    level: str  # "per_slice" | "per_patient"
    accuracy: Ratio
    sensitivity: dict[str, Ratio]

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "accuracy": self.accuracy.to_dict(),
            "sensitivity": {k: v.to_dict() for k, v in self.sensitivity.items()},
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def compute_metrics(
    predictions: Sequence,
    truths: Sequence,
    level: str = "per_slice",
    patient_ids: Sequence[str] | None = None,
    classes: Sequence | None = None,
    precedence: Sequence | None = None,
) -> MetricsReport:
    """Accuracy and per-class sensitivity with raw counts.

    At ``per_patient`` level predictions and truths are first OR-aggregated
    per patient (``precedence`` lists classes from most to least severe;
    default PE > OTHER > WNL).
    """
    predictions = list(predictions)
    truths = list(truths)
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise EmptyInput("no predictions")
    predictions = [p.label if isinstance(p, SlicePrediction) else p for p in predictions]
    if level == "per_patient":
        if patient_ids is None or len(patient_ids) != len(predictions):
            raise LengthMismatch("per_patient metrics need one patient id per slice")
        prec = tuple(precedence) if precedence is not None else _PRECEDENCE
        groups: dict[str, list[int]] = defaultdict(list)
        for i, pid in enumerate(patient_ids):
            groups[pid].append(i)
        predictions = [aggregate_labels((predictions[i] for i in idx), prec) for idx in groups.values()]
        truths = [aggregate_labels((truths[i] for i in idx), prec) for idx in groups.values()]
    elif level != "per_slice":
        raise ValueError(f"unknown level {level!r}")

    if classes is None:
        order = list(precedence) if precedence is not None else list(_PRECEDENCE)
        seen = set(truths)
        classes = [c for c in order if c in seen] + sorted(seen - set(order), key=str)
    correct = sum(p == t for p, t in zip(predictions, truths))
    sens = {}
    for c in classes:
        members = [p for p, t in zip(predictions, truths) if t == c]
        sens[_class_key(c)] = Ratio(sum(p == c for p in members), len(members))
    return MetricsReport(level, Ratio(correct, len(truths)), sens)


def _class_key(c) -> str:
    return c.value if isinstance(c, enum.Enum) else str(c)


# --------------------------------------------------------------------------
# manifests and splitting


@dataclass(frozen=True)
class ManifestRow:
    path: str
    patient_id: str
    label: SliceLabel
    split: Split = Split.TRAIN


@dataclass
class DatasetManifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def validate(self) -> None:
        where: dict[str, Split] = {}
        for r in self.rows:
            prev = where.setdefault(r.patient_id, r.split)
            if prev != r.split:
                raise ManifestError(f"patient {r.patient_id} appears in {prev.value} and {r.split.value}")

    def subset(self, split: Split) -> "DatasetManifest":
        return DatasetManifest([r for r in self.rows if r.split == split])

    def patients(self) -> dict[str, SliceLabel]:
        """Patient id -> OR-aggregated slice label, in first-seen order."""
        labels: dict[str, list[SliceLabel]] = {}
        for r in self.rows:
            labels.setdefault(r.patient_id, []).append(r.label)
        return {pid: aggregate_labels(ls) for pid, ls in labels.items()}

    def with_splits(self, assignment: Mapping[str, Split]) -> "DatasetManifest":
        return DatasetManifest([replace(r, split=assignment[r.patient_id]) for r in self.rows])

    def write(self, path: str | os.PathLike) -> None:
        lines = [f"{r.path}\t{r.patient_id}\t{r.label.value}\t{r.split.value}" for r in self.rows]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        rows = []
        base = Path(path).parent
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"line {n}: expected 4 tab-separated fields")
            p, pid, lab, split = parts
            try:
                label = SliceLabel.parse(lab)
                split_tag = Split(split.strip().upper())
            except ValueError as exc:
                raise ManifestError(f"line {n}: {exc}") from None
            full = p if os.path.isabs(p) else str(base / p)
            rows.append(ManifestRow(full, pid, label, split_tag))
        return cls(rows)


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(
    patients: Mapping[str, SliceLabel] | Sequence[tuple[str, SliceLabel]],
    ratios: Sequence[float] = (5, 3, 2),
    seed: int = 0,
) -> dict[str, Split]:
    """Assign whole patients to train/val/test, stratified by patient label."""
    items = list(patients.items()) if isinstance(patients, Mapping) else list(patients)
    if not items:
        raise EmptyInput("no patients to split")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers")
    rng = np.random.default_rng(seed)
    by_class: dict[SliceLabel, list[str]] = defaultdict(list)
    for pid, lab in items:
        by_class[lab].append(pid)
    out: dict[str, Split] = {}
    for lab in sorted(by_class, key=lambda c: c.value):
        ids = sorted(by_class[lab])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train, n_val, _ = _largest_remainder(len(ids), ratios)
        for i, pid in enumerate(ids):
            out[pid] = Split.TRAIN if i < n_train else Split.VAL if i < n_train + n_val else Split.TEST
    return out
