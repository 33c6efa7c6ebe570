"""Three-way slice / patient labels and the stage-specific binary views."""

from __future__ import annotations

import enum


class SliceLabel(str, enum.Enum):
    PE = "PE"
    OTHER = "OTHER"
    WNL = "WNL"

    @classmethod
    def parse(cls, text: str) -> "SliceLabel":
        key = text.strip().upper()
        if key in ("OTHERDISEASE", "OTHER_DISEASE"):
            key = "OTHER"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown label {text!r}; expected PE, OTHER or WNL") from None

    @property
    def is_disease(self) -> bool:
        return self is not SliceLabel.WNL


# binary targets: index 1 is the positive class at both stages
STAGE1_CLASSES = ("WNL", "Disease")
STAGE2_CLASSES = ("OtherDisease", "PE")


def stage1_target(label: SliceLabel) -> int:
    return int(label.is_disease)


def stage2_target(label: SliceLabel) -> int:
    if label is SliceLabel.WNL:
        raise ValueError("WNL slices have no stage-2 target")
    return int(label is SliceLabel.PE)
