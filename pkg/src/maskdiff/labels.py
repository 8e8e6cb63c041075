"""Pathology label set.

Label id 0 is reserved for NO_FINDING (the unconditional case); the remaining
ids name focal or geometric pathologies the phantom renderer can produce.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class PathologyLabel:
    id: int
    name: str


NO_FINDING = PathologyLabel(0, "NO_FINDING")
OPACITY_LEFT_LUNG = PathologyLabel(1, "OPACITY_LEFT_LUNG")
OPACITY_RIGHT_LUNG = PathologyLabel(2, "OPACITY_RIGHT_LUNG")
CARDIOMEGALY = PathologyLabel(3, "CARDIOMEGALY")

DEFAULT_LABELS: tuple[PathologyLabel, ...] = (
    NO_FINDING,
    OPACITY_LEFT_LUNG,
    OPACITY_RIGHT_LUNG,
    CARDIOMEGALY,
)

LABEL_NAMES: tuple[str, ...] = tuple(l.name for l in DEFAULT_LABELS)

# Pathology classes scored by the evaluation classifier (NO_FINDING excluded).
PATHOLOGY_NAMES: tuple[str, ...] = LABEL_NAMES[1:]


def label_by_name(name: str, labels: tuple[PathologyLabel, ...] = DEFAULT_LABELS) -> PathologyLabel:
    for label in labels:
        if label.name == name:
            return label
    raise ConfigError(f"unknown pathology label {name!r}; known: {[l.name for l in labels]}")


def label_by_id(label_id: int, labels: tuple[PathologyLabel, ...] = DEFAULT_LABELS) -> PathologyLabel:
    for label in labels:
        if label.id == label_id:
            return label
    raise ConfigError(f"unknown pathology label id {label_id}; known ids 0..{len(labels) - 1}")


def coerce_label(label, labels: tuple[PathologyLabel, ...] = DEFAULT_LABELS) -> PathologyLabel:
    """Accept a PathologyLabel, an id, or a name."""
    if isinstance(label, PathologyLabel):
        if label not in labels:
            raise ConfigError(f"label {label} not in configured label set")
        return label
    if isinstance(label, (int,)) and not isinstance(label, bool):
        return label_by_id(label, labels)
    if isinstance(label, str):
        return label_by_name(label, labels)
    raise ConfigError(f"cannot interpret {label!r} as a pathology label")
