"""Fine disease classes (14, CheXbert order) and the seven visual super-classes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FINE_CLASSES: tuple[str, ...] = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

SUPER_CLASSES: tuple[str, ...] = (
    "No Finding",
    "Cardiac",
    "Lung Lesion",
    "Airspace Density",
    "Atelectasis",
    "Pleural",
    "Support Device",
)

# 0-based super-class index per fine class; None = not grouped (excluded from guidance)
_FINE_TO_SUPER: dict[str, int | None] = {
    "No Finding": 0,
    "Enlarged Cardiomediastinum": 1,
    "Cardiomegaly": 1,
    "Lung Opacity": None,
    "Lung Lesion": 2,
    "Edema": 3,
    "Consolidation": 3,
    "Pneumonia": 3,
    "Atelectasis": 4,
    "Pneumothorax": None,
    "Pleural Effusion": 5,
    "Pleural Other": 5,
    "Fracture": None,
    "Support Devices": 6,
}

UNASSIGNED = "unassigned"
NO_FINDING = 0
DISEASE_CLASSES: tuple[str, ...] = FINE_CLASSES[1:]


@dataclass(frozen=True)
class ClassTaxonomy:
    fine_classes: tuple[str, ...] = FINE_CLASSES
    super_classes: tuple[str, ...] = SUPER_CLASSES
    mapping: dict = field(default_factory=lambda: dict(_FINE_TO_SUPER))

    def __post_init__(self):
        if len(self.super_classes) != 7:
            raise ValueError("expected exactly 7 super-classes")
        if self.super_classes[0] != "No Finding":
            raise ValueError("super-class 1 must be 'No Finding'")
        if set(self.mapping) != set(self.fine_classes):
            raise ValueError("mapping must cover every fine class")

    @property
    def n_fine(self) -> int:
        return len(self.fine_classes)

    @property
    def n_super(self) -> int:
        return len(self.super_classes)

    def super_of(self, fine: str) -> int | str:
        s = self.mapping[fine]
        return UNASSIGNED if s is None else s

    def members(self, super_index: int) -> list[int]:
        """Fine-class indices grouped under ``super_index``."""
        return [i for i, c in enumerate(self.fine_classes) if self.mapping[c] == super_index]

    def guidance_targets(self) -> list[int]:
        return list(range(self.n_super))

    def membership_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_fine, self.n_super), dtype=np.int64)
        for i, c in enumerate(self.fine_classes):
            s = self.mapping[c]
            if s is not None:
                m[i, s] = 1
        return m


TAXONOMY = ClassTaxonomy()


def to_superclass(labels14, taxonomy: ClassTaxonomy = TAXONOMY) -> np.ndarray:
    """Collapse fine labels (..., 14) into super-class labels (..., 7).

    A super-class is on when any member fine class is on; unassigned fine
    classes are dropped.
    """
    labels14 = np.asarray(labels14)
    if labels14.shape[-1] != taxonomy.n_fine:
        raise ValueError(f"expected last dim {taxonomy.n_fine}, got {labels14.shape}")
    hits = (labels14.astype(np.int64) > 0).astype(np.int64) @ taxonomy.membership_matrix()
    return (hits > 0).astype(np.int64)


def super_index(name: str, taxonomy: ClassTaxonomy = TAXONOMY) -> int:
    """Look up a super-class by display name or by 1-based number ("2")."""
    if name.isdigit():
        i = int(name) - 1
        if not 0 <= i < taxonomy.n_super:
            raise ValueError(f"super-class number out of range: {name}")
        return i
    norm = name.strip().lower()
    for i, s in enumerate(taxonomy.super_classes):
        if s.lower() == norm:
            return i
    raise ValueError(f"unknown super-class: {name!r}")


def slug(name: str) -> str:
    return name.lower().replace(" ", "_")
