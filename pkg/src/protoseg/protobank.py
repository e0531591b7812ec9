"""Prototype banks, contrast-set construction and teacher prototype state.

Prototypes are mean projected features over (class, quantized-distance-bin)
pixel groups.  Vectors are kept as torch tensors so gradients can flow from
the contrastive losses back into the feature map.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from protoseg.geometry import SignedDistanceMap, interior_distance_set

logger = logging.getLogger(__name__)


@dataclass
class ProtoEntry:
    vector: torch.Tensor  # (D,)
    count: int
    uncertainty: float | None = None


@dataclass
class PrototypeBank:
    """Map (class, negative distance bin) -> prototype entry."""

    entries: dict[tuple[int, int], ProtoEntry] = field(default_factory=dict)
    built_from: str = ""

    def keys(self):
        return self.entries.keys()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> ProtoEntry:
        return self.entries[key]


@dataclass(frozen=True)
class ContrastSets:
    anchor: tuple[int, int]
    positives: list[tuple[tuple[int, int], torch.Tensor]]
    negatives: list[tuple[tuple[int, int], torch.Tensor]]


def extract_prototypes(
    features: torch.Tensor,
    sdm: SignedDistanceMap,
    max_bin: int = 24,
    built_from: str = "",
) -> PrototypeBank:
    """Mean feature per (class, interior distance bin).

    features: (H, W, D) tensor aligned with the sdm planes.  Bins deeper than
    -max_bin are merged into the -max_bin bin to bound bank size.
    """
    if not isinstance(features, torch.Tensor):
        features = torch.as_tensor(features, dtype=torch.float32)
    c_planes, h, w = sdm.values.shape
    if features.shape[:2] != (h, w):
        raise ValueError(
            f"features {tuple(features.shape[:2])} not aligned with sdm planes ({h}, {w})"
        )
    flat = features.reshape(h * w, features.shape[-1])
    bank = PrototypeBank(built_from=built_from)
    for c in range(c_planes):
        if not sdm.class_present[c]:
            continue
        plane = np.maximum(sdm.plane(c), -max_bin).reshape(-1)
        for j in sorted(interior_distance_set(plane)):
            idx = np.nonzero(plane == j)[0]
            vec = flat[torch.from_numpy(idx)].mean(dim=0)
            bank.entries[(c, int(j))] = ProtoEntry(vector=vec, count=len(idx))
    return bank


def merge_banks(banks: list[PrototypeBank], built_from: str = "") -> PrototypeBank:
    """Count-weighted merge of per-image banks into one batch bank."""
    merged = PrototypeBank(built_from=built_from)
    for bank in banks:
        for key, entry in bank.entries.items():
            if key in merged.entries:
                old = merged.entries[key]
                total = old.count + entry.count
                vec = (old.vector * old.count + entry.vector * entry.count) / total
                merged.entries[key] = ProtoEntry(vector=vec, count=total)
            else:
                merged.entries[key] = ProtoEntry(vector=entry.vector, count=entry.count)
    return merged


def build_contrast_sets(bank: PrototypeBank, anchor: tuple[int, int]) -> ContrastSets:
    """Positives: same-class entries minus the anchor; negatives: all entries
    of other classes.  The anchor belongs to neither set."""
    if anchor not in bank:
        raise KeyError(f"anchor {anchor} not in bank")
    c = anchor[0]
    positives, negatives = [], []
    for key, entry in bank.entries.items():
        if key == anchor:
            continue
        (positives if key[0] == c else negatives).append((key, entry.vector))
    return ContrastSets(anchor=anchor, positives=positives, negatives=negatives)


def class_mean_feature(features: torch.Tensor, labels: np.ndarray, class_id: int):
    """Mean feature over pixels labeled class_id, or None if the class is
    absent.  labels may come from ground truth or pseudo-labels."""
    if not isinstance(features, torch.Tensor):
        features = torch.as_tensor(features, dtype=torch.float32)
    labels = np.asarray(labels)
    if features.shape[:2] != labels.shape:
        raise ValueError("features and labels are not spatially aligned")
    idx = np.nonzero(labels.reshape(-1) == class_id)[0]
    if len(idx) == 0:
        return None
    flat = features.reshape(-1, features.shape[-1])
    return flat[torch.from_numpy(idx)].mean(dim=0)


def update_teacher_prototype(
    p2: torch.Tensor | None,
    p1: torch.Tensor,
    v: torch.Tensor | None,
    mu: float,
    gamma: float,
) -> torch.Tensor:
    """Convex blend of teacher prototype, student prototype and the batch
    class-mean teacher feature.

    Coefficients (mu+gamma-1, 1-mu, 1-gamma) sum to one.  With v absent this
    degenerates to the plain EMA mu*p2 + (1-mu)*p1; a never-seen class is
    initialized to p1.
    """
    if not (0.0 <= mu <= 1.0 and 0.0 <= gamma <= 1.0 and mu + gamma >= 1.0):
        raise ValueError(f"invalid coefficients mu={mu}, gamma={gamma}")
    if p2 is None:
        return p1.clone()
    if p1.shape != p2.shape or (v is not None and v.shape != p2.shape):
        raise ValueError("prototype vectors must share one dimension")
    if v is None:
        return mu * p2 + (1.0 - mu) * p1
    return (mu + gamma - 1.0) * p2 + (1.0 - mu) * p1 + (1.0 - gamma) * v


def prototype_uncertainty(p: torch.Tensor, classifier) -> float:
    """Entropy of the classifier's class distribution for a prototype.

    classifier maps a (D,) vector to a probability vector over classes; the
    output must lie on the simplex within 1e-6.
    """
    with torch.no_grad():
        v = classifier(p.detach())
    v = v.reshape(-1)
    if v.min() < -1e-6 or abs(float(v.sum()) - 1.0) > 1e-6:
        raise ValueError("classifier output is not a probability vector")
    v = v.clamp(min=0.0)
    nz = v[v > 0]
    return float(-(nz * nz.log()).sum())


class TeacherPrototypeSet:
    """Per-class teacher prototypes updated once per training step."""

    def __init__(self):
        self.prototypes: dict[int, torch.Tensor] = {}
        self.step = 0

    def classes(self) -> list[int]:
        return sorted(self.prototypes.keys())

    def get(self, class_id: int):
        return self.prototypes.get(class_id)

    def update(self, class_id: int, p1: torch.Tensor, v: torch.Tensor | None,
               mu: float, gamma: float) -> None:
        p2 = self.prototypes.get(class_id)
        new = update_teacher_prototype(p2, p1.detach(), None if v is None else v.detach(),
                                       mu, gamma)
        if not torch.isfinite(new).all():
            raise ValueError(f"teacher prototype for class {class_id} is not finite")
        self.prototypes[class_id] = new

    def advance(self) -> None:
        self.step += 1

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "prototypes": {str(c): p for c, p in self.prototypes.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.prototypes = {int(c): p for c, p in state["prototypes"].items()}
