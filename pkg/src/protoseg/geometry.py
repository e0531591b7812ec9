"""Signed distance maps, boundaries and distance-bin bookkeeping.

All functions are pure and operate on plain numpy arrays; the brute-force
variant of the distance transform exists only as a test oracle.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Reserved plane value for classes with no foreground pixels.  Larger than any
# distance reachable on a realistic image.
SENTINEL = np.int32(np.iinfo(np.int32).max)


@dataclass(frozen=True)
class SegMask:
    """Per-pixel integer class labels with a provenance flag.

    labels: (H, W) integer array with values in [0, num_classes).
    provenance: "ground-truth" or "pseudo".
    """

    labels: np.ndarray
    num_classes: int
    provenance: str = "ground-truth"

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise ValueError(f"labels must be a nonempty 2-D array, got shape {labels.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("label values must lie in [0, num_classes)")
        if self.provenance not in ("ground-truth", "pseudo"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class SignedDistanceMap:
    """Per-class integer-quantized signed Euclidean distance planes.

    values: (C, H, W) int32; zero on class boundary pixels, negative strictly
    inside, positive outside.  Planes of absent classes hold SENTINEL.
    """

    values: np.ndarray
    class_present: np.ndarray

    def plane(self, class_id: int) -> np.ndarray:
        return self.values[class_id]


def boundary_mask(foreground: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour background pixel.

    Out-of-image is treated as background, so objects touching the frame
    still have a boundary there.
    """
    fg = np.asarray(foreground, dtype=bool)
    padded = np.pad(fg, 1, constant_values=False)
    all_fg_neighbours = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return fg & ~all_fg_neighbours


def _quantize(distances: np.ndarray) -> np.ndarray:
    # round half away from zero; distances are nonnegative
    return np.floor(distances + 0.5).astype(np.int32)


def signed_distance_plane(mask: SegMask, class_id: int) -> tuple[np.ndarray, bool]:
    """Quantized signed Euclidean distance to the boundary of one class.

    Returns (plane, present).  When the class has no pixels the plane is all
    SENTINEL and present is False.
    """
    if not 0 <= class_id < mask.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {mask.num_classes})")
    fg = mask.labels == class_id
    if not fg.any():
        return np.full(mask.shape, SENTINEL, dtype=np.int32), False
    boundary = boundary_mask(fg)
    dist = ndimage.distance_transform_edt(~boundary)
    plane = _quantize(dist)
    plane[fg] = -plane[fg]  # boundary pixels have distance 0, sign is moot
    return plane, True


def signed_distance_map(mask: SegMask) -> SignedDistanceMap:
    """Stack signed_distance_plane over every class of the mask."""
    planes = np.empty((mask.num_classes,) + mask.shape, dtype=np.int32)
    present = np.zeros(mask.num_classes, dtype=bool)
    for c in range(mask.num_classes):
        planes[c], present[c] = signed_distance_plane(mask, c)
    return SignedDistanceMap(values=planes, class_present=present)


def signed_distance_plane_bruteforce(mask: SegMask, class_id: int) -> tuple[np.ndarray, bool]:
    """O(N^2) nearest-boundary search with the same contract as
    signed_distance_plane.  Test oracle only."""
    if not 0 <= class_id < mask.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {mask.num_classes})")
    fg = mask.labels == class_id
    if not fg.any():
        return np.full(mask.shape, SENTINEL, dtype=np.int32), False
    boundary = boundary_mask(fg)
    by, bx = np.nonzero(boundary)
    h, w = mask.shape
    plane = np.empty((h, w), dtype=np.int32)
    for y in range(h):
        for x in range(w):
            sq = (by - y) ** 2 + (bx - x) ** 2
            d = np.sqrt(float(sq.min()))
            q = int(np.floor(d + 0.5))
            plane[y, x] = -q if fg[y, x] else q
    return plane, True


def distance_histogram(plane: np.ndarray, present: bool = True) -> dict[int, int]:
    """Count pixels per quantized distance value.  Empty for absent classes."""
    if not present:
        return {}
    values, counts = np.unique(plane, return_counts=True)
    return {int(v): int(n) for v, n in zip(values, counts)}

def interior_distance_set(plane: np.ndarray, present: bool = True) -> set[int]:
    """Strictly negative distance values occurring in the plane."""
    if not present:
        return set()
    return {int(v) for v in np.unique(plane) if v < 0}
