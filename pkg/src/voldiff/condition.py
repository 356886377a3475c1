"""Conditioning signals: region class, anatomy labels, position channels and task targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, LayoutError, ShapeError
from .posenc import DEFAULT_FREQUENCIES, coord_grid_for_window, fourier_encode
from .voxgrid import CropRecord, RegionClass

DEFAULT_LABELS = 8
REGION_INDEX = {RegionClass.HAN: 0, RegionClass.CHEST: 1, RegionClass.ABDOMEN: 2}


def region_embedding_index(r) -> int:
    return REGION_INDEX[RegionClass.parse(r)]


@dataclass(frozen=True)
class ChannelLayout:
    """Declared order of the denoiser's condition channels; stored in checkpoints."""

    frequencies: int = DEFAULT_FREQUENCIES
    num_labels: int = DEFAULT_LABELS
    raw_coords: bool = True
    order: tuple = ("anatomy", "coords", "pos_embed")

    @property
    def condition_channels(self) -> int:
        return 1 + (3 if self.raw_coords else 0) + 6 * self.frequencies

    def to_json(self) -> dict:
        return {
            "frequencies": self.frequencies,
            "num_labels": self.num_labels,
            "raw_coords": self.raw_coords,
            "order": list(self.order),
            "condition_channels": self.condition_channels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelLayout":
        return cls(int(obj["frequencies"]), int(obj["num_labels"]), bool(obj["raw_coords"]),
                   tuple(obj.get("order", cls.order)))

    def require(self, other: "ChannelLayout") -> None:
        if self.to_json() != other.to_json():
            raise LayoutError(f"channel layout mismatch: {self.to_json()} vs {other.to_json()}")


@dataclass(frozen=True, eq=False)
class ConditionBundle:
    region: RegionClass
    anatomy: np.ndarray
    coords: np.ndarray
    pos_embed: np.ndarray
    num_labels: int = DEFAULT_LABELS
    target: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return tuple(self.anatomy.shape)

    def with_target(self, target) -> "ConditionBundle":
        return ConditionBundle(self.region, self.anatomy, self.coords, self.pos_embed,
                               self.num_labels, None if target is None else np.asarray(target),
                               self.extras)


def make_condition(region, anatomy, record: CropRecord | None = None, *,
                   frequencies: int = DEFAULT_FREQUENCIES, num_labels: int = DEFAULT_LABELS,
                   target=None) -> ConditionBundle:
    """Build a bundle for a patch whose position in the source volume is `record`.

    Without a record the patch is treated as a whole volume.
    """
    anatomy = np.asarray(anatomy)
    if anatomy.ndim != 3:
        raise ShapeError(f"anatomy must be 3D, got {anatomy.shape}")
    if anatomy.size and (anatomy.min() < 0 or anatomy.max() >= num_labels):
        raise InvalidArgument(f"anatomy labels must lie in [0, {num_labels})")
    record = record or CropRecord.whole(anatomy.shape)
    coords = coord_grid_for_window(record.volume_shape, record, anatomy.shape)
    return ConditionBundle(RegionClass.parse(region), anatomy, coords,
                           fourier_encode(coords, frequencies), num_labels,
                           None if target is None else np.asarray(target))


def crop_condition(region, anatomy_volume, origin, size, *, frequencies=DEFAULT_FREQUENCIES,
                   num_labels=DEFAULT_LABELS, target_volume=None) -> ConditionBundle:
    """Condition for an axis-aligned window of a whole volume (no resizing)."""
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    record = CropRecord(tuple(anatomy_volume.shape), tuple(origin), tuple(size))
    target = None if target_volume is None else target_volume[sl]
    return make_condition(region, anatomy_volume[sl], record, frequencies=frequencies,
                          num_labels=num_labels, target=target)


def assemble_condition_channels(b: ConditionBundle, layout: ChannelLayout | None = None):
    """Stack spatial condition channels; returns (channels, region_index).

    Order: anatomy (label / (K - 1)), raw coordinates x, y, z, then the Fourier features.
    The region is not spatial and comes back as an embedding index.
    """
    shape = b.shape
    for name, arr in (("coords", b.coords), ("pos_embed", b.pos_embed)):
        if tuple(arr.shape[1:]) != shape:
            raise ShapeError(f"{name} spatial shape {arr.shape[1:]} != anatomy shape {shape}")
    if b.target is not None and tuple(b.target.shape) != shape:
        raise ShapeError(f"target shape {b.target.shape} != anatomy shape {shape}")
    if layout is not None:
        if layout.num_labels != b.num_labels or 6 * layout.frequencies != b.pos_embed.shape[0]:
            raise LayoutError("condition bundle does not match the declared channel layout")
    raw_coords = True if layout is None else layout.raw_coords
    anatomy = b.anatomy.astype(np.float64)[None] / max(b.num_labels - 1, 1)
    parts = [anatomy]
    if raw_coords:
        parts.append(b.coords)
    parts.append(b.pos_embed)
    return np.concatenate(parts, axis=0), region_embedding_index(b.region)
