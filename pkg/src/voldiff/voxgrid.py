"""Volume container, HU windowing, trilinear resize, cropping and multi-level patch sampling."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BoundsError, FormatError, InvalidArgument, ShapeError

VVOL_MAGIC = "VVOL1"


class RegionClass(str, enum.Enum):
    HAN = "HaN"
    CHEST = "Chest"
    ABDOMEN = "Abdomen"

    @classmethod
    def parse(cls, value: "str | RegionClass") -> "RegionClass":
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise InvalidArgument(f"unknown region class {value!r}")


@dataclass(frozen=True)
class WindowSpec:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidArgument(f"window width must be positive, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2.0


# Per-region CT windows used for normalization.
REGION_WINDOWS = {
    RegionClass.HAN: WindowSpec(50.0, 400.0),
    RegionClass.CHEST: WindowSpec(-500.0, 1800.0),
    RegionClass.ABDOMEN: WindowSpec(60.0, 360.0),
}


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense (D, H, W) scalar grid; `data` is indexed [z, y, x] so x is the fastest axis."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    window: WindowSpec = field(default_factory=lambda: REGION_WINDOWS[RegionClass.HAN])
    region: RegionClass = RegionClass.HAN

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise InvalidArgument(f"spacing must be three positive values, got {self.spacing}")
        data = data.copy() if data.flags.writeable else data
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "region", RegionClass.parse(self.region))

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True)
class CropRecord:
    """Voxel extent a patch occupies in its source volume."""

    volume_shape: tuple
    origin: tuple
    extent: tuple
    branch: str = "crop"
    fallback: bool = False

    @classmethod
    def whole(cls, volume_shape, branch: str = "resize", fallback: bool = False) -> "CropRecord":
        shape = tuple(int(s) for s in volume_shape)
        return cls(shape, (0, 0, 0), shape, branch, fallback)


def hu_normalize(v: Volume, w: WindowSpec | None = None) -> Volume:
    w = w or v.window
    if not w.width > 0:
        raise InvalidArgument("window width must be positive")
    out = np.clip((v.data.astype(np.float64) - w.lower) / w.width, 0.0, 1.0) * 2.0 - 1.0
    return v.with_data(out, window=w)


def hu_denormalize(v: Volume, w: WindowSpec | None = None) -> Volume:
    w = w or v.window
    out = (v.data.astype(np.float64) + 1.0) / 2.0 * w.width + w.lower
    return v.with_data(out, window=w)


def _axis_weights(n_in: int, n_out: int):
    # half-voxel aligned source coordinates, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_array(a: np.ndarray, target_shape) -> np.ndarray:
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s < 1 for s in target_shape):
        raise InvalidArgument(f"invalid target shape {target_shape}")
    if tuple(a.shape) == target_shape:
        return np.array(a, copy=True)
    out = np.asarray(a, dtype=np.float64)
    for axis, n_out in enumerate(target_shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, w = _axis_weights(n_in, n_out)
        v0 = np.take(out, i0, axis=axis)
        v1 = np.take(out, i1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = n_out
        out = v0 + w.reshape(shape) * (v1 - v0)
    return out


def resize_trilinear(v: Volume, target_shape) -> Volume:
    target_shape = tuple(int(s) for s in target_shape)
    data = resize_array(v.data, target_shape)
    spacing = tuple(sp * n / m for sp, n, m in zip(v.spacing, v.shape, target_shape))
    return v.with_data(data, spacing=spacing)


def crop_array(a: np.ndarray, origin, size) -> np.ndarray:
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if any(o < 0 for o in origin) or any(s < 1 for s in size) or any(
        o + s > n for o, s, n in zip(origin, size, a.shape[-3:])
    ):
        raise BoundsError(f"crop origin={origin} size={size} outside shape {a.shape[-3:]}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return np.array(a[(..., *sl)], copy=True)


def crop(v: Volume, origin, size) -> tuple[Volume, CropRecord]:
    data = crop_array(v.data, origin, size)
    record = CropRecord(v.shape, tuple(int(o) for o in origin), tuple(int(s) for s in size))
    return v.with_data(data), record


def multi_level_sample(v: Volume, patch, rng: np.random.Generator, branch: int | None = None):
    """Draw one training patch: whole-volume resize, 2x crop then resize, or plain crop.

    The branch index is drawn uniformly from `rng` unless given. Crop branches that do
    not fit the volume fall back to the whole-volume resize and flag the record.
    """
    patch = tuple(int(p) for p in patch)
    choice = int(rng.integers(3)) if branch is None else int(branch)
    if choice == 1:
        size = tuple(2 * p for p in patch)
    elif choice == 2:
        size = patch
    else:
        size = None

    if size is not None and any(s > n for s, n in zip(size, v.shape)):
        size, fallback = None, True
    else:
        fallback = False

    if size is None:
        out = resize_trilinear(v, patch)
        return out, CropRecord.whole(v.shape, "resize", fallback)

    origin = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(v.shape, size))
    cropped, record = crop(v, origin, size)
    if choice == 1:
        cropped = resize_trilinear(cropped, patch)
        record = replace(record, branch="crop2x")
    return cropped, record


def write_vvol(path, v: Volume) -> None:
    header = {
        "magic": VVOL_MAGIC,
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "window": {"level": v.window.level, "width": v.window.width},
        "region": v.region.value,
    }
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_vvol(path) -> Volume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing VVOL header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad VVOL header") from exc
    if header.get("magic") != VVOL_MAGIC:
        raise FormatError(f"{path}: magic {header.get('magic')!r} != {VVOL_MAGIC}")
    shape = tuple(int(s) for s in header["shape"])
    body = raw[nl + 1:]
    if len(body) != 4 * int(np.prod(shape)):
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {4 * int(np.prod(shape))}")
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    win = header["window"]
    return Volume(data, tuple(header["spacing"]), WindowSpec(float(win["level"]), float(win["width"])),
                  RegionClass.parse(header["region"]))


def resize_nearest(a: np.ndarray, target_shape) -> np.ndarray:
    """Half-voxel aligned nearest-neighbour resize, for label volumes."""
    target_shape = tuple(int(s) for s in target_shape)
    if tuple(a.shape) == target_shape:
        return np.array(a, copy=True)
    idx = [np.minimum(((np.arange(m) + 0.5) * (n / m)).astype(np.int64), n - 1)
           for n, m in zip(a.shape, target_shape)]
    return a[np.ix_(*idx)]


def apply_record(a: np.ndarray, record: CropRecord, patch, labels: bool = False) -> np.ndarray:
    """Reproduce the crop/resize described by `record` on a paired array (e.g. anatomy labels)."""
    out = crop_array(a, record.origin, record.extent)
    if tuple(out.shape) != tuple(patch):
        out = resize_nearest(out, patch) if labels else resize_array(out, patch)
    return out
