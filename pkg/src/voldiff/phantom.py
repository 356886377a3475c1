"""Synthetic CT-like phantoms: region backgrounds, labelled ellipsoid organs, lesions, degradations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .inverse import slab_mean
from .voxgrid import REGION_WINDOWS, RegionClass, Volume, resize_array, write_vvol

BACKGROUND_LEVEL = {RegionClass.HAN: 0.0, RegionClass.CHEST: -0.5, RegionClass.ABDOMEN: 0.2}
NUM_LABELS = 8

# (name, label, relative center (z, y, x), relative radii, intensity)
ORGANS = {
    RegionClass.HAN: [
        ("brain", 1, (0.50, 0.45, 0.50), (0.30, 0.32, 0.28), 0.35),
        ("brainstem", 2, (0.50, 0.78, 0.50), (0.14, 0.10, 0.10), 0.60),
    ],
    RegionClass.CHEST: [
        ("lung_left", 3, (0.50, 0.50, 0.28), (0.32, 0.30, 0.16), -0.85),
        ("lung_right", 4, (0.50, 0.50, 0.72), (0.32, 0.30, 0.16), -0.85),
        ("heart", 5, (0.55, 0.55, 0.50), (0.16, 0.16, 0.11), 0.45),
    ],
    RegionClass.ABDOMEN: [
        ("liver", 6, (0.50, 0.45, 0.35), (0.28, 0.25, 0.22), 0.50),
        ("kidney", 7, (0.50, 0.60, 0.74), (0.16, 0.10, 0.10), 0.75),
    ],
}
LESION_HOST = {RegionClass.HAN: 1, RegionClass.CHEST: 5, RegionClass.ABDOMEN: 6}
LESION_OFFSET = -0.6


class SpecError(InvalidArgument):
    pass


@dataclass(frozen=True)
class Component:
    label: int
    center: tuple
    radii: tuple
    intensity: float


@dataclass(frozen=True)
class LesionSpec:
    center: tuple
    radius: float
    offset: float
    host_label: int


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple
    region: RegionClass
    components: tuple = ()
    lesion: LesionSpec | None = None
    texture: float = 0.0
    seed: int = 0
    num_labels: int = NUM_LABELS

    def to_json(self) -> dict:
        out = asdict(self)
        out["region"] = RegionClass.parse(self.region).value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        lesion = obj.get("lesion")
        return cls(
            tuple(obj["shape"]), RegionClass.parse(obj["region"]),
            tuple(Component(c["label"], tuple(c["center"]), tuple(c["radii"]), c["intensity"])
                  for c in obj["components"]),
            None if lesion is None else LesionSpec(tuple(lesion["center"]), lesion["radius"],
                                                   lesion["offset"], lesion["host_label"]),
            obj["texture"], obj["seed"], obj.get("num_labels", NUM_LABELS),
        )


def _validate(spec: PhantomSpec) -> None:
    labels = [c.label for c in spec.components]
    if len(set(labels)) != len(labels):
        raise SpecError("component labels must be unique")
    for c in spec.components:
        if not 1 <= c.label < spec.num_labels:
            raise SpecError(f"label {c.label} outside [1, {spec.num_labels})")
        if not -1.0 <= c.intensity <= 1.0:
            raise SpecError(f"intensity {c.intensity} outside [-1, 1]")
        for cen, r, n in zip(c.center, c.radii, spec.shape):
            if r <= 0 or cen - r < 0 or cen + r > n - 1:
                raise SpecError(f"component {c.label} leaves the volume")
    if spec.lesion is not None and spec.lesion.host_label not in labels:
        raise SpecError(f"lesion host {spec.lesion.host_label} is not a component")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    z, y, x = np.ogrid[:shape[0], :shape[1], :shape[2]]
    return (((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
            + ((x - center[2]) / radii[2]) ** 2) <= 1.0


def smooth_texture(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.standard_normal((4, 4, 4))
    return amplitude * resize_array(coarse, shape)


def generate_phantom(spec: PhantomSpec):
    """Render (Volume, anatomy labels, lesion mask) deterministically from the spec seed."""
    _validate(spec)
    region = RegionClass.parse(spec.region)
    shape = tuple(int(n) for n in spec.shape)
    rng = np.random.default_rng(spec.seed)
    image = np.full(shape, BACKGROUND_LEVEL[region], dtype=np.float64)
    anatomy = np.zeros(shape, dtype=np.int64)
    for c in spec.components:
        inside = ellipsoid_mask(shape, c.center, c.radii)
        image[inside] = c.intensity
        anatomy[inside] = c.label
    if spec.texture:
        image += smooth_texture(shape, spec.texture, rng)
    lesion = np.zeros(shape, dtype=np.uint8)
    if spec.lesion is not None:
        ls = spec.lesion
        sphere = ellipsoid_mask(shape, ls.center, (ls.radius,) * 3)
        inside = sphere & (anatomy == ls.host_label)
        lesion[inside] = 1
        image[inside] += ls.offset
    image = np.clip(image, -1.0, 1.0)
    return Volume(image, window=REGION_WINDOWS[region], region=region), anatomy, lesion


def random_spec(region, shape, rng: np.random.Generator, *, lesion: bool = False,
                texture: float = 0.05, jitter: float = 0.04) -> PhantomSpec:
    """Organ layout for `region` with small random shifts, scalings and intensity changes."""
    region = RegionClass.parse(region)
    shape = tuple(int(n) for n in shape)
    comps = []
    for _, label, rc, rr, inten in ORGANS[region]:
        radii = tuple(max(1.0, r * n * rng.uniform(0.9, 1.1)) for r, n in zip(rr, shape))
        center = tuple(
            float(np.clip(c * (n - 1) + rng.uniform(-jitter, jitter) * n, r, n - 1 - r))
            for c, n, r in zip(rc, shape, radii))
        comps.append(Component(label, center, radii,
                               float(np.clip(inten + rng.uniform(-0.05, 0.05), -1, 1))))
    les = None
    if lesion:
        host = next(c for c in comps if c.label == LESION_HOST[region])
        radius = float(rng.uniform(0.09, 0.13) * min(shape))
        # keep the lesion centre well inside the host ellipsoid
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        frac = rng.uniform(0.0, 0.35)
        center = tuple(float(c + frac * d * r) for c, d, r in zip(host.center, direction, host.radii))
        les = LesionSpec(center, radius, LESION_OFFSET, host.label)
    return PhantomSpec(shape, region, tuple(comps), les, float(texture), int(rng.integers(2 ** 31)))


def gaussian_phantom(shape, region, mu: float, var: float, seed: int):
    """i.i.d. N(mu, var) voxels with empty anatomy; matches the analytic Gaussian prior."""
    region = RegionClass.parse(region)
    rng = np.random.default_rng(seed)
    data = mu + np.sqrt(var) * rng.standard_normal(tuple(int(n) for n in shape))
    empty = np.zeros(data.shape, dtype=np.int64)
    return Volume(data, window=REGION_WINDOWS[region], region=region), empty, empty.astype(np.uint8)


def simulate_low_dose(v: Volume, sigma_n: float, rng: np.random.Generator) -> Volume:
    if sigma_n < 0:
        raise InvalidArgument(f"sigma_n must be >= 0, got {sigma_n}")
    if sigma_n == 0:
        return v.with_data(np.array(v.data, dtype=np.float64))
    return v.with_data(v.data + sigma_n * rng.standard_normal(v.shape))


def simulate_thick_slice(v: Volume, sf: int) -> tuple[Volume, bool]:
    """Average `sf` consecutive z slices; returns (low-res volume, padded flag).

    Depths not divisible by `sf` are reflect-padded at the far end first.
    """
    sf = int(sf)
    if sf < 1:
        raise InvalidArgument(f"scale factor must be >= 1, got {sf}")
    data = np.asarray(v.data, dtype=np.float64)
    pad = (-data.shape[0]) % sf
    if pad:
        data = np.pad(data, ((0, pad), (0, 0), (0, 0)), mode="reflect")
    lr = slab_mean(data, sf)
    spacing = (v.spacing[0] * sf, v.spacing[1], v.spacing[2])
    return v.with_data(lr, spacing=spacing), bool(pad)


def split_counts(n: int) -> tuple[int, int, int]:
    """90/5/5 split: validation and test sizes are floored, the remainder trains."""
    n_val = n_test = int(math.floor(0.05 * n))
    return n - n_val - n_test, n_val, n_test


@dataclass
class Recipe:
    shape: tuple = (32, 32, 32)
    regions: tuple = ("HaN", "Chest", "Abdomen")
    lesion_fraction: float = 0.0
    texture: float = 0.05
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict | None) -> "Recipe":
        obj = dict(obj or {})
        return cls(tuple(obj.pop("shape", (32, 32, 32))), tuple(obj.pop("regions", cls.regions)),
                   float(obj.pop("lesion_fraction", 0.0)), float(obj.pop("texture", 0.05)), obj)

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "regions": list(self.regions),
                "lesion_fraction": self.lesion_fraction, "texture": self.texture, **self.extra}


def build_dataset(n: int, recipe: Recipe, seed: int, out_dir) -> dict:
    """Write `n` phantom cases plus manifest.json under `out_dir`; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train, n_val, _ = split_counts(n)
    order = rng.permutation(n)
    split = {}
    for rank, idx in enumerate(order):
        split[int(idx)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    # exactly round(fraction * n) lesion cases, chosen at random
    with_lesion = set(int(i) for i in rng.permutation(n)[:int(round(recipe.lesion_fraction * n))])
    kind = recipe.extra.get("kind", "organs")
    if kind not in ("organs", "gaussian"):
        raise InvalidArgument(f"unknown recipe kind {kind!r}")
    cases = []
    for i in range(n):
        region = recipe.regions[i % len(recipe.regions)]
        if kind == "gaussian":
            has_lesion = False
            mu, var = float(recipe.extra.get("mu", 0.3)), float(recipe.extra.get("var", 0.04))
            spec_json = {"kind": "gaussian", "shape": list(recipe.shape), "region": region,
                         "mu": mu, "var": var, "seed": int(rng.integers(2 ** 31))}
            vol, anatomy, lesion = gaussian_phantom(recipe.shape, region, mu, var, spec_json["seed"])
        else:
            has_lesion = i in with_lesion
            spec = random_spec(region, recipe.shape, rng, lesion=has_lesion, texture=recipe.texture)
            spec_json = spec.to_json()
            vol, anatomy, lesion = generate_phantom(spec)
        case_id = f"case_{i:04d}"
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        write_vvol(case_dir / "image.vvol", vol)
        write_vvol(case_dir / "anatomy.vvol", vol.with_data(anatomy.astype(np.float32)))
        write_vvol(case_dir / "lesion.vvol", vol.with_data(lesion.astype(np.float32)))
        cases.append({"id": case_id, "split": split[i], "region": vol.region.value,
                      "lesion": has_lesion, "spec": spec_json,
                      "files": {"image": f"{case_id}/image.vvol", "anatomy": f"{case_id}/anatomy.vvol",
                                "lesion": f"{case_id}/lesion.vvol"}})
    manifest = {"seed": int(seed), "n": int(n), "recipe": recipe.to_json(), "cases": cases}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
