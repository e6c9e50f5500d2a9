"""Seeded synthetic "brain-like" HU phantoms.

Deliberately minimal anatomy: an ellipsoidal skull-stripped brain with
smooth internal intensity structure and ventricle-like low-HU pockets,
surrounded by a constant background fill. Lesioned variants add a hyperdense
spherical blob (optionally with a radial mass-effect displacement of the
surrounding tissue); corrupted variants emulate acquisition artifacts and
postsurgical outliers. Everything is a pure function of its seed.

Intensities stay within the plausible pre-windowing range [-100, 200] HU:
background -100, tissue around 40, ventricles near 5, lesions tissue+offset.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, LesionOutOfBounds
from .volume import IntensityDomain, Volume, save_volume

BACKGROUND_HU = -100.0
TISSUE_HU = 40.0
VENTRICLE_HU = 5.0
HU_PLAUSIBLE = (-100.0, 200.0)

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"

LESION_TYPES = ("epidural", "subdural", "intraparenchymal")


class Corruption(str, Enum):
    STRIPES = "STRIPES"
    TRUNCATION = "TRUNCATION"
    MISALIGNMENT = "MISALIGNMENT"


class Category(str, Enum):
    HEALTHY = "HEALTHY"
    LESION = "LESION"
    ARTIFACT = "ARTIFACT"
    POSTSURGICAL_LIKE = "POSTSURGICAL_LIKE"


@dataclass(frozen=True)
class LesionSpec:
    radius_vox: float
    intensity_offset: float = 50.0
    mass_effect_shift_vox: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    n_tissue_blobs: int = 6
    lesion: LesionSpec | None = None
    corruption: Corruption | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ConfigError(f"phantom shape must be 3 ints >= 8, got {self.shape}")
        if self.n_tissue_blobs < 0:
            raise ConfigError("n_tissue_blobs must be >= 0")
        if self.lesion is not None and not self.lesion.radius_vox < min(self.shape) / 4:
            raise ConfigError(
                f"lesion radius {self.lesion.radius_vox} must be < min(shape)/4 = {min(self.shape) / 4}"
            )


@dataclass
class PhantomSample:
    volume: Volume
    label: str
    category: Category
    lesion_mask: np.ndarray | None = None
    lesion_types: frozenset[str] = frozenset()
    sample_id: str = ""

    def __post_init__(self) -> None:
        has_mask = self.lesion_mask is not None
        should_have = self.label == LABEL_ABNORMAL and self.category is Category.LESION
        if has_mask != should_have:
            raise ConfigError("lesion_mask present iff label=abnormal and category=LESION")
        if has_mask and self.lesion_mask.shape != self.volume.shape:
            raise ConfigError("lesion_mask shape must match volume shape")


def _rng(spec: PhantomSpec, tag: str) -> np.random.Generator:
    digest = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed), digest]))


def _grid(shape: tuple[int, int, int]) -> list[np.ndarray]:
    """Per-axis coordinates in [-1, 1], broadcastable to the full grid."""
    axes = []
    for i, n in enumerate(shape):
        c = np.linspace(-1.0, 1.0, n)
        shp = [1, 1, 1]
        shp[i] = n
        axes.append(c.reshape(shp))
    return axes


def _brain_geometry(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mask, ellipsoid_field, tissue HU field inside the brain)."""
    rng = _rng(spec, "anatomy")
    zz, yy, xx = _grid(spec.shape)
    semi = rng.uniform(0.62, 0.78, size=3)
    center = rng.uniform(-0.05, 0.05, size=3)
    field = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    mask = field <= 1.0
    tissue = np.full(spec.shape, TISSUE_HU)
    for _ in range(spec.n_tissue_blobs):
        c = rng.uniform(-0.5, 0.5, size=3)
        amp = rng.uniform(-12.0, 12.0)
        width = rng.uniform(0.15, 0.35)
        r2 = ((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2) / width**2
        tissue = tissue + amp * np.exp(-0.5 * r2)
    # ventricle-like low-HU pockets flanking the midline
    for side in (-1.0, 1.0):
        c = center + np.array([0.0, -0.05, side * 0.16]) + rng.uniform(-0.03, 0.03, size=3)
        widths = np.array([0.30, 0.12, 0.08]) * rng.uniform(0.85, 1.15, size=3)
        r2 = (
            ((zz - c[0]) / widths[0]) ** 2
            + ((yy - c[1]) / widths[1]) ** 2
            + ((xx - c[2]) / widths[2]) ** 2
        )
        blend = np.exp(-0.5 * r2 * 3.0)
        tissue = tissue + (VENTRICLE_HU - tissue) * blend
    return mask, field, tissue


def _assemble(spec: PhantomSpec, mask: np.ndarray, tissue: np.ndarray) -> np.ndarray:
    data = np.full(spec.shape, BACKGROUND_HU)
    lo, hi = HU_PLAUSIBLE
    headroom = spec.lesion.intensity_offset if spec.lesion else 0.0
    data[mask] = np.clip(tissue[mask], lo + 1.0, hi - max(headroom, 0.0))
    return data


def make_healthy(spec: PhantomSpec) -> PhantomSample:
    """Smooth ellipsoidal brain phantom; background exactly at the fill value."""
    if spec.lesion is not None or spec.corruption is not None:
        raise ConfigError("healthy phantom spec must not carry lesion or corruption fields")
    mask, _, tissue = _brain_geometry(spec)
    data = _assemble(spec, mask, tissue)
    vol = Volume(data, intensity_domain=IntensityDomain.HU)
    return PhantomSample(volume=vol, label=LABEL_NORMAL, category=Category.HEALTHY)


def _healthy_counterpart(spec: PhantomSpec) -> PhantomSample:
    return make_healthy(replace(spec, lesion=None, corruption=None))


def make_lesioned(spec: PhantomSpec) -> PhantomSample:
    """Healthy phantom plus a hyperdense spherical blob fully inside the brain.

    The blob adds exactly ``intensity_offset`` HU to the underlying tissue,
    and a positive ``mass_effect_shift_vox`` radially displaces the structure
    in a surrounding shell (the blob interior itself stays tissue+offset, so
    paired comparisons against the healthy counterpart are exact).
    """
    if spec.lesion is None:
        raise ConfigError("lesion field required")
    lesion = spec.lesion
    healthy = _healthy_counterpart(spec).volume.data
    brain = healthy > BACKGROUND_HU
    rng = _rng(spec, "lesion")

    # candidate centers: voxels at least radius+1 inside the brain surface
    depth = ndimage.distance_transform_edt(brain)
    candidates = np.argwhere(depth >= lesion.radius_vox + 1.0)
    if candidates.shape[0] == 0:
        raise LesionOutOfBounds(
            f"no placement for lesion radius {lesion.radius_vox} inside brain of shape {spec.shape}"
        )
    center = candidates[rng.integers(candidates.shape[0])].astype(np.float64)

    zz, yy, xx = np.indices(spec.shape).astype(np.float64)
    dist = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
    mask = dist <= lesion.radius_vox

    data = healthy.copy()
    if lesion.mass_effect_shift_vox > 0:
        # displace the shell outside the blob, sampling the healthy volume
        # pulled toward the lesion center with linearly decaying magnitude
        r_inf = lesion.radius_vox * 2.5
        shell = (dist > lesion.radius_vox) & (dist < r_inf) & brain
        d = dist[shell]
        scale = lesion.mass_effect_shift_vox * (1.0 - (d - lesion.radius_vox) / (r_inf - lesion.radius_vox))
        coords = np.stack([zz[shell], yy[shell], xx[shell]])
        offsets = coords - center[:, None]
        norms = np.maximum(np.linalg.norm(offsets, axis=0), 1e-9)
        sample_at = coords - offsets / norms * scale
        data[shell] = ndimage.map_coordinates(healthy, sample_at, order=1, mode="nearest")
    data[mask] = healthy[mask] + lesion.intensity_offset

    vol = Volume(data, intensity_domain=IntensityDomain.HU)
    lesion_type = LESION_TYPES[int(rng.integers(len(LESION_TYPES)))]
    return PhantomSample(
        volume=vol,
        label=LABEL_ABNORMAL,
        category=Category.LESION,
        lesion_mask=mask,
        lesion_types=frozenset({lesion_type}),
    )


def make_corrupted(spec: PhantomSpec) -> PhantomSample:
    """Healthy phantom degraded by the named corruption.

    STRIPES adds periodic intensity bands inside the brain; TRUNCATION blanks
    a full axial slab (craniectomy-like, tagged POSTSURGICAL_LIKE);
    MISALIGNMENT shifts the whole volume so the brain clips the field edge.
    """
    if spec.corruption is None:
        raise ConfigError("corruption field required")
    healthy = _healthy_counterpart(spec).volume.data
    brain = healthy > BACKGROUND_HU
    rng = _rng(spec, "corruption")
    data = healthy.copy()

    if spec.corruption is Corruption.STRIPES:
        period = float(rng.uniform(4.0, 8.0))
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        z = np.arange(spec.shape[0]).reshape(-1, 1, 1)
        bands = 25.0 * np.sin(2.0 * np.pi * z / period + phase)
        data = np.where(brain, data + bands, data)
        category = Category.ARTIFACT
    elif spec.corruption is Corruption.TRUNCATION:
        zs = np.flatnonzero(brain.any(axis=(1, 2)))
        extent = int(zs[-1]) - int(zs[0]) + 1
        slab = max(2, int(round(extent * rng.uniform(0.25, 0.4))))
        data[int(zs[0]) : int(zs[0]) + slab] = BACKGROUND_HU
        category = Category.POSTSURGICAL_LIKE
    else:  # MISALIGNMENT
        shift = np.zeros(3, dtype=int)
        axes = rng.permutation(3)[:2]
        for ax in axes:
            shift[ax] = int(rng.integers(5, 9)) * (1 if rng.uniform() < 0.5 else -1)
        data = ndimage.shift(data, shift, order=0, mode="constant", cval=BACKGROUND_HU)
        category = Category.ARTIFACT

    lo, hi = HU_PLAUSIBLE
    vol = Volume(np.clip(data, lo, hi), intensity_domain=IntensityDomain.HU)
    return PhantomSample(volume=vol, label=LABEL_ABNORMAL, category=category)


def _child_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def make_dataset(
    n_healthy: int,
    n_lesioned: int,
    n_corrupted: int,
    base_seed: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    lesion_offset_hu: float = 50.0,
) -> list[PhantomSample]:
    """Reproducible mixed dataset with derived per-sample seeds.

    Lesion radii, mass-effect shifts, and corruption kinds cycle
    deterministically; the returned order is a seeded shuffle of all samples.
    """
    if min(n_healthy, n_lesioned, n_corrupted) < 0:
        raise ConfigError("counts must be >= 0")
    samples: list[PhantomSample] = []
    index = 0
    for i in range(n_healthy):
        sample = make_healthy(PhantomSpec(shape=shape, seed=_child_seed(base_seed, index)))
        sample.sample_id = f"healthy_{i:04d}"
        samples.append(sample)
        index += 1
    radius_lo, radius_hi = 0.09 * min(shape), 0.16 * min(shape)
    for i in range(n_lesioned):
        seed = _child_seed(base_seed, index)
        srng = np.random.default_rng(seed)
        lesion = LesionSpec(
            radius_vox=float(srng.uniform(radius_lo, radius_hi)),
            intensity_offset=lesion_offset_hu,
            mass_effect_shift_vox=2.0 if i % 2 else 0.0,
        )
        sample = make_lesioned(PhantomSpec(shape=shape, lesion=lesion, seed=seed))
        sample.sample_id = f"lesion_{i:04d}"
        samples.append(sample)
        index += 1
    kinds = list(Corruption)
    for i in range(n_corrupted):
        sample = make_corrupted(
            PhantomSpec(shape=shape, corruption=kinds[i % len(kinds)], seed=_child_seed(base_seed, index))
        )
        sample.sample_id = f"corrupt_{i:04d}"
        samples.append(sample)
        index += 1
    order_rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), 0xD5]))
    order = order_rng.permutation(len(samples))
    return [samples[int(i)] for i in order]


def dataset_manifest(samples: list[PhantomSample], base_seed: int) -> dict:
    """Manifest of ids/labels/categories plus a content hash for pinning."""
    entries = []
    for s in samples:
        entries.append(
            {
                "id": s.sample_id,
                "label": s.label,
                "category": s.category.value,
                "lesion_types": sorted(s.lesion_types),
                "has_mask": s.lesion_mask is not None,
                "volume_sha256": s.volume.sha256(),
            }
        )
    body = {"base_seed": int(base_seed), "samples": entries}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return {**body, "manifest_sha256": digest}


def save_dataset(samples: list[PhantomSample], directory: Path | str, base_seed: int) -> dict:
    """Write volumes (and lesion masks) in the portable format plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_volume(s.volume, directory / s.sample_id)
        if s.lesion_mask is not None:
            mask_vol = Volume(s.lesion_mask.astype(np.float64), intensity_domain=IntensityDomain.ARBITRARY)
            save_volume(mask_vol, directory / f"{s.sample_id}_mask")
    manifest = dataset_manifest(samples, base_seed)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
