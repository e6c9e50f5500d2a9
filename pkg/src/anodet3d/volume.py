"""Dense 3D scalar volumes and their portable on-disk format.

A volume is a z,y,x-ordered array of real scalars with voxel spacing and an
intensity-domain tag. In memory the canonical dtype is float64; on disk a
volume is a pair of files: ``<name>.vol`` holding raw little-endian float32
values (z-major, then y, then x) and ``<name>.json`` describing shape,
spacing, and domain. Readers reject any shape/byte-count mismatch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

SIDECAR_DTYPE = "f32le"


class IntensityDomain(str, Enum):
    HU = "HU"
    NORMALIZED = "NORMALIZED"
    ARBITRARY = "ARBITRARY"


@dataclass
class Volume:
    """A dense 3D scalar grid with shape/spacing/intensity metadata.

    Invariants (checked on construction): data is 3D with positive extents,
    all values finite, spacing positive, and NORMALIZED volumes lie in
    [-1, 1].
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_domain: IntensityDomain = IntensityDomain.ARBITRARY

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or any(s < 1 for s in self.data.shape):
            raise VolumeFormatError(f"volume data must be 3D with positive extents, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeFormatError("volume contains non-finite values")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise VolumeFormatError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        self.intensity_domain = IntensityDomain(self.intensity_domain)
        if self.intensity_domain is IntensityDomain.NORMALIZED:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1.0 or hi > 1.0:
                raise VolumeFormatError(f"NORMALIZED volume out of [-1, 1]: min={lo}, max={hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, domain: IntensityDomain | None = None) -> "Volume":
        """Copy of this volume with new data (and optionally a new domain)."""
        return Volume(data, self.spacing_mm, domain if domain is not None else self.intensity_domain)

    def astype_f32(self) -> np.ndarray:
        return np.ascontiguousarray(self.data, dtype="<f4")

    def sha256(self) -> str:
        """Hash of the f32 byte image plus metadata; stable across runs."""
        h = hashlib.sha256()
        h.update(self.astype_f32().tobytes())
        h.update(json.dumps(_sidecar_dict(self), sort_keys=True).encode())
        return h.hexdigest()


def _sidecar_dict(vol: Volume) -> dict:
    return {
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing_mm),
        "intensity_domain": vol.intensity_domain.value,
        "dtype": SIDECAR_DTYPE,
    }


def volume_paths(base: Path | str) -> tuple[Path, Path]:
    """Resolve ``<name>.vol`` / ``<name>.json`` from a base path.

    The base may carry either extension or none at all.
    """
    base = Path(base)
    if base.suffix in (".vol", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".vol"), base.with_suffix(".json")


def save_volume(vol: Volume, base: Path | str) -> tuple[Path, Path]:
    """Write the raw/f32le + sidecar pair; returns the two paths."""
    vol_path, json_path = volume_paths(base)
    vol_path.parent.mkdir(parents=True, exist_ok=True)
    vol_path.write_bytes(vol.astype_f32().tobytes())
    json_path.write_text(json.dumps(_sidecar_dict(vol), indent=2, sort_keys=True) + "\n")
    return vol_path, json_path


def load_volume(base: Path | str) -> Volume:
    """Read a volume pair; rejects shape/byte-count/dtype mismatches."""
    vol_path, json_path = volume_paths(base)
    if not json_path.is_file():
        raise VolumeFormatError(f"missing sidecar {json_path}")
    if not vol_path.is_file():
        raise VolumeFormatError(f"missing raw file {vol_path}")
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"corrupt sidecar {json_path}: {exc}") from exc
    for key in ("shape", "spacing_mm", "intensity_domain", "dtype"):
        if key not in meta:
            raise VolumeFormatError(f"sidecar {json_path} missing field '{key}'")
    if meta["dtype"] != SIDECAR_DTYPE:
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r} in {json_path}")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise VolumeFormatError(f"sidecar {json_path} has invalid shape {shape}")
    raw = vol_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{vol_path}: byte count {len(raw)} does not match shape {shape} ({expected} bytes expected)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    try:
        domain = IntensityDomain(meta["intensity_domain"])
    except ValueError as exc:
        raise VolumeFormatError(f"unknown intensity_domain {meta['intensity_domain']!r}") from exc
    return Volume(data.astype(np.float64), tuple(meta["spacing_mm"]), domain)
