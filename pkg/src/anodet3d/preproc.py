"""Deterministic intensity/geometry preprocessing for HU volumes.

The chain is crop -> smooth -> resize -> window -> normalize. Upstream
registration, quality control, and brain extraction are assumed done; inputs
here are already brain-extracted HU volumes with a constant background fill.

Conventions, fixed for reproducibility:

* Cropping keeps the minimal bounding box of voxels strictly above the
  threshold.
* Smoothing is a separable Gaussian (sampled kernel, truncated at 4 sigma,
  normalized to unit sum) with reflect boundary handling; sigma 0 is the
  identity.
* Resizing is trilinear with corner-aligned sampling, so linear ramps are
  reproduced exactly.
* Normalization maps the fixed window bounds (not per-volume min/max) onto
  [-1, 1], keeping intensities comparable across a dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AllBelowThreshold, ConfigError, DomainMismatch, OutOfRange, ShapeMismatch
from .volume import IntensityDomain, Volume


@dataclass
class PreprocSpec:
    """Parameters of the preprocessing chain.

    ``smoothing_sigma_vox=None`` selects the anti-alias default
    max(source_dim/target_dim)/2 (0 when upsampling). ``crop_threshold=None``
    crops above the volume's own minimum, skipping the crop when the volume
    is constant (no boundary to trim).
    """

    window_lo_hu: float = -20.0
    window_hi_hu: float = 100.0
    target_shape: tuple[int, int, int] = (64, 64, 64)
    smoothing_sigma_vox: float | None = None
    crop_threshold: float | None = None

    def __post_init__(self) -> None:
        self.target_shape = tuple(int(s) for s in self.target_shape)
        if not self.window_lo_hu < self.window_hi_hu:
            raise ConfigError(f"window_lo_hu must be < window_hi_hu, got [{self.window_lo_hu}, {self.window_hi_hu}]")
        if len(self.target_shape) != 3 or any(s < 4 for s in self.target_shape):
            raise ConfigError(f"target_shape must be 3 ints >= 4, got {self.target_shape}")
        if self.smoothing_sigma_vox is not None and self.smoothing_sigma_vox < 0:
            raise ConfigError(f"smoothing_sigma_vox must be >= 0, got {self.smoothing_sigma_vox}")


def support_bbox(data: np.ndarray, threshold: float) -> tuple[slice, slice, slice]:
    """Minimal axis-aligned bounding box of voxels strictly above threshold."""
    mask = data > threshold
    if not mask.any():
        raise AllBelowThreshold(f"no voxel above threshold {threshold}")
    slices = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.any(mask, axis=other)
        idx = np.flatnonzero(hit)
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(slices)  # type: ignore[return-value]


def crop_black_boundaries(v: Volume, threshold: float) -> Volume:
    """Trim constant background, keeping the support bounding box unchanged."""
    box = support_bbox(v.data, threshold)
    return v.with_data(v.data[box].copy())


def gaussian_smooth(v: Volume, sigma_vox: float) -> Volume:
    """Separable Gaussian smoothing with reflect boundaries; sigma 0 is identity."""
    if sigma_vox < 0:
        raise ConfigError(f"sigma_vox must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return v.with_data(v.data.copy())
    out = ndimage.gaussian_filter(v.data, sigma=sigma_vox, mode="reflect")
    return v.with_data(out)


def _resize_axis(data: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = data.shape[axis]
    if n == target:
        return data
    if n == 1:
        return np.repeat(data, target, axis=axis)
    coords = np.linspace(0.0, n - 1.0, target)
    lo = np.minimum(coords.astype(np.intp), n - 2)
    t = coords - lo
    shape = [1, 1, 1]
    shape[axis] = target
    t = t.reshape(shape)
    return data.take(lo, axis=axis) * (1.0 - t) + data.take(lo + 1, axis=axis) * t


def resize_trilinear(v: Volume, target_shape: tuple[int, int, int]) -> Volume:
    """Trilinear resize with corner-aligned sampling (output corners hit input corners)."""
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s < 1 for s in target_shape):
        raise ShapeMismatch(f"target_shape must be 3 ints >= 1, got {target_shape}")
    data = v.data
    for axis, target in enumerate(target_shape):
        data = _resize_axis(data, axis, target)
    spacing = []
    for s_mm, n_in, n_out in zip(v.spacing_mm, v.shape, target_shape):
        if n_in > 1 and n_out > 1:
            spacing.append(s_mm * (n_in - 1) / (n_out - 1))
        else:
            spacing.append(s_mm)
    return Volume(np.ascontiguousarray(data), tuple(spacing), v.intensity_domain)


def window_hu(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp an HU volume into [lo, hi]."""
    if v.intensity_domain is not IntensityDomain.HU:
        raise DomainMismatch(f"windowing requires HU input, got {v.intensity_domain.value}")
    if not lo < hi:
        raise ConfigError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return v.with_data(np.clip(v.data, lo, hi))


def normalize_global(v: Volume, lo: float, hi: float) -> Volume:
    """Affine map of the fixed window [lo, hi] onto [-1, 1].

    The same bounds are used for every volume in a dataset, so intensities
    stay comparable across scans.
    """
    if not lo < hi:
        raise ConfigError(f"bounds must satisfy lo < hi, got [{lo}, {hi}]")
    dmin, dmax = float(v.data.min()), float(v.data.max())
    if dmin < lo or dmax > hi:
        raise OutOfRange(f"values [{dmin}, {dmax}] outside window [{lo}, {hi}]; apply window_hu first")
    out = (v.data - lo) / (hi - lo) * 2.0 - 1.0
    return v.with_data(out, IntensityDomain.NORMALIZED)


def denormalize(v: Volume, lo: float, hi: float) -> Volume:
    """Inverse of :func:`normalize_global`; returns an HU-domain volume."""
    if not lo < hi:
        raise ConfigError(f"bounds must satisfy lo < hi, got [{lo}, {hi}]")
    out = (v.data + 1.0) / 2.0 * (hi - lo) + lo
    return v.with_data(out, IntensityDomain.HU)


def default_sigma(source_shape: tuple[int, ...], target_shape: tuple[int, ...]) -> float:
    """Anti-alias default: half the largest downsampling ratio, 0 if upsampling."""
    ratio = max(s / t for s, t in zip(source_shape, target_shape))
    return ratio / 2.0 if ratio > 1.0 else 0.0


@dataclass
class PreprocGeometry:
    """Geometric trace of a preprocess run, for pushing masks through."""

    crop_box: tuple[slice, slice, slice]
    source_shape: tuple[int, int, int]
    target_shape: tuple[int, int, int]


def preprocess(v: Volume, spec: PreprocSpec) -> Volume:
    """Run crop -> smooth -> resize -> window -> normalize on an HU volume."""
    out, _ = preprocess_with_geometry(v, spec)
    return out


def preprocess_with_geometry(v: Volume, spec: PreprocSpec) -> tuple[Volume, PreprocGeometry]:
    """As :func:`preprocess`, also returning the crop/resize geometry."""
    if v.intensity_domain is not IntensityDomain.HU:
        raise DomainMismatch(f"preprocess requires HU input, got {v.intensity_domain.value}")
    if spec.crop_threshold is not None:
        box = support_bbox(v.data, spec.crop_threshold)
    else:
        try:
            box = support_bbox(v.data, float(v.data.min()))
        except AllBelowThreshold:
            # constant volume: no black boundary to trim
            box = tuple(slice(0, s) for s in v.shape)  # type: ignore[assignment]
    cropped = v.with_data(v.data[box].copy())
    sigma = spec.smoothing_sigma_vox
    if sigma is None:
        sigma = default_sigma(cropped.shape, spec.target_shape)
    smoothed = gaussian_smooth(cropped, sigma)
    resized = resize_trilinear(smoothed, spec.target_shape)
    windowed = window_hu(resized, spec.window_lo_hu, spec.window_hi_hu)
    normalized = normalize_global(windowed, spec.window_lo_hu, spec.window_hi_hu)
    geom = PreprocGeometry(crop_box=box, source_shape=v.shape, target_shape=spec.target_shape)
    return normalized, geom


def transform_mask(mask: np.ndarray, geom: PreprocGeometry) -> np.ndarray:
    """Push a binary mask through the crop+resize geometry of a preprocess run.

    The 0/1 field is resized trilinearly and re-thresholded at 0.5.
    """
    if mask.shape != geom.source_shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != preprocessed source shape {geom.source_shape}")
    cropped = mask[geom.crop_box].astype(np.float64)
    vol = Volume(cropped, intensity_domain=IntensityDomain.ARBITRARY)
    resized = resize_trilinear(vol, geom.target_shape)
    return resized.data > 0.5
