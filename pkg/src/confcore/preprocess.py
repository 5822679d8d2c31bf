"""RF frame to patch pipeline: needle ROI, windowing, resampling, normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage


class DegeneratePatchError(ValueError):
    """Patch has (near) zero variance and cannot be normalized."""


class EmptyRoiError(ValueError):
    pass


@dataclass(frozen=True)
class RfImage:
    samples: np.ndarray  # (axial_samples, lateral_lines)
    axial_spacing_mm: float
    lateral_spacing_mm: float
    prostate_mask: np.ndarray
    needle_angle_deg: float = 0.0
    needle_entry: tuple[float, float] = (0.0, 0.0)  # (row, col) in pixels

    def __post_init__(self):
        samples = np.asarray(self.samples)
        mask = np.asarray(self.prostate_mask).astype(bool)
        if samples.ndim != 2:
            raise ValueError(f"RF samples must be 2-D, got shape {samples.shape}")
        if mask.shape != samples.shape:
            raise ValueError(f"mask shape {mask.shape} != samples shape {samples.shape}")
        if self.axial_spacing_mm <= 0 or self.lateral_spacing_mm <= 0:
            raise ValueError("pixel spacings must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "prostate_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape


@dataclass(frozen=True)
class PatchGrid:
    patch_size_mm: float = 5.0
    overlap_fraction: float = 0.9
    output_size_px: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.patch_size_mm <= 0:
            raise ValueError("patch_size_mm must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must lie in [0, 1), got {self.overlap_fraction}")

    def window_px(self, image: RfImage) -> tuple[int, int]:
        return (
            max(1, int(round(self.patch_size_mm / image.axial_spacing_mm))),
            max(1, int(round(self.patch_size_mm / image.lateral_spacing_mm))),
        )

    def stride_px(self, window: tuple[int, int]) -> tuple[int, int]:
        # round() guards against 50 * (1 - 0.9) = 4.999...
        return tuple(max(1, int(round(w * (1.0 - self.overlap_fraction), 9))) for w in window)


def needle_roi(image: RfImage, band_width_mm: float = 2.5, length_mm: float | None = None) -> np.ndarray:
    """Band of ``band_width_mm`` around the needle line, intersected with the prostate mask.

    Distances are measured in millimetres so anisotropic spacing is handled.
    The needle angle is measured from the lateral axis toward increasing
    depth. With ``length_mm`` the band is clipped to the needle segment
    starting at the entry point.
    """
    if band_width_mm <= 0:
        raise ValueError("band_width_mm must be positive")
    rows, cols = np.indices(image.shape, dtype=float)
    dz = (rows - image.needle_entry[0]) * image.axial_spacing_mm
    dx = (cols - image.needle_entry[1]) * image.lateral_spacing_mm
    theta = math.radians(image.needle_angle_deg)
    along = dx * math.cos(theta) + dz * math.sin(theta)
    across = -dx * math.sin(theta) + dz * math.cos(theta)
    band = np.abs(across) <= band_width_mm / 2.0 + 1e-9
    if length_mm is not None:
        band &= (along >= 0) & (along <= length_mm)
    if not band.any():
        raise EmptyRoiError("needle band does not intersect the image")
    roi = band & image.prostate_mask
    if not roi.any():
        raise EmptyRoiError("needle band does not intersect the prostate mask")
    return roi


def window_origins(shape: tuple[int, int], window: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """All top-left corners of full windows on a regular grid starting at (0, 0)."""
    if window[0] > shape[0] or window[1] > shape[1]:
        raise ValueError(f"window {window} larger than image {shape}")
    r = np.arange(0, shape[0] - window[0] + 1, stride[0])
    c = np.arange(0, shape[1] - window[1] + 1, stride[1])
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_patches(
    image: RfImage,
    roi: np.ndarray | None,
    grid: PatchGrid,
    min_coverage: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Cut overlapping windows whose ROI coverage is at least ``min_coverage``.

    Returns ``(patches, origins)`` with shapes ``(n, wh, ww)`` and ``(n, 2)``.
    ``roi=None`` keeps every window (sliding-window inference over the frame).
    """
    window = grid.window_px(image)
    stride = grid.stride_px(window)
    origins = window_origins(image.shape, window, stride)
    if roi is not None:
        roi = np.asarray(roi, dtype=bool)
        if roi.shape != image.shape:
            raise ValueError("roi shape does not match the image")
        if not roi.any():
            raise EmptyRoiError("empty ROI")
        cover = sliding_window_view(roi.astype(np.int64), window).sum(axis=(-1, -2))
        counts = cover[origins[:, 0], origins[:, 1]]
        keep = counts >= min_coverage * window[0] * window[1]
        origins = origins[keep]
    patches = np.stack([
        image.samples[r:r + window[0], c:c + window[1]] for r, c in origins
    ]) if len(origins) else np.empty((0, *window), dtype=image.samples.dtype)
    return patches, origins


def _fit_to_shape(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        excess = arr.shape[axis] - target[axis]
        if excess > 0:
            start = excess // 2
            arr = np.take(arr, np.arange(start, start + target[axis]), axis=axis)
    if arr.shape != tuple(target):
        zoom = (target[0] / arr.shape[0], target[1] / arr.shape[1])
        arr = ndimage.zoom(arr, zoom, order=1, mode="nearest", grid_mode=False)
    return arr


def resample_patch(
    raw: np.ndarray,
    lateral_factor: float = 5,
    axial_factor: float = 5,
    output_size_px: tuple[int, int] = (256, 256),
) -> np.ndarray:
    """Down-sample rows (axial) and up-sample columns (lateral) linearly.

    A Gaussian low-pass precedes the axial decimation. The result is
    center-cropped, or linearly resized when too small, to ``output_size_px``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError("raw patch must be a non-empty 2-D array")
    if lateral_factor <= 0 or axial_factor <= 0:
        raise ValueError("resampling factors must be positive")
    out = raw
    if axial_factor > 1:
        out = ndimage.gaussian_filter1d(out, sigma=(axial_factor - 1) / 2.0, axis=0, mode="nearest")
    new_shape = (max(1, int(round(raw.shape[0] / axial_factor))), max(1, int(round(raw.shape[1] * lateral_factor))))
    if new_shape != out.shape:
        zoom = (new_shape[0] / out.shape[0], new_shape[1] / out.shape[1])
        out = ndimage.zoom(out, zoom, order=1, mode="nearest", grid_mode=False)
    return _fit_to_shape(out, tuple(output_size_px))


def normalize_patch(array: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit population standard deviation."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty patch")
    std = arr.std()
    if std < eps:
        raise DegeneratePatchError(f"patch standard deviation {std:.3g} below {eps}")
    return (arr - arr.mean()) / std


def image_to_patches(
    image: RfImage,
    grid: PatchGrid,
    band_width_mm: float = 2.5,
    lateral_factor: float = 5,
    axial_factor: float = 5,
    use_roi: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Full pipeline; degenerate windows are dropped along with their origins."""
    roi = needle_roi(image, band_width_mm) if use_roi else None
    raw, origins = extract_patches(image, roi, grid)
    out, kept = [], []
    for patch, origin in zip(raw, origins):
        resampled = resample_patch(patch, lateral_factor, axial_factor, grid.output_size_px)
        try:
            out.append(normalize_patch(resampled))
        except DegeneratePatchError:
            continue
        kept.append(origin)
    if not out:
        return np.empty((0, *grid.output_size_px), dtype=np.float32), np.empty((0, 2), dtype=np.int64)
    return np.stack(out).astype(np.float32), np.asarray(kept, dtype=np.int64)
