"""Raster kernels: square-window morphology and separable Gaussian blur.

The blur, the hot kernel of the sketch pipeline, has two implementations:
numba-compiled loops and a pure-numpy fallback. The active path is chosen at
import time; set SKETCHFORGE_NO_NUMBA=1 to force the fallback (the same path
is taken automatically when numba is not importable). Both paths perform the
same IEEE float32 operations in the same per-element order, so results are
bit-identical and tests assert exact equality across them. Morphology is
vectorized numpy on both paths.

Border policy is edge replication everywhere (a clamped window index), which
keeps flat fields flat up to the raster border.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import GeometryError

_FLAG = os.environ.get("SKETCHFORGE_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SKETCHFORGE_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def _check_gray(img: np.ndarray) -> None:
    if img.ndim != 2:
        raise GeometryError(f"expected a single-channel raster, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise GeometryError(f"empty raster of shape {img.shape}")


# ---------------------------------------------------------------------------
# morphology: max / min over a (2r+1) x (2r+1) window, edge-replicated
# ---------------------------------------------------------------------------


def _extreme_np(img: np.ndarray, radius: int, take_max: bool) -> np.ndarray:
    # clamped-window max/min == max/min over an edge-replicated padding
    padded = np.pad(img, radius, mode="edge")
    h, w = img.shape
    out = padded[0:h, 0:w].copy()
    op = np.maximum if take_max else np.minimum
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            if dy == 0 and dx == 0:
                continue
            op(out, padded[dy : dy + h, dx : dx + w], out=out)
    return out


def dilate(img: np.ndarray, radius: int = 1) -> np.ndarray:
    """Grayscale dilation under a square structuring element of side 2r+1.

    Single-path on purpose: the vectorized shifted-maximum formulation below
    outruns scalar compiled loops on uint8 rasters, so there is nothing for a
    JIT to win here.
    """
    _check_gray(img)
    if radius < 1:
        raise GeometryError(f"radius must be >= 1, got {radius}")
    return _extreme_np(img, radius, take_max=True)


def erode(img: np.ndarray, radius: int = 1) -> np.ndarray:
    """Grayscale erosion under a square structuring element of side 2r+1."""
    _check_gray(img)
    if radius < 1:
        raise GeometryError(f"radius must be >= 1, got {radius}")
    return _extreme_np(img, radius, take_max=False)


def morph_gradient(gray: np.ndarray, radius: int = 1) -> np.ndarray:
    """Dilation minus erosion; zero exactly where the local window is constant."""
    d = dilate(gray, radius)
    e = erode(gray, radius)
    return d - e


# ---------------------------------------------------------------------------
# separable Gaussian blur, float32, fixed tap order
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps as float32; radius = ceil(3 sigma)."""
    if sigma <= 0:
        raise GeometryError(f"sigma must be > 0, got {sigma}")
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    taps /= taps.sum()
    return taps.astype(np.float32)


def _blur_pass_loops(img, taps, out):
    # horizontal pass; callers transpose for the vertical one. Tap-outer
    # accumulation over an edge-replicated row buffer: contiguous inner loop,
    # and the per-element add order (tap index ascending) matches the numpy
    # fallback exactly, keeping the two paths bit-identical.
    h, w = img.shape
    radius = taps.shape[0] // 2
    padded = np.empty((h, w + 2 * radius), dtype=img.dtype)
    for y in range(h):
        for x in range(radius):
            padded[y, x] = img[y, 0]
            padded[y, w + radius + x] = img[y, w - 1]
        for x in range(w):
            padded[y, x + radius] = img[y, x]
    for y in range(h):
        for x in range(w):
            out[y, x] = np.float32(0.0)
    for k in range(taps.shape[0]):
        wk = taps[k]
        for y in range(h):
            for x in range(w):
                out[y, x] += wk * padded[y, x + k]
    return out


if HAVE_NUMBA:
    _blur_pass_jit = njit(cache=True, nogil=True)(_blur_pass_loops)


def _blur_pass_np(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    h, w = img.shape
    radius = taps.shape[0] // 2
    padded = np.pad(img, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros((h, w), dtype=np.float32)
    # accumulate tap by tap in the same order as the loop kernel
    for k in range(taps.shape[0]):
        out += taps[k] * padded[:, k : k + w]
    return out


def _gaussian_blur_np(img: np.ndarray, sigma: float) -> np.ndarray:
    taps = gaussian_kernel(sigma)
    tmp = _blur_pass_np(img, taps)
    return np.ascontiguousarray(_blur_pass_np(np.ascontiguousarray(tmp.T), taps).T)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable edge-replicated Gaussian blur of a float32 raster."""
    _check_gray(img)
    if img.dtype != np.float32:
        img = img.astype(np.float32)
    if HAVE_NUMBA:
        taps = gaussian_kernel(sigma)
        tmp = _blur_pass_jit(img, taps, np.empty_like(img))
        tmp_t = np.ascontiguousarray(tmp.T)
        out_t = _blur_pass_jit(tmp_t, taps, np.empty_like(tmp_t))
        return np.ascontiguousarray(out_t.T)
    return _gaussian_blur_np(img, sigma)


def warmup() -> None:
    """Trigger JIT compilation once so timed sections measure steady state."""
    probe = np.zeros((8, 8), dtype=np.uint8)
    dilate(probe, 1)
    erode(probe, 1)
    gaussian_blur(probe.astype(np.float32), 1.0)
