"""Pre-reconstruction corrections: count normalization, rotation-center
estimation/correction, and stripe (ring) suppression.

All three act on single slices.  Centering and ring suppression need every
angle of one slice at once, so they are never applied to partial blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Sinogram

__all__ = [
    "FlatDarkFrames",
    "CenteringResult",
    "CenteringError",
    "normalize",
    "estimate_center",
    "apply_center",
    "suppress_rings",
]


class CenteringError(ValueError):
    """Raised when the rotation center cannot be determined."""


@dataclass(frozen=True)
class FlatDarkFrames:
    """Flat (no sample) and dark (no beam) detector frames."""

    flat: np.ndarray
    dark: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float)
        dark = np.asarray(self.dark, dtype=float)
        if flat.shape != dark.shape:
            raise ValueError(f"flat/dark shapes differ: {flat.shape} vs {dark.shape}")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "dark", dark)


@dataclass(frozen=True)
class CenteringResult:
    """Estimated detector-axis shift in bins, plus the match confidence."""

    beta: float
    confidence: float

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ValueError("non-finite center estimate")


def normalize(counts: np.ndarray, frames: FlatDarkFrames, eps: float = 1e-6) -> np.ndarray:
    """Transmission counts to line integrals: -log((I - D) / (I0 - D)).

    Both differences are clamped at ``eps`` so dead pixels or negative
    transmissions produce large-but-finite values instead of NaN/Inf.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    counts = np.asarray(counts, dtype=float)
    if counts.shape != frames.flat.shape:
        raise ValueError(
            f"counts shape {counts.shape} does not match frames {frames.flat.shape}"
        )
    num = np.maximum(counts - frames.dark, eps)
    den = np.maximum(frames.flat - frames.dark, eps)
    return -np.log(num / den)


def _parabolic_peak(values: np.ndarray, k: int) -> float:
    """Sub-sample peak position by a parabola through k-1, k, k+1."""
    if k <= 0 or k >= len(values) - 1:
        return float(k)
    y0, y1, y2 = values[k - 1], values[k], values[k + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom == 0.0:
        return float(k)
    return k + 0.5 * (y0 - y2) / denom


def estimate_center(y: Sinogram) -> CenteringResult:
    """Estimate the rotation-center shift from mirror consistency.

    An ideal parallel-beam sinogram satisfies y(t, theta + pi) = y(-t, theta),
    so the first-angle projection and the detector-mirrored last-angle
    projection are shifted copies of each other; the shift is twice the
    center offset.  The offset is located by cross-correlation with a
    parabolic sub-bin refinement.

    Returns beta in detector bins; positive beta means features sit at
    higher t than they should.
    """
    if y.n_angles < 2:
        raise CenteringError("need at least two projection angles")
    a = y.data[0].astype(float)
    b = y.data[-1][::-1].astype(float)
    a = a - a.mean()
    b = b - b.mean()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        raise CenteringError("centering undetermined: constant sinogram")
    corr = np.correlate(a, b, mode="full")  # lag k: a vs b shifted by k
    k = int(np.argmax(corr))
    lag = _parabolic_peak(corr, k) - (y.n_t - 1)
    beta = lag / 2.0
    confidence = float(np.clip(corr[k] / norm, 0.0, 1.0))
    if abs(beta) > y.n_t / 2:
        raise CenteringError(f"implausible center shift of {beta:.1f} bins")
    return CenteringResult(beta=beta, confidence=confidence)


def apply_center(y: Sinogram, beta: float) -> Sinogram:
    """Undo a detector shift of ``beta`` bins (linear interpolation).

    ``apply_center(shift(y, beta), beta)`` recovers y away from the edges;
    integer beta relocates samples exactly.  Out-of-range samples are 0.
    """
    if abs(beta) > y.n_t:
        raise ValueError(f"shift of {beta} bins exceeds the detector extent")
    idx = np.arange(y.n_t) + beta
    i0 = np.floor(idx).astype(np.int64)
    fr = idx - i0
    ok0 = (i0 >= 0) & (i0 <= y.n_t - 1)
    ok1 = (i0 + 1 >= 0) & (i0 + 1 <= y.n_t - 1)
    i0c = np.clip(i0, 0, y.n_t - 1)
    i1c = np.clip(i0 + 1, 0, y.n_t - 1)
    data = y.data
    out = data[:, i0c] * np.where(ok0, 1.0 - fr, 0.0) + data[:, i1c] * np.where(ok1, fr, 0.0)
    return Sinogram(y.detector, y.angles, out)


def suppress_rings(y: Sinogram, window: int = 9) -> Sinogram:
    """Remove angle-constant detector stripes (the source of ring artifacts).

    The per-detector mean over angles is smoothed with a moving average of
    width ``window``; the difference (the stripe estimate) is subtracted
    from every row.  Constant sinograms and smooth detector profiles pass
    through (almost) unchanged.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    m = y.data.mean(axis=0)
    kernel = np.full(window, 1.0 / window)
    padded = np.pad(m, window // 2, mode="reflect")
    smooth = np.convolve(padded, kernel, mode="valid")
    stripes = m - smooth
    return Sinogram(y.detector, y.angles, y.data - stripes[None, :])
