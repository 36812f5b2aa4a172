"""Grid conventions and core array containers shared by every other module.

Conventions, fixed globally so both backprojection kernels are comparable
sample for sample:

* detector axis: ``n_t`` samples covering [-1, 1] inclusive,
  ``t_i = -1 + 2 i / (n_t - 1)``;
* angle axis: ``n_theta`` samples on the half-open interval [0, pi)
  (or [0, 2 pi) when ``full_turn`` is set), ``theta_j = j * span / n_theta``;
* image grid: N x N pixels over [-1, 1]^2, pixel centers at
  ``-1 + 2 (k + 1/2) / N``; ``data[row][col]`` maps row -> u2, col -> u1;
* sinogram storage is angle-major (``data[angle][detector]``) because the
  volume container stores one radiograph frame per angle.

All containers freeze their payload (``writeable = False``) after
construction, so instances are safe to share across worker threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "DetectorAxis",
    "AngleAxis",
    "Sinogram",
    "ImageGrid",
    "VolumeBlock",
    "StageKind",
    "detector_coordinate",
    "pixel_center",
]


def _frozen(data, dtype=float) -> np.ndarray:
    """Copy ``data`` into a fresh read-only array."""
    arr = np.array(data, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DetectorAxis:
    """Uniform detector sampling of [-1, 1] inclusive."""

    n_t: int

    def __post_init__(self):
        if self.n_t < 2:
            raise ValueError(f"detector axis needs n_t >= 2, got {self.n_t}")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.n_t - 1)

    @property
    def samples(self) -> np.ndarray:
        return -1.0 + 2.0 * np.arange(self.n_t) / (self.n_t - 1)

    def coordinate(self, i: int) -> float:
        if not 0 <= i < self.n_t:
            raise IndexError(f"detector index {i} out of range [0, {self.n_t})")
        return -1.0 + 2.0 * i / (self.n_t - 1)


@dataclass(frozen=True)
class AngleAxis:
    """Projection angles, uniformly spaced on [0, pi) or [0, 2 pi).

    ``full_turn`` marks axes produced by the half-to-full-circle extension;
    measured data always arrives on the half turn.
    """

    n_theta: int
    full_turn: bool = False

    def __post_init__(self):
        if self.n_theta < 1:
            raise ValueError(f"angle axis needs n_theta >= 1, got {self.n_theta}")

    @property
    def span(self) -> float:
        return 2.0 * np.pi if self.full_turn else np.pi

    @property
    def spacing(self) -> float:
        return self.span / self.n_theta

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_theta) * self.spacing


def detector_coordinate(axis: DetectorAxis, i: int) -> float:
    """Physical coordinate ``t_i`` of detector sample ``i``."""
    return axis.coordinate(i)


class StageKind(enum.Enum):
    """Which processing stage last produced a volume block."""

    READ = "read"
    NORMALIZE = "normalize"
    CENTER = "center"
    RINGS = "rings"
    FILTER = "filter"
    BACKPROJECT = "backproject"
    WRITE = "write"


@dataclass(frozen=True, eq=False)
class Sinogram:
    """One slice's line-integral data on an (angle, detector) grid."""

    detector: DetectorAxis
    angles: AngleAxis
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen(self.data)
        if arr.shape != (self.angles.n_theta, self.detector.n_t):
            raise ValueError(
                f"sinogram data shape {arr.shape} does not match axes "
                f"({self.angles.n_theta}, {self.detector.n_t})"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("sinogram contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n_t(self) -> int:
        return self.detector.n_t

    @property
    def n_angles(self) -> int:
        return self.angles.n_theta


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Square image over [-1, 1]^2 with the pixel-center convention."""

    n: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid size must be >= 1, got {self.n}")
        arr = _frozen(self.data)
        if arr.shape != (self.n, self.n):
            raise ValueError(f"image data shape {arr.shape} is not ({self.n}, {self.n})")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def pixel_size(self) -> float:
        return 2.0 / self.n

    @property
    def centers(self) -> np.ndarray:
        """1D pixel-center coordinates, shared by both axes."""
        return -1.0 + 2.0 * (np.arange(self.n) + 0.5) / self.n

    @classmethod
    def zeros(cls, n: int) -> "ImageGrid":
        return cls(n, np.zeros((n, n)))


def pixel_center(grid: ImageGrid, row: int, col: int) -> tuple[float, float]:
    """(u1, u2) coordinate of a pixel center; col -> u1, row -> u2."""
    n = grid.n
    if not (0 <= row < n and 0 <= col < n):
        raise IndexError(f"pixel ({row}, {col}) out of range for n={n}")
    u1 = -1.0 + 2.0 * (col + 0.5) / n
    u2 = -1.0 + 2.0 * (row + 0.5) / n
    return (u1, u2)


SlicePayload = Union[Sinogram, ImageGrid]


@dataclass(frozen=True, eq=False)
class VolumeBlock:
    """A block of consecutive slices moving through the pipeline as one job."""

    first_slice: int
    slices: Sequence[SlicePayload]
    stage_tag: StageKind

    def __post_init__(self):
        if len(self.slices) < 1:
            raise ValueError("volume block must hold at least one slice")
        object.__setattr__(self, "slices", tuple(self.slices))

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def slice_indices(self) -> range:
        return range(self.first_slice, self.first_slice + len(self.slices))
