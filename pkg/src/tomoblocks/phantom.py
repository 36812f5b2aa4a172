"""Analytic ellipsoid phantom: exact slices and exact sinograms.

A single ellipsoid with semi-axes (a, b, c) and density rho gives
closed-form data for every horizontal slice: the slice at height s is an
ellipse with in-plane semi-axes scaled by sqrt(1 - (s/c)^2), and the line
integral of a constant ellipse has the standard chord-length form.  Both
are cheap to evaluate, which makes the phantom the ground truth for the
reconstruction and benchmark tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import AngleAxis, DetectorAxis, ImageGrid, Sinogram

__all__ = ["Ellipsoid", "render_slice", "analytic_sinogram"]


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid of constant density inside the unit cube [-1, 1]^3.

    a, b are the in-plane semi-axes (along u1, u2), c the semi-axis along
    the slice direction, and ``center`` the (u1, u2, s) offset.
    """

    a: float
    b: float
    c: float
    rho: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("semi-axes must be positive")
        c1, c2, cs = self.center
        for off, semi in ((c1, self.a), (c2, self.b), (cs, self.c)):
            if abs(off) + semi > 1.0 + 1e-12:
                raise ValueError("ellipsoid does not fit inside the unit domain")

    def inplane_axes(self, s: float) -> tuple[float, float]:
        """Semi-axes of the slice ellipse at height ``s`` (0, 0 outside)."""
        srel = (s - self.center[2]) / self.c
        if abs(srel) > 1.0:
            return (0.0, 0.0)
        scale = np.sqrt(max(1.0 - srel * srel, 0.0))
        return (self.a * scale, self.b * scale)


def render_slice(e: Ellipsoid, s: float, n: int) -> ImageGrid:
    """Rasterize the slice at height ``s`` on an n x n pixel-center grid."""
    if abs(s) > 1.0:
        raise ValueError(f"slice coordinate {s} outside [-1, 1]")
    a_s, b_s = e.inplane_axes(s)
    if a_s == 0.0 or b_s == 0.0:
        return ImageGrid.zeros(n)
    u = -1.0 + 2.0 * (np.arange(n) + 0.5) / n
    u1 = u[None, :] - e.center[0]
    u2 = u[:, None] - e.center[1]
    inside = (u1 / a_s) ** 2 + (u2 / b_s) ** 2 <= 1.0
    return ImageGrid(n, np.where(inside, e.rho, 0.0))


def analytic_sinogram(
    e: Ellipsoid, s: float, detector: DetectorAxis, angles: AngleAxis
) -> Sinogram:
    """Exact line integrals of the slice ellipse on the given (t, theta) grid.

    For an ellipse with semi-axes (a_s, b_s), density rho and in-plane
    center (c1, c2), the integral along the line {u : u . xi_theta = t} is

        y(t, theta) = 2 rho a_s b_s sqrt(q^2 - t'^2) / q^2,   t'^2 <= q^2,

    with q^2 = a_s^2 cos^2 theta + b_s^2 sin^2 theta and
    t' = t - (c1 cos theta + c2 sin theta); zero elsewhere.
    """
    if abs(s) > 1.0:
        raise ValueError(f"slice coordinate {s} outside [-1, 1]")
    a_s, b_s = e.inplane_axes(s)
    th = angles.angles
    t = detector.samples
    if a_s == 0.0 or b_s == 0.0:
        return Sinogram(detector, angles, np.zeros((angles.n_theta, detector.n_t)))
    cos_t, sin_t = np.cos(th), np.sin(th)
    q2 = (a_s * cos_t) ** 2 + (b_s * sin_t) ** 2
    t_shift = e.center[0] * cos_t + e.center[1] * sin_t
    tp = t[None, :] - t_shift[:, None]
    under = np.clip(q2[:, None] - tp**2, 0.0, None)
    data = 2.0 * e.rho * a_s * b_s * np.sqrt(under) / q2[:, None]
    return Sinogram(detector, angles, data)
