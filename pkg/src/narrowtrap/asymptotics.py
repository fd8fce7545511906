"""Small-trap asymptotics of the mean first-passage time.

For a geodesic-disk trap of radius eps centered at x0 the expected capture
time of Brownian motion started at x expands as

    u(x) = -(|M|/2pi) log(eps) + |M| R(x0) - |M| E(x, x0) + O(eps log eps),

where E is the mean-zero (or Neumann) Green's function and R(x0) is the
diagonal value of its regular part.  The spatial average drops the
E(x, x0) term.  This module evaluates those formulas and the trap-geometry
quantities (boundary length, area) entering the error analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_legendre

from . import green as gr
from .geometry import (
    DISK,
    NormalChart,
    SurfacePoint,
    SurfaceSpec,
    area,
    geodesic_distance,
    injectivity_surrogate,
)

TAU = 2.0 * math.pi


@dataclass(frozen=True)
class TrapSpec:
    """Absorbing geodesic disk: center and radius."""

    center: SurfacePoint
    eps: float

    def validate(self, s: SurfaceSpec) -> None:
        rho = injectivity_surrogate(s, self.center)
        if not 0.0 < self.eps < 0.4 * rho:
            raise ValueError(
                f"trap radius {self.eps} outside (0, {0.4 * rho:.4g}) at this center"
            )
        if s.family == DISK:
            margin = 1.0 - float(np.linalg.norm(self.center.xyz()))
            if margin <= 3.0 * self.eps:
                raise ValueError("disk trap must keep distance > 3 eps from the boundary")


@dataclass(frozen=True)
class MFPTResult:
    """Expansion terms of the mean first-passage time.

    total == leading + constant + point_term exactly; point_term is zero
    for the spatially averaged form.  error_order records the size of the
    neglected remainder.
    """

    leading: float
    constant: float
    point_term: float
    error_order: str = "O(eps log eps)"

    @property
    def total(self) -> float:
        return self.leading + self.constant + self.point_term

    def to_dict(self) -> dict:
        return {
            "leading": self.leading,
            "constant": self.constant,
            "point_term": self.point_term,
            "total": self.total,
            "error_order": self.error_order,
        }


def _shared_terms(s: SurfaceSpec, trap: TrapSpec) -> tuple[float, float]:
    vol = area(s)
    reg = gr.regular_part(s, trap.center)
    leading = -(vol / TAU) * math.log(trap.eps)
    return leading, vol * reg.value


def mfpt_average(s: SurfaceSpec, trap: TrapSpec) -> MFPTResult:
    """Spatial average of the capture time over the trap complement."""
    trap.validate(s)
    leading, constant = _shared_terms(s, trap)
    return MFPTResult(leading=leading, constant=constant, point_term=0.0)


def mfpt_pointwise(s: SurfaceSpec, trap: TrapSpec, x: SurfacePoint) -> MFPTResult:
    """Capture time started from x, which must keep 2 eps clear of the trap."""
    trap.validate(s)
    d = geodesic_distance(s, x, trap.center)
    if d <= 2.0 * trap.eps:
        raise ValueError("start point inside the 2 eps exclusion zone of the trap")
    leading, constant = _shared_terms(s, trap)
    e = gr.green(s, x, trap.center).total
    return MFPTResult(leading=leading, constant=constant, point_term=-area(s) * e)


def trap_boundary_length(s: SurfaceSpec, trap: TrapSpec, n_theta: int = 256) -> float:
    """Arc length of the trap boundary circle (2 pi eps + O(eps^2))."""
    trap.validate(s)
    chart = NormalChart(s, trap.center)
    th = TAU * np.arange(n_theta) / n_theta
    speeds = chart.boundary_speed(trap.eps, th)
    return float(np.mean(speeds)) * TAU


def trap_area(s: SurfaceSpec, trap: TrapSpec, n_r: int = 24, n_theta: int = 64) -> float:
    """Area of the trap disk by chart quadrature (pi eps^2 + O(eps^4))."""
    trap.validate(s)
    chart = NormalChart(s, trap.center)
    nodes, wts = roots_legendre(n_r)
    r = 0.5 * trap.eps * (nodes + 1.0)
    wr = 0.5 * trap.eps * wts
    th = TAU * (np.arange(n_theta) + 0.5) / n_theta
    R, Th = np.meshgrid(r, th, indexing="ij")
    ts = np.column_stack([(R * np.cos(Th)).ravel(), (R * np.sin(Th)).ravel()])
    g = chart.metric_many(ts)
    sq = np.sqrt(np.maximum(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0], 0.0))
    wq = (wr[:, None] * R * (TAU / n_theta)).ravel()
    return float(np.dot(sq, wq))


def domain_area_minus_trap(s: SurfaceSpec, trap: TrapSpec) -> float:
    """|M_eps| = |M| - |trap|, the prefactor in the flux identity."""
    return area(s) - trap_area(s, trap)
