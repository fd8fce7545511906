"""Trap placement: minimize the averaged capture time over the trap center.

At fixed radius the center-dependent part of the averaged capture time is
|M| times the diagonal regular part R(x0) of the Green's function, so the
optimal center is the minimizer of that Robin-type landscape.  The search
is a coarse grid scan followed by Nelder-Mead simplex refinement (periodic
wrapping on tori, re-centered normal charts on the sphere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import green as gr
from . import geometry as geo
from .geometry import CONFORMAL_TORUS, DISK, FLAT_TORUS, SPHERE, SurfacePoint, SurfaceSpec

TAU = 2.0 * math.pi


@dataclass
class OptimizationResult:
    best_center: SurfacePoint
    best_value: float
    trace: list = field(default_factory=list)  # (SurfacePoint, value)
    landscape: np.ndarray | None = None
    degenerate: bool = False
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "best_center": list(self.best_center.coords),
            "best_value": self.best_value,
            "n_evaluations": len(self.trace),
            "degenerate": self.degenerate,
            "warning": self.warning,
        }


def _regular_value(s: SurfaceSpec, x0: SurfacePoint) -> tuple[float, float]:
    est = gr.regular_part(s, x0)
    return est.value, est.extrapolation_error


def _grid_centers(s: SurfaceSpec, n: int) -> list[SurfacePoint]:
    if s.family in (FLAT_TORUS, CONFORMAL_TORUS):
        u = (np.arange(n) + 0.5) * s.L1 / n
        v = (np.arange(n) + 0.5) * s.L2 / n
        return [geo.torus_point(s, a, b) for a in u for b in v]
    if s.family == SPHERE:
        # Fibonacci-style covering of the sphere
        idx = np.arange(n * n) + 0.5
        phi = math.pi * (3.0 - math.sqrt(5.0)) * idx
        z = 1.0 - 2.0 * idx / (n * n)
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        a = s.sphere_radius
        return [
            geo.sphere_point(s, a * np.array([ri * math.cos(p), ri * math.sin(p), zi]))
            for ri, p, zi in zip(r, phi, z)
        ]
    # disk: polar grid with a safety margin from the boundary
    pts = []
    margin = 0.15
    for i in range(n):
        rad = (i + 0.5) / n * (1.0 - margin)
        m = max(1, int(round(n * rad * TAU / (2 * (1 - margin)))))
        for k in range(m):
            a = TAU * k / m
            pts.append(geo.disk_point(rad * math.cos(a), rad * math.sin(a)))
    return pts


def robin_landscape(s: SurfaceSpec, grid_n: int, objective=None):
    """Regular-part values over a grid of candidate centers.

    Returns (centers, values, typical extrapolation error).
    """
    centers = _grid_centers(s, grid_n)
    if objective is None:
        values, errs = gr.regular_part_many(s, centers)
        return centers, values, float(np.max(errs))
    values = np.array([objective(p) for p in centers])
    err = _regular_value(s, centers[0])[1]
    return centers, values, err


def _wrap_coords(s: SurfaceSpec, z: np.ndarray) -> np.ndarray:
    if s.family in (FLAT_TORUS, CONFORMAL_TORUS):
        return np.array([z[0] % s.L1, z[1] % s.L2])
    return z


def _point_at(s: SurfaceSpec, z: np.ndarray, anchor: SurfacePoint | None) -> SurfacePoint:
    if s.family in (FLAT_TORUS, CONFORMAL_TORUS):
        return geo.torus_point(s, z[0], z[1])
    if s.family == DISK:
        rad = math.hypot(z[0], z[1])
        cap = 0.85
        if rad > cap:
            z = z * (cap / rad)
        return geo.disk_point(z[0], z[1])
    # sphere: z are normal-chart coordinates around the anchor
    chart = geo.NormalChart(s, anchor)
    nz = math.hypot(z[0], z[1])
    if nz >= 0.9 * chart.rho:
        z = z * (0.9 * chart.rho / nz)
    return chart.point(z)


def optimize_trap_center(
    s: SurfaceSpec,
    coarse_n: int = 8,
    refine_iters: int = 60,
    objective=None,
    seed_center: SurfacePoint | None = None,
) -> OptimizationResult:
    """Coarse scan plus Nelder-Mead refinement of the Robin landscape.

    A landscape whose spread is below 3x the ladder extrapolation error is
    declared degenerate: every center is equally good and the grid argmin
    is returned unrefined.
    """
    fn = objective or (lambda p: _regular_value(s, p)[0])
    centers, values, err = robin_landscape(s, coarse_n, objective=objective)
    trace = list(zip(centers, (float(v) for v in values)))
    k = int(np.argmin(values))
    best_pt, best_val = centers[k], float(values[k])
    if seed_center is not None:
        v0 = fn(seed_center)
        trace.append((seed_center, v0))
        if v0 < best_val:
            best_pt, best_val = seed_center, v0
    spread = float(values.max() - values.min())
    if spread < 3.0 * err:
        return OptimizationResult(
            best_center=best_pt,
            best_value=best_val,
            trace=trace,
            landscape=values,
            degenerate=True,
        )

    # local simplex coordinates around the incumbent
    anchor = best_pt
    if s.family in (FLAT_TORUS, CONFORMAL_TORUS, DISK):
        z0 = np.asarray(best_pt.coords, dtype=float)
        scale = 0.5 * min(s.L1, s.L2) / coarse_n if s.family != DISK else 0.4 / coarse_n
    else:
        z0 = np.zeros(2)
        scale = 0.5 * geo.injectivity_surrogate(s) / coarse_n

    def eval_at(z):
        p = _point_at(s, _wrap_coords(s, z), anchor)
        v = fn(p)
        trace.append((p, v))
        return v, p

    simplex = [z0, z0 + np.array([scale, 0.0]), z0 + np.array([0.0, scale])]
    fvals, pts = [], []
    for z in simplex:
        v, p = eval_at(z)
        fvals.append(v)
        pts.append(p)
    warning = None
    for it in range(refine_iters):
        order = np.argsort(fvals)
        simplex = [simplex[i] for i in order]
        fvals = [fvals[i] for i in order]
        pts = [pts[i] for i in order]
        if s.family == SPHERE and it > 0 and it % 10 == 0:
            # re-center the chart to limit distortion
            anchor = pts[0]
            offset = simplex[0].copy()
            simplex = [z - offset for z in simplex]
        diam = max(np.linalg.norm(simplex[i] - simplex[0]) for i in (1, 2))
        if diam < 1e-3:
            break
        zc = 0.5 * (simplex[0] + simplex[1])
        zr = zc + 1.0 * (zc - simplex[2])
        fr, pr = eval_at(zr)
        if fr < fvals[0]:
            ze = zc + 2.0 * (zc - simplex[2])
            fe, pe = eval_at(ze)
            if fe < fr:
                simplex[2], fvals[2], pts[2] = ze, fe, pe
            else:
                simplex[2], fvals[2], pts[2] = zr, fr, pr
        elif fr < fvals[1]:
            simplex[2], fvals[2], pts[2] = zr, fr, pr
        else:
            zk = zc + 0.5 * (simplex[2] - zc)
            fk, pk = eval_at(zk)
            if fk < fvals[2]:
                simplex[2], fvals[2], pts[2] = zk, fk, pk
            else:  # shrink toward the best vertex
                for j in (1, 2):
                    simplex[j] = simplex[0] + 0.5 * (simplex[j] - simplex[0])
                    fvals[j], pts[j] = eval_at(simplex[j])
    else:
        warning = "simplex did not reach diameter 1e-3 within the iteration budget"
    j = int(np.argmin(fvals))
    if fvals[j] < best_val:
        best_pt, best_val = pts[j], float(fvals[j])
    return OptimizationResult(
        best_center=best_pt,
        best_value=best_val,
        trace=trace,
        landscape=values,
        degenerate=False,
        warning=warning,
    )
