"""Surface families and their metric toolkit.

Four concrete families are supported:

* round sphere of radius ``a`` (points stored as embedded 3-vectors),
* flat torus on a rectangular lattice ``[0,L1) x [0,L2)``,
* conformally-flat torus with metric ``exp(2*phi) * (flat)``,
* flat unit disk with a reflecting boundary.

Everything here is a pure function of immutable inputs: distances,
exponential maps, area, uniform sampling, and geodesic normal-coordinate
charts.  Sphere points live on the embedded sphere to avoid polar-chart
singularities; torus points are always reduced to the fundamental domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TAU = 2.0 * math.pi

SPHERE = "round_sphere"
FLAT_TORUS = "flat_torus"
CONFORMAL_TORUS = "conformal_torus"
DISK = "flat_unit_disk"

FAMILIES = (SPHERE, FLAT_TORUS, CONFORMAL_TORUS, DISK)


class GeodesicShootingError(RuntimeError):
    """Raised when shooting refinement of a geodesic does not converge.

    Carries the graph-search estimate so callers can degrade gracefully.
    """

    def __init__(self, message: str, fallback: float):
        super().__init__(f"{message} (graph fallback: {fallback:.8g})")
        self.fallback = fallback


class StepCountError(RuntimeError):
    """Geodesic ODE integration exceeded its step budget."""


# ---------------------------------------------------------------------------
# Conformal factor fields
# ---------------------------------------------------------------------------


class PhiField:
    """Scalar field phi on the torus fundamental domain.

    Provides vectorized value/gradient/Hessian evaluators (needed by the
    geodesic ODE and its variational equations) plus an N x N sample grid.
    """

    kind = "zero"

    def __init__(self, L1: float, L2: float, grid_n: int):
        self.L1 = float(L1)
        self.L2 = float(L2)
        self.grid_n = int(grid_n)
        u = np.arange(grid_n) * (self.L1 / grid_n)
        v = np.arange(grid_n) * (self.L2 / grid_n)
        self.grid_u, self.grid_v = np.meshgrid(u, v, indexing="ij")
        self.grid = np.asarray(self.value(self.grid_u, self.grid_v), dtype=float)
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("phi grid contains non-finite values")
        self.sup_abs = float(np.max(np.abs(self.grid)))

    def value(self, u, v):
        return np.zeros_like(np.asarray(u, dtype=float))

    def grad(self, u, v):
        z = np.zeros_like(np.asarray(u, dtype=float))
        return z, z.copy()

    def hess(self, u, v):
        z = np.zeros_like(np.asarray(u, dtype=float))
        return z, z.copy(), z.copy()

    def params(self) -> dict:
        return {"kind": self.kind}


class CosinePhi(PhiField):
    """phi = A * cos(2*pi*(m1*u/L1 + m2*v/L2))."""

    kind = "cosine_bump"

    def __init__(self, L1, L2, grid_n, amplitude: float, mode=(1, 0)):
        self.amp = float(amplitude)
        self.mode = (int(mode[0]), int(mode[1]))
        self._ku = TAU * self.mode[0] / L1
        self._kv = TAU * self.mode[1] / L2
        super().__init__(L1, L2, grid_n)

    def _arg(self, u, v):
        return self._ku * np.asarray(u, dtype=float) + self._kv * np.asarray(v, dtype=float)

    def value(self, u, v):
        return self.amp * np.cos(self._arg(u, v))

    def grad(self, u, v):
        s = -self.amp * np.sin(self._arg(u, v))
        return self._ku * s, self._kv * s

    def hess(self, u, v):
        c = -self.amp * np.cos(self._arg(u, v))
        return self._ku**2 * c, self._ku * self._kv * c, self._kv**2 * c

    def params(self):
        return {"kind": self.kind, "amplitude": self.amp, "mode": list(self.mode)}


class GaussianPhi(PhiField):
    """Periodized Gaussian bump, summed over the 3x3 nearest lattice images."""

    kind = "gaussian_bump"

    def __init__(self, L1, L2, grid_n, center, width: float, amplitude: float):
        self.center = (float(center[0]), float(center[1]))
        self.width = float(width)
        self.amp = float(amplitude)
        if self.width <= 0:
            raise ValueError("gaussian_bump width must be positive")
        shifts = []
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                shifts.append((i * L1, j * L2))
        self._shifts = np.asarray(shifts)
        super().__init__(L1, L2, grid_n)

    def _terms(self, u, v):
        u = np.asarray(u, dtype=float)[..., None]
        v = np.asarray(v, dtype=float)[..., None]
        du = u - self.center[0] + self._shifts[:, 0]
        dv = v - self.center[1] + self._shifts[:, 1]
        w2 = self.width**2
        e = self.amp * np.exp(-(du**2 + dv**2) / (2.0 * w2))
        return du, dv, e, w2

    def value(self, u, v):
        _, _, e, _ = self._terms(u, v)
        return e.sum(axis=-1)

    def grad(self, u, v):
        du, dv, e, w2 = self._terms(u, v)
        return (-(du / w2) * e).sum(axis=-1), (-(dv / w2) * e).sum(axis=-1)

    def hess(self, u, v):
        du, dv, e, w2 = self._terms(u, v)
        huu = ((du**2 / w2 - 1.0) / w2 * e).sum(axis=-1)
        hvv = ((dv**2 / w2 - 1.0) / w2 * e).sum(axis=-1)
        huv = (du * dv / w2**2 * e).sum(axis=-1)
        return huu, huv, hvv

    def params(self):
        return {
            "kind": self.kind,
            "center": list(self.center),
            "width": self.width,
            "amplitude": self.amp,
        }


class GridPhi(PhiField):
    """phi given by grid samples; evaluated via its trigonometric interpolant."""

    kind = "grid"

    def __init__(self, L1, L2, grid_n, values):
        vals = np.asarray(values, dtype=float).reshape(grid_n, grid_n)
        coef = np.fft.fft2(vals) / vals.size
        self._coef = coef
        n = grid_n
        k = np.fft.fftfreq(n, d=1.0 / n)  # integer frequencies
        # Split the Nyquist mode symmetrically so the interpolant is real.
        wts = np.ones(n)
        if n % 2 == 0:
            wts[n // 2] = 0.5
            k = k.copy()
        self._ku = TAU * k / L1
        self._kv = TAU * k / L2
        self._wu = wts
        self._wv = wts.copy()
        super().__init__(L1, L2, grid_n)

    def _eval(self, u, v, pu=0, pv=0):
        scalar = np.ndim(u) == 0 and np.ndim(v) == 0
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        eu = np.exp(1j * np.outer(u.ravel(), self._ku)) * self._wu
        ev = np.exp(1j * np.outer(v.ravel(), self._kv)) * self._wv
        cu = eu * (1j * self._ku) ** pu if pu else eu
        cv = ev * (1j * self._kv) ** pv if pv else ev
        out = np.einsum("pk,kl,pl->p", cu, self._coef, cv).real
        return float(out[0]) if scalar else out.reshape(u.shape)

    def value(self, u, v):
        return self._eval(u, v)

    def grad(self, u, v):
        return self._eval(u, v, 1, 0), self._eval(u, v, 0, 1)

    def hess(self, u, v):
        return self._eval(u, v, 2, 0), self._eval(u, v, 1, 1), self._eval(u, v, 0, 2)

    def params(self):
        # Re-sampling the stored grid round-trips the field exactly.
        return {"kind": self.kind, "values": self.grid.ravel().tolist()}


def make_phi(L1: float, L2: float, grid_n: int, spec: dict) -> PhiField:
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return PhiField(L1, L2, grid_n)
    if kind == "cosine_bump":
        return CosinePhi(L1, L2, grid_n, spec["amplitude"], spec.get("mode", (1, 0)))
    if kind == "gaussian_bump":
        return GaussianPhi(L1, L2, grid_n, spec["center"], spec["width"], spec["amplitude"])
    if kind == "grid":
        return GridPhi(L1, L2, grid_n, spec["values"])
    raise ValueError(f"unknown phi kind: {kind!r}")


# ---------------------------------------------------------------------------
# Surface specification and points
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SurfaceSpec:
    """One of the four supported surface families with its metric data."""

    family: str
    sphere_radius: float = 1.0
    L1: float = 1.0
    L2: float = 1.0
    phi: PhiField | None = None
    grid_n: int = 256
    conformal_rho: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == SPHERE and not self.sphere_radius > 0:
            raise ValueError("sphere_radius must be positive")
        if self.family in (FLAT_TORUS, CONFORMAL_TORUS):
            if not (self.L1 > 0 and self.L2 > 0):
                raise ValueError("lattice lengths must be positive")
        if self.family == CONFORMAL_TORUS:
            n = self.grid_n
            if n < 64 or (n & (n - 1)) != 0:
                raise ValueError("grid_n must be a power of two >= 64")
            if self.phi is None:
                object.__setattr__(self, "phi", PhiField(self.L1, self.L2, n))
        object.__setattr__(self, "_cache", {})

    # -- constructors -------------------------------------------------------

    @staticmethod
    def sphere(radius: float = 1.0) -> "SurfaceSpec":
        return SurfaceSpec(SPHERE, sphere_radius=radius)

    @staticmethod
    def flat_torus(L1: float = 1.0, L2: float = 1.0) -> "SurfaceSpec":
        return SurfaceSpec(FLAT_TORUS, L1=L1, L2=L2)

    @staticmethod
    def conformal_torus(
        L1: float = 1.0,
        L2: float = 1.0,
        phi: dict | PhiField | None = None,
        grid_n: int = 256,
        rho: float | None = None,
    ) -> "SurfaceSpec":
        if phi is None:
            phi = {"kind": "zero"}
        if isinstance(phi, dict):
            phi = make_phi(L1, L2, grid_n, phi)
        return SurfaceSpec(CONFORMAL_TORUS, L1=L1, L2=L2, phi=phi, grid_n=grid_n, conformal_rho=rho)

    @staticmethod
    def disk() -> "SurfaceSpec":
        return SurfaceSpec(DISK)

    # -- basic data ---------------------------------------------------------

    @property
    def has_boundary(self) -> bool:
        return self.family == DISK

    @property
    def lattice(self) -> tuple[float, float]:
        return (self.L1, self.L2)

    def cache(self, key, build: Callable):
        store = self._cache
        if key not in store:
            store[key] = build()
        return store[key]

    def to_json_dict(self) -> dict:
        if self.family == SPHERE:
            return {"family": "round_sphere", "radius": self.sphere_radius}
        if self.family == FLAT_TORUS:
            return {"family": "flat_torus", "L1": self.L1, "L2": self.L2}
        if self.family == CONFORMAL_TORUS:
            return {
                "family": "conformal_torus",
                "L1": self.L1,
                "L2": self.L2,
                "phi": self.phi.params(),
                "grid": self.grid_n,
            }
        return {"family": "flat_unit_disk"}


def surface_from_json(doc: dict | str) -> SurfaceSpec:
    """Build a SurfaceSpec from its JSON document form."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    fam = doc["family"]
    if fam in ("round_sphere", "sphere"):
        return SurfaceSpec.sphere(float(doc.get("radius", 1.0)))
    if fam == "flat_torus":
        return SurfaceSpec.flat_torus(float(doc.get("L1", 1.0)), float(doc.get("L2", 1.0)))
    if fam == "conformal_torus":
        return SurfaceSpec.conformal_torus(
            float(doc.get("L1", 1.0)),
            float(doc.get("L2", 1.0)),
            doc.get("phi", {"kind": "zero"}),
            int(doc.get("grid", 256)),
            doc.get("rho"),
        )
    if fam in ("flat_unit_disk", "disk"):
        return SurfaceSpec.disk()
    raise ValueError(f"unknown family {fam!r}")


@dataclass(frozen=True)
class SurfacePoint:
    """Family-tagged coordinates of a point on a surface."""

    family: str
    coords: tuple

    def xyz(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)

    def chart_pair(self) -> tuple[float, float]:
        """Two chart coordinates for tabular output.

        Sphere points are reported as (azimuth, colatitude); the other
        families use their native pairs.
        """
        c = self.xyz()
        if self.family == SPHERE:
            r = np.linalg.norm(c)
            theta = math.acos(max(-1.0, min(1.0, c[2] / r)))
            phi = math.atan2(c[1], c[0]) % TAU
            return (phi, theta)
        return (float(c[0]), float(c[1]))


def sphere_point(s: SurfaceSpec, xyz) -> SurfacePoint:
    v = np.asarray(xyz, dtype=float)
    r = np.linalg.norm(v)
    if abs(r - s.sphere_radius) > 1e-12 * s.sphere_radius:
        v = v * (s.sphere_radius / r)
    return SurfacePoint(SPHERE, tuple(v))


def torus_point(s: SurfaceSpec, u: float, v: float) -> SurfacePoint:
    return SurfacePoint(s.family, (u % s.L1, v % s.L2))


def disk_point(x1: float, x2: float) -> SurfacePoint:
    if x1 * x1 + x2 * x2 > 1.0 + 1e-12:
        raise ValueError("disk point outside closed unit disk")
    return SurfacePoint(DISK, (float(x1), float(x2)))


def point_from_coords(s: SurfaceSpec, coords) -> SurfacePoint:
    coords = np.asarray(coords, dtype=float)
    if s.family == SPHERE:
        if coords.size == 3:
            return sphere_point(s, coords)
        # (azimuth, colatitude) pair
        az, th = float(coords[0]), float(coords[1])
        a = s.sphere_radius
        return SurfacePoint(
            SPHERE,
            (a * math.sin(th) * math.cos(az), a * math.sin(th) * math.sin(az), a * math.cos(th)),
        )
    if s.family in (FLAT_TORUS, CONFORMAL_TORUS):
        return torus_point(s, float(coords[0]), float(coords[1]))
    return disk_point(float(coords[0]), float(coords[1]))


@dataclass(frozen=True)
class TangentVector:
    """Components in the orthonormal chart frame (E1, E2) at a base point."""

    base: SurfacePoint
    components: tuple

    def norm(self) -> float:
        c = self.components
        return math.hypot(c[0], c[1])


def tangent(base: SurfacePoint, c1: float, c2: float) -> TangentVector:
    if not (math.isfinite(c1) and math.isfinite(c2)):
        raise ValueError("tangent components must be finite")
    return TangentVector(base, (float(c1), float(c2)))


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def sphere_frame(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangent frame at an embedded sphere point."""
    n = p / np.linalg.norm(p)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(n[2]) > 1.0 - 1e-9:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def frame_embedded(s: SurfaceSpec, x: SurfacePoint) -> np.ndarray:
    """Embedded representative of (E1, E2); only meaningful for the sphere."""
    if s.family != SPHERE:
        raise ValueError("embedded frame is only defined for the sphere")
    e1, e2 = sphere_frame(x.xyz())
    return np.stack([e1, e2])


# ---------------------------------------------------------------------------
# Area and injectivity surrogate
# ---------------------------------------------------------------------------


def area(s: SurfaceSpec) -> float:
    """Total surface area |M|.

    The conformal torus uses the tensor-product trapezoid rule on its own
    grid (equivalent to the mean of exp(2*phi) on a periodic domain).
    """
    if s.family == SPHERE:
        return 4.0 * math.pi * s.sphere_radius**2
    if s.family == FLAT_TORUS:
        return s.L1 * s.L2
    if s.family == CONFORMAL_TORUS:
        return float(np.mean(np.exp(2.0 * s.phi.grid))) * s.L1 * s.L2
    return math.pi


def injectivity_surrogate(s: SurfaceSpec, x: SurfacePoint | None = None) -> float:
    """Conservative lower bound for the chart radius at x (or anywhere)."""
    if s.family == SPHERE:
        return math.pi * s.sphere_radius / 2.0
    if s.family == FLAT_TORUS:
        return min(s.L1, s.L2) / 2.0
    if s.family == CONFORMAL_TORUS:
        if s.conformal_rho is not None:
            return s.conformal_rho
        return 0.2 * min(s.L1, s.L2) * math.exp(-s.phi.sup_abs)
    if x is None:
        return 1.0
    return max(1e-12, 1.0 - float(np.linalg.norm(x.xyz())))


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def torus_delta(s: SurfaceSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shortest representative of b - a on the lattice (vectorized)."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    L = np.array([s.L1, s.L2])
    return d - L * np.round(d / L)


def flat_torus_distance(s: SurfaceSpec, a, b) -> np.ndarray:
    """Euclidean distance minimized over the 9 nearest lattice translates.

    Valid whenever the separation is below min(L1, L2)/2, which holds for
    every trap radius and ladder separation this package touches.
    """
    d = torus_delta(s, a, b)
    return np.hypot(d[..., 0], d[..., 1]) if d.ndim > 1 else math.hypot(d[0], d[1])


def sphere_distance(s: SurfaceSpec, x: np.ndarray, y: np.ndarray) -> float:
    a = s.sphere_radius
    c = float(np.dot(x, y)) / (a * a)
    return a * math.acos(max(-1.0, min(1.0, c)))


def geodesic_distance(s: SurfaceSpec, x: SurfacePoint, y: SurfacePoint) -> float:
    """Geodesic distance d_g(x, y).

    Conformal tori use Hamiltonian shooting seeded from a Dijkstra estimate
    on the phi grid; the other families have closed forms.
    """
    xc, yc = x.xyz(), y.xyz()
    if np.array_equal(xc, yc):
        return 0.0
    if s.family == SPHERE:
        return sphere_distance(s, xc, yc)
    if s.family == FLAT_TORUS:
        return float(flat_torus_distance(s, xc, yc))
    if s.family == DISK:
        return float(np.linalg.norm(xc - yc))
    return conformal_geodesics(s).distance(xc, yc)


# ---------------------------------------------------------------------------
# Exponential maps
# ---------------------------------------------------------------------------


def sphere_exp(s: SurfaceSpec, p: np.ndarray, v3: np.ndarray) -> np.ndarray:
    a = s.sphere_radius
    nv = np.linalg.norm(v3)
    if nv == 0.0:
        return p.copy()
    n = p / a
    return a * (math.cos(nv / a) * n + math.sin(nv / a) * (v3 / nv))


def exp_map(s: SurfaceSpec, v: TangentVector) -> SurfacePoint:
    """Time-1 geodesic flow from v.base with initial velocity v."""
    x = v.base
    c1, c2 = v.components
    if s.family == SPHERE:
        e1, e2 = sphere_frame(x.xyz())
        return SurfacePoint(SPHERE, tuple(sphere_exp(s, x.xyz(), c1 * e1 + c2 * e2)))
    if s.family == FLAT_TORUS:
        return torus_point(s, x.coords[0] + c1, x.coords[1] + c2)
    if s.family == DISK:
        p = x.xyz() + np.array([c1, c2])
        if np.dot(p, p) > 1.0 + 1e-12:
            raise ValueError("geodesic exits the disk; use reflect_step for reflecting steps")
        return SurfacePoint(DISK, tuple(p))
    geo = conformal_geodesics(s)
    out = geo.exp_chart(x.xyz(), np.array([c1, c2]))
    return torus_point(s, out[0], out[1])


def reflect_step(s: SurfaceSpec, x: SurfacePoint, v) -> SurfacePoint:
    """Straight step inside the unit disk with specular boundary reflection."""
    if s.family != DISK:
        raise ValueError("reflect_step applies to the disk family only")
    p = x.xyz().copy()
    d = np.asarray(v, dtype=float).copy()
    for _ in range(100):
        q = p + d
        if np.dot(q, q) <= 1.0:
            return SurfacePoint(DISK, (q[0], q[1]))
        # first intersection of p + t*d with the unit circle
        a = np.dot(d, d)
        b = 2.0 * np.dot(p, d)
        c = np.dot(p, p) - 1.0
        disc = max(0.0, b * b - 4.0 * a * c)
        t = (-b + math.sqrt(disc)) / (2.0 * a)
        t = max(0.0, min(1.0, t))
        hit = p + t * d
        n = hit / np.linalg.norm(hit)
        rest = (1.0 - t) * d
        d = rest - 2.0 * np.dot(rest, n) * n
        p = hit
    raise StepCountError("more than 100 reflections in one step; reduce the step size")


# ---------------------------------------------------------------------------
# Uniform sampling
# ---------------------------------------------------------------------------


def _sample_batch(s: SurfaceSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if s.family == SPHERE:
        g = rng.standard_normal((n, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return s.sphere_radius * g
    if s.family == FLAT_TORUS:
        return rng.random((n, 2)) * np.array([s.L1, s.L2])
    if s.family == DISK:
        r = np.sqrt(rng.random(n))
        th = rng.random(n) * TAU
        return np.column_stack([r * np.cos(th), r * np.sin(th)])
    # conformal torus: rejection against sup exp(2*phi)
    cap = float(np.exp(2.0 * s.phi.grid.max()))
    out = np.empty((n, 2))
    k = 0
    while k < n:
        m = max(16, 2 * (n - k))
        cand = rng.random((m, 2)) * np.array([s.L1, s.L2])
        acc = rng.random(m) * cap <= np.exp(2.0 * s.phi.value(cand[:, 0], cand[:, 1]))
        good = cand[acc]
        take = min(len(good), n - k)
        out[k : k + take] = good[:take]
        k += take
    return out


def sample_uniform_many(s: SurfaceSpec, seed: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    return _sample_batch(s, rng, n)


def sample_uniform(s: SurfaceSpec, seed: int) -> SurfacePoint:
    """One point with density dvol_g / |M|, deterministic in the seed."""
    c = sample_uniform_many(s, seed, 1)[0]
    if s.family == SPHERE:
        return SurfacePoint(SPHERE, tuple(c))
    if s.family == DISK:
        return SurfacePoint(DISK, tuple(c))
    return torus_point(s, c[0], c[1])


# ---------------------------------------------------------------------------
# Conformal geodesics: ODE, shooting, variational metric
# ---------------------------------------------------------------------------


class ConformalGeodesics:
    """Geodesic machinery for the metric exp(2*phi) * (du^2 + dv^2).

    Unit-speed geodesics are integrated with classical RK4 in lockstep over
    batches; accuracy is controlled by step doubling to a relative tolerance
    of 1e-8.  Point-to-point distances solve a two-parameter shooting problem
    (direction angle, arc length) by damped Newton iteration, seeded from a
    Dijkstra estimate on the phi grid graph.
    """

    RTOL = 1e-8

    def __init__(self, s: SurfaceSpec):
        self.s = s
        self.phi = s.phi
        self._graph = None

    # -- ODE right-hand sides ----------------------------------------------

    def _rhs(self, state: np.ndarray) -> np.ndarray:
        u, v, p, q = state[:, 0], state[:, 1], state[:, 2], state[:, 3]
        fu, fv = self.phi.grad(u, v)
        out = np.empty_like(state)
        out[:, 0] = p
        out[:, 1] = q
        out[:, 2] = -(fu * (p * p - q * q) + 2.0 * fv * p * q)
        out[:, 3] = -(fv * (q * q - p * p) + 2.0 * fu * p * q)
        return out

    def _rk4(self, state: np.ndarray, T, n_steps: int, record_at=None):
        """Integrate a batch for time T (scalar or per-row). Optionally record
        states at the fractional times in record_at (shared across the batch)."""
        state = state.copy()
        T = np.broadcast_to(np.asarray(T, dtype=float), (state.shape[0],))
        h = T / n_steps
        records = []
        marks = list(record_at) if record_at is not None else []
        mi = 0
        for k in range(n_steps):
            if mi < len(marks) and abs(k / n_steps - marks[mi]) < 0.5 / n_steps:
                records.append(state.copy())
                mi += 1
            hcol = h[:, None]
            k1 = self._rhs(state)
            k2 = self._rhs(state + 0.5 * hcol * k1)
            k3 = self._rhs(state + 0.5 * hcol * k2)
            k4 = self._rhs(state + hcol * k3)
            state = state + (hcol / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        while mi < len(marks):
            records.append(state.copy())
            mi += 1
        return (state, records) if record_at is not None else state

    def _n_steps(self, T: float) -> int:
        scale = max(1.0, 4.0 * self.phi.sup_abs / max(self.s.L1, self.s.L2) * 10.0)
        return max(32, int(math.ceil(40.0 * float(np.max(T)) * scale)))

    def _integrate_controlled(self, state: np.ndarray, T):
        n = self._n_steps(np.max(T))
        prev = self._rk4(state, T, n)
        for _ in range(12):
            n *= 2
            if n > 1_000_000:
                raise StepCountError("geodesic integrator exceeded 1e6 steps")
            cur = self._rk4(state, T, n)
            err = np.max(np.abs(cur[:, :2] - prev[:, :2]))
            scale = max(1.0, float(np.max(np.abs(cur[:, :2]))))
            if err <= self.RTOL * scale:
                return cur
            prev = cur
        return prev

    # -- public operations ---------------------------------------------------

    def initial_state(self, x: np.ndarray, theta, speed=1.0) -> np.ndarray:
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        n = th.shape[0]
        st = np.empty((n, 4))
        st[:, 0] = x[0]
        st[:, 1] = x[1]
        emp = math.exp(-float(self.phi.value(x[0], x[1])))
        st[:, 2] = speed * emp * np.cos(th)
        st[:, 3] = speed * emp * np.sin(th)
        return st

    def exp_chart(self, x: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """exp_x of the tangent vector with frame components vec (2,)."""
        nv = float(np.hypot(vec[0], vec[1]))
        if nv == 0.0:
            return x.copy()
        theta = math.atan2(vec[1], vec[0])
        st = self.initial_state(x, theta)
        out = self._integrate_controlled(st, nv)
        return out[0, :2]

    def rays(self, x: np.ndarray, thetas: np.ndarray, T: float, fractions=None):
        """Unit-speed geodesics from x in many directions, integrated to T.

        Returns the endpoint batch, plus recorded states at T*fractions.
        """
        st = self.initial_state(x, thetas)
        n = self._n_steps(T) * 2
        if fractions is None:
            return self._rk4(st, T, n)
        end, recs = self._rk4(st, T, n, record_at=fractions)
        return end, recs

    # -- Dijkstra seed -------------------------------------------------------

    def _grid_graph(self):
        if self._graph is not None:
            return self._graph
        from scipy.sparse import coo_matrix

        n = min(self.s.grid_n, 128)
        L1, L2 = self.s.L1, self.s.L2
        hu, hv = L1 / n, L2 / n
        uu = (np.arange(n) + 0.0) * hu
        vv = (np.arange(n) + 0.0) * hv
        U, V = np.meshgrid(uu, vv, indexing="ij")
        w = np.exp(self.phi.value(U, V))
        idx = np.arange(n * n).reshape(n, n)
        rows, cols, vals = [], [], []
        for du, dv in ((1, 0), (0, 1), (1, 1), (1, -1)):
            nb = np.roll(np.roll(idx, -du, axis=0), -dv, axis=1)
            wn = np.roll(np.roll(w, -du, axis=0), -dv, axis=1)
            length = math.hypot(du * hu, dv * hv)
            rows.append(idx.ravel())
            cols.append(nb.ravel())
            vals.append((0.5 * (w + wn)).ravel() * length)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        g = coo_matrix((vals, (rows, cols)), shape=(n * n, n * n)).tocsr()
        self._graph = (g, n, hu, hv)
        return self._graph

    def _dijkstra_seed(self, x: np.ndarray, y: np.ndarray):
        from scipy.sparse.csgraph import dijkstra

        g, n, hu, hv = self._grid_graph()
        ix = (int(round(x[0] / hu)) % n) * n + int(round(x[1] / hv)) % n
        iy = (int(round(y[0] / hu)) % n) * n + int(round(y[1] / hv)) % n
        dist, pred = dijkstra(g, directed=False, indices=ix, return_predecessors=True)
        est = float(dist[iy])
        # collect the path nodes from x to y
        chain = [iy]
        node = iy
        while pred[node] >= 0:
            node = pred[node]
            chain.append(node)
        chain.reverse()
        # accumulated (unwrapped) displacement over the first quarter of the
        # path fixes the initial direction without 45-degree hop quantization
        L1, L2 = self.s.L1, self.s.L2
        disp = np.zeros(2)
        hops = max(1, len(chain) // 4)
        for a, b in zip(chain[: hops], chain[1 : hops + 1]):
            au, av = divmod(int(a), n)
            bu, bv = divmod(int(b), n)
            disp[0] += (bu - au + n / 2) % n * hu - (n / 2) * hu
            disp[1] += (bv - av + n / 2) % n * hv - (n / 2) * hv
        theta = math.atan2(disp[1], disp[0]) if np.any(disp != 0) else 0.0
        return est, theta

    def distance(self, x: np.ndarray, y: np.ndarray) -> float:
        L = np.array([self.s.L1, self.s.L2])
        delta = (y - x + L / 2) % L - L / 2
        chord = float(np.hypot(delta[0], delta[1]))
        if chord == 0.0:
            return 0.0
        mid = x + 0.5 * delta
        efac = math.exp(float(self.phi.value(mid[0] % L[0], mid[1] % L[1])))
        seeds = [(math.atan2(delta[1], delta[0]), chord * efac)]
        if chord >= 0.25 * min(self.s.L1, self.s.L2):
            est, theta = self._dijkstra_seed(x, y)
            if est > 0.0 and math.isfinite(est):
                seeds.append((theta, est))
        best = None
        for theta0, T0 in seeds:
            T = self._shoot(x, y, theta0, T0)
            if T is not None and (best is None or T < best):
                best = T
        if best is None:
            est, _ = self._dijkstra_seed(x, y)
            raise GeodesicShootingError("geodesic shooting did not converge", est)
        return best

    def _residual(self, x, y, theta, T):
        st = self.initial_state(x, np.array([theta]))
        out = self._integrate_controlled(st, np.array([T]))
        L = np.array([self.s.L1, self.s.L2])
        r = (out[0, :2] - y + L / 2) % L - L / 2
        return r

    def _shoot(self, x, y, theta, T) -> float | None:
        """Damped Newton on (direction, arc length); None when not converged."""
        scale = min(self.s.L1, self.s.L2)
        tol = 1e-11 * scale
        r = self._residual(x, y, theta, T)
        for _ in range(60):
            nr = float(np.hypot(r[0], r[1]))
            if nr < tol:
                return float(T)
            dth = 1e-6
            dT = 1e-6 * max(T, 0.05 * scale)
            r_th = self._residual(x, y, theta + dth, T)
            r_T = self._residual(x, y, theta, T + dT)
            J = np.column_stack([(r_th - r) / dth, (r_T - r) / dT])
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                return None
            lam = 1.0
            for _ in range(10):
                th_new = theta + lam * step[0]
                T_new = max(1e-12, T + lam * step[1])
                r_new = self._residual(x, y, th_new, T_new)
                if np.hypot(r_new[0], r_new[1]) < nr:
                    theta, T, r = th_new, T_new, r_new
                    break
                lam *= 0.5
            else:
                return None
        return None

    # -- variational metric --------------------------------------------------

    def _rhs_var(self, state, jac):
        u, v, p, q = state[:, 0], state[:, 1], state[:, 2], state[:, 3]
        fu, fv = self.phi.grad(u, v)
        fuu, fuv, fvv = self.phi.hess(u, v)
        ds = np.empty_like(state)
        ds[:, 0] = p
        ds[:, 1] = q
        ds[:, 2] = -(fu * (p * p - q * q) + 2.0 * fv * p * q)
        ds[:, 3] = -(fv * (q * q - p * p) + 2.0 * fu * p * q)
        # Jacobian of the RHS wrt (u, v, p, q), applied to each jac column.
        dj = np.empty_like(jac)
        for c in range(jac.shape[2]):
            du, dv, dp, dq = jac[:, 0, c], jac[:, 1, c], jac[:, 2, c], jac[:, 3, c]
            dj[:, 0, c] = dp
            dj[:, 1, c] = dq
            dj[:, 2, c] = -(
                (fuu * du + fuv * dv) * (p * p - q * q)
                + 2.0 * (fuv * du + fvv * dv) * p * q
                + fu * (2.0 * p * dp - 2.0 * q * dq)
                + 2.0 * fv * (dp * q + p * dq)
            )
            dj[:, 3, c] = -(
                (fuv * du + fvv * dv) * (q * q - p * p)
                + 2.0 * (fuu * du + fuv * dv) * p * q
                + fv * (2.0 * q * dq - 2.0 * p * dp)
                + 2.0 * fu * (dp * q + p * dq)
            )
        return ds, dj

    def chart_metric_many(self, x0: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """Pullback chart metrics at many t vectors, integrated in lockstep.

        Integrates the geodesic flow together with its variation in the
        initial velocity (needs phi up to second derivatives); returns an
        (n, 2, 2) array.
        """
        ts = np.atleast_2d(np.asarray(ts, dtype=float))
        n_pts = ts.shape[0]
        emp = math.exp(-float(self.phi.value(x0[0], x0[1])))
        state = np.column_stack(
            [np.full(n_pts, x0[0]), np.full(n_pts, x0[1]), emp * ts[:, 0], emp * ts[:, 1]]
        )
        jac = np.zeros((n_pts, 4, 2))
        jac[:, 2, 0] = emp
        jac[:, 3, 1] = emp
        nt = float(np.max(np.hypot(ts[:, 0], ts[:, 1])))
        n = max(64, self._n_steps(max(nt, 1e-12)))
        h = 1.0 / n
        for _ in range(n):
            k1s, k1j = self._rhs_var(state, jac)
            k2s, k2j = self._rhs_var(state + 0.5 * h * k1s, jac + 0.5 * h * k1j)
            k3s, k3j = self._rhs_var(state + 0.5 * h * k2s, jac + 0.5 * h * k2j)
            k4s, k4j = self._rhs_var(state + h * k3s, jac + h * k3j)
            state = state + (h / 6.0) * (k1s + 2 * k2s + 2 * k3s + k4s)
            jac = jac + (h / 6.0) * (k1j + 2 * k2j + 2 * k3j + k4j)
        J = jac[:, :2, :]
        e2p = np.exp(
            2.0 * self.phi.value(state[:, 0] % self.s.L1, state[:, 1] % self.s.L2)
        )
        out = np.einsum("nki,nkj->nij", J, J) * e2p[:, None, None]
        zero = np.hypot(ts[:, 0], ts[:, 1]) < 1e-300
        out[zero] = np.eye(2)
        return out

    def chart_metric(self, x0: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Pullback metric of the normal chart at x0, evaluated at t."""
        if float(np.hypot(t[0], t[1])) == 0.0:
            return np.eye(2)
        return self.chart_metric_many(x0, np.asarray(t, dtype=float)[None])[0]


def conformal_geodesics(s: SurfaceSpec) -> ConformalGeodesics:
    return s.cache("geodesics", lambda: ConformalGeodesics(s))


# ---------------------------------------------------------------------------
# Normal-coordinate charts
# ---------------------------------------------------------------------------


class NormalChart:
    """Geodesic normal coordinates t -> exp_x0(t1*E1 + t2*E2) on D_rho."""

    def __init__(self, s: SurfaceSpec, x0: SurfacePoint):
        self.s = s
        self.x0 = x0
        self.rho = injectivity_surrogate(s, x0)
        if s.family == SPHERE:
            self._frame = sphere_frame(x0.xyz())

    def _check(self, t: np.ndarray):
        if np.hypot(t[0], t[1]) >= self.rho:
            raise ValueError(f"|t| >= chart radius {self.rho:.6g}")

    def point(self, t) -> SurfacePoint:
        t = np.asarray(t, dtype=float)
        self._check(t)
        s, x0 = self.s, self.x0
        if s.family == SPHERE:
            e1, e2 = self._frame
            return SurfacePoint(SPHERE, tuple(sphere_exp(s, x0.xyz(), t[0] * e1 + t[1] * e2)))
        if s.family == FLAT_TORUS:
            return torus_point(s, x0.coords[0] + t[0], x0.coords[1] + t[1])
        if s.family == DISK:
            return disk_point(x0.coords[0] + t[0], x0.coords[1] + t[1])
        out = conformal_geodesics(s).exp_chart(x0.xyz(), t)
        return torus_point(s, out[0], out[1])

    def metric(self, t) -> np.ndarray:
        """Pullback metric g_jk(t); the identity at t = 0 for every family."""
        t = np.asarray(t, dtype=float)
        self._check(t)
        s = self.s
        if s.family in (FLAT_TORUS, DISK):
            return np.eye(2)
        if s.family == SPHERE:
            a = s.sphere_radius
            r = float(np.hypot(t[0], t[1]))
            if r < 1e-14:
                return np.eye(2)
            w = t / r
            P = np.outer(w, w)
            lam = (a * math.sin(r / a) / r) ** 2
            return P + lam * (np.eye(2) - P)
        return conformal_geodesics(s).chart_metric(self.x0.xyz(), t)

    def metric_many(self, ts: np.ndarray) -> np.ndarray:
        """Chart metrics at many points (n, 2) -> (n, 2, 2)."""
        ts = np.atleast_2d(np.asarray(ts, dtype=float))
        s = self.s
        if s.family in (FLAT_TORUS, DISK):
            return np.broadcast_to(np.eye(2), (ts.shape[0], 2, 2)).copy()
        if s.family == SPHERE:
            return np.stack([self.metric(t) for t in ts])
        return conformal_geodesics(s).chart_metric_many(self.x0.xyz(), ts)

    def boundary_speed(self, r: float, theta) -> np.ndarray:
        """|d/dtheta exp(r*omega)|_g, the line element of the geodesic circle."""
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        ts = r * np.column_stack([np.cos(th), np.sin(th)])
        tv = r * np.column_stack([-np.sin(th), np.cos(th)])
        g = self.metric_many(ts)
        return np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", tv, g, tv), 0.0))

    def circle_points(self, r: float, thetas: np.ndarray) -> list[SurfacePoint]:
        return [self.point(r * np.array([math.cos(a), math.sin(a)])) for a in thetas]


def normal_chart_metric(s: SurfaceSpec, x0: SurfacePoint, t) -> np.ndarray:
    """Metric of the geodesic chart at x0 in coordinates t (2-vector)."""
    return NormalChart(s, x0).metric(t)
