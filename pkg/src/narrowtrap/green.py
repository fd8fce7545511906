"""Mean-zero Green's functions of the Laplace-Beltrami operator.

For each surface family this module evaluates the Green's function E(x, y)
with a constant background source::

    Lap_g E(x,.) = -delta_x + 1/|M|,   E(x,y) = E(y,x),   integral E dvol = 0,

splits it into the universal log singularity -(1/2pi) log d_g(x,y) and a
regular remainder, and extracts the diagonal value of the remainder by a
Richardson ladder.  Backends:

* round sphere: closed form in the geodesic distance,
* flat torus: Ewald-split lattice sum (machine precision),
* conformal torus: flat backend plus one FFT-solved conformal shift,
* unit disk: Neumann function by image charges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import exp1, roots_legendre

from . import geometry as geo
from .geometry import (
    CONFORMAL_TORUS,
    DISK,
    FLAT_TORUS,
    SPHERE,
    NormalChart,
    SurfacePoint,
    SurfaceSpec,
    area,
    injectivity_surrogate,
)

TAU = 2.0 * math.pi
INV_2PI = 1.0 / TAU
EULER_GAMMA = 0.5772156649015328606


class SingularityError(ValueError):
    """E(x, y) requested on the diagonal; use regular_part for that limit."""


class LadderError(RuntimeError):
    """Regular-part ladder failed to converge monotonically."""

    def __init__(self, message: str, ladder):
        super().__init__(message)
        self.ladder = ladder


@dataclass(frozen=True)
class GreenValue:
    """E(x,y) with its split into log singularity and regular remainder."""

    total: float
    log_part: float
    distance: float

    @property
    def regular_part(self) -> float:
        return self.total - self.log_part


@dataclass(frozen=True)
class RegularPartEstimate:
    """Diagonal regular part from a dyadic separation ladder."""

    value: float
    extrapolation_error: float
    ladder: tuple  # ((d, raw regular part), ...) with d decreasing


# ---------------------------------------------------------------------------
# Flat-torus backend: Ewald splitting
# ---------------------------------------------------------------------------


class EwaldTorus:
    """Green's function of the flat rectangular torus via Ewald splitting.

    The point source is screened by a Gaussian of width 1/(2*alpha); the
    screened part is summed over real-space images, the smooth remainder in
    reciprocal space.  Cutoffs keep both tails below ~1e-16 so the backend
    serves as a machine-precision reference.
    """

    def __init__(self, L1: float, L2: float):
        self.L1, self.L2 = float(L1), float(L2)
        self.volume = self.L1 * self.L2
        self.alpha = math.sqrt(TAU / self.volume)
        a2 = self.alpha**2
        # real-space images: E1(a2*d^2) < 1e-17  <=>  d > sqrt(39.2)/alpha
        d_cut = math.sqrt(39.2) / self.alpha
        n1 = int(math.ceil((d_cut + 0.5 * self.L1 * math.sqrt(2)) / self.L1))
        n2 = int(math.ceil((d_cut + 0.5 * self.L2 * math.sqrt(2)) / self.L2))
        g1, g2 = np.meshgrid(np.arange(-n1, n1 + 1), np.arange(-n2, n2 + 1), indexing="ij")
        self.images = np.column_stack([g1.ravel() * self.L1, g2.ravel() * self.L2])
        # reciprocal modes: exp(-k^2/(4 a2)) < 1e-17  <=>  k > 2 alpha sqrt(39.2)
        k_cut = 2.0 * self.alpha * math.sqrt(39.2)
        m1 = int(math.ceil(k_cut * self.L1 / TAU))
        m2 = int(math.ceil(k_cut * self.L2 / TAU))
        h1, h2 = np.meshgrid(np.arange(-m1, m1 + 1), np.arange(-m2, m2 + 1), indexing="ij")
        kx = TAU * h1.ravel() / self.L1
        ky = TAU * h2.ravel() / self.L2
        k2 = kx**2 + ky**2
        keep = k2 > 0
        kx, ky, k2 = kx[keep], ky[keep], k2[keep]
        coef = np.exp(-k2 / (4.0 * a2)) / (self.volume * k2)
        keep = coef > 1e-20
        self.kx, self.ky, self.kcoef = kx[keep], ky[keep], coef[keep]
        self.const = -1.0 / (4.0 * a2 * self.volume)
        # diagonal regular part (with respect to flat distance)
        img = self.images[np.any(self.images != 0, axis=1)]
        self_sum = float(np.sum(exp1(a2 * np.sum(img**2, axis=1)))) / (2.0 * TAU)
        self.diag_regular = (
            (-EULER_GAMMA - 2.0 * math.log(self.alpha)) / (2.0 * TAU)
            + self_sum
            + float(np.sum(self.kcoef))
            + self.const
        )

    def eval_delta(self, delta: np.ndarray) -> np.ndarray:
        """E at separation vectors delta (..., 2); delta need not be reduced."""
        d = np.asarray(delta, dtype=float)
        squeeze = d.ndim == 1
        d = np.atleast_2d(d)
        L = np.array([self.L1, self.L2])
        d = d - L * np.round(d / L)
        r2 = np.sum((d[:, None, :] + self.images[None, :, :]) ** 2, axis=2)
        real = np.sum(exp1(self.alpha**2 * np.maximum(r2, 1e-300)), axis=1) / (2.0 * TAU)
        recip = np.cos(np.outer(d[:, 0], self.kx) + np.outer(d[:, 1], self.ky)) @ self.kcoef
        out = real + recip + self.const
        return float(out[0]) if squeeze else out


def _ewald(s: SurfaceSpec) -> EwaldTorus:
    return s.cache("ewald", lambda: EwaldTorus(s.L1, s.L2))


# ---------------------------------------------------------------------------
# Conformal-torus backend: flat part plus one FFT solve
# ---------------------------------------------------------------------------


class ConformalShift:
    """The additive conformal correction w and mean-zero constant.

    With Lap_g = exp(-2 phi) Lap_flat, the function

        E(x, y) = E_flat(x, y) + w(x) + w(y) + k

    satisfies the defining equation once Lap_flat w = exp(2 phi)/|M| - 1/(L1 L2);
    w is solved spectrally on the phi grid and evaluated off-grid through its
    trigonometric interpolant.  k enforces the mean-zero normalization:
    k = -(1/|M|) * integral of w * exp(2 phi).
    """

    def __init__(self, s: SurfaceSpec):
        n = s.grid_n
        F = np.exp(2.0 * s.phi.grid)
        vol = float(F.mean()) * s.L1 * s.L2
        rhs = F / vol - 1.0 / (s.L1 * s.L2)
        kx = TAU * np.fft.fftfreq(n, d=s.L1 / n)
        ky = TAU * np.fft.fftfreq(n, d=s.L2 / n)
        k2 = kx[:, None] ** 2 + ky[None, :] ** 2
        k2[0, 0] = 1.0
        what = np.fft.fft2(rhs) / (-k2)
        what[0, 0] = 0.0
        self.w_grid = np.real(np.fft.ifft2(what))
        self.volume = vol
        self.k_const = -float(np.mean(self.w_grid * F)) * s.L1 * s.L2 / vol
        self._interp = geo.GridPhi(s.L1, s.L2, n, self.w_grid)

    def w(self, u, v):
        return self._interp.value(u, v)


def _conformal(s: SurfaceSpec) -> ConformalShift:
    return s.cache("conformal_shift", lambda: ConformalShift(s))


# ---------------------------------------------------------------------------
# Disk backend: Neumann function by image charges
# ---------------------------------------------------------------------------


class NeumannDisk:
    """Neumann Green's function of the unit disk.

    E(x,y) = -(1/2pi) [log|x-y| + log(|x| |y - x/|x|^2|)]
             + (|x|^2 + |y|^2)/(4 pi) + k0.

    The image term keeps the boundary flux of the log pair constant, the
    quadratic term carries the 1/|M| background, and k0 is fixed by the
    mean-zero condition (computed once by quadrature and cached).
    """

    def __init__(self):
        self.k0 = self._mean_zero_constant()

    @staticmethod
    def _image_factor(x: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """|x| * |y - x/|x|^2| in the stable form ||x| y - x/|x||."""
        rho = float(np.hypot(x[0], x[1]))
        if rho < 1e-150:
            return np.ones(ys.shape[0])
        d = rho * ys - x / rho
        return np.hypot(d[:, 0], d[:, 1])

    def eval_raw(self, x: np.ndarray, ys: np.ndarray, with_k0=True) -> np.ndarray:
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        d = ys - x
        r = np.hypot(d[:, 0], d[:, 1])
        m = self._image_factor(x, ys)
        out = -INV_2PI * (np.log(np.maximum(r, 1e-300)) + np.log(m))
        out += (np.dot(x, x) + np.sum(ys**2, axis=1)) / (2.0 * TAU)
        if with_k0:
            out += self.k0
        return out

    def diag_regular(self, x: np.ndarray) -> float:
        """lim_{y->x} E(x,y) + (1/2pi) log|x-y|."""
        rho2 = float(np.dot(x, x))
        return -INV_2PI * math.log(1.0 - rho2) + rho2 / TAU + self.k0

    def _mean_zero_constant(self) -> float:
        # mean of the k0-free formula over the disk; the log|x-y| part has
        # the closed-form disk integral pi (|x|^2 - 1)/2.
        x = np.array([0.37, 0.21])
        nodes, wts = roots_legendre(48)
        r = 0.5 * (nodes + 1.0)
        wr = 0.5 * wts
        th = TAU * np.arange(96) / 96.0
        R, Th = np.meshgrid(r, th, indexing="ij")
        ys = np.column_stack([(R * np.cos(Th)).ravel(), (R * np.sin(Th)).ravel()])
        w2 = (wr[:, None] * R * (TAU / 96.0)).ravel()
        smooth = -INV_2PI * np.log(self._image_factor(x, ys))
        smooth += (np.dot(x, x) + np.sum(ys**2, axis=1)) / (2.0 * TAU)
        mean = float(np.dot(smooth, w2)) - INV_2PI * math.pi * (np.dot(x, x) - 1.0) / 2.0
        return -mean / math.pi


def _neumann(s: SurfaceSpec) -> NeumannDisk:
    return s.cache("neumann", lambda: NeumannDisk())


# ---------------------------------------------------------------------------
# Point evaluation
# ---------------------------------------------------------------------------


def _sphere_total(s: SurfaceSpec, d) -> np.ndarray:
    a = s.sphere_radius
    return -INV_2PI * np.log(np.sin(np.asarray(d) / (2.0 * a))) - 1.0 / (2.0 * TAU)


def green_total_many(s: SurfaceSpec, x: SurfacePoint, ys: np.ndarray) -> np.ndarray:
    """Vectorized E(x, y_i); ys holds raw coordinates, one point per row."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    xc = x.xyz()
    if s.family == SPHERE:
        a = s.sphere_radius
        c = np.clip(ys @ xc / (a * a), -1.0, 1.0)
        return _sphere_total(s, a * np.arccos(c))
    if s.family == FLAT_TORUS:
        return _ewald(s).eval_delta(ys - xc)
    if s.family == CONFORMAL_TORUS:
        cf = _conformal(s)
        return (
            _ewald(s).eval_delta(ys - xc)
            + float(cf.w(xc[0], xc[1]))
            + cf.w(ys[:, 0], ys[:, 1])
            + cf.k_const
        )
    return _neumann(s).eval_raw(xc, ys)


def green(s: SurfaceSpec, x: SurfacePoint, y: SurfacePoint) -> GreenValue:
    """E(x, y) together with its log/regular split.

    Raises SingularityError on the diagonal; the disk family dispatches to
    the Neumann backend.
    """
    if s.family == DISK:
        return neumann_green(s, x, y)
    d = geo.geodesic_distance(s, x, y)
    if d < 1e-14 * injectivity_surrogate(s, x):
        raise SingularityError("x == y; the diagonal limit lives in regular_part")
    total = float(green_total_many(s, x, y.xyz())[0])
    return GreenValue(total=total, log_part=-INV_2PI * math.log(d), distance=d)


def neumann_green(s: SurfaceSpec, x: SurfacePoint, y: SurfacePoint) -> GreenValue:
    """Neumann Green's function of the unit disk (reflecting boundary)."""
    if s.family != DISK:
        raise ValueError("neumann_green applies to the disk family only")
    xc, yc = x.xyz(), y.xyz()
    if float(np.dot(xc, xc)) >= 1.0 - 1e-12:
        raise ValueError("source point must lie in the open disk")
    d = float(np.linalg.norm(xc - yc))
    if d < 1e-15:
        raise SingularityError("x == y; the diagonal limit lives in regular_part")
    total = float(_neumann(s).eval_raw(xc, yc)[0])
    return GreenValue(total=total, log_part=-INV_2PI * math.log(d), distance=d)


def correction_term(s: SurfaceSpec, x: SurfacePoint, y: SurfacePoint) -> float:
    """Difference between a boundaryless extension's Green function and the
    Neumann one, smooth away from the boundary.

    The disk is embedded in a 4 x 4 flat torus for the extension; the log
    parts cancel exactly, so the value stays bounded on the diagonal.
    """
    if s.family != DISK:
        raise ValueError("correction_term applies to the disk family only")
    xc, yc = x.xyz(), y.xyz()
    for p in (xc, yc):
        if np.linalg.norm(p) > 0.9:
            raise ValueError("points must stay at distance > 0.1 from the boundary")
    big = s.cache("doubling_torus", lambda: EwaldTorus(4.0, 4.0))
    e_free = float(big.eval_delta(yc - xc))
    e_disk = float(_neumann(s).eval_raw(xc, yc)[0])
    return e_free - e_disk


def diag_regular_flat(s: SurfaceSpec, x: SurfacePoint) -> float:
    """Diagonal regular part taken against the flat chart distance."""
    xc = x.xyz()
    if s.family == SPHERE:
        return INV_2PI * math.log(2.0 * s.sphere_radius) - 1.0 / (2.0 * TAU)
    if s.family == FLAT_TORUS:
        return _ewald(s).diag_regular
    if s.family == CONFORMAL_TORUS:
        cf = _conformal(s)
        return _ewald(s).diag_regular + 2.0 * float(cf.w(xc[0], xc[1])) + cf.k_const
    return _neumann(s).diag_regular(xc)


# ---------------------------------------------------------------------------
# Regular part by Richardson ladder
# ---------------------------------------------------------------------------


def _ladder_points(s: SurfaceSpec, x0: SurfacePoint, dists: np.ndarray, direction):
    """Points at exact geodesic distances dists from x0 along one chart ray."""
    chart = NormalChart(s, x0)
    th = math.atan2(direction[1], direction[0])
    if s.family == CONFORMAL_TORUS:
        gdx = geo.conformal_geodesics(s)
        st = gdx.initial_state(x0.xyz(), np.full(len(dists), th))
        out = gdx._rk4(st, np.asarray(dists), gdx._n_steps(float(np.max(dists))) * 2)
        L = np.array([s.L1, s.L2])
        return out[:, :2] % L
    pts = [chart.point(d * np.array([math.cos(th), math.sin(th)])) for d in dists]
    return np.array([p.xyz() for p in pts])


def raw_regular_ladder(
    s: SurfaceSpec, x0: SurfacePoint, dists: np.ndarray, direction=(1.0, 0.0)
) -> np.ndarray:
    """E(x0, y_d) + (1/2pi) log d at the given exact separations."""
    ys = _ladder_points(s, x0, np.asarray(dists, dtype=float), direction)
    totals = green_total_many(s, x0, ys)
    return totals + INV_2PI * np.log(np.asarray(dists, dtype=float))


def _richardson(raw: np.ndarray) -> tuple[float, float]:
    """Two Richardson levels on a dyadic ladder; value and level spread."""
    lvl1 = 2.0 * raw[..., 1:] - raw[..., :-1]
    lvl2 = (4.0 * lvl1[..., 1:] - lvl1[..., :-1]) / 3.0
    scale = np.max(np.abs(raw), axis=-1) + 1.0
    err = np.abs(lvl2[..., -1] - lvl1[..., -1]) + 1e-15 * scale
    return lvl2[..., -1], err


def regular_part_many(
    s: SurfaceSpec, centers, direction=(1.0, 0.0), n_levels: int = 7
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized diagonal regular part over many centers (one ladder each).

    All centers share the ladder geometry; conformal tori integrate every
    ladder ray in one lockstep batch, which is what makes dense Robin
    landscapes affordable.
    """
    th = math.atan2(direction[1], direction[0])
    n_c = len(centers)
    d0s = np.array([0.05 * injectivity_surrogate(s, c) for c in centers])
    fac = 0.5 ** np.arange(n_levels)
    dists = d0s[:, None] * fac[None, :]
    if s.family == CONFORMAL_TORUS:
        gdx = geo.conformal_geodesics(s)
        x0s = np.array([c.xyz() for c in centers])
        st = np.repeat(
            np.stack([gdx.initial_state(x, np.array([th]))[0] for x in x0s]), n_levels, axis=0
        )
        out = gdx._rk4(st, dists.ravel(), gdx._n_steps(float(dists.max())) * 2)
        L = np.array([s.L1, s.L2])
        ys = out[:, :2] % L
        cf = _conformal(s)
        ew = _ewald(s)
        deltas = ys - np.repeat(x0s, n_levels, axis=0)
        totals = (
            ew.eval_delta(deltas)
            + np.repeat(cf.w(x0s[:, 0], x0s[:, 1]), n_levels)
            + cf.w(ys[:, 0], ys[:, 1])
            + cf.k_const
        )
        raw = (totals + INV_2PI * np.log(dists.ravel())).reshape(n_c, n_levels)
    else:
        raw = np.empty((n_c, n_levels))
        for i, c in enumerate(centers):
            raw[i] = raw_regular_ladder(s, c, dists[i], direction)
    return _richardson(raw)


def regular_part(
    s: SurfaceSpec,
    x0: SurfacePoint,
    direction=(1.0, 0.0),
    n_levels: int = 7,
    d0: float | None = None,
) -> RegularPartEstimate:
    """Diagonal regular part at x0 via a dyadic ladder and Richardson steps.

    The remainder is only C^1 in general, so the ladder assumes a leading
    error linear in d and stops after two Richardson levels; the reported
    extrapolation_error is the spread between those levels.
    """
    if s.family == DISK and np.linalg.norm(x0.xyz()) >= 1.0 - 1e-9:
        raise ValueError("x0 must be interior")
    if d0 is None:
        d0 = 0.05 * injectivity_surrogate(s, x0)
    dists = d0 * 0.5 ** np.arange(n_levels)
    raw = raw_regular_ladder(s, x0, dists, direction)
    ladder = tuple((float(d), float(v)) for d, v in zip(dists, raw))
    # convergence diagnostic: a smooth remainder may pass through one tail
    # extremum (vanishing linear term), but alternating differences that do
    # not shrink mean the ladder is at a noise floor, not converging
    diffs = np.diff(raw[-4:])
    scale = float(np.max(np.abs(raw))) + 1.0
    sig = np.abs(diffs) > 1e-12 * scale
    if np.all(sig) and diffs[0] * diffs[1] < 0 and diffs[1] * diffs[2] < 0:
        if abs(diffs[2]) > 0.75 * abs(diffs[1]):
            raise LadderError("regular-part ladder is not converging", ladder)
    value, err = _richardson(raw)
    return RegularPartEstimate(value=float(value), extrapolation_error=float(err), ladder=ladder)


# ---------------------------------------------------------------------------
# Mean-zero residual
# ---------------------------------------------------------------------------


def _int_log_r_jac(s: SurfaceSpec) -> float:
    """integral over M (geodesic polar at any point) of log r, sphere only."""
    a = s.sphere_radius
    L = math.pi * a
    closed = (L**2 / 2.0) * math.log(L) - L**2 / 4.0
    nodes, wts = roots_legendre(64)
    r = 0.5 * L * (nodes + 1.0)
    w = 0.5 * L * wts
    smooth = np.log(r) * (a * np.sin(r / a) - r)
    return TAU * (closed + float(np.dot(smooth, w)))


def _window(d: np.ndarray, delta: float) -> np.ndarray:
    """C^1 cutoff of the log singularity: log(d/delta) + (1 - d^2/delta^2)/2."""
    d = np.asarray(d, dtype=float)
    out = np.zeros_like(d)
    inside = (d < delta) & (d > 0)
    dd = d[inside]
    out[inside] = np.log(dd / delta) + 0.5 * (1.0 - (dd / delta) ** 2)
    return out


def green_mean_residual(s: SurfaceSpec, x: SurfacePoint) -> float:
    """Quadrature of the mean-zero normalization integral of E(x, .).

    A C^1 window around x replaces the log singularity by its analytically
    integrable model, whose disk integral is added back in closed form.
    """
    xc = x.xyz()
    if s.family == SPHERE:
        a = s.sphere_radius
        nodes, wts = roots_legendre(32)
        r = 0.5 * math.pi * a * (nodes + 1.0)
        wr = 0.5 * math.pi * a * wts
        nth = 16
        th = TAU * (np.arange(nth) + 0.5) / nth
        R, Th = np.meshgrid(r, th, indexing="ij")
        e1, e2 = geo.sphere_frame(xc)
        dirs = np.cos(Th).ravel()[:, None] * e1 + np.sin(Th).ravel()[:, None] * e2
        rr = R.ravel()[:, None]
        ys = a * (np.cos(rr / a) * (xc / a) + np.sin(rr / a) * dirs)
        reg = green_total_many(s, x, ys) + INV_2PI * np.log(R.ravel())
        jac = a * np.sin(R.ravel() / a)
        wq = (wr[:, None] * np.full(nth, TAU / nth)).ravel()
        total = float(np.dot(reg * jac, wq)) - INV_2PI * _int_log_r_jac(s)
        return total
    if s.family == DISK:
        return _disk_mean_residual(s, xc)
    # torus families: rectangle rule with the windowed subtraction
    n = s.grid_n if s.family == CONFORMAL_TORUS else 256
    delta = min(s.L1, s.L2) / 8.0
    h1, h2 = s.L1 / n, s.L2 / n
    u = np.arange(n) * h1
    v = np.arange(n) * h2
    U, V = np.meshgrid(u, v, indexing="ij")
    ys = np.column_stack([U.ravel(), V.ravel()])
    d = geo.flat_torus_distance(s, xc, ys)
    far = d >= 1e-9
    F = (
        np.exp(2.0 * s.phi.value(ys[:, 0], ys[:, 1]))
        if s.family == CONFORMAL_TORUS
        else np.ones(len(ys))
    )
    vals = np.empty(len(ys))
    vals[far] = green_total_many(s, x, ys[far]) + INV_2PI * _window(d[far], delta)
    vals[~far] = diag_regular_flat(s, x) + INV_2PI * (0.5 - math.log(delta))
    out = float(np.dot(vals, F)) * h1 * h2
    # closed-form window integral against exp(2 phi(x)), plus the smooth excess
    e2x = float(np.exp(2.0 * s.phi.value(xc[0], xc[1]))) if s.family == CONFORMAL_TORUS else 1.0
    out += e2x * delta**2 / 8.0
    if s.family == CONFORMAL_TORUS:
        nodes, wts = roots_legendre(24)
        r = 0.5 * delta * (nodes + 1.0)
        wr = 0.5 * delta * wts
        nth = 32
        th = TAU * (np.arange(nth) + 0.5) / nth
        R, Th = np.meshgrid(r, th, indexing="ij")
        pu = (xc[0] + R * np.cos(Th)).ravel() % s.L1
        pv = (xc[1] + R * np.sin(Th)).ravel() % s.L2
        diff = np.exp(2.0 * s.phi.value(pu, pv)) - e2x
        wwin = _window(R.ravel(), delta)
        wq = (wr[:, None] * (R * TAU / nth)).ravel()
        out += -INV_2PI * float(np.dot(wwin * diff, wq))
    return out


def _disk_mean_residual(s: SurfaceSpec, xc: np.ndarray) -> float:
    delta = min(0.12, 0.999 * (1.0 - float(np.hypot(xc[0], xc[1]))))
    nodes, wts = roots_legendre(96)
    r = 0.5 * (nodes + 1.0)
    wr = 0.5 * wts
    nth = 128
    th = TAU * (np.arange(nth) + 0.5) / nth
    R, Th = np.meshgrid(r, th, indexing="ij")
    ys = np.column_stack([(R * np.cos(Th)).ravel(), (R * np.sin(Th)).ravel()])
    wq = (wr[:, None] * (R * TAU / nth)).ravel()
    d = np.hypot(ys[:, 0] - xc[0], ys[:, 1] - xc[1])
    vals = _neumann(s).eval_raw(xc, ys) + INV_2PI * _window(d, delta)
    out = float(np.dot(vals, wq))
    # window disk may overhang the boundary only if x is near it; keep clear
    out += delta**2 / 8.0
    return out


# ---------------------------------------------------------------------------
# Trap-kernel constant and trap integrals of E
# ---------------------------------------------------------------------------


def trap_kernel_constant(s: SurfaceSpec, x0: SurfacePoint, eps: float, n_angles: int = 16) -> float:
    """Pair-averaged normal derivative of E over the trap circle.

    The inward-normal derivative of E(x, y) for x, y on the geodesic circle
    of radius eps carries a universal 1/(4 pi eps) plus an O(1) remainder;
    the returned mean times eps tends to 1/(4 pi) for every family.
    """
    if eps >= 0.1 * injectivity_surrogate(s, x0):
        raise ValueError("eps must stay below 0.1 x injectivity surrogate")
    chart = NormalChart(s, x0)
    th_x = TAU * np.arange(n_angles) / n_angles
    th_y = th_x + math.pi / n_angles  # staggered: FD points never hit sources
    ys = np.array([p.xyz() for p in chart.circle_points(eps, th_y)])
    wy = chart.boundary_speed(eps, th_y) * (TAU / n_angles)
    wx = chart.boundary_speed(eps, th_x) * (TAU / n_angles)
    # chart coordinates of sources and of candidate FD stencil points
    ty = eps * np.column_stack([np.cos(th_y), np.sin(th_y)])
    delta = 0.005 * eps
    for _ in range(5):
        gap = min(
            float(np.min(np.hypot(ty[:, 0] - r * math.cos(a), ty[:, 1] - r * math.sin(a))))
            for a in th_x
            for r in (eps - delta, eps + delta)
        )
        if gap > 4.0 * delta:
            break
        delta *= 0.5
    else:
        raise RuntimeError("finite-difference step kept colliding with the kernel singularity")
    vals = np.empty((n_angles, len(ys)))
    for i, a in enumerate(th_x):
        w = np.array([math.cos(a), math.sin(a)])
        x_out = chart.point((eps + delta) * w)
        x_in = chart.point((eps - delta) * w)
        e_out = green_total_many(s, x_out, ys) if s.family != DISK else _neumann(s).eval_raw(x_out.xyz(), ys)
        e_in = green_total_many(s, x_in, ys) if s.family != DISK else _neumann(s).eval_raw(x_in.xyz(), ys)
        vals[i] = -(e_out - e_in) / (2.0 * delta)
    num = float(wx @ vals @ wy)
    return num / (float(wx.sum()) * float(wy.sum()))


def _log_disk_integral(eps: float, rho_x: float) -> float:
    """integral over |t|<eps of log|t - t_x| dt for |t_x| = rho_x (flat)."""
    if rho_x <= eps:
        return math.pi * eps**2 * math.log(eps) + math.pi * (rho_x**2 - eps**2) / 2.0
    return math.pi * eps**2 * math.log(rho_x)


def trap_green_integral(
    s: SurfaceSpec,
    x0: SurfacePoint,
    eps: float,
    x_radii: np.ndarray,
    x_angles: np.ndarray,
    n_r: int = 32,
    n_theta: int = 64,
) -> np.ndarray:
    """I(x) = integral of E(x, .) over the geodesic trap disk, vectorized over
    evaluation points x = exp_x0(r_x * omega(theta_x)).

    The chart-flat log model of the singularity is removed node-wise and its
    exact disk integral restored, so the quadrature only sees the bounded
    log-ratio and the C^1 remainder.
    """
    chart = NormalChart(s, x0)
    nodes, wts = roots_legendre(n_r)
    r = 0.5 * eps * (nodes + 1.0)
    wr = 0.5 * eps * wts
    th = TAU * (np.arange(n_theta) + 0.5) / n_theta + 0.31  # offset from x angles
    R, Th = np.meshgrid(r, th, indexing="ij")
    ts = np.column_stack([(R * np.cos(Th)).ravel(), (R * np.sin(Th)).ravel()])
    if s.family in (FLAT_TORUS, DISK):
        base = x0.xyz()
        ys = base + ts if s.family == DISK else (base + ts) % np.array([s.L1, s.L2])
        sqdet = np.ones(len(ts))
    elif s.family == SPHERE:
        a = s.sphere_radius
        e1, e2 = geo.sphere_frame(x0.xyz())
        rr = R.ravel()
        dirs = (np.cos(Th).ravel()[:, None] * e1 + np.sin(Th).ravel()[:, None] * e2)
        ys = a * np.cos(rr / a)[:, None] * (x0.xyz() / a) + a * np.sin(rr / a)[:, None] * dirs
        sqdet = np.where(rr > 1e-14, a * np.sin(rr / a) / np.maximum(rr, 1e-300), 1.0)
    else:
        gdx = geo.conformal_geodesics(s)
        ys = np.empty((len(ts), 2))
        # all rays in one lockstep batch: angles repeat across radii
        st = gdx.initial_state(x0.xyz(), np.tile(th, n_r))
        out = gdx._rk4(st, np.repeat(r, n_theta), gdx._n_steps(eps) * 2)
        ys = out[:, :2] % np.array([s.L1, s.L2])
        g = chart.metric_many(ts)
        sqdet = np.sqrt(np.maximum(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0], 0.0))
    wq = (wr[:, None] * np.full(n_theta, TAU / n_theta) * R).ravel()
    out = np.empty(len(x_radii))
    for i, (rx, ax) in enumerate(zip(np.atleast_1d(x_radii), np.atleast_1d(x_angles))):
        t_x = rx * np.array([math.cos(ax), math.sin(ax)])
        x = chart.point(t_x)
        if s.family == DISK:
            totals = _neumann(s).eval_raw(x.xyz(), ys)
        else:
            totals = green_total_many(s, x, ys)
        dflat = np.hypot(ts[:, 0] - t_x[0], ts[:, 1] - t_x[1])
        smooth = (totals + INV_2PI * np.log(np.maximum(dflat, 1e-300))) * sqdet
        corr = -INV_2PI * _log_disk_integral(eps, float(rx))
        corr += -INV_2PI * float(np.dot(np.log(np.maximum(dflat, 1e-300)) * (sqdet - 1.0), wq))
        out[i] = float(np.dot(smooth, wq)) + corr
    return out
