"""Stochastic validation: Brownian paths on each surface and their capture times.

The process is generated by the Laplace-Beltrami operator itself (not half
of it), so each tangent-frame component of a time step dt carries variance
2 dt; the exit-time problem this samples is -Lap_g u = 1.  That convention
is locked by the sphere acceptance test, where the factor-2-wrong variant
fails decisively.

Every path owns a counter-based Philox stream keyed (seed, path index), so
estimates are bit-identical under any batching, ordering or thread count.
Absorption is checked after each step; the O(sqrt(dt)) overshoot bias is
measured by bias_probe rather than corrected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import asymptotics as asy
from . import geometry as geo
from .geometry import CONFORMAL_TORUS, DISK, FLAT_TORUS, SPHERE, SurfacePoint, SurfaceSpec
from .pde import ScalingReport

TAU = 2.0 * math.pi


@dataclass(frozen=True)
class MCConfig:
    """Simulation parameters; `start` is a SurfacePoint or "uniform"."""

    n_paths: int
    base_dt: float
    dt_floor: float
    seed: int
    start: object = "uniform"
    max_time: float = 200.0
    step_variance_multiplier: float = 2.0  # variance per frame component / dt
    near_shrink: float | None = None  # near-trap dt ratio; None = cap rms step at eps/4
    block_size: int = 2048

    def validate(self):
        if self.n_paths < 100:
            raise ValueError("need at least 100 paths")
        if not (0 < self.dt_floor <= self.base_dt):
            raise ValueError("need 0 < dt_floor <= base_dt")
        if not math.isfinite(self.max_time):
            raise ValueError("max_time must be finite")


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    n_censored: int
    dt_stats: dict
    valid: bool

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "n_censored": self.n_censored,
            "dt_stats": self.dt_stats,
            "valid": self.valid,
        }


# ---------------------------------------------------------------------------
# Per-family stepping kernels (vectorized over paths)
# ---------------------------------------------------------------------------


def _sphere_step(s: SurfaceSpec, pos: np.ndarray, xi: np.ndarray) -> np.ndarray:
    a = s.sphere_radius
    n = pos / a
    e1 = np.cross(np.broadcast_to([0.0, 0.0, 1.0], n.shape), n)
    nrm = np.linalg.norm(e1, axis=1, keepdims=True)
    polar = nrm[:, 0] < 1e-9
    if np.any(polar):
        e1[polar] = np.cross(np.broadcast_to([1.0, 0.0, 0.0], (int(polar.sum()), 3)), n[polar])
        nrm = np.linalg.norm(e1, axis=1, keepdims=True)
    e1 /= nrm
    e2 = np.cross(n, e1)
    v = xi[:, :1] * e1 + xi[:, 1:] * e2
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    small = nv[:, 0] < 1e-300
    nv[small] = 1.0
    out = a * (np.cos(nv / a) * n + np.sin(nv / a) * (v / nv))
    out[small] = pos[small]
    return out


def _disk_step(pos: np.ndarray, xi: np.ndarray) -> np.ndarray:
    p = pos.copy()
    d = xi.copy()
    for _ in range(100):
        q = p + d
        out = np.einsum("ij,ij->i", q, q) > 1.0
        if not np.any(out):
            return q
        po, do = p[out], d[out]
        a = np.einsum("ij,ij->i", do, do)
        b = 2.0 * np.einsum("ij,ij->i", po, do)
        c = np.einsum("ij,ij->i", po, po) - 1.0
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
        t = np.clip((-b + disc) / (2.0 * a), 0.0, 1.0)
        hit = po + t[:, None] * do
        nrm = hit / np.linalg.norm(hit, axis=1, keepdims=True)
        rest = (1.0 - t)[:, None] * do
        d_new = rest - 2.0 * np.einsum("ij,ij->i", rest, nrm)[:, None] * nrm
        p_new = p.copy()
        d_stay = d.copy()
        p_new[out] = hit
        d_stay[out] = d_new
        d_stay[~out] = 0.0
        p_stay = p + d
        p_stay[out] = hit
        p, d = p_stay, d_stay
        if not np.any(np.einsum("ij,ij->i", d, d) > 0):
            return p
    raise geo.StepCountError("more than 100 reflections in one Monte Carlo step")


class _Engine:
    """Family-specific state: trap membership, distances, stepping."""

    def __init__(self, s: SurfaceSpec, trap: asy.TrapSpec | None):
        self.s = s
        self.trap = trap
        self.dim = 3 if s.family == SPHERE else 2
        if trap is not None and s.family == CONFORMAL_TORUS:
            from matplotlib.path import Path

            th = TAU * np.arange(256) / 256
            gdx = geo.conformal_geodesics(s)
            st = gdx.initial_state(trap.center.xyz(), th)
            out = gdx._rk4(st, trap.eps, gdx._n_steps(trap.eps) * 2)
            L = np.array([s.L1, s.L2])
            delta = out[:, :2] - trap.center.xyz()
            delta -= L * np.round(delta / L)
            self._poly = Path(delta, closed=False)
            rad = np.hypot(delta[:, 0], delta[:, 1])
            self._r_in, self._r_out = float(rad.min()), float(rad.max())
            self._zone = math.exp(s.phi.sup_abs)

    def start_points(self, gens) -> np.ndarray:
        s = self.s
        out = np.empty((len(gens), self.dim))
        for i, g in enumerate(gens):
            out[i] = geo._sample_batch(s, g, 1)[0]
        return out

    def trap_distance(self, pos: np.ndarray) -> np.ndarray:
        """Distance proxy used for absorption and step control."""
        s, trap = self.s, self.trap
        x0 = trap.center.xyz()
        if s.family == SPHERE:
            a = s.sphere_radius
            return a * np.arccos(np.clip(pos @ x0 / (a * a), -1.0, 1.0))
        if s.family == DISK:
            return np.hypot(pos[:, 0] - x0[0], pos[:, 1] - x0[1])
        d = pos - x0
        L = np.array([s.L1, s.L2])
        d -= L * np.round(d / L)
        flat = np.hypot(d[:, 0], d[:, 1])
        if s.family == FLAT_TORUS:
            return flat
        # conformal: exact polygon membership near the trap, conservative far
        out = flat * math.exp(-self.s.phi.sup_abs)
        near = flat <= self._r_out
        if np.any(near):
            ins = self._poly.contains_points(d[near])
            val = out[near]
            val[ins] = 0.0
            val[~ins] = np.maximum(val[~ins], self.trap.eps * 1.0000001)
            out[near] = val
        mid = (flat > self._r_out) & (out <= self.trap.eps)
        out[mid] = self.trap.eps * 1.0000001
        return out

    def step(self, pos: np.ndarray, xi: np.ndarray) -> np.ndarray:
        s = self.s
        if s.family == SPHERE:
            return _sphere_step(s, pos, xi)
        if s.family == FLAT_TORUS:
            L = np.array([s.L1, s.L2])
            return (pos + xi) % L
        if s.family == DISK:
            return _disk_step(pos, xi)
        # conformal torus: second-order geodesic step in the chart
        u, v = pos[:, 0], pos[:, 1]
        ephi = np.exp(-s.phi.value(u, v))
        p = ephi * xi[:, 0]
        q = ephi * xi[:, 1]
        fu, fv = s.phi.grad(u, v)
        acc_u = -(fu * (p * p - q * q) + 2.0 * fv * p * q)
        acc_v = -(fv * (q * q - p * p) + 2.0 * fu * p * q)
        L = np.array([s.L1, s.L2])
        out = pos + np.column_stack([p + 0.5 * acc_u, q + 0.5 * acc_v])
        return out % L


def _near_dt(cfg: MCConfig, eps: float) -> float:
    # keep the rms step below eps/4 close to the trap; ladder runs freeze the
    # shrink ratio so that every time step scales with base_dt
    if cfg.near_shrink is not None:
        shrink = cfg.near_shrink
    else:
        shrink = min(1.0, eps * eps / (32.0 * cfg.step_variance_multiplier * cfg.base_dt))
    return max(cfg.dt_floor, cfg.base_dt * shrink)


def simulate_first_passage(s: SurfaceSpec, trap: asy.TrapSpec, cfg: MCConfig) -> MCEstimate:
    """Sample the first time Brownian paths enter the trap.

    Deterministic in cfg.seed: path i draws from a Philox stream keyed
    (seed, i) regardless of batching.
    """
    cfg.validate()
    trap.validate(s)
    eng = _Engine(s, trap)
    eps = trap.eps
    near_zone = 4.0 * eps * (eng._zone if s.family == CONFORMAL_TORUS else 1.0)
    dt_near = _near_dt(cfg, eps)
    sigma_base = math.sqrt(cfg.step_variance_multiplier * cfg.base_dt)
    sigma_near = math.sqrt(cfg.step_variance_multiplier * dt_near)
    taus = np.empty(cfg.n_paths)
    censored = np.zeros(cfg.n_paths, dtype=bool)
    chunk = 1024
    for lo in range(0, cfg.n_paths, cfg.block_size):
        ids = np.arange(lo, min(lo + cfg.block_size, cfg.n_paths))
        gens = [
            np.random.Generator(np.random.Philox(key=np.array([cfg.seed, i], dtype=np.uint64)))
            for i in ids
        ]
        B = len(ids)
        if isinstance(cfg.start, SurfacePoint):
            pos = np.tile(cfg.start.xyz(), (B, 1))
        else:
            pos = eng.start_points(gens)
        buf = np.empty((B, chunk, 2))
        for i, g in enumerate(gens):
            buf[i] = g.standard_normal((chunk, 2))
        ptr = np.zeros(B, dtype=np.int64)
        t_acc = np.zeros(B)
        ids_act = ids.copy()
        d_cur = eng.trap_distance(pos)
        alive = d_cur > eps
        taus[ids_act[~alive]] = 0.0
        while np.any(alive):
            # compact the working arrays once enough paths have finished
            if alive.mean() < 0.7:
                keep = alive
                pos, t_acc, buf, ptr, ids_act, d_cur = (
                    pos[keep], t_acc[keep], buf[keep], ptr[keep], ids_act[keep], d_cur[keep],
                )
                gens = [g for g, k in zip(gens, keep) if k]
                alive = np.ones(len(ids_act), dtype=bool)
            act = np.nonzero(alive)[0]
            refill = act[ptr[act] >= chunk]
            for i in refill:
                buf[i] = gens[i].standard_normal((chunk, 2))
                ptr[i] = 0
            d = d_cur[act]
            near = d < near_zone
            sig = np.where(near, sigma_near, sigma_base)
            dt = np.where(near, dt_near, cfg.base_dt)
            xi = buf[act, ptr[act]] * sig[:, None]
            ptr[act] += 1
            newpos = eng.step(pos[act], xi)
            pos[act] = newpos
            t_acc[act] += dt
            d_new = eng.trap_distance(newpos)
            d_cur[act] = d_new
            hit = d_new <= eps
            expired = (t_acc[act] >= cfg.max_time) & ~hit
            done = hit | expired
            if np.any(done):
                gid = ids_act[act[done]]
                taus[gid] = t_acc[act[done]]
                censored[gid] = expired[done]
                alive[act[done]] = False
    n_cens = int(censored.sum())
    good = taus[~censored]
    mean = float(good.mean()) if len(good) else math.nan
    stderr = float(good.std(ddof=1) / math.sqrt(len(good))) if len(good) > 1 else math.nan
    return MCEstimate(
        mean=mean,
        stderr=stderr,
        n_paths=cfg.n_paths,
        n_censored=n_cens,
        dt_stats={"base_dt": cfg.base_dt, "dt_floor": cfg.dt_floor, "near_dt": dt_near},
        valid=bool(n_cens < 0.1 * cfg.n_paths),
    )


def simulate_free_paths(s: SurfaceSpec, cfg: MCConfig, horizon: float) -> np.ndarray:
    """Positions at a fixed time horizon with no trap (for mixing tests)."""
    cfg.validate()
    eng = _Engine(s, None)
    n_steps = int(round(horizon / cfg.base_dt))
    sigma = math.sqrt(cfg.step_variance_multiplier * cfg.base_dt)
    out = np.empty((cfg.n_paths, eng.dim))
    for lo in range(0, cfg.n_paths, cfg.block_size):
        ids = np.arange(lo, min(lo + cfg.block_size, cfg.n_paths))
        gens = [
            np.random.Generator(np.random.Philox(key=np.array([cfg.seed, i], dtype=np.uint64)))
            for i in ids
        ]
        if isinstance(cfg.start, SurfacePoint):
            pos = np.tile(cfg.start.xyz(), (len(ids), 1))
        else:
            pos = eng.start_points(gens)
        chunk = 1024
        buf = np.empty((len(ids), chunk, 2))
        for i, g in enumerate(gens):
            buf[i] = g.standard_normal((chunk, 2))
        p = 0
        for k in range(n_steps):
            if p >= chunk:
                for i, g in enumerate(gens):
                    buf[i] = g.standard_normal((chunk, 2))
                p = 0
            pos = eng.step(pos, buf[:, p] * sigma)
            p += 1
        out[ids] = pos
    return out


def bias_probe(
    s: SurfaceSpec, trap: asy.TrapSpec, cfg: MCConfig, dt_ladder
) -> ScalingReport:
    """Extrapolate the time-step bias of the capture-time mean to dt -> 0.

    Runs the simulator once per dt with shared seeds (common random numbers)
    and fits mean = intercept + slope * sqrt(dt).
    """
    dts = sorted((float(d) for d in dt_ladder), reverse=True)
    if len(dts) < 2:
        raise ValueError("need at least 2 dt values")
    # freeze the near-trap shrink at the coarsest rung so every time step in
    # the ladder scales by the common base_dt ratio
    shrink = cfg.near_shrink
    if shrink is None:
        shrink = min(1.0, trap.eps**2 / (32.0 * cfg.step_variance_multiplier * dts[0]))
    means, errs = [], []
    for dt in dts:
        est = simulate_first_passage(
            s,
            trap,
            MCConfig(
                n_paths=cfg.n_paths,
                base_dt=dt,
                dt_floor=min(cfg.dt_floor, dt),
                seed=cfg.seed,
                start=cfg.start,
                max_time=cfg.max_time,
                step_variance_multiplier=cfg.step_variance_multiplier,
                near_shrink=shrink,
                block_size=cfg.block_size,
            ),
        )
        means.append(est.mean)
        errs.append(est.stderr)
    root = np.sqrt(dts)
    A = np.column_stack([np.ones_like(root), root])
    coef, *_ = np.linalg.lstsq(A, np.asarray(means), rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])
    # intercept variance, treating the runs as independent (conservative
    # for common random numbers)
    cov = np.linalg.inv(A.T @ A)
    g = cov @ A.T
    var_int = float(np.sum((g[0] * np.asarray(errs)) ** 2))
    inconclusive = False
    diffs = np.diff(means)
    if len(means) >= 3 and not (np.all(diffs <= 0) or np.all(diffs >= 0)):
        if float(np.max(np.abs(diffs))) > 2.0 * max(errs):
            inconclusive = True
    return ScalingReport(
        quantity="mc_dt_bias",
        eps=tuple(dts),
        values=tuple(means),
        exponent=slope,
        target_exponent=0.5,
        band=(0.0, math.inf),
        r2=1.0,
        passed=not inconclusive,
        details={
            "intercept": intercept,
            "intercept_stderr": math.sqrt(var_int),
            "slope": slope,
            "stderrs": errs,
            "inconclusive": inconclusive,
        },
    )
