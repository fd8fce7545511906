#!/usr/bin/env python3
"""Independent oracle values frozen into the test suite.

Each value is computed here by a method that shares no code with the
library paths it later checks (direct spectral sums, 1D quadrature
reductions, theta functions).  Run and paste the printed constants into
the tests when they change.
"""

import math

import mpmath as mp
import numpy as np
from scipy import integrate, special

pi = math.pi


def conformal_area_oracle():
    # area of the cosine-bump torus: integral of exp(0.6 cos(2 pi u)) = I0(0.6)
    exact = special.i0(0.6)
    # Gauss-Legendre at 4x the default grid resolution, per the quadrature plan
    n = 1024
    x, w = np.polynomial.legendre.leggauss(n)
    u = 0.5 * (x + 1.0)
    val = float(np.dot(np.exp(0.6 * np.cos(2 * pi * u)), w)) * 0.5
    return exact, val


def conformal_distance_oracle():
    # metric exp(2*phi(u)) with phi independent of v: straight chords in u are
    # geodesics, so d((1/4,1/2),(3/4,1/2)) = integral of exp(phi) over the chord
    val, err = integrate.quad(
        lambda u: math.exp(0.3 * math.cos(2 * pi * u)), 0.25, 0.75, epsabs=1e-15, epsrel=1e-14
    )
    return val, err


def torus_green_direct_sum(r=(0.5, 0.5), K=512):
    n = np.arange(-K, K + 1)
    N1, N2 = np.meshgrid(n, n, indexing="ij")
    m2 = N1**2 + N2**2
    mask = (m2 > 0) & (m2 <= K * K)
    k1, k2 = N1[mask], N2[mask]
    val = float(np.sum(np.cos(2 * pi * (k1 * r[0] + k2 * r[1])) / (4 * pi**2 * m2[mask])))
    # crude tail bound: the alternating ring sums decay like 1/K^2
    tail = 1.0 / (2 * pi * K * K) * 10
    return val, tail


def torus_green_theta(r):
    """Unit-torus Green's function difference oracle via Jacobi theta_1.

    G0(z) = -(1/2pi) log |theta_1(pi z, q=e^-pi) / theta_1'(0)| + x2^2/2 is a
    valid Green's function up to an additive constant; differences of G0 at
    two separations equal differences of the mean-zero function exactly.
    """
    mp.mp.dps = 30
    q = mp.exp(-mp.pi)

    def g0(x1, x2):
        z = mp.mpf(x1) + 1j * mp.mpf(x2)
        th = mp.jtheta(1, mp.pi * z, q)
        thp = mp.jtheta(1, 0, q, 1)
        return float(-mp.log(abs(th / thp)) / (2 * mp.pi) + mp.mpf(x2) ** 2 / 2)

    return g0(*r)


def torus_regular_part_theta():
    # P(0,0) + mean-shift unknown; but P(0,0) follows from the theta form:
    # lim (G0 + log|z|/2pi) = -(1/2pi) log(pi) ... constant fixed by mean zero,
    # cross-checked numerically against the library's Ewald diagonal in tests
    # via differences, so here we only report the difference oracle values.
    pass


def sphere_log_integral():
    # integral over the unit sphere of log(2 sin(d/2)) dvol = 4 pi (log 2 - 1/2)
    val, _ = integrate.quad(lambda t: math.log(2 * math.sin(t / 2)) * 2 * pi * math.sin(t), 0, pi)
    return val, 4 * pi * (math.log(2) - 0.5)


def disk_mean_zero_constant():
    # mean over the unit disk of the k0-free Neumann formula must be -k0*pi;
    # analytically k0 = -3/(8 pi)
    return -3 / (8 * pi)


if __name__ == "__main__":
    ex, gl = conformal_area_oracle()
    print(f"conformal area I0(0.6)        = {ex:.15g}   GL oracle = {gl:.15g}")
    d, err = conformal_distance_oracle()
    print(f"conformal chord distance      = {d:.15g}  (quad err {err:.1e})")
    v, tail = torus_green_direct_sum()
    print(f"torus E((0,0),(.5,.5)) sum    = {v:.15g}  (tail bound {tail:.1e})")
    v2, tail2 = torus_green_direct_sum((0.3, 0.14))
    print(f"torus E((0,0),(.3,.14)) sum   = {v2:.15g}")
    ga = torus_green_theta((0.5, 0.5))
    gb = torus_green_theta((0.25, 0.0))
    gc = torus_green_theta((0.3, 0.14))
    print(f"theta G0(0.5,0.5)-G0(0.25,0)  = {ga - gb:.15g}")
    print(f"theta G0(0.3,0.14)-G0(0.25,0) = {gc - gb:.15g}")
    s, closed = sphere_log_integral()
    print(f"sphere log integral           = {s:.15g}   closed = {closed:.15g}")
    print(f"disk k0                       = {disk_mean_zero_constant():.15g}")
