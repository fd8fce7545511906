import math

import numpy as np
import pytest

from narrowtrap import asymptotics as asy
from narrowtrap import geometry as geo
from narrowtrap import pde

PI = math.pi


@pytest.fixture(scope="module")
def torus_sol(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.05)
    return pde.solve_trapped_bvp(torus, trap, 256)


def test_flux_identity(torus, torus_sol):
    rep = pde.boundary_flux_report(torus_sol)
    assert rep["pass"]
    assert rep["relative_error"] < 1e-6  # exact overlap areas + SBP telescoping


def test_flux_target_value(torus_sol):
    assert pde.flux_on_trap(torus_sol) == pytest.approx(-(1 - PI * 0.0025), rel=1e-6)


def test_flux_improves_under_refinement(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.05)
    errs = []
    for N in (256, 512):
        sol = pde.solve_trapped_bvp(torus, trap, N)
        errs.append(abs(pde.flux_on_trap(sol) + (1 - PI * 0.0025)))
    assert errs[1] <= errs[0] / 3.0 or errs[1] < 1e-10


def test_maximum_principle(torus_sol):
    assert np.all(torus_sol.u[~torus_sol.mask] > 0)
    assert np.all(torus_sol.u[torus_sol.mask] == 0)


def test_average_matches_asymptotics(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.05)
    sol = pde.solve_trapped_bvp(torus, trap, 512)
    pred = asy.mfpt_average(torus, trap).total
    assert abs(sol.average() - pred) / pred < 0.08


def test_translation_invariance(torus):
    # shifting trap and grid together permutes the solution values
    N = 128
    shift = 16
    trap1 = asy.TrapSpec(geo.torus_point(torus, 0.25, 0.25), 0.06)
    trap2 = asy.TrapSpec(
        geo.torus_point(torus, 0.25 + shift / N, 0.25 + shift / N), 0.06
    )
    u1 = pde.solve_trapped_bvp(torus, trap1, N).u
    u2 = pde.solve_trapped_bvp(torus, trap2, N).u
    assert np.max(np.abs(np.roll(np.roll(u1, shift, 0), shift, 1) - u2)) < 1e-8


def test_grid_refinement_order(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.1)
    avgs = [pde.solve_trapped_bvp(torus, trap, N).average() for N in (256, 512, 1024)]
    order = math.log2(abs((avgs[1] - avgs[0]) / (avgs[2] - avgs[1])))
    assert order >= 1.8


def test_preconditions(torus, sphere):
    x0 = geo.torus_point(torus, 0.5, 0.5)
    with pytest.raises(ValueError):
        pde.solve_trapped_bvp(torus, asy.TrapSpec(x0, 0.01), 256)  # under-resolved
    with pytest.raises(ValueError):
        pde.solve_trapped_bvp(torus, asy.TrapSpec(x0, 0.1), 64)  # grid too small
    with pytest.raises(ValueError):
        pde.solve_trapped_bvp(
            sphere, asy.TrapSpec(geo.sphere_point(sphere, [0, 0, 1]), 0.1), 256
        )


def test_normal_derivative_profile(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.1)
    sol = pde.solve_trapped_bvp(torus, trap, 512)
    vals = np.array([v for _, v in pde.normal_derivative_profile(sol, 16)])
    m_eps = 1 - PI * 0.01
    # angle-uniform for the symmetric configuration
    assert (vals.max() - vals.min()) / abs(vals.mean()) < 0.05
    # quadrature consistency with the summation-by-parts flux
    flux = pde.flux_on_trap(sol)
    assert vals.mean() * 2 * PI * 0.1 == pytest.approx(flux, rel=0.02)
    # leading magnitude -|M_eps|/(2 pi eps)
    assert vals.mean() == pytest.approx(-m_eps / (2 * PI * 0.1), rel=0.02)


def test_prop_normal_derivative_boundedness(torus):
    rep = pde.prop_normal_derivative_report(
        torus, geo.torus_point(torus, 0.5, 0.5), [0.1, 0.05], n_angles=16
    )
    assert rep.passed
    assert max(rep.values) < 0.05


@pytest.mark.parametrize(
    "quantity,band",
    [("I_sup", (1.85, 2.15)), ("dI_sup", (0.85, 1.15))],
)
def test_scaling_lemmas_torus(torus, quantity, band):
    ladder = [0.02, 0.01, 0.005, 0.0025] if quantity == "I_sup" else [0.08, 0.04, 0.02, 0.01]
    rep = pde.scaling_check(torus, geo.torus_point(torus, 0.5, 0.5), quantity, ladder)
    assert rep.passed
    assert band[0] <= rep.exponent <= band[1]
    assert rep.r2 >= 0.98


def test_scaling_kernel_const(torus):
    rep = pde.scaling_check(
        torus, geo.torus_point(torus, 0.5, 0.5), "kernel_const", [0.04, 0.02, 0.01, 0.005]
    )
    assert rep.passed
    assert rep.details["within_10pct"]


def test_asymptotic_convergence_torus(torus):
    rep = pde.asymptotic_convergence(
        torus, geo.torus_point(torus, 0.5, 0.5), [0.1, 0.05, 0.025], grid_check=False
    )
    assert rep.passed
    assert all(0.3 <= r <= 3.0 for r in rep.details["ratios"])
    deltas = rep.values
    assert all(deltas[i + 1] < deltas[i] for i in range(len(deltas) - 1))


# ---------------------------------------------------------------------------
# disk (polar grid, reflecting outer boundary)
# ---------------------------------------------------------------------------


def test_disk_flux_center(disk):
    trap = asy.TrapSpec(geo.disk_point(0.0, 0.0), 0.05)
    sol = pde.solve_trapped_bvp(disk, trap, 256)
    tgt = -(PI - PI * 0.0025)
    assert pde.flux_on_trap(sol) == pytest.approx(tgt, rel=0.01)


def test_disk_average_matches_exact_annulus(disk):
    # concentric trap has the exact solution u = log(r/eps)/2 + (eps^2-r^2)/4
    eps = 0.05
    trap = asy.TrapSpec(geo.disk_point(0.0, 0.0), eps)
    sol = pde.solve_trapped_bvp(disk, trap, 256)
    from scipy.integrate import quad

    exact = quad(lambda r: (0.5 * math.log(r / eps) + (eps**2 - r**2) / 4) * 2 * r, eps, 1)[0]
    exact /= 1 - eps**2
    assert sol.average() == pytest.approx(exact, rel=2e-3)


def test_disk_flux_off_center(disk):
    trap = asy.TrapSpec(geo.disk_point(0.3, 0.2), 0.04)
    sol = pde.solve_trapped_bvp(disk, trap, 256)
    tgt = -(PI - PI * 0.04**2)
    assert pde.flux_on_trap(sol) == pytest.approx(tgt, rel=0.01)
    assert np.all(sol.u[~sol.mask] > 0)


def test_disk_profile_consistency(disk):
    trap = asy.TrapSpec(geo.disk_point(0.0, 0.0), 0.08)
    sol = pde.solve_trapped_bvp(disk, trap, 256)
    vals = np.array([v for _, v in pde.normal_derivative_profile(sol, 16)])
    flux = pde.flux_on_trap(sol)
    assert vals.mean() * 2 * PI * 0.08 == pytest.approx(flux, rel=0.02)


# ---------------------------------------------------------------------------
# conformal torus solve path
# ---------------------------------------------------------------------------


def test_conformal_solve_and_flux(conf_bump):
    trap = asy.TrapSpec(geo.torus_point(conf_bump, 0.25, 0.25), 0.04)
    sol = pde.solve_trapped_bvp(conf_bump, trap, 192)
    m_eps = asy.domain_area_minus_trap(conf_bump, trap)
    assert pde.flux_on_trap(sol) == pytest.approx(-m_eps, rel=0.01)
    pred = asy.mfpt_average(conf_bump, trap).total
    assert abs(sol.average() - pred) / pred < 0.10


def test_loglog_fit_r2():
    x = np.array([0.1, 0.05, 0.025])
    slope, _, r2 = pde.loglog_fit(x, 3.0 * x**2)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)
