import math

import numpy as np
import pytest

from narrowtrap import asymptotics as asy
from narrowtrap import geometry as geo
from narrowtrap import green as gr

PI = math.pi


def sphere_avg_closed(eps):
    return 2 * math.log(2 / eps) - 1


def test_sphere_average_examples(sphere):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    for eps in (0.1, 0.05, 0.01):
        r = asy.mfpt_average(sphere, asy.TrapSpec(x0, eps))
        assert r.total == pytest.approx(sphere_avg_closed(eps), abs=1e-6)


def test_sphere_pointwise_antipodal(sphere):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    x = geo.sphere_point(sphere, [0, 0, -1])
    r = asy.mfpt_pointwise(sphere, asy.TrapSpec(x0, 0.01), x)
    # antipodal E = -1/(4 pi), so the point term adds exactly +1
    assert r.point_term == pytest.approx(1.0, abs=1e-12)
    assert r.total == pytest.approx(sphere_avg_closed(0.01) + 1.0, abs=1e-6)


def test_pointwise_average_share_terms(sphere):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    x = geo.sphere_point(sphere, [1, 0, 0])
    trap = asy.TrapSpec(x0, 0.02)
    rp = asy.mfpt_pointwise(sphere, trap, x)
    ra = asy.mfpt_average(sphere, trap)
    assert rp.leading == ra.leading
    assert rp.constant == ra.constant
    assert rp.total - ra.total == pytest.approx(
        -geo.area(sphere) * gr.green(sphere, x, x0).total, abs=1e-12
    )


def test_torus_leading_term(torus):
    r = asy.mfpt_average(torus, asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.01))
    assert r.leading == pytest.approx(-math.log(0.01) / (2 * PI), abs=1e-14)


def test_total_additivity(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.03)
    x = geo.torus_point(torus, 0.0, 0.0)
    r = asy.mfpt_pointwise(torus, trap, x)
    assert r.total == r.leading + r.constant + r.point_term


def test_average_monotone_in_eps(sphere, torus, conf_bump, disk):
    grids = {
        sphere: geo.sphere_point(sphere, [0, 0, 1]),
        torus: geo.torus_point(torus, 0.5, 0.5),
        conf_bump: geo.torus_point(conf_bump, 0.25, 0.25),
        disk: geo.disk_point(0.0, 0.1),
    }
    for s, x0 in grids.items():
        cap = 0.39 * geo.injectivity_surrogate(s, x0)
        eps_grid = [e for e in (0.005, 0.01, 0.02, 0.05, 0.1) if e < cap]
        totals = [asy.mfpt_average(s, asy.TrapSpec(x0, e)).total for e in eps_grid]
        assert all(totals[i + 1] < totals[i] for i in range(len(totals) - 1))


def test_exclusion_zone(torus):
    trap = asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.05)
    with pytest.raises(ValueError):
        asy.mfpt_pointwise(torus, trap, geo.torus_point(torus, 0.55, 0.5))


def test_trap_validation(torus, disk):
    with pytest.raises(ValueError):
        asy.TrapSpec(geo.torus_point(torus, 0.5, 0.5), 0.3).validate(torus)
    with pytest.raises(ValueError):
        asy.TrapSpec(geo.disk_point(0.9, 0.0), 0.05).validate(disk)


def test_average_vs_sampled_pointwise(sphere):
    # sample average of the pointwise formula differs from the averaged
    # formula by |M| mean(E(x, x0)), which vanishes like the sampling error
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    trap = asy.TrapSpec(x0, 0.01)
    ra = asy.mfpt_average(sphere, trap)
    pts = geo.sample_uniform_many(sphere, 123, 10_000)
    d = np.arccos(np.clip(pts @ x0.xyz(), -1, 1))
    pts = pts[d > 2 * trap.eps]
    totals = gr.green_total_many(sphere, x0, pts)
    sampled = ra.total - geo.area(sphere) * float(np.mean(totals))
    assert abs(sampled - ra.total) < 0.02 * ra.total


def test_disk_point_term_neumann_bc(disk):
    # the point term inherits the reflecting boundary: its normal derivative
    # vanishes on the circle (second-order one-sided differences)
    x0 = geo.disk_point(0.2, 0.1)
    trap = asy.TrapSpec(x0, 0.05)
    vol = geo.area(disk)
    h = 1e-3
    worst = 0.0
    for a in 2 * PI * np.arange(32) / 32:
        w = np.array([math.cos(a), math.sin(a)])

        def point_term(r):
            x = geo.disk_point(*(r * w))
            return -vol * gr.neumann_green(disk, x0, x).total

        dn = (3 * point_term(1.0) - 4 * point_term(1.0 - h) + point_term(1.0 - 2 * h)) / (2 * h)
        worst = max(worst, abs(dn))
    assert worst < 1e-3


def test_trap_boundary_length(sphere, torus):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    assert asy.trap_boundary_length(sphere, asy.TrapSpec(x0, 0.1)) == pytest.approx(
        2 * PI * math.sin(0.1), abs=1e-10
    )
    t0 = geo.torus_point(torus, 0.5, 0.5)
    for eps in (0.02, 0.07):
        assert asy.trap_boundary_length(torus, asy.TrapSpec(t0, eps)) == pytest.approx(
            2 * PI * eps, abs=1e-10
        )


def test_boundary_length_deviation_order(sphere, conf_bump):
    # |length - 2 pi eps| shrinks at least quadratically
    for s, x0 in (
        (sphere, geo.sphere_point(sphere, [0, 0, 1])),
        (conf_bump, geo.torus_point(conf_bump, 0.4, 0.5)),
    ):
        eps = np.array([0.02, 0.01, 0.005, 0.0025])
        dev = np.array(
            [abs(asy.trap_boundary_length(s, asy.TrapSpec(x0, e)) - 2 * PI * e) for e in eps]
        )
        keep = dev > 1e-13
        slope = np.polyfit(np.log(eps[keep]), np.log(dev[keep]), 1)[0]
        assert slope >= 2.0 - 0.1


def test_trap_area(sphere, torus):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    assert asy.trap_area(sphere, asy.TrapSpec(x0, 0.1)) == pytest.approx(
        2 * PI * (1 - math.cos(0.1)), abs=1e-10
    )
    t0 = geo.torus_point(torus, 0.5, 0.5)
    assert asy.trap_area(torus, asy.TrapSpec(t0, 0.07)) == pytest.approx(
        PI * 0.07**2, abs=1e-10
    )


def test_trap_area_ratio_bounded(sphere):
    x0 = geo.sphere_point(sphere, [0, 0, 1])
    ratios = [
        asy.trap_area(sphere, asy.TrapSpec(x0, e)) / e**2 for e in (0.08, 0.04, 0.02, 0.01)
    ]
    assert max(ratios) < 1.1 * PI
    assert min(ratios) > 0.9 * PI
