import math

import numpy as np
import pytest

from narrowtrap import geometry as geo
from narrowtrap import green as gr

PI = math.pi

# frozen by scripts/compute_oracles.py
TORUS_E_HALF = -0.0551557138546334  # direct sum |k| <= 512, tail < 7e-6
TORUS_E_OFF = -0.00550859503170882  # at separation (0.3, 0.14)
THETA_DIFF_A = -0.0833327783045913  # G(0.5,0.5) - G(0.25,0) via Jacobi theta_1
THETA_DIFF_B = -0.0336871223677714  # G(0.3,0.14) - G(0.25,0)
SPHERE_REGULAR = (math.log(2.0) - 0.5) / (2 * PI)
DISK_K0 = -3.0 / (8 * PI)


# ---------------------------------------------------------------------------
# sphere backend
# ---------------------------------------------------------------------------


def test_sphere_antipodal_value(sphere):
    n = geo.sphere_point(sphere, [0, 0, 1])
    s = geo.sphere_point(sphere, [0, 0, -1])
    assert gr.green(sphere, n, s).total == pytest.approx(-1 / (4 * PI), abs=1e-14)


def test_sphere_symmetry(sphere, rng):
    for _ in range(10):
        x = geo.sphere_point(sphere, rng.standard_normal(3))
        y = geo.sphere_point(sphere, rng.standard_normal(3))
        assert gr.green(sphere, x, y).total == pytest.approx(
            gr.green(sphere, y, x).total, abs=1e-9
        )


def test_sphere_regular_part(sphere):
    est = gr.regular_part(sphere, geo.sphere_point(sphere, [0, 0.6, 0.8]))
    assert est.value == pytest.approx(SPHERE_REGULAR, abs=2 * est.extrapolation_error + 1e-9)


def test_sphere_regular_part_radius_dependence():
    # closed form: (1/2pi)(log 2a - 1/2); difference between a=2 and a=1 is log(2)/2pi
    vals = {}
    for a in (1.0, 2.0):
        s = geo.SurfaceSpec.sphere(a)
        vals[a] = gr.regular_part(s, geo.sphere_point(s, [0, 0, a])).value
    assert vals[2.0] - vals[1.0] == pytest.approx(math.log(2.0) / (2 * PI), abs=1e-7)
    assert vals[2.0] == pytest.approx((math.log(4.0) - 0.5) / (2 * PI), abs=1e-7)


def test_sphere_mean_residual(sphere):
    x = geo.sphere_point(sphere, [0.3, -0.4, math.sqrt(0.75)])
    assert abs(gr.green_mean_residual(sphere, x)) < 1e-6


def test_green_singularity_error(sphere):
    x = geo.sphere_point(sphere, [0, 0, 1])
    with pytest.raises(gr.SingularityError):
        gr.green(sphere, x, x)


# ---------------------------------------------------------------------------
# flat torus backend (Ewald)
# ---------------------------------------------------------------------------


def test_torus_against_direct_spectral_sum(torus):
    x = geo.torus_point(torus, 0.0, 0.0)
    g = gr.green(torus, x, geo.torus_point(torus, 0.5, 0.5))
    assert g.total == pytest.approx(TORUS_E_HALF, abs=1e-5)
    g2 = gr.green(torus, x, geo.torus_point(torus, 0.3, 0.14))
    assert g2.total == pytest.approx(TORUS_E_OFF, abs=1e-5)


def test_torus_against_theta_function(torus):
    # differences of E drop the mean-zero constant; theta oracle is exact
    x = geo.torus_point(torus, 0.0, 0.0)
    e_half = gr.green(torus, x, geo.torus_point(torus, 0.5, 0.5)).total
    e_ref = gr.green(torus, x, geo.torus_point(torus, 0.25, 0.0)).total
    e_off = gr.green(torus, x, geo.torus_point(torus, 0.3, 0.14)).total
    assert e_half - e_ref == pytest.approx(THETA_DIFF_A, abs=1e-13)
    assert e_off - e_ref == pytest.approx(THETA_DIFF_B, abs=1e-13)


def test_torus_translation_invariance(torus, rng):
    for _ in range(5):
        a, b, shift = rng.random(2), rng.random(2), rng.random(2)
        g1 = gr.green(torus, geo.torus_point(torus, *a), geo.torus_point(torus, *b)).total
        g2 = gr.green(
            torus, geo.torus_point(torus, *(a + shift)), geo.torus_point(torus, *(b + shift))
        ).total
        assert g1 == pytest.approx(g2, abs=1e-12)


def test_torus_regular_part_matches_ewald_diagonal(torus):
    est = gr.regular_part(torus, geo.torus_point(torus, 0.31, 0.77))
    assert est.value == pytest.approx(gr._ewald(torus).diag_regular, abs=1e-10)
    # translation invariance of the diagonal
    est2 = gr.regular_part(torus, geo.torus_point(torus, 0.05, 0.5))
    assert est.value == pytest.approx(est2.value, abs=2 * est.extrapolation_error + 1e-12)


def test_torus_mean_residual(torus):
    assert abs(gr.green_mean_residual(torus, geo.torus_point(torus, 0.23, 0.61))) < 1e-6


def test_torus_harmonicity_rate(torus):
    # discrete Laplacian of E(x, .) away from x returns 1/|M| at rate h^2
    x = geo.torus_point(torus, 0.1, 0.1)
    z = np.array([0.6, 0.55])
    errs = []
    for h in (0.02, 0.01, 0.005):
        stencil = np.array([z, z + [h, 0], z - [h, 0], z + [0, h], z - [0, h]])
        vals = gr.green_total_many(torus, x, stencil)
        lap = (vals[1:].sum() - 4 * vals[0]) / h**2
        errs.append(abs(lap - 1.0))
    order = math.log2(errs[0] / errs[1])
    order2 = math.log2(errs[1] / errs[2])
    assert min(order, order2) > 1.8


# ---------------------------------------------------------------------------
# conformal torus backend
# ---------------------------------------------------------------------------


def test_conformal_reduction_to_flat(conf_zero, torus, rng):
    for _ in range(50):
        a, b = rng.random(2), rng.random(2)
        gc = gr.green(conf_zero, geo.torus_point(conf_zero, *a), geo.torus_point(conf_zero, *b))
        gf = gr.green(torus, geo.torus_point(torus, *a), geo.torus_point(torus, *b))
        assert gc.total == pytest.approx(gf.total, abs=1e-8)


def test_conformal_symmetry(conf_bump, rng):
    for _ in range(5):
        x = geo.torus_point(conf_bump, *rng.random(2))
        y = geo.torus_point(conf_bump, *rng.random(2))
        assert gr.green(conf_bump, x, y).total == pytest.approx(
            gr.green(conf_bump, y, x).total, abs=1e-12
        )


def test_conformal_mean_residual(conf_bump, conf_cos):
    for s in (conf_bump, conf_cos):
        x = geo.torus_point(s, 0.3, 0.62)
        assert abs(gr.green_mean_residual(s, x)) < 1e-4


def test_conformal_regular_part_closed_form(conf_bump):
    # exact representation: P(x0) = P_flat + 2 w(x0) + k + phi(x0)/(2 pi)
    cf = gr._conformal(conf_bump)
    for uv in ((0.3, 0.62), (0.55, 0.48), (0.1, 0.1)):
        x0 = geo.torus_point(conf_bump, *uv)
        est = gr.regular_part(conf_bump, x0)
        closed = (
            gr._ewald(conf_bump).diag_regular
            + 2.0 * cf.w(uv[0], uv[1])
            + cf.k_const
            + conf_bump.phi.value(*uv) / (2 * PI)
        )
        assert est.value == pytest.approx(closed, abs=5e-8)


def test_conformal_delta_normalization(conf_bump):
    # flux of E(x0, .) through a small geodesic circle must be -1 + |B_r|/|M|
    # under the metric delta convention, independent of phi(x0)
    x0 = geo.torus_point(conf_bump, 0.45, 0.5)  # phi clearly nonzero here
    chart = geo.NormalChart(conf_bump, x0)
    r, n, d = 0.03, 64, 1e-4
    th = 2 * PI * np.arange(n) / n
    flux = 0.0
    for a in th:
        w = np.array([math.cos(a), math.sin(a)])
        xo = chart.point((r + d) * w).xyz()
        xi = chart.point((r - d) * w).xyz()
        de = float(
            gr.green_total_many(conf_bump, x0, xo[None])[0]
            - gr.green_total_many(conf_bump, x0, xi[None])[0]
        ) / (2 * d)
        flux += de * chart.boundary_speed(r, np.array([a]))[0] * (2 * PI / n)
    assert flux == pytest.approx(-1.0, abs=0.02)


def test_conformal_isotropy_of_regular_part(conf_bump):
    x0 = geo.torus_point(conf_bump, 0.3, 0.62)
    est_e1 = gr.regular_part(conf_bump, x0, direction=(1.0, 0.0))
    est_e2 = gr.regular_part(conf_bump, x0, direction=(0.0, 1.0))
    tol = 10 * (est_e1.extrapolation_error + est_e2.extrapolation_error) + 1e-9
    assert est_e1.value == pytest.approx(est_e2.value, abs=tol)


# ---------------------------------------------------------------------------
# disk backend (Neumann)
# ---------------------------------------------------------------------------


def test_neumann_k0(disk):
    assert gr._neumann(disk).k0 == pytest.approx(DISK_K0, abs=1e-10)


def test_neumann_boundary_condition(disk):
    x = geo.disk_point(0.3, 0.2)
    nm = gr._neumann(disk)
    h = 1e-4
    worst = 0.0
    for a in 2 * PI * np.arange(64) / 64:
        yb = np.array([math.cos(a), math.sin(a)])
        f = [float(nm.eval_raw(x.xyz(), ((1 - k * h) * yb)[None])[0]) for k in range(3)]
        worst = max(worst, abs((3 * f[0] - 4 * f[1] + f[2]) / (2 * h)))
    assert worst < 1e-4


def test_neumann_symmetry(disk, rng):
    for _ in range(10):
        r1, r2 = 0.9 * np.sqrt(rng.random(2))
        a1, a2 = 2 * PI * rng.random(2)
        x = geo.disk_point(r1 * math.cos(a1), r1 * math.sin(a1))
        y = geo.disk_point(r2 * math.cos(a2), r2 * math.sin(a2))
        if np.allclose(x.xyz(), y.xyz()):
            continue
        assert gr.neumann_green(disk, x, y).total == pytest.approx(
            gr.neumann_green(disk, y, x).total, abs=1e-9
        )


def test_neumann_center_profile(disk):
    x = geo.disk_point(0.0, 0.0)
    for r in (0.2, 0.5, 0.8):
        total = gr.neumann_green(disk, x, geo.disk_point(r, 0.0)).total
        assert total == pytest.approx(
            -math.log(r) / (2 * PI) + r * r / (4 * PI) + DISK_K0, abs=1e-12
        )


def test_neumann_source_on_boundary_rejected(disk):
    with pytest.raises(ValueError):
        gr.neumann_green(disk, geo.disk_point(1.0, 0.0), geo.disk_point(0.2, 0.0))


def test_neumann_mean_residual(disk):
    assert abs(gr._disk_mean_residual(disk, np.array([0.3, 0.2]))) < 1e-6


def test_neumann_against_fd_solve(disk):
    """Independent check: u(x) = int E(x,y) f(y) dA solves the Neumann
    problem Lap u = -f for mean-zero f; compare with a finite-difference
    polar solve that never sees the image formula."""
    # smooth mean-zero source
    def f(xx, yy):
        return xx * np.exp(-2.0 * (xx**2 + yy**2))

    n_r, n_th = 160, 192
    hr, hth = 1.0 / n_r, 2 * PI / n_th
    r = (np.arange(n_r) + 0.5) * hr
    th = np.arange(n_th) * hth
    R, Th = np.meshgrid(r, th, indexing="ij")
    X, Y = R * np.cos(Th), R * np.sin(Th)
    w = R * hr * hth
    src = f(X, Y)
    src = src - np.sum(src * w) / np.sum(w)  # enforce solvability
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    idx = np.arange(n_r * n_th).reshape(n_r, n_th)
    rows, cols, vals = [], [], []
    diag = np.zeros(n_r * n_th)

    def edge(me, nb, c):
        rows.extend([me, nb])
        cols.extend([nb, me])
        vals.extend([-c, -c])
        diag[me] += c
        diag[nb] += c

    for j in range(n_r - 1):
        c = (r[j] + hr / 2) * hth / hr
        for k in range(n_th):
            edge(idx[j, k], idx[j + 1, k], c)
    for j in range(n_r):
        c = hr / (r[j] * hth)
        for k in range(n_th):
            edge(idx[j, k], idx[j, (k + 1) % n_th], c)
    A = sp.coo_matrix((vals + list(diag), (rows + list(range(n_r * n_th)), cols + list(range(n_r * n_th))))).tocsr()
    b = (src * w).ravel()
    # the pure-Neumann matrix is singular; ground node 0 to make it SPD
    keep = np.arange(1, n_r * n_th)
    Ag = A[keep][:, keep].tocsr()
    bg = b[keep]
    ml = None
    try:
        import pyamg

        ml = pyamg.ruge_stuben_solver(Ag).aspreconditioner()
    except Exception:
        pass
    ug, info = spla.cg(Ag, bg, rtol=1e-10, atol=0.0, maxiter=20000, M=ml)
    assert info == 0
    u = np.zeros(n_r * n_th)
    u[keep] = ug
    u = u.reshape(n_r, n_th)
    u -= np.sum(u * w) / np.sum(w)
    nm = gr._neumann(disk)
    ys = np.column_stack([X.ravel(), Y.ravel()])
    for probe in ((0.25, 0.1), (-0.3, 0.45), (0.0, 0.0)):
        x = np.asarray(probe)
        d = np.hypot(ys[:, 0] - x[0], ys[:, 1] - x[1])
        vals_e = nm.eval_raw(x, ys)
        integrand = vals_e * src.ravel() * w.ravel()
        ug = float(np.sum(integrand))
        # bilinear sample of the FD solution at the probe
        rr, tt = math.hypot(*x), math.atan2(x[1], x[0]) % (2 * PI)
        fi = min(max(rr / hr - 0.5, 0.0), n_r - 1.001)
        fj = (tt / hth) % n_th
        i0, j0 = int(fi), int(fj) % n_th
        ai, aj = fi - int(fi), fj - int(fj)
        i1, j1 = min(i0 + 1, n_r - 1), (j0 + 1) % n_th
        u_fd = (
            u[i0, j0] * (1 - ai) * (1 - aj)
            + u[i1, j0] * ai * (1 - aj)
            + u[i0, j1] * (1 - ai) * aj
            + u[i1, j1] * ai * aj
        )
        assert ug == pytest.approx(u_fd, abs=5e-4)


# ---------------------------------------------------------------------------
# correction term (doubling-surface difference)
# ---------------------------------------------------------------------------


def test_correction_symmetry(disk):
    x, y = geo.disk_point(0.3, 0.2), geo.disk_point(0.1, -0.3)
    assert gr.correction_term(disk, x, y) == pytest.approx(
        gr.correction_term(disk, y, x), abs=1e-8
    )


def test_correction_bounded_on_diagonal(disk):
    x = geo.disk_point(0.25, 0.15)
    vals = []
    for d in (1e-2, 1e-4, 1e-6):
        y = geo.disk_point(0.25 + d, 0.15)
        vals.append(gr.correction_term(disk, x, y))
    assert max(abs(v) for v in vals) < 10.0
    assert abs(vals[-1] - vals[-2]) < 1e-3


def test_correction_smooth_second_differences(disk, rng):
    for _ in range(10):
        x = geo.disk_point(*(0.5 * (rng.random(2) - 0.5)))
        y = geo.disk_point(*(0.5 * (rng.random(2) - 0.5)))
        second = []
        for h in (2e-3, 1e-3):
            plus = gr.correction_term(disk, geo.disk_point(x.coords[0] + h, x.coords[1]), y)
            minus = gr.correction_term(disk, geo.disk_point(x.coords[0] - h, x.coords[1]), y)
            mid = gr.correction_term(disk, x, y)
            second.append((plus - 2 * mid + minus) / h**2)
        assert abs(second[1]) < 10.0 * (abs(second[0]) + 1.0)


def test_correction_domain_guard(disk):
    with pytest.raises(ValueError):
        gr.correction_term(disk, geo.disk_point(0.95, 0.0), geo.disk_point(0.0, 0.0))


# ---------------------------------------------------------------------------
# regular-part machinery
# ---------------------------------------------------------------------------


def test_ladder_decomposition_consistency(torus):
    # ladder entries and GreenValue.regular_part agree at matching separations
    x0 = geo.torus_point(torus, 0.25, 0.65)
    est = gr.regular_part(torus, x0)
    for d, raw in est.ladder:
        y = geo.torus_point(torus, 0.25 + d, 0.65)
        assert raw == pytest.approx(gr.green(torus, x0, y).regular_part, abs=1e-12)


@pytest.mark.parametrize("fam", ["sphere", "torus", "conf_bump", "disk"])
def test_c1_diagonal_exponent(fam, request):
    # successive ladder differences decay with a fitted exponent >= 0.9:
    # no d*log(d) defect in the regular remainder
    s = request.getfixturevalue(fam)
    if s.family == geo.SPHERE:
        x0 = geo.sphere_point(s, [0, 0.6, 0.8])
    elif s.family == geo.DISK:
        x0 = geo.disk_point(0.2, 0.1)
    else:
        x0 = geo.torus_point(s, 0.52, 0.31)
    est = gr.regular_part(s, x0)
    d = np.array([e[0] for e in est.ladder])
    v = np.array([e[1] for e in est.ladder])
    diffs = np.abs(np.diff(v))
    keep = diffs > 1e-14
    slope = np.polyfit(np.log(d[:-1][keep]), np.log(diffs[keep]), 1)[0]
    assert slope >= 0.9


def test_ladder_error_detection(torus, monkeypatch):
    noise = np.array([0.1, 0.1, 0.1, 1e-3, -1e-3, 1e-3, -1e-3])

    def fake(s, x0, dists, direction=(1.0, 0.0)):
        return noise[: len(dists)]

    monkeypatch.setattr(gr, "raw_regular_ladder", fake)
    with pytest.raises(gr.LadderError) as exc:
        gr.regular_part(torus, geo.torus_point(torus, 0.5, 0.5))
    assert len(exc.value.ladder) == 7


def test_regular_part_many_matches_single(conf_bump):
    centers = [geo.torus_point(conf_bump, 0.3, 0.62), geo.torus_point(conf_bump, 0.1, 0.1)]
    vals, errs = gr.regular_part_many(conf_bump, centers)
    for c, v in zip(centers, vals):
        assert v == gr.regular_part(conf_bump, c).value


# ---------------------------------------------------------------------------
# trap-kernel constant
# ---------------------------------------------------------------------------


def test_kernel_constant_torus(torus):
    val = gr.trap_kernel_constant(torus, geo.torus_point(torus, 0.5, 0.5), 0.02)
    assert 0.02 * val == pytest.approx(1 / (4 * PI), rel=0.10)


def test_kernel_constant_scaling(torus):
    x0 = geo.torus_point(torus, 0.5, 0.5)
    eps = np.array([0.04, 0.02, 0.01, 0.005])
    vals = [gr.trap_kernel_constant(torus, x0, e) for e in eps]
    slope = np.polyfit(np.log(eps), np.log(vals), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)


def test_kernel_constant_sphere_agrees(sphere, torus):
    ks = gr.trap_kernel_constant(sphere, geo.sphere_point(sphere, [0, 0, 1]), 0.02)
    kt = gr.trap_kernel_constant(torus, geo.torus_point(torus, 0.5, 0.5), 0.02)
    assert 0.02 * ks == pytest.approx(1 / (4 * PI), rel=0.10)
    assert ks == pytest.approx(kt, rel=0.05)


def test_kernel_constant_eps_guard(torus):
    with pytest.raises(ValueError):
        gr.trap_kernel_constant(torus, geo.torus_point(torus, 0.5, 0.5), 0.2)
