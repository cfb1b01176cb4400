"""Acceptance criteria, one test per criterion.

Tolerances are pinned here; nothing is deferred to later calibration.  The
conftest terminal-summary hook prints one PASS/FAIL line per criterion.
"""

import functools

import numpy as np
import pytest
import sympy as sp

from nullwave import geometry as geo
from nullwave import nullform as nf
from nullwave import obsets as ob
from nullwave import symbolcalc as sc
from nullwave import wavesolver as ws
from nullwave.errors import NotANullForm

import conftest
import oracles
from conftest import make_catalog

ORIGIN4 = np.zeros(4)
FLAT = geo.minkowski(3)
FLAT1 = geo.minkowski(1)


def criterion(num, label):
    """Register the criterion for the terminal-summary verdict lines."""
    def deco(fn):
        conftest.ACCEPTANCE_REGISTRY[fn.__name__] = (num, label)

        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            fn(*args, **kwargs)
        return wrapper
    return deco


# ---------------------------------------------------------------------------
# 1. null-form decomposition
# ---------------------------------------------------------------------------

@criterion(1, "null-form decomposition: 500 recoveries, 500 rejections")
def test_criterion_1_decomposition():
    catalog = make_catalog(3)
    rng = np.random.default_rng(101)
    for trial in range(500):
        m = catalog[trial % 3]
        x = rng.uniform(-0.4, 0.4, 4)
        c0 = rng.uniform(-5, 5)
        coefs = {(a, b): rng.uniform(-5, 5)
                 for a in range(4) for b in range(a + 1, 4)}
        mat = c0 * m.matrix(x)
        for (a, b), val in coefs.items():
            mat += val * nf.basis_E(a, b)
        dec = nf.decompose_null_form(nf.constant_form(mat), m, x)
        assert abs(dec.c0 - c0) <= 1e-10
        for key, val in coefs.items():
            assert abs(dec.antisym.get(key, 0.0) - val) <= 1e-10

    rejected = 0
    for trial in range(500):
        m = catalog[trial % 3]
        x = rng.uniform(-0.4, 0.4, 4)
        g = m.matrix(x)
        mat = rng.uniform(-5, 5) * g
        for a in range(4):
            for b in range(a + 1, 4):
                mat += rng.uniform(-5, 5) * nf.basis_E(a, b)
        pert = rng.standard_normal((4, 4))
        pert = 0.5 * (pert + pert.T)
        pert -= np.sum(pert * g) / np.sum(g * g) * g  # remove the metric part
        pert *= rng.uniform(1e-3, 1e-1) / np.max(np.abs(pert))
        try:
            nf.decompose_null_form(nf.constant_form(mat + pert), m, x)
        except NotANullForm:
            rejected += 1
    assert rejected == 500


# ---------------------------------------------------------------------------
# 2. cancellation identities
# ---------------------------------------------------------------------------

@criterion(2, "cancellation brackets: constant slope, vanish on null variety")
def test_criterion_2_cancellation():
    catalog = make_catalog(3)
    rng = np.random.default_rng(202)
    ratios_a, ratios_b = [], []
    drawn = 0
    while drawn < 200:
        m = catalog[drawn % 3]
        x = rng.uniform(-0.3, 0.3, 4)
        quad = sc.sample_quadruple(m, x, seed=int(rng.integers(1 << 31)))
        if abs(quad.sum_norm2) < 1e-6 * quad.norm2():
            continue
        ratios_a.append(sc.coefficient_A(m, quad) / quad.sum_norm2)
        ratios_b.append(sc.coefficient_B(m, quad) / quad.sum_norm2)
        drawn += 1
    spread_a = np.ptp(ratios_a) / abs(np.mean(ratios_a))
    spread_b = np.ptp(ratios_b) / abs(np.mean(ratios_b))
    assert spread_a <= 1e-8
    assert spread_b <= 1e-8

    for k in range(60):
        m = catalog[k % 3]
        x = rng.uniform(-0.3, 0.3, 4)
        quad = sc.sample_quadruple(m, x, seed=1000 + k, require_null_sum=True)
        assert abs(sc.coefficient_A(m, quad)) <= 1e-9 * quad.norm2()
        assert abs(sc.coefficient_B(m, quad)) <= 1e-9 * quad.norm2()


# ---------------------------------------------------------------------------
# 3. non-vanishing of the interaction coefficient
# ---------------------------------------------------------------------------

@criterion(3, "interaction coefficient: witnesses for non-null forms, zero for g")
def test_criterion_3_nonvanishing():
    non_null_forms = [
        nf.constant_form(nf.basis_G(0), "G0"),
        nf.constant_form(nf.basis_G(1), "G1"),
        nf.constant_form(nf.basis_F(0, 1), "F01"),
        nf.constant_form(np.eye(4), "identity"),
        nf.parse_form("1*g + 0.5*G0", FLAT),
    ]
    for k, form in enumerate(non_null_forms):
        w = sc.nonvanishing_witness(FLAT, form, ORIGIN4, n_attempts=100,
                                    threshold=1e-4, seed=300 + k)
        assert isinstance(w, sc.CovectorQuadruple)
        p = sc.interaction_P(FLAT, form, w)
        assert abs(p) / w.norm2() ** 2 > 1e-4

    m_null = nf.parse_form("3*g", FLAT)
    for k in range(1000):
        quad = sc.sample_quadruple(FLAT, ORIGIN4, seed=5000 + k,
                                   require_null_sum=True)
        p = sc.interaction_P(FLAT, m_null, quad)
        assert abs(p) <= 1e-10 * quad.norm2()


# ---------------------------------------------------------------------------
# 4. rank certificate
# ---------------------------------------------------------------------------

@criterion(4, "rank certificate: 1 iff form is a multiple of the dual inverse")
def test_criterion_4_rank():
    rng = np.random.default_rng(404)
    quad = sc.sample_quadruple(FLAT, ORIGIN4, seed=4, require_null_sum=True)
    ginv_dual = FLAT.matrix(ORIGIN4)
    for c in (1.0, -2.5, 0.3):
        cert = sc.rank_certificate(FLAT, nf.constant_form(c * ginv_dual), quad)
        assert cert.rank == 1
    for _ in range(100):
        c = rng.uniform(0.5, 2.0)
        pert = rng.standard_normal((4, 4))
        pert = 0.5 * (pert + pert.T)
        pert -= np.sum(pert * ginv_dual) / np.sum(ginv_dual * ginv_dual) * ginv_dual
        pert *= rng.uniform(1e-3, 1e-1) / np.max(np.abs(pert))
        cert = sc.rank_certificate(FLAT, nf.constant_form(c * ginv_dual + pert),
                                   quad)
        assert cert.rank == 2


# ---------------------------------------------------------------------------
# 5. conformal laws
# ---------------------------------------------------------------------------

@criterion(5, "conformal scaling: exp(-4 gamma) ratio and net exponent -5")
def test_criterion_5_conformal():
    rng = np.random.default_rng(505)
    ident = nf.constant_form(np.eye(4), "identity")
    quad = sc.sample_quadruple(FLAT, ORIGIN4, seed=55, require_null_sum=True)
    for _ in range(40):
        gam = rng.uniform(-1.0, 1.0)
        rep = sc.conformal_relation(FLAT, gam, ident, quad)
        expect = np.exp(-4.0 * gam)
        assert abs(rep.ratio - expect) <= 1e-10 * max(1.0, abs(expect))
        assert rep.exponents == {"interaction": -4.0, "outgoing_leg": 3.0,
                                 "incoming_legs": -4.0}
        assert rep.net_exponent == pytest.approx(-5.0)


# ---------------------------------------------------------------------------
# 6. solver order
# ---------------------------------------------------------------------------

@criterion(6, "manufactured linear solutions converge at order 2 +/- 0.3")
def test_criterion_6_solver_order():
    t, x = sp.symbols("t x")

    def run_1d(metric, g_tt, g_xx, resolutions):
        u_fn, f_fn = oracles.manufactured_1d(g_tt, g_xx)

        def solve_at(nx):
            grid = ws.build_grid(metric, 1, 2.0, [(-4, 4)], [nx], cfl=0.45)
            src = lambda tt, mesh: np.asarray(f_fn(tt, mesh[..., 0]), float) \
                * np.ones(mesh.shape[:-1])
            return ws.solve_linear(metric, src, grid, store="last")

        return ws.convergence_study(
            solve_at, resolutions, exact=lambda tt, mesh: u_fn(tt, mesh[..., 0]))

    flat_table = run_1d(FLAT1, sp.Integer(-1), sp.Integer(1), [1024, 2048, 4096])
    for p in flat_table.orders:
        assert abs(p - 2.0) <= 0.3

    beta = geo.ScalarField(lambda pts: 1.0 + 0.3 * np.sin(pts[..., 1]),
                           time_dependent=False)
    kappa = geo.MatrixField(
        lambda pts: (1.0 + 0.2 * np.cos(pts[..., 1]))[..., None, None],
        time_dependent=False)
    curved = geo.product_metric(beta, kappa, 1)
    curved_table = run_1d(curved, -(1 + sp.Rational(3, 10) * sp.sin(x)),
                          1 + sp.Rational(2, 10) * sp.cos(x), [1024, 2048, 4096])
    for p in curved_table.orders:
        assert abs(p - 2.0) <= 0.3

    u2_fn, f2_fn = oracles.manufactured_2d()
    flat2 = geo.minkowski(2)

    def solve_2d(nx):
        grid = ws.build_grid(flat2, 2, 1.2, [(-2, 2), (-2, 2)], [nx, nx],
                             cfl=0.45)
        src = lambda tt, mesh: np.asarray(
            f2_fn(tt, mesh[..., 0], mesh[..., 1]), float) \
            * np.ones(mesh.shape[:-1])
        return ws.solve_linear(flat2, src, grid, store="last")

    table2 = ws.convergence_study(
        solve_2d, [128, 256, 512],
        exact=lambda tt, mesh: u2_fn(tt, mesh[..., 0], mesh[..., 1]))
    for p in table2.orders:
        assert abs(p - 2.0) <= 0.3


# ---------------------------------------------------------------------------
# 7. expansion validation
# ---------------------------------------------------------------------------

@criterion(7, "amplitude stencils match the permutation sums on refinement")
def test_criterion_7_expansion():
    nl = nf.NonlinearTerm(n0=nf.parse_form("1*g", FLAT1),
                          n1=nf.parse_form("2*g", FLAT1),
                          m_form=nf.parse_form("G0", FLAT1))
    rep = nf.classify_nonlinearity(nl, FLAT1, [np.zeros(2)], rng=0)
    assert rep.satisfied

    errors4 = []
    errors2 = []
    for nx in (256, 512, 1024):
        grid = ws.build_grid(FLAT1, 1, 3.0, [(-3, 3)], [nx], cfl=0.45)
        comps = [ws.SourceComponent(1.0, center=(0.35, xc), width=(0.25, 0.3))
                 for xc in (-1.8, -0.6, 0.6, 1.8)]
        src = ws.SourceTerm(comps)
        vs = [ws.solve_linear(FLAT1, ws.SourceTerm([c]), grid) for c in comps]
        terms = ws.expansion_terms(FLAT1, nl, vs)
        mix4 = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1)
        sel = (slice(None),) + grid.interior(4)
        num = np.sqrt(np.mean((mix4.values - terms.total.values)[sel] ** 2))
        den = np.sqrt(np.mean(terms.total.values[sel] ** 2))
        errors4.append(num / den)

        mix2 = ws.mixed_difference(FLAT1, nl, src, grid, order=2, delta=0.1)
        ref2 = ws.second_order_reference(FLAT1, nl, vs[0], vs[1])
        num2 = np.sqrt(np.mean((mix2.values - ref2.values)[sel] ** 2))
        den2 = np.sqrt(np.mean(ref2.values[sel] ** 2))
        errors2.append(num2 / den2)

    assert errors4[-1] <= 0.10
    assert errors2[-1] <= 0.05
    # the two routes share the discretization, so the mismatch sits at the
    # stencil truncation floor; require decrease up to that floor
    floor = 1e-4
    assert errors4[1] <= errors4[0] + floor
    assert errors4[2] <= errors4[1] + floor


# ---------------------------------------------------------------------------
# 8. null-form smoothing sanity
# ---------------------------------------------------------------------------

@criterion(8, "progressing-pulse self-interaction: null form <= 1% of dt^2 form")
def test_criterion_8_smoothing():
    u_fn, f_fn = oracles.traveling_pulse_1d()
    grid = ws.build_grid(FLAT1, 1, 7.0, [(-7, 7)], [1536], cfl=0.45)
    eps = 0.05
    src = lambda tt, mesh: eps * np.asarray(f_fn(tt, mesh[..., 0]), float) \
        * np.ones(mesh.shape[:-1])
    v = ws.solve_linear(FLAT1, src, grid)
    nl_null = nf.NonlinearTerm(n0=nf.metric_form(FLAT1))
    nl_tsq = nf.NonlinearTerm(n0=nf.constant_form(nf.basis_G(0, 2), "G0"))
    u_null = ws.solve_nonlinear(FLAT1, nl_null, src, grid)
    u_tsq = ws.solve_nonlinear(FLAT1, nl_tsq, src, grid)
    sel = (slice(None),) + grid.interior(2)
    e_null = np.sqrt(np.mean((u_null.values - v.values)[sel] ** 2))
    e_tsq = np.sqrt(np.mean((u_tsq.values - v.values)[sel] ** 2))
    assert (e_null / e_tsq) ** 2 <= 0.01


# ---------------------------------------------------------------------------
# 9. causality
# ---------------------------------------------------------------------------

@criterion(9, "solver output vanishes outside the causal future of the source")
def test_criterion_9_causality():
    scenarios = []

    grid1 = ws.build_grid(FLAT1, 1, 2.0, [(-3, 3)], [512], cfl=0.45)
    src1 = ws.SourceTerm([ws.SourceComponent(1.0, (0.5, 0.0), (0.2, 0.3))])
    scenarios.append((FLAT1, None, src1, grid1))

    nl = nf.NonlinearTerm(n0=nf.metric_form(FLAT1),
                          m_form=nf.constant_form(nf.basis_G(0, 2)))
    nf.classify_nonlinearity(nl, FLAT1, [np.zeros(2)], rng=0)
    src4 = ws.SourceTerm([ws.SourceComponent(0.1, (0.35, xc), (0.25, 0.3))
                          for xc in (-1.8, -0.6, 0.6, 1.8)])
    grid4 = ws.build_grid(FLAT1, 1, 3.0, [(-3, 3)], [512], cfl=0.45)
    scenarios.append((FLAT1, nl, src4, grid4))

    beta = geo.ScalarField(lambda pts: 1.0 + 0.3 * np.sin(pts[..., 1]),
                           time_dependent=False)
    kappa = geo.MatrixField(
        lambda pts: (1.0 + 0.2 * np.cos(pts[..., 1]))[..., None, None],
        time_dependent=False)
    curved = geo.product_metric(beta, kappa, 1)
    gridc = ws.build_grid(curved, 1, 2.0, [(-3, 3)], [512], cfl=0.45)
    scenarios.append((curved, None, src1, gridc))

    flat2 = geo.minkowski(2)
    grid2 = ws.build_grid(flat2, 2, 1.0, [(-2, 2), (-2, 2)], [128, 128],
                          cfl=0.45)
    src2 = ws.SourceTerm([ws.SourceComponent(
        1.0, (0.3, 0.0, 0.0), (0.15, 0.4, 0.4))])
    scenarios.append((flat2, None, src2, grid2))

    for metric, term, src, grid in scenarios:
        sol = ws.solve_nonlinear(metric, term, src, grid)
        peak, scale = ws.max_outside_causal_future(sol, src)
        assert peak <= 1e-10 * scale


# ---------------------------------------------------------------------------
# 10. observation sets
# ---------------------------------------------------------------------------

@criterion(10, "observation sets: exact cone, distinguishable lattice, conformal")
def test_criterion_10_obsets():
    region = ob.ObservationRegion(
        box=[[0.7, 1.4], [-0.6, 0.6], [-0.6, 0.6], [-0.6, 0.6]],
        lattice=(5, 5, 5))
    e0 = ob.earliest_observation_set(FLAT, ORIGIN4, region)
    resid = e0.points[:, 0] - np.linalg.norm(e0.points[:, 1:], axis=1)
    assert np.max(np.abs(resid)) <= 1e-8

    rng = np.random.default_rng(1010)
    sources = [np.array([0.0, 0.0, 0.0, 0.0])]
    while len(sources) < 20:
        cand = np.concatenate([[rng.uniform(-0.1, 0.15)],
                               rng.uniform(-0.25, 0.25, 3)])
        if all(np.linalg.norm(cand - s) > 0.05 for s in sources):
            sources.append(cand)
    matrix = ob.distinguishability_matrix(FLAT, sources, region)
    offdiag = matrix[np.triu_indices(20, 1)]
    assert np.all(offdiag > 1e-3)

    gamma = geo.ScalarField(lambda x: 0.3 * np.sin(x[..., 0] + x[..., 1]))
    mc = geo.conformal_minkowski(gamma, 3)
    ec = ob.earliest_observation_set(mc, ORIGIN4, region)
    assert len(ec) == len(e0)
    assert np.max(np.abs(np.sort(ec.points, axis=0)
                         - np.sort(e0.points, axis=0))) <= 1e-10


# ---------------------------------------------------------------------------
# 11. conjugate points
# ---------------------------------------------------------------------------

@criterion(11, "conjugate points: sphere at pi, none in flat space")
def test_criterion_11_conjugate():
    sph = geo.ultrastatic_sphere()
    x0 = np.array([0.0, np.pi / 2, 0.0])
    path = geo.geodesic_trace(sph, x0, geo.Vector([1.0, 0.0, 1.0]), 4.0, 0.01)
    tau = geo.first_conjugate_time(sph, path)
    # transverse perturbations obey J'' + J = 0 along the unit-speed ray,
    # so the first zero sits at parameter pi
    assert tau is not None and abs(tau - np.pi) <= 1e-3

    for direction in ([1, 1, 0, 0], [1, 0.6, 0.8, 0], [2, 1, 1, 1]):
        p = geo.geodesic_trace(FLAT, ORIGIN4, geo.Vector(direction), 3.0, 0.05)
        assert geo.first_conjugate_time(FLAT, p) is None
