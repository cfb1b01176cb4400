import math

import numpy as np
import pytest

from nullwave import geometry as geo
from nullwave import nullform as nf
from nullwave import symbolcalc as sc
from nullwave.errors import DegenerateDenominator, SearchFailed

import oracles

ORIGIN4 = np.zeros(4)
FLAT = geo.minkowski(3)
IDENTITY = nf.constant_form(np.eye(4), "identity")

# the quadruple used throughout the worked examples
EXAMPLE_ZETAS = [[1, 1, 0, 0], [1, -1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]]


@pytest.fixture
def example_quad():
    return sc.make_quadruple(FLAT, ORIGIN4, EXAMPLE_ZETAS)


# ---------------------------------------------------------------------------
# gradient symbol
# ---------------------------------------------------------------------------

def test_gradient_symbol_flat():
    out = sc.gradient_symbol(FLAT, ORIGIN4, geo.Covector([1, 0, 0, 1]))
    assert np.allclose(out, 1j * np.array([-1, 0, 0, 1]))


def test_gradient_symbol_homogeneous():
    xi = geo.Covector([0.5, -1.0, 2.0, 0.3])
    one = sc.gradient_symbol(FLAT, ORIGIN4, xi)
    two = sc.gradient_symbol(FLAT, ORIGIN4, 2.0 * xi)
    assert np.allclose(two, 2.0 * one)


def test_gradient_symbol_conformal_scaling():
    gam = 0.4
    mc = geo.conformal_minkowski(geo.ScalarField.constant(gam), 3)
    xi = geo.Covector([1.0, 0.2, -0.7, 0.5])
    assert np.allclose(sc.gradient_symbol(mc, ORIGIN4, xi),
                       math.exp(-2 * gam) * sc.gradient_symbol(FLAT, ORIGIN4, xi))


# ---------------------------------------------------------------------------
# quadruples
# ---------------------------------------------------------------------------

def test_example_quadruple_accepted(example_quad):
    assert example_quad.sum_norm2 == pytest.approx(-14.0)
    assert not example_quad.in_null_variety
    assert abs(np.linalg.det(example_quad.zetas)) > 0.1


def test_quadruple_rejects_non_null():
    bad = [[1, 0.5, 0, 0], [1, -1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]]
    with pytest.raises(ValueError):
        sc.make_quadruple(FLAT, ORIGIN4, bad)


def test_quadruple_rejects_dependent():
    dep = [[1, 1, 0, 0], [-1, -1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]]
    with pytest.raises((ValueError, DegenerateDenominator)):
        sc.make_quadruple(FLAT, ORIGIN4, dep)


def test_sampled_null_sum_residual(metric_catalog):
    for m in metric_catalog:
        quad = sc.sample_quadruple(m, ORIGIN4, seed=7, require_null_sum=True)
        assert quad.in_null_variety
        assert abs(quad.sum_norm2) <= 1e-10 * float(quad.zeta @ quad.zeta)


def test_sampled_quadruples_pass_invariants(metric_catalog):
    count = 0
    for seed in range(120):
        m = metric_catalog[seed % len(metric_catalog)]
        quad = sc.sample_quadruple(m, ORIGIN4, seed=seed,
                                   require_null_sum=bool(seed % 2))
        G = geo.dual_metric(m, ORIGIN4)
        nullness = np.einsum("ka,ab,kb->k", quad.zetas, G, quad.zetas)
        norms = np.einsum("ka,ka->k", quad.zetas, quad.zetas)
        assert np.max(np.abs(nullness) / norms) < 1e-10
        count += 1
    assert count == 120


def test_sampler_deterministic():
    a = sc.sample_quadruple(FLAT, ORIGIN4, seed=11, require_null_sum=True)
    b = sc.sample_quadruple(FLAT, ORIGIN4, seed=11, require_null_sum=True)
    assert np.array_equal(a.zetas, b.zetas)


# ---------------------------------------------------------------------------
# interaction coefficient
# ---------------------------------------------------------------------------

def test_interaction_p_worked_example(example_quad):
    # zeta = (4,0,1,1); raised (-4,0,1,1): M(.,.) = 18; each single term is 2
    assert sc.interaction_P(FLAT, IDENTITY, example_quad) == pytest.approx(20.0)


def test_interaction_p_metric_form_vanishes_on_variety(metric_catalog):
    for m in metric_catalog:
        quad = sc.sample_quadruple(m, ORIGIN4, seed=3, require_null_sum=True)
        p = sc.interaction_P(m, nf.metric_form(m), quad)
        assert abs(p) < 1e-10 * quad.norm2()


def test_interaction_p_homogeneity(example_quad):
    p1 = sc.interaction_P(FLAT, IDENTITY, example_quad)
    p3 = sc.interaction_P(FLAT, IDENTITY, example_quad.scaled(3.0))
    assert p3 == pytest.approx(9.0 * p1)


# ---------------------------------------------------------------------------
# cancellation brackets
# ---------------------------------------------------------------------------

def test_bracket_slopes_match_rational_oracle():
    slope_a, slope_b = oracles.measured_bracket_slopes()
    assert float(slope_a) == sc.A_BRACKET_SLOPE
    assert float(slope_b) == sc.B_BRACKET_SLOPE


def test_brackets_on_example(example_quad):
    assert sc.coefficient_A(FLAT, example_quad) == pytest.approx(
        sc.A_BRACKET_SLOPE * -14.0)
    assert sc.coefficient_B(FLAT, example_quad) == pytest.approx(
        sc.B_BRACKET_SLOPE * -14.0)


def test_brackets_vanish_on_null_variety(metric_catalog):
    for m in metric_catalog:
        for seed in (0, 1):
            quad = sc.sample_quadruple(m, ORIGIN4, seed=seed, require_null_sum=True)
            assert abs(sc.coefficient_A(m, quad)) < 1e-9 * quad.norm2()
            assert abs(sc.coefficient_B(m, quad)) < 1e-9 * quad.norm2()


def test_bracket_permutation_invariance(example_quad, rng):
    a0 = sc.coefficient_A(FLAT, example_quad)
    b0 = sc.coefficient_B(FLAT, example_quad)
    for order in ([1, 0, 3, 2], [2, 3, 0, 1], [3, 1, 2, 0]):
        q = example_quad.permuted(order)
        assert sc.coefficient_A(FLAT, q) == pytest.approx(a0)
        assert sc.coefficient_B(FLAT, q) == pytest.approx(b0)


def test_bracket_slope_constant_across_metrics(metric_catalog, rng):
    ratios_a, ratios_b = [], []
    for seed in range(60):
        m = metric_catalog[seed % len(metric_catalog)]
        x = rng.uniform(-0.2, 0.2, 4)
        quad = sc.sample_quadruple(m, x, seed=seed)
        if abs(quad.sum_norm2) < 1e-6 * quad.norm2():
            continue
        ratios_a.append(sc.coefficient_A(m, quad) / quad.sum_norm2)
        ratios_b.append(sc.coefficient_B(m, quad) / quad.sum_norm2)
    assert np.ptp(ratios_a) < 1e-8 * sc.A_BRACKET_SLOPE
    assert np.ptp(ratios_b) < 1e-8 * sc.B_BRACKET_SLOPE
    assert np.allclose(ratios_a, sc.A_BRACKET_SLOPE, rtol=1e-9)
    assert np.allclose(ratios_b, sc.B_BRACKET_SLOPE, rtol=1e-9)


def test_bracket_homogeneity(example_quad):
    a1 = sc.coefficient_A(FLAT, example_quad)
    a2 = sc.coefficient_A(FLAT, example_quad.scaled(2.0))
    assert a2 == pytest.approx(4.0 * a1)


def test_degenerate_denominator_raises():
    # independent covectors whose first triple sum is itself light-like:
    # pair products -2, +1, +1 cancel in |z1+z2+z3|^2 = 2 * (sum of pairs)
    zetas = [[1, 1, 0, 0], [1, -1, 0, 0], [-1, 0, 1, 0], [1, 0, 0, 1]]
    with pytest.raises(DegenerateDenominator):
        sc.make_quadruple(FLAT, ORIGIN4, zetas)


# ---------------------------------------------------------------------------
# rank certificate
# ---------------------------------------------------------------------------

def test_rank_one_for_metric_form(example_quad):
    cert = sc.rank_certificate(FLAT, nf.metric_form(FLAT), example_quad)
    assert cert.rank == 1
    assert cert.fit_residual < 1e-12


def test_rank_two_for_identity(example_quad):
    cert = sc.rank_certificate(FLAT, IDENTITY, example_quad)
    assert cert.rank == 2
    assert cert.fit_residual > 1e-3


def test_rank_scaling_invariance(example_quad):
    seven = nf.constant_form(7.0 * FLAT.matrix(ORIGIN4))
    assert sc.rank_certificate(FLAT, seven, example_quad).rank == 1
    seven_i = nf.constant_form(7.0 * np.eye(4))
    assert sc.rank_certificate(FLAT, seven_i, example_quad).rank == 2


def test_rank_matches_fit_criterion(metric_catalog, rng):
    for m in metric_catalog:
        quad = sc.sample_quadruple(m, ORIGIN4, seed=2, require_null_sum=True)
        ginv_dual = m.matrix(ORIGIN4)
        for trial in range(20):
            c = rng.uniform(0.5, 3.0)
            pert = rng.standard_normal((4, 4))
            pert = 0.5 * (pert + pert.T)
            eps = 0.0 if trial % 2 == 0 else 1e-2
            mat = c * ginv_dual + eps * pert * np.max(np.abs(ginv_dual))
            cert = sc.rank_certificate(m, nf.constant_form(mat), quad)
            is_multiple = cert.fit_residual <= 1e-8
            assert (cert.rank == 1) == is_multiple


# ---------------------------------------------------------------------------
# non-vanishing witness
# ---------------------------------------------------------------------------

def test_witness_found_for_non_null_form():
    w = sc.nonvanishing_witness(FLAT, nf.constant_form(nf.basis_G(0), "G0"),
                                ORIGIN4, n_attempts=100, threshold=1e-4, seed=5)
    assert isinstance(w, sc.CovectorQuadruple)
    p = sc.interaction_P(FLAT, nf.constant_form(nf.basis_G(0)), w)
    assert abs(p) / w.norm2() ** 2 > 1e-4


def test_witness_null_certificate():
    out = sc.nonvanishing_witness(FLAT, nf.metric_form(FLAT), ORIGIN4, seed=5)
    assert isinstance(out, sc.MNullCertificate)


def test_witness_reproducible():
    a = sc.nonvanishing_witness(FLAT, IDENTITY, ORIGIN4, seed=9)
    b = sc.nonvanishing_witness(FLAT, IDENTITY, ORIGIN4, seed=9)
    assert np.array_equal(a.zetas, b.zetas)


def test_witness_search_failure_reports_best():
    # an impossible threshold exhausts the attempt budget
    with pytest.raises(SearchFailed) as err:
        sc.nonvanishing_witness(FLAT, IDENTITY, ORIGIN4, n_attempts=5,
                                threshold=1e9, seed=0)
    assert err.value.best > 0


# ---------------------------------------------------------------------------
# conformal relations
# ---------------------------------------------------------------------------

def test_conformal_ratio_log2(example_quad):
    rep = sc.conformal_relation(FLAT, math.log(2.0), IDENTITY, example_quad)
    assert rep.ratio == pytest.approx(1.0 / 16.0, rel=1e-12)
    assert rep.consistent


def test_conformal_identity_factor(example_quad):
    rep = sc.conformal_relation(FLAT, 0.0, IDENTITY, example_quad)
    assert rep.ratio == pytest.approx(1.0)
    assert rep.net_exponent == pytest.approx(-5.0)


def test_conformal_exponent_bookkeeping(example_quad):
    rep = sc.conformal_relation(FLAT, 0.3, IDENTITY, example_quad)
    assert rep.exponents == {"interaction": -4.0, "outgoing_leg": 3.0,
                             "incoming_legs": -4.0}
    assert sum(rep.exponents.values()) == pytest.approx(-5.0)


def test_conformal_random_gammas(rng, example_quad):
    for _ in range(25):
        gam = rng.uniform(-1.0, 1.0)
        rep = sc.conformal_relation(FLAT, gam, IDENTITY, example_quad)
        assert abs(rep.ratio - math.exp(-4 * gam)) <= 1e-10 * max(
            1.0, math.exp(-4 * gam))


def test_conformal_on_curved_base(rng):
    base = geo.conformal_minkowski(
        geo.ScalarField(lambda x: 0.2 * np.sin(x[..., 1])), 3)
    quad = sc.sample_quadruple(base, ORIGIN4, seed=1, require_null_sum=True)
    rep = sc.conformal_relation(base, 0.45, IDENTITY, quad)
    assert rep.consistent


# ---------------------------------------------------------------------------
# batch report
# ---------------------------------------------------------------------------

def test_interaction_report_fields(example_quad):
    rep = sc.interaction_report(FLAT, IDENTITY, example_quad)
    assert rep.p == pytest.approx(20.0)
    assert rep.rank == 2
    assert len(rep.denominators) == 10  # 6 pairs + 4 triples
    row = rep.row(seed=42)
    assert set(row) == {"seed", "gstar_zz", "P", "A", "B", "rank"}
