"""Quartic-interaction extraction: permutation sums vs amplitude stencils."""

import itertools

import numpy as np
import pytest

from nullwave import geometry as geo
from nullwave import nullform as nf
from nullwave import wavesolver as ws

import oracles

FLAT1 = geo.minkowski(1)


def four_pulse_setup(nx=256, t_max=3.0):
    grid = ws.build_grid(FLAT1, 1, t_max=t_max, bounds=[(-3, 3)], nx=[nx],
                         cfl=0.45)
    comps = [ws.SourceComponent(1.0, center=(0.35, xc), width=(0.25, 0.3))
             for xc in (-1.8, -0.6, 0.6, 1.8)]
    src = ws.SourceTerm(comps)
    vs = [ws.solve_linear(FLAT1, ws.SourceTerm([c]), grid) for c in comps]
    return grid, src, vs


def classified_term(n0="1*g", n1="2*g", m="G0"):
    nl = nf.NonlinearTerm(
        n0=nf.parse_form(n0, FLAT1) if n0 else None,
        n1=nf.parse_form(n1, FLAT1) if n1 else None,
        m_form=nf.parse_form(m, FLAT1) if m else None)
    if not nl.is_zero:
        report = nf.classify_nonlinearity(nl, FLAT1, [np.zeros(2)], rng=0)
        if m is not None:
            assert report.satisfied
    return nl


def test_permutation_count_collapses():
    keys = oracles.quartic_product_keys()
    assert len(keys) == 24
    distinct = set(keys)
    assert len(distinct) == 12  # i<->j and k<->l symmetry
    for key in distinct:
        assert keys.count(key) == 2


def test_m1_zero_when_m_form_absent():
    grid, src, vs = four_pulse_setup(nx=128)
    nl = classified_term(m=None)
    terms = ws.expansion_terms(FLAT1, nl, vs)
    assert np.max(np.abs(terms.m1.values)) == 0.0
    assert np.max(np.abs(terms.m2.values)) > 0.0


def test_m2_m3_zero_without_metric_factors():
    grid, src, vs = four_pulse_setup(nx=128)
    nl = classified_term(n0=None, n1=None, m="G0")
    terms = ws.expansion_terms(FLAT1, nl, vs)
    assert np.max(np.abs(terms.m2.values)) == 0.0
    assert np.max(np.abs(terms.m3.values)) == 0.0
    assert np.max(np.abs(terms.total.values - terms.m1.values)) == 0.0


def test_m1_matches_bruteforce_permutation_sum():
    """The grouped evaluation equals a term-by-term enumeration."""
    grid, src, vs = four_pulse_setup(nx=96, t_max=2.0)
    nl = classified_term(n0=None, n1=None, m="G0")
    terms = ws.expansion_terms(FLAT1, nl, vs)

    pts = grid.points_at(grid.t[0])
    ginv = np.linalg.inv(FLAT1.matrix(pts))
    W = nl.m_form.matrix(pts)
    vals = [v.values for v in vs]
    dvs = [np.stack(np.gradient(v, grid.dt, grid.dx[0], edge_order=2), axis=-1)
           for v in vals]
    raised = [np.einsum("...ab,n...b->n...a", ginv, dv) for dv in dvs]
    acc = np.zeros_like(vals[0])
    for (i, j, k, l) in itertools.permutations(range(4)):
        inner = np.einsum("n...a,...ab,n...b->n...", raised[k], W, raised[l])
        src_term = vals[i] * vals[j] * inner
        acc += ws.solve_linear(FLAT1, ws.GridField.full(grid, src_term),
                               grid).values
    assert np.max(np.abs(terms.m1.values + acc)) < 1e-10 * max(
        1e-300, np.max(np.abs(acc)))


def test_order2_stencil_matches_reference():
    grid, src, vs = four_pulse_setup()
    nl = classified_term()
    mix = ws.mixed_difference(FLAT1, nl, src, grid, order=2, delta=0.1)
    ref = ws.second_order_reference(FLAT1, nl, vs[0], vs[1])
    sel = (slice(None),) + grid.interior(4)
    rel = np.sqrt(np.mean((mix.values - ref.values)[sel] ** 2)) \
        / np.sqrt(np.mean(ref.values[sel] ** 2))
    assert rel <= 0.05


def test_order4_stencil_matches_expansion():
    grid, src, vs = four_pulse_setup()
    nl = classified_term()
    terms = ws.expansion_terms(FLAT1, nl, vs)
    mix = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1)
    sel = (slice(None),) + grid.interior(4)
    rel = np.sqrt(np.mean((mix.values - terms.total.values)[sel] ** 2)) \
        / np.sqrt(np.mean(terms.total.values[sel] ** 2))
    assert rel <= 0.10


def test_picard_mode_stencil_agrees():
    grid, src, vs = four_pulse_setup(nx=128, t_max=2.0)
    nl = classified_term()
    a = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1,
                            mode="stepping", richardson=False)
    b = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1,
                            mode="picard", richardson=False)
    scale = max(np.max(np.abs(a.values)), 1e-300)
    assert np.max(np.abs(a.values - b.values)) / scale < 0.05


def test_expansion_terms_supported_in_causal_future():
    grid, src, vs = four_pulse_setup(nx=128, t_max=2.0)
    nl = classified_term()
    terms = ws.expansion_terms(FLAT1, nl, vs)
    support = src.with_amplitudes(np.ones(4)).support_mask(grid)
    mask = ws.causal_future_mask(grid, support, margin=2)
    outside = ~mask
    peak = float(np.max(np.abs(terms.total.values[outside])))
    assert peak <= 1e-10 * np.max(np.abs(terms.total.values))


def test_threaded_stencil_matches_serial():
    grid, src, vs = four_pulse_setup(nx=96, t_max=2.0)
    nl = classified_term()
    a = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1,
                            richardson=False, threads=1)
    b = ws.mixed_difference(FLAT1, nl, src, grid, order=4, delta=0.1,
                            richardson=False, threads=4)
    assert np.array_equal(a.values, b.values)


def test_expansion_requires_classification():
    grid, src, vs = four_pulse_setup(nx=96, t_max=1.5)
    nl = nf.NonlinearTerm(n0=nf.metric_form(FLAT1),
                          m_form=nf.parse_form("G0", FLAT1))
    with pytest.raises(ValueError):
        ws.expansion_terms(FLAT1, nl, vs)
