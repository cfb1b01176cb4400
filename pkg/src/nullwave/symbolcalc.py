"""Four-wave interaction coefficients and their cancellation/scaling laws.

All operations here are exact pointwise evaluations at a base point ``q0`` in
a 3+1-dimensional spacetime: the quartic interaction coefficient ``P`` built
from a non-null form, the two cancellation brackets ``A`` and ``B`` arising
from the cubic and quadratic self-interaction routes, a rank certificate for
the constraint/coefficient Jacobian, and the conformal scaling bookkeeping.

``A`` and ``B`` are evaluated as literal 24-term permutation sums.  For any
quadruple of null covectors with nondegenerate denominators both brackets are
exact multiples of ``g*(zeta, zeta)`` where ``zeta`` is the covector sum; the
proportionality constants below were measured once with an exact
rational-arithmetic sweep (see tests/oracles.py) and are frozen here.  In
particular both brackets vanish whenever the sum is itself light-like.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDenominator,
    SamplingExhausted,
    SearchFailed,
)
from .geometry import (
    Covector,
    MetricSpec,
    ScalarField,
    _comps,
    conformal_scale,
    dual_metric,
    raise_index,
)
from .nullform import QuadraticForm, is_null_form, sample_null_cone

__all__ = [
    "CovectorQuadruple",
    "InteractionReport",
    "RankCertificate",
    "MNullCertificate",
    "ConformalScalingReport",
    "A_BRACKET_SLOPE",
    "B_BRACKET_SLOPE",
    "gradient_symbol",
    "make_quadruple",
    "sample_quadruple",
    "interaction_P",
    "coefficient_A",
    "coefficient_B",
    "rank_certificate",
    "nonvanishing_witness",
    "conformal_relation",
    "interaction_report",
]

# Measured by the exact rational permutation-sum oracle over Pythagorean null
# quadruples; constant across metrics, base points, and quadruples.
A_BRACKET_SLOPE = 7.0
B_BRACKET_SLOPE = 6.0

TOL_NULL = 1e-10
TOL_INDEP = 1e-3
TOL_DENOM = 1e-8


# ---------------------------------------------------------------------------
# quadruples
# ---------------------------------------------------------------------------

@dataclass
class CovectorQuadruple:
    """Four independent light-like covectors at a base point, and their sum."""

    q0: np.ndarray
    zetas: np.ndarray           # (4, 4): rows are covector components
    zeta: np.ndarray            # component sum
    sum_norm2: float            # g*(zeta, zeta)
    in_null_variety: bool       # |g*(zeta, zeta)| below tolerance
    orientations: tuple         # sign of the time component of each covector

    def norm2(self):
        """Squared Euclidean size used for homogeneity normalization."""
        return float(np.sum(self.zetas ** 2))

    def scaled(self, lam):
        return CovectorQuadruple(self.q0, lam * self.zetas, lam * self.zeta,
                                 lam * lam * self.sum_norm2,
                                 self.in_null_variety, self.orientations)

    def permuted(self, order):
        z = self.zetas[list(order)]
        return CovectorQuadruple(self.q0, z, self.zeta, self.sum_norm2,
                                 self.in_null_variety, self.orientations)


def _gstar(G, a, b):
    return float(a @ G @ b)


def _denominators(G, zetas):
    """Pair and triple sum squared norms keyed by sorted index tuples."""
    out = {}
    for i, j in itertools.combinations(range(4), 2):
        s = zetas[i] + zetas[j]
        out[(i, j)] = _gstar(G, s, s)
    for trip in itertools.combinations(range(4), 3):
        s = zetas[trip[0]] + zetas[trip[1]] + zetas[trip[2]]
        out[trip] = _gstar(G, s, s)
    return out


def make_quadruple(m: MetricSpec, q0, zetas, *, tol_null=TOL_NULL,
                   tol_indep=TOL_INDEP, tol_denom=TOL_DENOM,
                   require_null_sum=False, check_denominators=True) -> CovectorQuadruple:
    """Validate four covectors and package them with their sum.

    Raises ValueError when a covector is not null or the four are not
    linearly independent; DegenerateDenominator when a pair or triple sum is
    numerically light-like (the interaction formulas have genuine poles
    there).
    """
    if m.dim != 3:
        raise ValueError("covector quadruples need a 3+1-dimensional metric")
    q0 = np.asarray(q0, dtype=float)
    zetas = np.asarray([_comps(z, "covector") if hasattr(z, "kind") else z
                        for z in zetas], dtype=float)
    if zetas.shape != (4, 4):
        raise ValueError("expected four 4-component covectors")
    G = dual_metric(m, q0)

    norms2 = np.einsum("ka,ka->k", zetas, zetas)
    nullness = np.abs(np.einsum("ka,ab,kb->k", zetas, G, zetas))
    if np.any(nullness > tol_null * norms2):
        k = int(np.argmax(nullness / norms2))
        raise ValueError(f"covector {k} is not light-like: |g*| = {nullness[k]:.3e}")

    det = abs(np.linalg.det(zetas))
    if det <= tol_indep * float(np.prod(np.sqrt(norms2))):
        raise ValueError(f"covectors are not independent enough: |det| = {det:.3e}")

    if check_denominators:
        scale = float(np.sum(norms2))
        for key, val in _denominators(G, zetas).items():
            if abs(val) < tol_denom * scale:
                raise DegenerateDenominator(key, val)

    zeta = zetas.sum(axis=0)
    sum_norm2 = _gstar(G, zeta, zeta)
    in_x = abs(sum_norm2) <= tol_null * float(zeta @ zeta)
    if require_null_sum and not in_x:
        raise ValueError(f"covector sum is not light-like: g* = {sum_norm2:.3e}")
    orientations = tuple(int(np.sign(z[0])) for z in zetas)
    return CovectorQuadruple(q0, zetas, zeta, sum_norm2, in_x, orientations)


def sample_quadruple(m: MetricSpec, q0, seed=0, require_null_sum=False,
                     max_attempts=500, tol_indep=TOL_INDEP,
                     tol_denom=TOL_DENOM) -> CovectorQuadruple:
    """Rejection-sample an independent null-covector quadruple at q0.

    Covectors come from lowering null cone samples.  With
    ``require_null_sum`` the fourth covector is rescaled by the root of the
    scalar equation making the total sum light-like; draws without a usable
    root are rejected.  Both time orientations are accepted.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q0 = np.asarray(q0, dtype=float)
    g = m.matrix(q0)
    G = dual_metric(m, q0)

    for _ in range(max_attempts):
        vs = sample_null_cone(m, q0, 4, rng=rng)
        zetas = vs @ g.T  # lower each tangent sample
        if require_null_sum:
            z123 = zetas[:3].sum(axis=0)
            a = _gstar(G, z123, z123)
            b = _gstar(G, z123, zetas[3])
            # |z123 + s*z4|^2 = a + 2 s b since z4 is null; need a root with
            # a sensible magnitude
            if abs(b) < 1e-10:
                continue
            s = -a / (2.0 * b)
            if not np.isfinite(s) or abs(s) < 0.05 or abs(s) > 20.0:
                continue
            zetas = zetas.copy()
            zetas[3] = s * zetas[3]
        try:
            return make_quadruple(m, q0, zetas, tol_indep=tol_indep,
                                  tol_denom=tol_denom,
                                  require_null_sum=require_null_sum)
        except (ValueError, DegenerateDenominator):
            continue
    raise SamplingExhausted(f"no valid quadruple at {q0} in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# symbol helpers
# ---------------------------------------------------------------------------

def gradient_symbol(m: MetricSpec, x, xi):
    """Leading multiplier of a gradient acting on a sharp one-sided pulse.

    Returns ``1j * xi^#``; the pulse amplitude itself is the caller's factor.
    """
    comps = _comps(xi, "covector")
    if float(comps @ comps) == 0.0:
        raise ValueError("need a nonzero covector")
    return 1j * raise_index(m, x, Covector(comps)).components


def interaction_P(m: MetricSpec, m_form: QuadraticForm, quad: CovectorQuadruple) -> float:
    """Quartic interaction coefficient at the base point.

    ``P = 2 * (M(zeta^#, zeta^#) - sum_i M(zeta_i^#, zeta_i^#))`` with all
    indices raised through the dual metric at q0.
    """
    G = dual_metric(m, quad.q0)
    W = m_form.matrix(quad.q0)
    raised = quad.zetas @ G.T
    zr = quad.zeta @ G.T
    total = float(zr @ W @ zr)
    single = float(np.einsum("ka,ab,kb->", raised, W, raised))
    return 2.0 * (total - single)


def _bracket_terms_A(G, z, denoms):
    total = 0.0
    for (i, j, k, l) in itertools.permutations(range(4)):
        d3 = denoms[tuple(sorted((j, k, l)))]
        d2_ij = denoms[tuple(sorted((i, j)))]
        d2_kl = denoms[tuple(sorted((k, l)))]
        zjkl = z[j] + z[k] + z[l]
        total += 2.0 * _gstar(G, z[i], zjkl) / d3 * _gstar(G, z[k], z[l])
        total += _gstar(G, z[i], z[j]) / d2_ij * _gstar(G, z[k], z[l])
        total += 2.0 * _gstar(G, z[k], z[l]) / d2_kl * _gstar(G, z[j], z[k] + z[l])
    return total


def _bracket_terms_B(G, z, denoms):
    total = 0.0
    for (i, j, k, l) in itertools.permutations(range(4)):
        d3 = denoms[tuple(sorted((j, k, l)))]
        d2_kl = denoms[tuple(sorted((k, l)))]
        d2_ij = denoms[tuple(sorted((i, j)))]
        zjkl = z[j] + z[k] + z[l]
        total += (4.0 * _gstar(G, z[i], zjkl) / d3
                  * _gstar(G, z[j], z[k] + z[l]) / d2_kl
                  * _gstar(G, z[k], z[l]))
        total += (_gstar(G, z[k] + z[l], z[i] + z[j]) / (d2_kl * d2_ij)
                  * _gstar(G, z[i], z[j]) * _gstar(G, z[k], z[l]))
    return total


def _checked_denominators(m, quad):
    G = dual_metric(m, quad.q0)
    denoms = _denominators(G, quad.zetas)
    scale = quad.norm2()
    for key, val in denoms.items():
        if abs(val) < TOL_DENOM * scale:
            raise DegenerateDenominator(key, val)
    return G, denoms


def coefficient_A(m: MetricSpec, quad: CovectorQuadruple) -> float:
    """Cancellation bracket of the cubic interaction route (24-term sum).

    Equals ``A_BRACKET_SLOPE * g*(zeta, zeta)`` for null quadruples, hence
    vanishes whenever the covector sum is light-like.
    """
    G, denoms = _checked_denominators(m, quad)
    return _bracket_terms_A(G, quad.zetas, denoms)


def coefficient_B(m: MetricSpec, quad: CovectorQuadruple) -> float:
    """Cancellation bracket of the doubly-iterated quadratic route."""
    G, denoms = _checked_denominators(m, quad)
    return _bracket_terms_B(G, quad.zetas, denoms)


# ---------------------------------------------------------------------------
# rank certificate
# ---------------------------------------------------------------------------

@dataclass
class RankCertificate:
    """Rank of the stacked constraint/coefficient Jacobian on the cone."""

    rank: int
    df: np.ndarray               # (16,) row of the constraint Jacobian
    dp: np.ndarray               # (16,) row of the coefficient Jacobian
    singular_values: np.ndarray
    fit_coefficient: float       # least-squares c in M ~ c * g^{-1}... fit
    fit_residual: float


def rank_certificate(m: MetricSpec, m_form: QuadraticForm,
                     quad: CovectorQuadruple, tol_rank=1e-6) -> RankCertificate:
    """Assemble the two 16-component Jacobian rows and report their rank.

    The rows are ``dF = (2 G zeta, x4)`` and
    ``dP = 4 (G M G (zeta - zeta_i))_i``.  Because each covector is
    constrained to the light cone, every 4-block is projected onto the cone
    tangent space (orthogonal complement of ``G zeta_i``) before the singular
    value decomposition; degeneracy then occurs exactly when the symmetric
    part of M is a multiple of the inverse dual metric, which the certificate
    also reports as a least-squares fit.
    """
    G = dual_metric(m, quad.q0)
    W = m_form.matrix(quad.q0)
    Wsym = 0.5 * (W + W.T)
    z = quad.zetas
    zeta = quad.zeta

    df_blocks = []
    dp_blocks = []
    gmg = G @ Wsym @ G
    for i in range(4):
        nvec = G @ z[i]
        nhat = nvec / np.linalg.norm(nvec)
        proj = lambda b: b - (b @ nhat) * nhat
        df_blocks.append(proj(2.0 * G @ zeta))
        dp_blocks.append(proj(4.0 * gmg @ (zeta - z[i])))
    df = np.concatenate(df_blocks)
    dp = np.concatenate(dp_blocks)

    jac = np.vstack([df, dp])
    svals = np.linalg.svd(jac, compute_uv=False)
    rank = int(np.sum(svals > tol_rank * svals[0])) if svals[0] > 0 else 0

    ginv = m.matrix(quad.q0)  # inverse of the dual metric
    c = float(np.sum(Wsym * ginv) / np.sum(ginv * ginv))
    fit_residual = float(np.linalg.norm(Wsym - c * ginv) / max(np.linalg.norm(Wsym), 1e-300))
    return RankCertificate(rank, df, dp, svals, c, fit_residual)


# ---------------------------------------------------------------------------
# non-vanishing witness
# ---------------------------------------------------------------------------

@dataclass
class MNullCertificate:
    """Interaction coefficient vanishes identically: the form is null."""

    q0: np.ndarray
    form_label: str
    message: str = "interaction coefficient is identically zero on the null variety"


def nonvanishing_witness(m: MetricSpec, m_form: QuadraticForm, q0,
                         n_attempts=100, threshold=1e-4, seed=0):
    """Search the null-sum variety for a quadruple with a large coefficient.

    A draw is a witness when ``|P| > threshold * |quad|^4`` with the quadruple
    size measured in the Euclidean norm.  When the form is null at q0 the
    coefficient vanishes identically there and an MNullCertificate is
    returned instead of searching.
    """
    rng = np.random.default_rng(seed)
    q0 = np.asarray(q0, dtype=float)
    if is_null_form(m_form, m, q0, n_samples=200, rng=rng):
        return MNullCertificate(q0, m_form.label)

    best = 0.0
    for _ in range(n_attempts):
        try:
            quad = sample_quadruple(m, q0, seed=rng, require_null_sum=True)
        except SamplingExhausted:
            continue
        p = interaction_P(m, m_form, quad)
        normalized = abs(p) / quad.norm2() ** 2
        best = max(best, normalized)
        if normalized > threshold:
            return quad
    raise SearchFailed(n_attempts, best)


# ---------------------------------------------------------------------------
# conformal scaling report
# ---------------------------------------------------------------------------

@dataclass
class ConformalScalingReport:
    """Interaction coefficient under a conformal rescaling of the metric."""

    gamma_at_q0: float
    p_base: float
    p_scaled: float
    ratio: float
    expected_ratio: float
    exponents: dict
    net_exponent: float
    consistent: bool


def conformal_relation(m_base: MetricSpec, gamma, m_form: QuadraticForm,
                       quad: CovectorQuadruple, tol=1e-10) -> ConformalScalingReport:
    """Compare the interaction coefficient under g and exp(2 gamma) g.

    The coefficient picks up ``exp(-4 gamma(q0))``.  Composed with the
    symbolic propagator factors -- one outgoing leg contributing
    ``exp(+3 gamma(q0))`` and four incoming legs contributing
    ``exp(-gamma(q0))`` each -- the net scaling exponent of the quartic
    response is ``-5 gamma(q0)``.  Both metrics share the light cone, so the
    same quadruple qualifies for both.
    """
    if isinstance(gamma, (int, float)):
        gamma = ScalarField.constant(gamma)
    elif not isinstance(gamma, ScalarField):
        gamma = ScalarField(gamma)
    g_scaled = conformal_scale(m_base, gamma)

    p_base = interaction_P(m_base, m_form, quad)
    p_scaled = interaction_P(g_scaled, m_form, quad)
    gq0 = float(gamma(quad.q0[None, :])[0])
    expected = math.exp(-4.0 * gq0)
    ratio = p_scaled / p_base if p_base != 0.0 else float("nan")
    consistent = (p_base != 0.0) and abs(ratio - expected) <= tol * max(1.0, abs(expected))

    exponents = {"interaction": -4.0, "outgoing_leg": 3.0, "incoming_legs": -4.0}
    net = sum(exponents.values())
    return ConformalScalingReport(gq0, p_base, p_scaled, ratio, expected,
                                  exponents, net, consistent)


# ---------------------------------------------------------------------------
# batch reports
# ---------------------------------------------------------------------------

@dataclass
class InteractionReport:
    """One quadruple's coefficients plus the recorded denominators."""

    p: float
    a: float
    b: float
    rank: int
    sum_norm2: float
    quad: CovectorQuadruple
    metric_label: str
    form_label: str
    denominators: dict

    def row(self, seed):
        return {"seed": seed, "gstar_zz": self.sum_norm2, "P": self.p,
                "A": self.a, "B": self.b, "rank": self.rank}


def interaction_report(m: MetricSpec, m_form: QuadraticForm,
                       quad: CovectorQuadruple) -> InteractionReport:
    G = dual_metric(m, quad.q0)
    denoms = {str(k): v for k, v in _denominators(G, quad.zetas).items()}
    return InteractionReport(
        p=interaction_P(m, m_form, quad),
        a=coefficient_A(m, quad),
        b=coefficient_B(m, quad),
        rank=rank_certificate(m, m_form, quad).rank,
        sum_norm2=quad.sum_norm2,
        quad=quad,
        metric_label=m.label,
        form_label=m_form.label,
        denominators=denoms,
    )
