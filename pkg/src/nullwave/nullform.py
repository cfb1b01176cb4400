"""Quadratic-form algebra on tangent vectors.

A quadratic form is an x-dependent (d+1)x(d+1) matrix ``W`` acting on tangent
vectors as ``w(xi, eta) = xi^a W_ab eta^b``.  Matrices are stored without
symmetrization so antisymmetric basis elements are representable; the null
test depends only on the symmetric part.

A form is *null* when it vanishes on the light cone diagonal.  Such forms
decompose uniquely as a multiple of the metric plus antisymmetric basis
elements; the decomposition here is constructive and doubles as the null
test with an explicit failure witness.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConeDegenerate, NotANullForm, PivotNotFound
from .geometry import MetricSpec, _comps

__all__ = [
    "QuadraticForm",
    "Decomposition",
    "NonlinearTerm",
    "AssumptionReport",
    "basis_E",
    "basis_F",
    "basis_G",
    "metric_form",
    "constant_form",
    "parse_form",
    "evaluate",
    "sample_null_cone",
    "is_null_form",
    "decompose_null_form",
    "null_factor_field",
    "classify_nonlinearity",
]

TOL_NULL = 1e-10
TOL_DEC = 1e-9


# ---------------------------------------------------------------------------
# basis elements
# ---------------------------------------------------------------------------

def basis_E(a, b, n=4):
    """Antisymmetric element: +1 at (a, b), -1 at (b, a), a < b."""
    if not 0 <= a < b < n:
        raise ValueError("need 0 <= a < b < n")
    m = np.zeros((n, n))
    m[a, b] = 1.0
    m[b, a] = -1.0
    return m


def basis_F(a, b, n=4):
    """Symmetric off-diagonal element: +1 at (a, b) and (b, a), a < b."""
    if not 0 <= a < b < n:
        raise ValueError("need 0 <= a < b < n")
    m = np.zeros((n, n))
    m[a, b] = 1.0
    m[b, a] = 1.0
    return m


def basis_G(a, n=4):
    """Diagonal element: +1 at (a, a)."""
    if not 0 <= a < n:
        raise ValueError("need 0 <= a < n")
    m = np.zeros((n, n))
    m[a, a] = 1.0
    return m


# ---------------------------------------------------------------------------
# quadratic forms
# ---------------------------------------------------------------------------

class QuadraticForm:
    """x-dependent bilinear form on tangent vectors.

    ``matrix(x)`` broadcasts like the metric evaluators: ``(..., n, n)`` for a
    point stack ``(..., n)``.
    """

    def __init__(self, matrix_fn, label="form"):
        self._matrix_fn = matrix_fn
        self.label = label

    def matrix(self, x):
        return np.asarray(self._matrix_fn(np.asarray(x, dtype=float)), dtype=float)

    def __call__(self, x, xi, eta):
        return evaluate(self, x, xi, eta)

    def __repr__(self):
        return f"QuadraticForm({self.label})"


def constant_form(mat, label=None):
    mat = np.asarray(mat, dtype=float)

    def fn(x):
        return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape).copy()

    return QuadraticForm(fn, label=label or "constant")


def metric_form(m: MetricSpec):
    """The metric itself viewed as a quadratic form (always null)."""
    return QuadraticForm(m.matrix, label="g")


_TERM_RE = re.compile(
    r"^\s*(?P<coef>[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?\s*\*\s*)?"
    r"(?P<name>g|identity|[EFG]\d\d?|G\d)\s*$")


def parse_form(spec, metric: Optional[MetricSpec] = None, n=4) -> QuadraticForm:
    """Build a form from a numeric matrix or a basis-combination string.

    String grammar: signed terms ``coef*name`` joined by ``+``/``-``, where a
    name is ``g`` (the scenario metric), ``identity``, ``Eab``, ``Fab``, or
    ``Ga`` with single-digit indices, e.g. ``"3*g + 2*E01 - 1*E23"``.
    """
    if isinstance(spec, QuadraticForm):
        return spec
    if not isinstance(spec, str):
        return constant_form(np.asarray(spec, dtype=float), label="matrix")

    if metric is not None:
        n = metric.n
    const = np.zeros((n, n))
    uses_metric = False
    metric_coef = 0.0

    # split into signed terms
    cleaned = spec.replace("-", "+-")
    terms = [t for t in cleaned.split("+") if t.strip()]
    for term in terms:
        t = term.strip()
        sign = 1.0
        if t.startswith("-"):
            sign = -1.0
            t = t[1:].strip()
        match = _TERM_RE.match(t)
        if not match:
            raise ValueError(f"cannot parse form term {term!r} in {spec!r}")
        coef = sign
        if match.group("coef"):
            coef *= float(match.group("coef").rstrip("* \t"))
        name = match.group("name")
        if name == "g":
            uses_metric = True
            metric_coef += coef
        elif name == "identity":
            const += coef * np.eye(n)
        elif name[0] == "E":
            const += coef * basis_E(int(name[1]), int(name[2]), n)
        elif name[0] == "F":
            const += coef * basis_F(int(name[1]), int(name[2]), n)
        else:
            const += coef * basis_G(int(name[1]), n)

    if uses_metric:
        if metric is None:
            raise ValueError(f"form {spec!r} refers to g but no metric was given")

        def fn(x, _c=const.copy(), _mc=metric_coef):
            return _mc * metric.matrix(x) + np.broadcast_to(
                _c, np.shape(x)[:-1] + _c.shape)

        return QuadraticForm(fn, label=spec)
    return constant_form(const, label=spec)


def evaluate(w: QuadraticForm, x, xi, eta) -> float:
    """Bilinear evaluation on two tangent vectors."""
    a = _comps(xi, "vector")
    b = _comps(eta, "vector")
    return float(a @ w.matrix(x) @ b)


# ---------------------------------------------------------------------------
# null cone sampling and the null test
# ---------------------------------------------------------------------------

def sample_null_cone(m: MetricSpec, x, n, rng=None):
    """n null tangent vectors at x, shape (n, d+1).

    Each sample solves ``g(e_0 + lam*u, e_0 + lam*u) = 0`` for a random unit
    spatial direction u; both roots are used to cover the full cone.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = np.asarray(x, dtype=float)
    g = m.matrix(x)
    dim = m.dim
    out = np.empty((n, dim + 1))
    e0 = np.zeros(dim + 1)
    e0[0] = 1.0
    for k in range(n):
        u = np.zeros(dim + 1)
        spatial = rng.normal(size=dim)
        u[1:] = spatial / np.linalg.norm(spatial)
        a = float(u @ g @ u)
        b = 2.0 * float(e0 @ g @ u)
        c = float(e0 @ g @ e0)
        disc = b * b - 4.0 * a * c
        if a == 0.0 or disc < 0.0:
            raise ConeDegenerate(
                f"null-cone quadratic has no real root at {x} (disc={disc:.3e})")
        root = (-b + np.sqrt(disc)) / (2.0 * a) if k % 2 == 0 \
            else (-b - np.sqrt(disc)) / (2.0 * a)
        out[k] = e0 + root * u
    return out


def is_null_form(w: QuadraticForm, m: MetricSpec, x, n_samples=200,
                 tol_null=TOL_NULL, rng=None) -> bool:
    """Sampled null test: max |w(v, v)| / |v|^2 over the cone below tolerance."""
    if n_samples < 50:
        raise ValueError("need at least 50 cone samples")
    vs = sample_null_cone(m, x, n_samples, rng=rng)
    W = w.matrix(x)
    vals = np.einsum("ka,ab,kb->k", vs, W, vs)
    norms = np.einsum("ka,ka->k", vs, vs)
    return bool(np.max(np.abs(vals) / norms) <= tol_null)


# ---------------------------------------------------------------------------
# constructive decomposition
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    """Null form written as c0 * g plus antisymmetric basis coefficients."""

    c0: float
    antisym: dict
    x: np.ndarray
    residual: float

    def matrix(self, m: MetricSpec):
        n = m.n
        out = self.c0 * m.matrix(self.x)
        for (a, b), coef in self.antisym.items():
            out += coef * basis_E(a, b, n)
        return out


def _sym_coefficients(S):
    """Coefficients of a symmetric matrix in the F/G family, keyed by (a, b)."""
    n = S.shape[0]
    coefs = {}
    for a in range(n):
        coefs[(a, a)] = S[a, a]
        for b in range(a + 1, n):
            coefs[(a, b)] = S[a, b]
    return coefs


def decompose_null_form(w: QuadraticForm, m: MetricSpec, x, tol_dec=TOL_DEC,
                        pivot=None) -> Decomposition:
    """Expand w in the antisymmetric/symmetric basis and factor out the metric.

    The antisymmetric part is read off directly.  The symmetric part is
    compared against the metric by pivoting on a nonzero symmetric-family
    coefficient of g (any index pair may serve; ``pivot`` forces one).  The
    form is null exactly when the residual after removing ``c0 * g``
    vanishes; otherwise NotANullForm carries the worst offending coefficient.
    """
    x = np.asarray(x, dtype=float)
    W = w.matrix(x)
    g = m.matrix(x)
    n = g.shape[0]

    A = 0.5 * (W - W.T)
    S = 0.5 * (W + W.T)
    s_coef = _sym_coefficients(S)
    g_coef = _sym_coefficients(g)

    if pivot is None:
        pivot = max(g_coef, key=lambda k: abs(g_coef[k]))
    if abs(g_coef[pivot]) < 1e-14:
        if max(abs(v) for v in g_coef.values()) < 1e-14:
            raise PivotNotFound(f"metric has no usable symmetric coefficient at {x}")
        raise PivotNotFound(f"requested pivot {pivot} has zero metric coefficient")

    c0 = s_coef[pivot] / g_coef[pivot]
    residual_mat = S - c0 * g
    r_coef = _sym_coefficients(residual_mat)
    worst = max(r_coef, key=lambda k: abs(r_coef[k]))
    scale = max(1.0, float(np.max(np.abs(W))))
    if abs(r_coef[worst]) > tol_dec * scale:
        raise NotANullForm(r_coef[worst], worst)

    antisym = {}
    for a in range(n):
        for b in range(a + 1, n):
            if abs(A[a, b]) > 0.0:
                antisym[(a, b)] = float(A[a, b])
    return Decomposition(float(c0), antisym, x, float(abs(r_coef[worst])))


def null_factor_field(w: QuadraticForm, m: MetricSpec, x):
    """Vectorized metric factor c0(x) of a (verified) null form.

    Broadcasts over point stacks; no residual check is performed, so callers
    are expected to have classified the form first.
    """
    x = np.asarray(x, dtype=float)
    S = w.matrix(x)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    g = m.matrix(x)
    flat_g = g.reshape(g.shape[:-2] + (-1,))
    flat_s = S.reshape(S.shape[:-2] + (-1,))
    idx = np.argmax(np.abs(flat_g), axis=-1)
    take = lambda arr: np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]
    return take(flat_s) / take(flat_g)


# ---------------------------------------------------------------------------
# nonlinearity classification
# ---------------------------------------------------------------------------

@dataclass
class NonlinearTerm:
    """Taylor data of a gradient-quadratic nonlinearity.

    ``w(x, u, grad) = n0(grad, grad) + u * n1(grad, grad) + u^2 * m_form(grad, grad)``
    on tangent gradients.  ``c0``/``c1`` hold the metric factors of n0/n1 once
    the classification has produced them.  Higher-order remainder terms are
    flagged and ignored by all expansion code.
    """

    n0: Optional[QuadraticForm] = None
    n1: Optional[QuadraticForm] = None
    m_form: Optional[QuadraticForm] = None
    c0: Optional[Callable] = None
    c1: Optional[Callable] = None
    has_remainder: bool = False

    @property
    def is_zero(self):
        return self.n0 is None and self.n1 is None and self.m_form is None


@dataclass
class AssumptionReport:
    """Per-point verdicts for the null/null/non-null classification."""

    satisfied: bool
    n0_null: list
    n1_null: list
    m_null: list
    points: np.ndarray
    c0_values: Optional[np.ndarray]
    c1_values: Optional[np.ndarray]
    witness: Optional[dict] = None

    def summary(self):
        return {
            "satisfied": bool(self.satisfied),
            "n0_null_everywhere": bool(all(self.n0_null)) if self.n0_null else True,
            "n1_null_everywhere": bool(all(self.n1_null)) if self.n1_null else True,
            "m_nonnull_somewhere": bool(not all(self.m_null)) if self.m_null else False,
            "witness": self.witness,
        }


def classify_nonlinearity(nl: NonlinearTerm, m: MetricSpec, sample_points,
                          n_samples=200, tol_dec=TOL_DEC, rng=None) -> AssumptionReport:
    """Check that n0 and n1 decompose everywhere sampled while m_form fails somewhere.

    On success the report carries the metric factors of n0 and n1 at the
    sample points and the term's ``c0``/``c1`` callables are populated.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    n0_null, n1_null, m_null = [], [], []
    c0_vals = np.zeros(len(pts))
    c1_vals = np.zeros(len(pts))
    witness = None
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    for k, x in enumerate(pts):
        for form, target, record in (
                (nl.n0, n0_null, 0), (nl.n1, n1_null, 1)):
            if form is None:
                target.append(True)
                if record == 0:
                    c0_vals[k] = 0.0
                else:
                    c1_vals[k] = 0.0
                continue
            try:
                dec = decompose_null_form(form, m, x, tol_dec=tol_dec)
                target.append(True)
                if record == 0:
                    c0_vals[k] = dec.c0
                else:
                    c1_vals[k] = dec.c0
            except NotANullForm as err:
                target.append(False)
                if witness is None:
                    witness = {"form": "n0" if record == 0 else "n1",
                               "point": x.tolist(),
                               "coefficient": float(err.residual),
                               "index": list(err.index)}
        if nl.m_form is None:
            m_null.append(True)
        else:
            m_null.append(is_null_form(nl.m_form, m, x, n_samples=max(n_samples, 50),
                                       rng=rng))

    m_fails_somewhere = (nl.m_form is not None) and (not all(m_null))
    satisfied = all(n0_null) and all(n1_null) and m_fails_somewhere
    if all(n0_null) and all(n1_null):
        # metric factors are available whenever the first two slots are null,
        # whether or not the third slot passes
        nl.c0 = _factor_callable(nl.n0, m)
        nl.c1 = _factor_callable(nl.n1, m)
    if nl.m_form is not None and all(m_null) and witness is None:
        witness = {"form": "m", "reason": "m_form is null at every sampled point"}
    return AssumptionReport(satisfied, n0_null, n1_null, m_null, pts,
                            c0_vals if all(n0_null) else None,
                            c1_vals if all(n1_null) else None,
                            witness)


def _factor_callable(form, m):
    if form is None:
        return lambda x: np.zeros(np.shape(x)[:-1])
    return lambda x, _f=form, _m=m: null_factor_field(_f, _m, x)
