"""Lorentzian linear algebra, geodesic flow, conjugate points, and causal tests.

Coordinates are ``x = (t, x^1, ..., x^d)`` with the time coordinate first.
Metric signature is ``(-, +, ..., +)`` and the coordinate ``t`` is assumed to
be a time function for every cataloged metric.  All evaluators broadcast: a
point argument may be a single ``(d+1,)`` array or any ``(..., d+1)`` stack.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConeDegenerate,
    ConjugateBeforeT0,
    KindMismatch,
    SingularMetric,
    StepOutOfDomain,
    ZeroVector,
)

__all__ = [
    "ScalarField",
    "MatrixField",
    "Vector",
    "Covector",
    "MetricSpec",
    "GeodesicPath",
    "FlowoutSurface",
    "CausalSearchConfig",
    "minkowski",
    "conformal_minkowski",
    "conformal_scale",
    "ultrastatic_sphere",
    "product_metric",
    "coefficient_table",
    "derivative_check",
    "dual_metric",
    "signature_ok",
    "raise_index",
    "lower_index",
    "inner",
    "causal_character",
    "christoffel",
    "geodesic_trace",
    "first_conjugate_time",
    "flowout_surface",
    "causally_precedes",
    "chronologically_precedes",
    "path_to_csv",
]

DET_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# scalar / matrix coefficient fields
# ---------------------------------------------------------------------------

class ScalarField:
    """Scalar function of a point with a gradient.

    ``fn`` must broadcast over leading axes of the point array.  When no
    analytic gradient is supplied the gradient falls back to central
    differences with step ``fd_step``.
    """

    def __init__(self, fn, grad=None, fd_step=1e-6, time_dependent=True):
        self.fn = fn
        self.grad_fn = grad
        self.fd_step = fd_step
        self.time_dependent = time_dependent

    @staticmethod
    def constant(value):
        value = float(value)
        return ScalarField(
            lambda x: np.full(np.shape(x)[:-1], value),
            grad=lambda x: np.zeros(np.shape(x)),
            time_dependent=False,
        )

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x), dtype=float)
        n = x.shape[-1]
        h = self.fd_step
        out = np.empty(x.shape)
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            out[..., k] = (self(x + e) - self(x - e)) / (2.0 * h)
        return out


class MatrixField:
    """Matrix-valued function of a point, with finite-difference derivatives."""

    def __init__(self, fn, grad=None, fd_step=1e-5, time_dependent=True):
        self.fn = fn
        self.grad_fn = grad
        self.fd_step = fd_step
        self.time_dependent = time_dependent

    @staticmethod
    def constant(mat):
        mat = np.asarray(mat, dtype=float)

        def fn(x):
            return np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape).copy()

        def grad(x):
            n = np.shape(x)[-1]
            return np.zeros(np.shape(x)[:-1] + (n,) + mat.shape)

        return MatrixField(fn, grad=grad, time_dependent=False)

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x):
        """Index layout ``[..., k, a, b]`` for the derivative along coordinate k."""
        x = np.asarray(x, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x), dtype=float)
        n = x.shape[-1]
        h = self.fd_step
        probe = self(x)
        out = np.empty(x.shape[:-1] + (n,) + probe.shape[len(x.shape) - 1:])
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            out[..., k, :, :] = (self(x + e) - self(x - e)) / (2.0 * h)
        return out


# ---------------------------------------------------------------------------
# tangent / cotangent wrappers
# ---------------------------------------------------------------------------

class _Components:
    """Shared arithmetic for index-tagged component tuples."""

    kind = "abstract"

    def __init__(self, components):
        self.components = np.asarray(components, dtype=float)
        if self.components.ndim != 1:
            raise ValueError("expected a flat component tuple")

    def _check(self, other):
        if not isinstance(other, _Components) or other.kind != self.kind:
            raise KindMismatch(
                f"cannot combine {self.kind} with {getattr(other, 'kind', type(other))}")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.components + other.components)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.components - other.components)

    def __mul__(self, scalar):
        return type(self)(self.components * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(-self.components)

    def __len__(self):
        return len(self.components)

    def norm(self):
        return float(np.linalg.norm(self.components))

    def __repr__(self):
        return f"{type(self).__name__}({self.components.tolist()})"


class Vector(_Components):
    """Tangent vector (upper index)."""

    kind = "vector"


class Covector(_Components):
    """Cotangent vector (lower index)."""

    kind = "covector"


def _comps(v, kind=None):
    """Accept a wrapper or a bare array; enforce the kind when one is tagged."""
    if isinstance(v, _Components):
        if kind is not None and v.kind != kind:
            raise KindMismatch(f"expected a {kind}, got a {v.kind}")
        return v.components
    return np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# metric catalog
# ---------------------------------------------------------------------------

class MetricSpec:
    """Analytic Lorentzian metric with matrix and derivative evaluators.

    ``matrix(x)`` returns ``g_ij`` with shape ``(..., d+1, d+1)``;
    ``matrix_deriv(x)`` returns ``d_k g_ij`` with shape ``(..., d+1, d+1, d+1)``
    indexed ``[..., k, i, j]``.
    """

    def __init__(self, kind, dim, matrix_fn, deriv_fn, *, cone_exact=False,
                 time_dependent=True, label=None):
        self.kind = kind
        self.dim = int(dim)
        self._matrix_fn = matrix_fn
        self._deriv_fn = deriv_fn
        self.cone_exact = bool(cone_exact)
        self.time_dependent = bool(time_dependent)
        self.label = label or kind

    @property
    def n(self):
        """Spacetime dimension d+1."""
        return self.dim + 1

    def matrix(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"point has {x.shape[-1]} coordinates, expected {self.n}")
        return np.asarray(self._matrix_fn(x), dtype=float)

    def matrix_deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self._deriv_fn(x), dtype=float)

    def __repr__(self):
        return f"MetricSpec({self.label!r}, d={self.dim})"


def _eta(n):
    e = np.eye(n)
    e[0, 0] = -1.0
    return e


def minkowski(dim=3):
    """Flat metric diag(-1, 1, ..., 1)."""
    n = dim + 1
    eta = _eta(n)

    def mat(x):
        return np.broadcast_to(eta, x.shape[:-1] + (n, n)).copy()

    def deriv(x):
        return np.zeros(x.shape[:-1] + (n, n, n))

    return MetricSpec("minkowski", dim, mat, deriv,
                      cone_exact=True, time_dependent=False)


def conformal_minkowski(gamma, dim=3):
    """``exp(2*gamma(x))`` times the flat metric; same light cones as flat."""
    if not isinstance(gamma, ScalarField):
        gamma = ScalarField(gamma)
    return conformal_scale(minkowski(dim), gamma, kind="conformal_minkowski",
                           cone_exact=True)


def conformal_scale(base: MetricSpec, gamma, *, kind=None, cone_exact=None):
    """Rescale any metric by ``exp(2*gamma(x))``.  Light cones are unchanged."""
    if not isinstance(gamma, ScalarField):
        gamma = ScalarField(gamma)
    n = base.n

    def mat(x):
        return np.exp(2.0 * gamma(x))[..., None, None] * base.matrix(x)

    def deriv(x):
        g = base.matrix(x)
        dg = base.matrix_deriv(x)
        w = np.exp(2.0 * gamma(x))[..., None, None, None]
        dgam = gamma.gradient(x)
        return w * (dg + 2.0 * dgam[..., :, None, None] * g[..., None, :, :])

    return MetricSpec(
        kind or f"conformal({base.kind})", base.dim, mat, deriv,
        cone_exact=base.cone_exact if cone_exact is None else cone_exact,
        time_dependent=base.time_dependent or gamma.time_dependent,
        label=f"e^2gamma*{base.label}")


def ultrastatic_sphere():
    """-dt^2 plus the round 2-sphere metric in (theta, phi) coordinates (d = 2)."""

    def mat(x):
        th = x[..., 1]
        g = np.zeros(x.shape[:-1] + (3, 3))
        g[..., 0, 0] = -1.0
        g[..., 1, 1] = 1.0
        g[..., 2, 2] = np.sin(th) ** 2
        return g

    def deriv(x):
        th = x[..., 1]
        dg = np.zeros(x.shape[:-1] + (3, 3, 3))
        dg[..., 1, 2, 2] = 2.0 * np.sin(th) * np.cos(th)
        return dg

    return MetricSpec("ultrastatic_sphere", 2, mat, deriv, time_dependent=False)


def product_metric(beta: ScalarField, kappa: MatrixField, dim):
    """Globally hyperbolic normal form ``-beta(t,y) dt^2 + kappa(t,y)``."""
    n = dim + 1

    def mat(x):
        g = np.zeros(x.shape[:-1] + (n, n))
        g[..., 0, 0] = -beta(x)
        g[..., 1:, 1:] = kappa(x)
        return g

    def deriv(x):
        dg = np.zeros(x.shape[:-1] + (n, n, n))
        dg[..., :, 0, 0] = -beta.gradient(x)
        dg[..., :, 1:, 1:] = kappa.gradient(x)
        return dg

    return MetricSpec(
        "product", dim, mat, deriv,
        time_dependent=beta.time_dependent or kappa.time_dependent)


def coefficient_table(fn, dim, fd_step=1e-5, deriv=None, time_dependent=True,
                      label="coefficient_table"):
    """Metric given by an arbitrary coefficient evaluator.

    Derivatives default to central differences with step ``fd_step``; use
    :func:`derivative_check` to Richardson-test them at sample points.
    """
    table = MatrixField(fn, grad=deriv, fd_step=fd_step,
                        time_dependent=time_dependent)
    return MetricSpec("coefficient_table", dim, table, table.gradient,
                      time_dependent=time_dependent, label=label)


def derivative_check(m: MetricSpec, x, fd_step=1e-5):
    """Richardson consistency of finite-difference metric derivatives.

    Returns the max absolute difference between the step ``h`` and step
    ``h/2`` central-difference derivative at ``x``.
    """
    x = np.asarray(x, dtype=float)
    n = m.n

    def fd(h):
        out = np.empty((n, n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            out[k] = (m.matrix(x + e) - m.matrix(x - e)) / (2.0 * h)
        return out

    return float(np.max(np.abs(fd(fd_step) - fd(fd_step / 2.0))))


# ---------------------------------------------------------------------------
# pointwise algebra
# ---------------------------------------------------------------------------

def dual_metric(m: MetricSpec, x):
    """Inverse metric ``g^ij`` at ``x``; raises SingularMetric near degeneracy."""
    g = m.matrix(x)
    det = np.linalg.det(g)
    if np.any(np.abs(det) < DET_FLOOR):
        raise SingularMetric(f"|det g| = {np.min(np.abs(det)):.3e} at {x}")
    return np.linalg.inv(g)


def signature_ok(m: MetricSpec, x, sym_tol=1e-12) -> bool:
    """Check the Lorentzian invariants at ``x``.

    Symmetric matrix, negative determinant, exactly one negative eigenvalue,
    and a timelike coordinate-time direction (g_00 < 0).
    """
    g = m.matrix(np.asarray(x, dtype=float))
    if np.max(np.abs(g - np.swapaxes(g, -1, -2))) > sym_tol * max(
            1.0, float(np.max(np.abs(g)))):
        return False
    if not np.all(np.linalg.det(g) < 0):
        return False
    eig = np.linalg.eigvalsh(g)
    if not np.all(np.sum(eig < 0, axis=-1) == 1):
        return False
    return bool(np.all(g[..., 0, 0] < 0))


def raise_index(m: MetricSpec, x, xi) -> Vector:
    """``xi^# = g^{ij} xi_j``."""
    comps = _comps(xi, "covector")
    return Vector(dual_metric(m, x) @ comps)


def lower_index(m: MetricSpec, x, v) -> Covector:
    """``v^flat = g_{ij} v^j``."""
    comps = _comps(v, "vector")
    return Covector(m.matrix(x) @ comps)


def inner(m: MetricSpec, x, a, b) -> float:
    """Metric pairing of two same-kind objects; covectors use ``g^{ij}``."""
    if isinstance(a, _Components) or isinstance(b, _Components):
        ka = a.kind if isinstance(a, _Components) else None
        kb = b.kind if isinstance(b, _Components) else None
        if ka is not None and kb is not None and ka != kb:
            raise KindMismatch(f"cannot pair {ka} with {kb}")
        kind = ka or kb
    else:
        kind = "vector"
    ca, cb = _comps(a), _comps(b)
    mat = m.matrix(x) if kind == "vector" else dual_metric(m, x)
    return float(ca @ mat @ cb)


def causal_character(m: MetricSpec, x, v, tol_null=1e-9) -> str:
    """Classify ``v`` as timelike / null / spacelike with a null band."""
    comps = _comps(v)
    norm2 = float(comps @ comps)
    if norm2 == 0.0:
        raise ZeroVector("cannot classify the zero vector")
    if isinstance(v, Covector):
        q = float(comps @ dual_metric(m, x) @ comps)
    else:
        q = float(comps @ m.matrix(x) @ comps)
    if abs(q) <= tol_null * norm2:
        return "null"
    return "timelike" if q < 0.0 else "spacelike"


def christoffel(m: MetricSpec, x):
    """Connection coefficients ``Gamma^i_{jk}`` from the metric derivatives."""
    ginv = dual_metric(m, x)
    dg = m.matrix_deriv(x)
    # Gamma^i_jk = 1/2 g^{il} (d_j g_lk + d_k g_lj - d_l g_jk)
    bracket = (np.einsum("...jlk->...ljk", dg)
               + np.einsum("...klj->...ljk", dg)
               - np.einsum("...ljk->...ljk", dg))
    return 0.5 * np.einsum("...il,...ljk->...ijk", ginv, bracket)


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------

@dataclass
class GeodesicPath:
    """Sampled geodesic with parameters, points, and velocities."""

    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    character: str
    h: float
    metric: MetricSpec

    def __len__(self):
        return len(self.s)

    @property
    def start(self):
        return self.x[0]

    @property
    def initial_velocity(self):
        return self.v[0]

    def conservation_defect(self):
        """Max drift of g(xdot, xdot) along the path."""
        g = self.metric.matrix(self.x)
        q = np.einsum("...i,...ij,...j->...", self.v, g, self.v)
        return float(np.max(np.abs(q - q[0])))

    def point_at(self, s):
        """Linear interpolation of the sampled path."""
        return np.stack(
            [np.interp(s, self.s, self.x[:, i]) for i in range(self.x.shape[1])],
            axis=-1)


def _geodesic_rhs(m, x, v):
    gam = christoffel(m, x)
    return v, -np.einsum("ijk,j,k->i", gam, v, v)


def _rk4_step(m, x, v, h):
    k1x, k1v = _geodesic_rhs(m, x, v)
    k2x, k2v = _geodesic_rhs(m, x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = _geodesic_rhs(m, x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = _geodesic_rhs(m, x + h * k3x, v + h * k3v)
    x_new = x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


def _in_box(x, box):
    if box is None:
        return True
    box = np.asarray(box, dtype=float)
    return bool(np.all(x >= box[:, 0]) and np.all(x <= box[:, 1]))


def geodesic_trace(m: MetricSpec, x0, theta0, s_max, h, box=None,
                   stop: Optional[Callable[[np.ndarray], bool]] = None) -> GeodesicPath:
    """Integrate the geodesic equation with a classical fourth-order step.

    ``box`` is an optional ``(d+1, 2)`` coordinate box; leaving it raises
    StepOutOfDomain.  ``stop`` is an optional early-exit predicate on points.
    """
    x = np.asarray(x0, dtype=float).copy()
    v = _comps(theta0, "vector").copy()
    if float(v @ v) == 0.0:
        raise ZeroVector("geodesic needs a nonzero initial direction")
    if h <= 0:
        raise ValueError("step size must be positive")

    character = causal_character(m, x, Vector(v))

    n_steps = max(1, int(math.ceil(s_max / h)))
    ss = [0.0]
    xs = [x.copy()]
    vs = [v.copy()]
    for k in range(n_steps):
        step = min(h, s_max - k * h)
        if step <= 0:
            break
        x, v = _rk4_step(m, x, v, step)
        if not _in_box(x, box):
            raise StepOutOfDomain(x)
        ss.append(ss[-1] + step)
        xs.append(x.copy())
        vs.append(v.copy())
        if stop is not None and stop(x):
            break
    return GeodesicPath(np.array(ss), np.array(xs), np.array(vs),
                        character, h, m)


def path_to_csv(path: GeodesicPath, stream):
    """Write the path as CSV with columns s, x0..xd, v0..vd."""
    n = path.x.shape[1]
    writer = csv.writer(stream)
    writer.writerow(["s"] + [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)])
    for s, x, v in zip(path.s, path.x, path.v):
        writer.writerow([repr(float(s))]
                        + [repr(float(c)) for c in x]
                        + [repr(float(c)) for c in v])


# ---------------------------------------------------------------------------
# conjugate points
# ---------------------------------------------------------------------------

def _transverse_seeds(theta0):
    """d unit vectors spanning a complement of the initial direction."""
    n = len(theta0)
    unit = theta0 / np.linalg.norm(theta0)
    drop = int(np.argmax(np.abs(unit)))
    seeds = []
    for k in range(n):
        if k == drop:
            continue
        e = np.zeros(n)
        e[k] = 1.0
        e -= (e @ unit) * unit
        for prev in seeds:
            e -= (e @ prev) * prev
        e /= np.linalg.norm(e)
        seeds.append(e)
    return np.stack(seeds, axis=1)  # (n, d)


def _christoffel_gradient(m, x, fd_step):
    n = len(x)
    out = np.empty((n, n, n, n))  # [l, i, j, k] = d_l Gamma^i_jk
    for l in range(n):
        e = np.zeros(n)
        e[l] = fd_step
        out[l] = (christoffel(m, x + e) - christoffel(m, x - e)) / (2.0 * fd_step)
    return out


def _jacobi_rhs(m, x, v, J, Jp, fd_step):
    gam = christoffel(m, x)
    dgam = _christoffel_gradient(m, x, fd_step)
    acc = -np.einsum("ijk,j,k->i", gam, v, v)
    # linearized geodesic equation along each seed column
    dJp = (-np.einsum("lijk,ls,j,k->is", dgam, J, v, v)
           - 2.0 * np.einsum("ijk,j,ks->is", gam, v, Jp))
    return v, acc, Jp, dJp


def _jacobi_step(m, x, v, J, Jp, h, fd_step):
    k1 = _jacobi_rhs(m, x, v, J, Jp, fd_step)
    k2 = _jacobi_rhs(m, x + 0.5 * h * k1[0], v + 0.5 * h * k1[1],
                     J + 0.5 * h * k1[2], Jp + 0.5 * h * k1[3], fd_step)
    k3 = _jacobi_rhs(m, x + 0.5 * h * k2[0], v + 0.5 * h * k2[1],
                     J + 0.5 * h * k2[2], Jp + 0.5 * h * k2[3], fd_step)
    k4 = _jacobi_rhs(m, x + h * k3[0], v + h * k3[1],
                     J + h * k3[2], Jp + h * k3[3], fd_step)
    upd = lambda a, i: a + (h / 6.0) * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
    return upd(x, 0), upd(v, 1), upd(J, 2), upd(Jp, 3)


def first_conjugate_time(m: MetricSpec, path: GeodesicPath, tol_conj=1e-8,
                         fd_step=1e-5) -> Optional[float]:
    """Smallest parameter where the transverse Jacobi block degenerates.

    Seeds d Jacobi fields with J(0) = 0 and independent transverse initial
    derivatives, tracks the normalized determinant of
    ``[J_1(s)/s, ..., J_d(s)/s, xdot(s)]``, and refines the first sign change
    or sub-threshold value by bisection.  Returns None when no degeneracy
    occurs within the path range.
    """
    x = path.x[0].copy()
    v = path.v[0].copy()
    seeds = _transverse_seeds(v)
    n = len(x)
    J = np.zeros((n, seeds.shape[1]))
    Jp = seeds.copy()
    h = path.h
    s_max = float(path.s[-1])

    def normdet(s, J, v):
        if s <= 0:
            return None
        cols = np.column_stack([J / s, v])
        return float(np.linalg.det(cols))

    s = 0.0
    prev = None
    prev_state = (x.copy(), v.copy(), J.copy(), Jp.copy(), s)
    ref = None
    while s < s_max - 1e-14:
        step = min(h, s_max - s)
        state = (x.copy(), v.copy(), J.copy(), Jp.copy(), s)
        x, v, J, Jp = _jacobi_step(m, x, v, J, Jp, step, fd_step)
        s += step
        d = normdet(s, J, v)
        if ref is None:
            ref = d
            prev = d
            prev_state = state
            continue
        degenerate = abs(d) < tol_conj * abs(ref) or d * prev < 0.0
        if degenerate:
            return _bisect_conjugate(m, prev_state, s, prev, ref, tol_conj,
                                     fd_step, normdet)
        prev = d
        prev_state = (x.copy(), v.copy(), J.copy(), Jp.copy(), s)
    return None


def _bisect_conjugate(m, state, s_hi, d_lo, ref, tol_conj, fd_step, normdet):
    x0, v0, J0, Jp0, s_lo = state

    def eval_at(s):
        x, v, J, Jp = x0.copy(), v0.copy(), J0.copy(), Jp0.copy()
        x, v, J, Jp = _jacobi_step(m, x, v, J, Jp, s - s_lo, fd_step)
        return normdet(s, J, v)

    a, b = s_lo, s_hi
    for _ in range(60):
        mid = 0.5 * (a + b)
        d = eval_at(mid)
        if abs(d) < tol_conj * abs(ref):
            return mid
        if d * d_lo < 0.0:
            b = mid
        else:
            a = mid
        if b - a < 1e-12:
            break
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# flow-out surfaces
# ---------------------------------------------------------------------------

@dataclass
class FlowoutSurface:
    """Null-geodesic flow-out of a perturbed direction ball, with a time slice."""

    base_point: np.ndarray
    base_direction: np.ndarray
    t0: float
    s0: float
    apex_point: np.ndarray
    apex_direction: np.ndarray
    paths: list
    slice_points: np.ndarray
    slice_tol: float


def _null_with_spatial(m, x, omega, t_comp=1.0):
    """Future null vector at x with spatial part proportional to omega."""
    g = m.matrix(x)
    n = len(x)
    v = np.zeros(n)
    v[0] = t_comp
    u = np.zeros(n)
    u[1:] = omega
    # g(v0 + lam*u, v0 + lam*u) = 0 solved for lam > 0
    a = float(u @ g @ u)
    b = 2.0 * float(v @ g @ u)
    c = float(v @ g @ v)
    disc = b * b - 4.0 * a * c
    if a == 0.0 or disc < 0.0:
        raise ConeDegenerate(f"no real null scaling at {x}")
    lam = (-b + math.sqrt(disc)) / (2.0 * a)
    if lam <= 0.0:
        lam = (-b - math.sqrt(disc)) / (2.0 * a)
    return v + lam * u


def flowout_surface(m: MetricSpec, x0, theta0, t0, s0, n_dirs, h=None,
                    seed=0, s_max=None, box=None) -> FlowoutSurface:
    """Flow out null geodesics from the perturbed direction ball at the apex.

    The apex is the base geodesic at parameter ``t0``; perturbed directions
    stay within the Euclidean ``s0``-ball of the transported direction.  The
    slice collects the sampled points whose time coordinate lies within one
    step of ``2*t0``.
    """
    theta = _comps(theta0, "vector")
    if causal_character(m, x0, Vector(theta), tol_null=1e-8) != "null":
        raise ValueError("flow-out base direction must be null")
    if theta[0] <= 0:
        raise ValueError("flow-out base direction must be future pointing")
    if h is None:
        h = t0 / 64.0
    if s_max is None:
        s_max = 4.0 * t0

    base = geodesic_trace(m, x0, Vector(theta), s_max, h, box=box)
    tau0 = first_conjugate_time(m, base)
    if tau0 is not None and t0 >= tau0:
        raise ConjugateBeforeT0(
            f"t0 = {t0} is not before the first conjugate parameter {tau0:.6f}")

    # state at the apex parameter
    idx = int(np.searchsorted(base.s, t0))
    idx = min(idx, len(base.s) - 1)
    x_apex = base.x[idx]
    v_apex = base.v[idx]
    omega_apex = v_apex[1:].copy()
    spatial_norm = np.linalg.norm(omega_apex)
    if spatial_norm == 0:
        raise ValueError("apex direction has no spatial part")

    rng = np.random.default_rng(seed)
    d = m.dim
    paths = []
    slice_pts = []
    produced = 0
    attempts = 0
    while produced < n_dirs and attempts < 50 * max(n_dirs, 1):
        attempts += 1
        xi = rng.normal(size=d)
        xi /= np.linalg.norm(xi)
        r = 0.5 * s0 * rng.uniform() ** (1.0 / max(d, 1))
        omega = omega_apex + r * xi * spatial_norm
        try:
            v_new = _null_with_spatial(m, x_apex, omega / np.linalg.norm(omega)
                                       * spatial_norm, t_comp=v_apex[0])
        except ConeDegenerate:
            continue
        if np.linalg.norm(v_new - v_apex) >= s0:
            continue
        p = geodesic_trace(m, x_apex, Vector(v_new), s_max, h, box=box)
        paths.append(p)
        mask = np.abs(p.x[:, 0] - 2.0 * t0) <= h
        if np.any(mask):
            slice_pts.append(p.x[mask])
        produced += 1

    pts = np.concatenate(slice_pts, axis=0) if slice_pts else np.zeros((0, m.n))
    return FlowoutSurface(np.asarray(x0, dtype=float), theta, float(t0),
                          float(s0), x_apex, v_apex, paths, pts, h)


# ---------------------------------------------------------------------------
# causal relations
# ---------------------------------------------------------------------------

@dataclass
class CausalSearchConfig:
    """Knobs for the shooting-based causal test on non-cone-exact metrics."""

    n_dirs: int = 32
    step: float = 0.02
    tol_ball: float = 0.02
    margin: float = 0.05
    boundary_tol: float = 1e-9
    seed: int = 0
    s_max: float = 20.0


def _exact_cone_verdict(p, q, tol):
    delta = q - p
    dt = delta[0]
    dr = float(np.linalg.norm(delta[1:]))
    scale = max(abs(dt), dr, 1.0)
    if dt < -tol * scale:
        return "no"
    if dt + tol * scale >= dr:
        return "yes"
    return "no"


def causally_precedes(m: MetricSpec, p, q, cfg: Optional[CausalSearchConfig] = None) -> str:
    """Three-valued causal order test: ``yes``, ``no``, or ``undecided``.

    Cone-exact metrics (flat and conformally flat) use the exact cone test;
    conformal factors preserve causal structure.  Otherwise null geodesics
    are shot along a deterministic direction lattice and the cone radius
    toward ``q`` is compared with margins.
    """
    cfg = cfg or CausalSearchConfig()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.allclose(p, q):
        return "yes"
    if m.cone_exact:
        return _exact_cone_verdict(p, q, cfg.boundary_tol)

    dt = q[0] - p[0]
    if dt < 0:
        return "no"  # t is a time function for cataloged metrics
    delta_s = q[1:] - p[1:]
    dr = float(np.linalg.norm(delta_s))
    if dr < 1e-12:
        # purely temporal displacement; the coordinate time line is causal
        # whenever g_00 < 0 along it, which holds for the catalog
        return "yes"

    omega = delta_s / dr

    def shoot(direction):
        v0 = _null_with_spatial(m, p, direction)
        stop = lambda x: x[0] > q[0] + 2 * cfg.step
        return geodesic_trace(m, p, Vector(v0), cfg.s_max, cfg.step, stop=stop)

    try:
        ray = shoot(omega)
    except (ConeDegenerate, StepOutOfDomain):
        ray = _lattice_ray_toward(m, p, omega, q, cfg, shoot)
        if ray is None:
            return "undecided"

    # direct hit
    dists = np.linalg.norm(ray.x - q, axis=1)
    if float(np.min(dists)) <= cfg.tol_ball:
        return "yes"

    ts = ray.x[:, 0]
    if ts[-1] < q[0]:
        return "undecided"
    radii = np.linalg.norm(ray.x[:, 1:] - p[1:], axis=1)
    r_cone = float(np.interp(q[0], ts, radii))
    if dr <= r_cone * (1.0 - cfg.margin):
        return "yes"
    if dr >= r_cone * (1.0 + cfg.margin):
        return "no"
    return "undecided"


def _lattice_ray_toward(m, p, omega, q, cfg, shoot):
    """Deterministic direction-lattice fallback for the shooting search.

    Used when the ray aimed straight at the target cannot be constructed;
    returns the closest traceable lattice ray, or None.
    """
    d = len(p) - 1
    rng = np.random.default_rng(cfg.seed)
    best = None
    best_dot = -np.inf
    for k in range(cfg.n_dirs):
        if d == 1:
            cand = np.array([1.0 if k % 2 == 0 else -1.0])
        else:
            cand = rng.standard_normal(d)
            cand /= np.linalg.norm(cand)
        dot = float(cand @ omega)
        if dot <= best_dot:
            continue
        try:
            ray = shoot(cand)
        except (ConeDegenerate, StepOutOfDomain):
            continue
        best, best_dot = ray, dot
    return best


def chronologically_precedes(m: MetricSpec, p, q,
                             cfg: Optional[CausalSearchConfig] = None) -> bool:
    """Strict interior (timelike) order test used by the earliest-set filter."""
    cfg = cfg or CausalSearchConfig()
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.allclose(p, q):
        return False
    if m.cone_exact:
        delta = q - p
        dt = delta[0]
        dr = float(np.linalg.norm(delta[1:]))
        scale = max(abs(dt), dr, 1.0)
        return dt - cfg.boundary_tol * scale > dr
    if causally_precedes(m, p, q, cfg) != "yes":
        return False
    # require a strictly interior point: shrink toward the past and retest
    inner_q = q.copy()
    inner_q[0] -= cfg.margin * max(1.0, abs(q[0] - p[0]))
    return causally_precedes(m, p, inner_q, cfg) == "yes"
