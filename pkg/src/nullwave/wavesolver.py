"""Finite-difference forward solver and asymptotic-expansion extraction.

The solver integrates ``box_g u + w(x, u, grad_g u) = f`` on a uniform grid
in d = 1 or 2 space dimensions with vanishing data before the source turns
on.  The discrete wave operator is the divergence form with face-averaged
coefficients ``sqrt(-det g) g^{ij}``; time stepping is explicit leapfrog, so
the causal inverse is realized by :func:`solve_linear` itself.  Metrics must
be block diagonal in time on the grid (no dt-dx cross terms); the catalog
satisfies this.

Quartic interaction extraction
------------------------------

Substituting ``u = v - Q[w(x, u, grad u)]`` into itself and collecting the
terms of joint first order in the four source amplitudes yields three groups
of permutation sums (quartic, cubic, and doubly-iterated quadratic routes);
:func:`expansion_terms` evaluates them literally, realizing every inner
causal inverse by a linear solve.  The same derivative of the full nonlinear
solution is measured by :func:`mixed_difference` with tensor-product
difference stencils in the amplitudes.

For two sources the iteration gives the second-order reference
``d^2 u / d eps_i d eps_j = -2 Q[c0 g(grad v_i, grad v_j)]``: expanding
``u = v - Q[c0 g(grad u, grad u)] + higher``, the bilinear term in
``v = eps_i v_i + eps_j v_j`` carries the factor 2 from polarization and no
cubic-route contribution survives at that order.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CancellationLoss,
    CourantViolation,
    DivergenceDetected,
    NaNDetected,
    NonContraction,
)
from .geometry import MetricSpec
from .nullform import NonlinearTerm

__all__ = [
    "Grid",
    "GridField",
    "SourceComponent",
    "SourceTerm",
    "ExpansionTerms",
    "ExpansionReport",
    "ConvergenceTable",
    "build_grid",
    "max_characteristic_speed",
    "solve_linear",
    "solve_nonlinear",
    "gradient_field",
    "apply_box",
    "expansion_terms",
    "second_order_reference",
    "mixed_difference",
    "convergence_study",
    "causal_future_mask",
    "bump",
    "bump_prime",
]

BUMP_POWER = 8


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform spacetime grid: cell centers, steps, and the report collar."""

    dim: int
    t: np.ndarray
    axes: tuple
    dt: float
    dx: tuple
    cfl: float
    collar: int

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def nt(self):
        return len(self.t) - 1

    def spatial_mesh(self):
        """Cell-center coordinates stacked along the last axis: (*shape, dim)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def points_at(self, t):
        mesh = self.spatial_mesh()
        out = np.empty(mesh.shape[:-1] + (self.dim + 1,))
        out[..., 0] = t
        out[..., 1:] = mesh
        return out

    def interior(self, extra=0):
        """Slice tuple excluding the sponge collar plus ``extra`` cells."""
        pad = self.collar + extra
        return tuple(slice(pad, n - pad) for n in self.shape)

    def interior_mask(self, extra=0):
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.interior(extra)] = True
        return mask


def max_characteristic_speed(m: MetricSpec, dim, t_span, bounds, samples=7):
    """Largest coordinate light speed of the metric over the box."""
    axes = [np.linspace(lo, hi, samples) for lo, hi in bounds]
    taxis = np.linspace(t_span[0], t_span[1], samples if m.time_dependent else 1)
    mesh = np.meshgrid(taxis, *axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, dim + 1)
    g = m.matrix(pts)
    cross = np.max(np.abs(g[:, 0, 1:]))
    if cross > 1e-12:
        raise ValueError(
            "solver requires metrics with no dt-dx cross terms on the grid")
    speeds = np.sqrt(np.abs(g[:, 0, 0])[:, None]
                     / np.abs(np.diagonal(g, axis1=1, axis2=2)[:, 1:]))
    return float(np.max(speeds))


def build_grid(m: MetricSpec, dim, t_max, bounds, nx, cfl=0.45,
               collar_fraction=0.1) -> Grid:
    """Uniform grid with the time step set from the Courant ratio."""
    if cfl > 0.9:
        raise CourantViolation(f"Courant ratio {cfl} exceeds 0.9")
    if dim not in (1, 2):
        raise ValueError("solver supports d in {1, 2}")
    bounds = [tuple(map(float, b)) for b in np.atleast_2d(bounds)]
    nx = [int(v) for v in np.atleast_1d(nx)]
    if len(bounds) != dim or len(nx) != dim:
        raise ValueError("bounds/nx must match the spatial dimension")
    axes = tuple(np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(bounds, nx))
    dx = tuple(float(a[1] - a[0]) for a in axes)
    speed = max_characteristic_speed(m, dim, (0.0, t_max), bounds)
    # shrink dt so the final level lands exactly on t_max; runs at nested
    # resolutions then share the final time
    n_steps = int(math.ceil(t_max / (cfl * min(dx) / speed)))
    dt = t_max / n_steps
    t = np.linspace(0.0, t_max, n_steps + 1)
    collar = max(2, int(round(collar_fraction * min(nx))))
    return Grid(dim, t, axes, dt, dx, cfl, collar)


@dataclass
class GridField:
    """Sampled spacetime field; ``levels`` lists the stored time indices."""

    grid: Grid
    values: np.ndarray
    levels: np.ndarray
    meta: dict = field(default_factory=dict)

    @staticmethod
    def full(grid, values, **meta):
        values = np.asarray(values, dtype=float)
        return GridField(grid, values, np.arange(values.shape[0]), dict(meta))

    @property
    def complete(self):
        return len(self.levels) == self.grid.nt + 1

    @property
    def last(self):
        return self.values[-1]

    def require_complete(self):
        if not self.complete:
            raise ValueError("operation needs a field stored at every level")
        return self.values

    def interior_norm(self, extra=0, level_range=None):
        """L2 norm over the interior cells (collar excluded), all stored levels."""
        sel = (slice(None),) + self.grid.interior(extra)
        vals = self.values[sel]
        if level_range is not None:
            vals = vals[level_range]
        return float(np.sqrt(np.mean(vals ** 2)))

    def __add__(self, other):
        self._check(other)
        return GridField(self.grid, self.values + other.values, self.levels)

    def __sub__(self, other):
        self._check(other)
        return GridField(self.grid, self.values - other.values, self.levels)

    def __mul__(self, scalar):
        return GridField(self.grid, self.values * float(scalar), self.levels,
                         dict(self.meta))

    __rmul__ = __mul__

    def _check(self, other):
        if self.grid is not other.grid or len(self.levels) != len(other.levels):
            raise ValueError("field shapes do not match")


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

def bump(s):
    """Compactly supported polynomial bump, C^{BUMP_POWER-1}, peak 1 at 0."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    out[inside] = (1.0 - s[inside] ** 2) ** BUMP_POWER
    return out


def bump_prime(s):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    out[inside] = (-2.0 * BUMP_POWER * s[inside]
                   * (1.0 - s[inside] ** 2) ** (BUMP_POWER - 1))
    return out


@dataclass
class SourceComponent:
    """Smooth compactly supported pulse, optionally polarized across a moving plane.

    With a ``velocity`` the spatial profile rides along ``x - center - v*(t-tc)``,
    which imitates a pulse singular across a traveling hypersurface.  With
    ``time_derivative`` the temporal factor is the bump derivative, giving the
    pulse zero temporal mean (clean traveling waves in 1+1).
    """

    amplitude: float
    center: Sequence[float]          # (t_c, x_c...)
    width: Sequence[float]           # (w_t, w_x...)
    velocity: Optional[Sequence[float]] = None
    time_derivative: bool = False

    def profile(self, t, mesh):
        center = np.asarray(self.center, dtype=float)
        width = np.asarray(self.width, dtype=float)
        tfac = (bump_prime((t - center[0]) / width[0]) / width[0]
                if self.time_derivative else bump((t - center[0]) / width[0]))
        out = np.full(mesh.shape[:-1], float(tfac))
        offset = np.zeros(len(center) - 1)
        if self.velocity is not None:
            offset = np.asarray(self.velocity, dtype=float) * (t - center[0])
        for a in range(len(center) - 1):
            out *= bump((mesh[..., a] - center[1 + a] - offset[a]) / width[1 + a])
        return out

    def support_time(self):
        return (self.center[0] - self.width[0], self.center[0] + self.width[0])


@dataclass
class SourceTerm:
    """Weighted sum of pulse components."""

    components: list

    @property
    def amplitudes(self):
        return np.array([c.amplitude for c in self.components])

    def total_strength(self):
        return float(np.sum(np.abs(self.amplitudes)))

    def with_amplitudes(self, amps):
        comps = []
        for c, a in zip(self.components, amps):
            comps.append(SourceComponent(float(a), c.center, c.width,
                                         c.velocity, c.time_derivative))
        return SourceTerm(comps)

    def evaluate(self, t, mesh):
        out = np.zeros(mesh.shape[:-1])
        for c in self.components:
            if c.amplitude != 0.0:
                out += c.amplitude * c.profile(t, mesh)
        return out

    def earliest_onset(self):
        return min((c.support_time()[0] for c in self.components), default=np.inf)

    def support_mask(self, grid: Grid):
        mesh = grid.spatial_mesh()
        mask = np.zeros((grid.nt + 1,) + grid.shape, dtype=bool)
        probe = self.with_amplitudes(np.ones(len(self.components)))
        for n, t in enumerate(grid.t):
            mask[n] = np.abs(probe.evaluate(t, mesh)) > 0.0
        return mask


def _source_evaluator(f, grid: Grid):
    """Normalize GridField / SourceTerm / callable sources to a per-level closure."""
    if isinstance(f, GridField):
        vals = f.require_complete()

        def ev(n, t, mesh):
            return vals[n]
    elif isinstance(f, SourceTerm):
        def ev(n, t, mesh):
            return f.evaluate(t, mesh)
    elif callable(f):
        def ev(n, t, mesh):
            return np.asarray(f(t, mesh), dtype=float)
    elif f is None or (np.isscalar(f) and float(f) == 0.0):
        def ev(n, t, mesh):
            return 0.0
    else:
        raise TypeError(f"unsupported source type {type(f)}")
    return ev


# ---------------------------------------------------------------------------
# divergence-form coefficients
# ---------------------------------------------------------------------------

class _Coefficients:
    """Face-averaged divergence-form coefficients on one grid.

    Static metrics are evaluated once; time-dependent metrics are evaluated
    per level (vectorized over space).
    """

    def __init__(self, m: MetricSpec, grid: Grid):
        self.m = m
        self.grid = grid
        self.static = not m.time_dependent
        self.mesh = grid.spatial_mesh()
        self._face_meshes = []
        for a in range(grid.dim):
            ax = grid.axes[a]
            mids = 0.5 * (ax[1:] + ax[:-1])
            axes = list(grid.axes)
            axes[a] = mids
            grids = np.meshgrid(*axes, indexing="ij")
            self._face_meshes.append(np.stack(grids, axis=-1))
        self._cache = {}

    def _eval(self, mesh, t):
        pts = np.empty(mesh.shape[:-1] + (self.grid.dim + 1,))
        pts[..., 0] = t
        pts[..., 1:] = mesh
        g = self.m.matrix(pts)
        det = np.linalg.det(g)
        rho = np.sqrt(-det)
        ginv = np.linalg.inv(g)
        return rho, ginv

    def center(self, t):
        """(rho, rho*g^{ab} at centers) for the spatial cross terms and sources."""
        key = ("c", 0.0 if self.static else round(t, 12))
        if key not in self._cache:
            rho, ginv = self._eval(self.mesh, t if not self.static else self.grid.t[0])
            self._cache[key] = (rho, rho[..., None, None] * ginv)
            if not self.static and len(self._cache) > 8:
                self._trim()
        return self._cache[key]

    def time_face(self, t_half):
        """rho * g^{00} at the half-level time face."""
        key = ("t", 0.0 if self.static else round(t_half, 12))
        if key not in self._cache:
            rho, ginv = self._eval(self.mesh,
                                   t_half if not self.static else self.grid.t[0])
            self._cache[key] = rho * ginv[..., 0, 0]
            if not self.static and len(self._cache) > 8:
                self._trim()
        return self._cache[key]

    def space_face(self, axis, t):
        """rho * g^{aa} on the faces along ``axis``."""
        key = ("f", axis, 0.0 if self.static else round(t, 12))
        if key not in self._cache:
            rho, ginv = self._eval(self._face_meshes[axis],
                                   t if not self.static else self.grid.t[0])
            self._cache[key] = rho * ginv[..., 1 + axis, 1 + axis]
            if not self.static and len(self._cache) > 8:
                self._trim()
        return self._cache[key]

    def has_cross(self, t):
        _, rg = self.center(t)
        if self.grid.dim < 2:
            return False
        return bool(np.max(np.abs(rg[..., 1, 2])) > 1e-14)

    def _trim(self):
        for key in list(self._cache)[:-6]:
            del self._cache[key]


def _spatial_divergence(u, coeffs: _Coefficients, t):
    """Discrete sum_a d_a(rho g^{ab} d_b u) on interior cells (zero on the ring)."""
    grid = coeffs.grid
    out = np.zeros_like(u)
    for a in range(grid.dim):
        w = coeffs.space_face(a, t)
        dx2 = grid.dx[a] ** 2
        sl_in = [slice(None)] * grid.dim
        sl_lo = [slice(None)] * grid.dim
        sl_hi = [slice(None)] * grid.dim
        sl_in[a] = slice(1, -1)
        sl_lo[a] = slice(0, -1)
        sl_hi[a] = slice(1, None)
        wf_hi = w[tuple(sl_hi)]
        wf_lo = w[tuple(sl_lo)]
        u_in = u[tuple(sl_in)]
        u_hi = np.roll(u, -1, axis=a)[tuple(sl_in)]
        u_lo = np.roll(u, 1, axis=a)[tuple(sl_in)]
        contrib = (wf_hi * (u_hi - u_in) - wf_lo * (u_in - u_lo)) / dx2
        tgt = [slice(None)] * grid.dim
        tgt[a] = slice(1, -1)
        out[tuple(tgt)] += contrib
    if grid.dim == 2 and coeffs.has_cross(t):
        _, rg = coeffs.center(t)
        w12 = rg[..., 1, 2]
        d2u = np.zeros_like(u)
        d2u[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2 * grid.dx[1])
        d1u = np.zeros_like(u)
        d1u[1:-1, :] = (u[2:, :] - u[:-2, :]) / (2 * grid.dx[0])
        flux2 = w12 * d2u
        flux1 = w12 * d1u
        out[1:-1, :] += (flux2[2:, :] - flux2[:-2, :]) / (2 * grid.dx[0])
        out[:, 1:-1] += (flux1[:, 2:] - flux1[:, :-2]) / (2 * grid.dx[1])
    return out


def _sponge_factor(grid: Grid, rate):
    """Per-step damping factor for the boundary collar.

    ``rate`` is a damping rate in inverse time units, so the absorbed
    fraction per unit time is resolution independent.
    """
    if rate is None:
        rate = 5.0
    if rate <= 0.0 or grid.collar <= 0:
        return None
    ramps = []
    for n in grid.shape:
        r = np.zeros(n)
        c = grid.collar
        prof = np.linspace(1.0, 0.0, c + 1)[:-1]
        r[:c] = prof
        r[-c:] = prof[::-1]
        ramps.append(r)
    total = np.zeros(grid.shape)
    for a, r in enumerate(ramps):
        shape = [1] * grid.dim
        shape[a] = len(r)
        total = np.maximum(total, r.reshape(shape))
    return 1.0 - np.minimum(rate * grid.dt * total ** 2, 0.5)


# ---------------------------------------------------------------------------
# linear solve (the causal inverse)
# ---------------------------------------------------------------------------

def _storage(store, grid):
    if store == "all":
        levels = np.arange(grid.nt + 1)
    elif store == "last":
        levels = np.array([grid.nt])
    else:
        levels = np.array(sorted(set(int(v) for v in store)))
    return levels


def solve_linear(m: MetricSpec, f, grid: Grid, store="all", sponge=None,
                 nonlinearity=None, amplitude_cap=None,
                 divergence_guard=1e6) -> GridField:
    """Explicit leapfrog solve of ``box_g u (+ w) = f`` with zero past data.

    ``f`` may be a GridField on the same grid, a SourceTerm, a callable
    ``(t, mesh) -> values``, or zero.  ``store`` selects which time levels
    the returned field keeps ("all", "last", or an index list).  The
    ``nonlinearity`` hook is used by :func:`solve_nonlinear`.
    """
    if grid.dt > 0.9 * min(grid.dx) / max_characteristic_speed(
            m, grid.dim, (grid.t[0], grid.t[-1]),
            [(a[0], a[-1]) for a in grid.axes]):
        raise CourantViolation("time step too large for this metric and grid")

    coeffs = _Coefficients(m, grid)
    mesh = coeffs.mesh
    damp = _sponge_factor(grid, sponge)
    f_eval = _source_evaluator(f, grid)
    levels = _storage(store, grid)
    out = np.zeros((len(levels),) + grid.shape)
    store_pos = {int(l): i for i, l in enumerate(levels)}

    dt = grid.dt
    dt2 = dt * dt
    u_prev = np.zeros(grid.shape)
    u_curr = np.zeros(grid.shape)
    if 0 in store_pos:
        out[store_pos[0]] = u_prev
    if 1 in store_pos:
        out[store_pos[1]] = u_curr

    interior = tuple(slice(1, -1) for _ in range(grid.dim))
    for n in range(1, grid.nt):
        t_n = grid.t[n]
        rho, _ = coeffs.center(t_n)
        a_minus = coeffs.time_face(t_n - 0.5 * dt)
        a_plus = coeffs.time_face(t_n + 0.5 * dt)
        lap = _spatial_divergence(u_curr, coeffs, t_n)
        f_n = f_eval(n, t_n, mesh)

        def advance(w_n):
            rhs = rho * (f_n - w_n) - lap
            u_next = u_curr.copy()
            u_next[interior] = (u_curr + (a_minus * (u_curr - u_prev)
                                          + dt2 * rhs) / a_plus)[interior]
            if damp is not None:
                u_next *= damp
            return u_next

        if nonlinearity is None:
            u_next = advance(0.0)
        else:
            w_n = nonlinearity(u_curr, u_prev, None, n, t_n)
            u_next = advance(w_n)
            w_n = nonlinearity(u_curr, u_prev, u_next, n, t_n)
            u_next = advance(w_n)

        if not np.all(np.isfinite(u_next)):
            raise NaNDetected(f"non-finite value at level {n + 1}")
        if np.max(np.abs(u_next)) > divergence_guard:
            raise DivergenceDetected(
                f"field magnitude exceeded {divergence_guard:g} at level {n + 1}")
        u_prev, u_curr = u_curr, u_next
        if (n + 1) in store_pos:
            out[store_pos[n + 1]] = u_curr

    return GridField(grid, out, levels, {"metric": m.label})


# ---------------------------------------------------------------------------
# gradients and the discrete wave operator
# ---------------------------------------------------------------------------

def _partials(values, grid: Grid):
    """All coordinate partial derivatives of a complete field: (..., d+1)."""
    spacings = (grid.dt,) + grid.dx
    grads = np.gradient(values, *spacings, edge_order=2)
    return np.stack(grads, axis=-1)


def _dual_on_mesh(m: MetricSpec, grid: Grid, level_t=None):
    pts = grid.points_at(grid.t[0] if level_t is None else level_t)
    return np.linalg.inv(m.matrix(pts))


def gradient_field(m: MetricSpec, u: GridField):
    """Raised gradient ``(grad_g u)^i = g^{ij} d_j u`` as an (..., d+1) stack."""
    grid = u.grid
    vals = u.require_complete()
    du = _partials(vals, grid)
    out = np.empty_like(du)
    if not m.time_dependent:
        ginv = _dual_on_mesh(m, grid)
        for n in range(vals.shape[0]):
            out[n] = np.einsum("...ij,...j->...i", ginv, du[n])
    else:
        for n in range(vals.shape[0]):
            ginv = _dual_on_mesh(m, grid, grid.t[n])
            out[n] = np.einsum("...ij,...j->...i", ginv, du[n])
    return out


def apply_box(m: MetricSpec, u: GridField) -> GridField:
    """Discrete divergence-form wave operator on a complete field.

    Valid on cells at least one layer inside every boundary (the outermost
    ring and the first/last time levels are left zero).
    """
    grid = u.grid
    vals = u.require_complete()
    coeffs = _Coefficients(m, grid)
    out = np.zeros_like(vals)
    dt2 = grid.dt ** 2
    for n in range(1, grid.nt):
        t_n = grid.t[n]
        rho, _ = coeffs.center(t_n)
        a_minus = coeffs.time_face(t_n - 0.5 * grid.dt)
        a_plus = coeffs.time_face(t_n + 0.5 * grid.dt)
        tt = (a_plus * (vals[n + 1] - vals[n])
              - a_minus * (vals[n] - vals[n - 1])) / dt2
        out[n] = (tt + _spatial_divergence(vals[n], coeffs, t_n)) / rho
    return GridField(grid, out, np.arange(grid.nt + 1), {"op": "box"})


# ---------------------------------------------------------------------------
# nonlinear solve
# ---------------------------------------------------------------------------

class _NonlinearityEvaluator:
    """Pointwise ``w(x, u, grad u)`` on one time level.

    Accepts the classified Taylor data (three quadratic forms) or a raw
    callable ``w(points, u, raised_grad) -> values``.
    """

    def __init__(self, m: MetricSpec, nl, grid: Grid):
        self.m = m
        self.grid = grid
        self.custom = callable(nl) and not isinstance(nl, NonlinearTerm)
        self.nl = nl
        pts = grid.points_at(grid.t[0])
        self.static = not m.time_dependent
        self.ginv = np.linalg.inv(m.matrix(pts)) if self.static else None
        self.pts0 = pts
        if not self.custom and nl is not None:
            self.w0 = self._form_matrix(nl.n0)
            self.w1 = self._form_matrix(nl.n1)
            self.w2 = self._form_matrix(nl.m_form)

    def _form_matrix(self, form):
        if form is None:
            return None
        return form.matrix(self.pts0)  # x-dependence only through space for
        # static scenarios; time-dependent forms go through the custom hook

    def ginv_at(self, t):
        if self.static:
            return self.ginv
        return np.linalg.inv(self.m.matrix(self.grid.points_at(t)))

    def evaluate(self, u, du, t):
        """du holds the coordinate partials (..., d+1) at the level."""
        if self.nl is None:
            return 0.0
        ginv = self.ginv_at(t)
        raised = np.einsum("...ij,...j->...i", ginv, du)
        if self.custom:
            pts = self.grid.points_at(t)
            return np.asarray(self.nl(pts, u, raised), dtype=float)
        out = 0.0
        if self.w0 is not None:
            out = out + np.einsum("...i,...ij,...j->...", raised, self.w0, raised)
        if self.w1 is not None:
            out = out + u * np.einsum("...i,...ij,...j->...", raised, self.w1, raised)
        if self.w2 is not None:
            out = out + u ** 2 * np.einsum("...i,...ij,...j->...", raised, self.w2, raised)
        return out


def _level_partials(u_curr, u_prev, u_next, grid: Grid, dt):
    """Coordinate partials at the current level from available neighbors."""
    du = np.empty(grid.shape + (grid.dim + 1,))
    if u_next is None:
        du[..., 0] = (u_curr - u_prev) / dt
    else:
        du[..., 0] = (u_next - u_prev) / (2.0 * dt)
    for a in range(grid.dim):
        d = np.zeros_like(u_curr)
        sl_in = [slice(None)] * grid.dim
        sl_in[a] = slice(1, -1)
        d[tuple(sl_in)] = (np.roll(u_curr, -1, axis=a)[tuple(sl_in)]
                           - np.roll(u_curr, 1, axis=a)[tuple(sl_in)]) / (2 * grid.dx[a])
        du[..., 1 + a] = d
    return du


def solve_nonlinear(m: MetricSpec, nl, src, grid: Grid, mode="stepping",
                    store="all", sponge=None, amplitude_cap=2.0,
                    picard_tol=1e-10, picard_max_iter=60,
                    divergence_guard=1e6) -> GridField:
    """Forward solve with the gradient-quadratic nonlinearity.

    ``stepping`` evaluates the nonlinearity explicitly per level with one
    corrector pass (second order); ``picard`` iterates
    ``u <- v - Q[w(x, u, grad u)]`` on the full spacetime field until the
    sup-norm residual is below ``picard_tol`` relative to the field scale.
    The two modes agree to discretization order.
    """
    if isinstance(src, SourceTerm):
        if src.total_strength() > amplitude_cap:
            raise DivergenceDetected(
                f"source strength {src.total_strength():.3g} exceeds the "
                f"amplitude cap {amplitude_cap:.3g}")
        if src.earliest_onset() < grid.t[0] + 2 * grid.dt and src.components:
            raise ValueError("source must stay quiet for the first two levels")

    ev = _NonlinearityEvaluator(m, nl, grid)

    if mode == "stepping":
        def hook(u_curr, u_prev, u_next, n, t_n):
            du = _level_partials(u_curr, u_prev, u_next, grid, grid.dt)
            return ev.evaluate(u_curr, du, t_n)

        return solve_linear(m, src, grid, store=store, sponge=sponge,
                            nonlinearity=None if nl is None else hook,
                            divergence_guard=divergence_guard)

    if mode != "picard":
        raise ValueError("mode must be 'stepping' or 'picard'")

    v = solve_linear(m, src, grid, store="all", sponge=sponge,
                     divergence_guard=divergence_guard)
    if nl is None:
        return _restrict(v, store)
    u = v.values.copy()
    scale = max(float(np.max(np.abs(u))), 1e-300)
    prev_res = np.inf
    for it in range(picard_max_iter):
        w = _full_nonlinearity(ev, u, grid)
        correction = solve_linear(m, GridField.full(grid, w), grid,
                                  store="all", sponge=sponge,
                                  divergence_guard=divergence_guard)
        u_new = v.values - correction.values
        res = float(np.max(np.abs(u_new - u)))
        u = u_new
        if res <= picard_tol * scale:
            break
        if res > prev_res * 1.5 and it > 2:
            raise NonContraction(
                f"fixed-point residual grew: {prev_res:.3e} -> {res:.3e}")
        prev_res = res
    else:
        raise NonContraction(
            f"no convergence in {picard_max_iter} sweeps (residual {res:.3e})")
    full = GridField.full(grid, u, mode="picard", iterations=it + 1)
    return _restrict(full, store)


def _full_nonlinearity(ev: _NonlinearityEvaluator, values, grid: Grid):
    du = _partials(values, grid)
    out = np.empty_like(values)
    for n in range(values.shape[0]):
        out[n] = ev.evaluate(values[n], du[n], grid.t[n])
    return out


def _restrict(fieldv: GridField, store):
    if store == "all":
        return fieldv
    levels = _storage(store, fieldv.grid)
    idx = [int(np.where(fieldv.levels == l)[0][0]) for l in levels]
    return GridField(fieldv.grid, fieldv.values[idx], levels, dict(fieldv.meta))


# ---------------------------------------------------------------------------
# quartic expansion terms
# ---------------------------------------------------------------------------

@dataclass
class ExpansionTerms:
    """The three permutation-sum groups and their total."""

    m1: GridField
    m2: GridField
    m3: GridField

    @property
    def total(self):
        return GridField(self.m1.grid,
                         self.m1.values + self.m2.values + self.m3.values,
                         self.m1.levels)


def _require_classified(nl: NonlinearTerm):
    if callable(nl) and not isinstance(nl, NonlinearTerm):
        raise ValueError("expansion terms need classified Taylor data, not a "
                         "raw nonlinearity evaluator")
    missing_c0 = nl.n0 is not None and nl.c0 is None
    missing_c1 = nl.n1 is not None and nl.c1 is None
    if missing_c0 or missing_c1:
        raise ValueError("run classify_nonlinearity first to extract the "
                         "metric factors of n0/n1")


def expansion_terms(m: MetricSpec, nl: NonlinearTerm, v_fields,
                    sponge=None) -> ExpansionTerms:
    """Literal evaluation of the three quartic interaction groups.

    ``v_fields`` are the four unit-amplitude linear waves on a common grid.
    Every inner causal inverse is a linear solve; the outer inverse of each
    group is applied to the assembled permutation sum (the solver is exactly
    linear, so summing before the outer solve changes nothing).
    """
    _require_classified(nl)
    if len(v_fields) != 4:
        raise ValueError("need exactly four linear waves")
    grid = v_fields[0].grid
    vals = [vf.require_complete() for vf in v_fields]

    tpts = grid.points_at(grid.t[0])
    if m.time_dependent:
        raise ValueError("expansion extraction assumes a time-static metric")
    ginv = np.linalg.inv(m.matrix(tpts))
    c0 = nl.c0(tpts) if nl.c0 is not None else np.zeros(grid.shape)
    c1 = nl.c1(tpts) if nl.c1 is not None else np.zeros(grid.shape)
    Wm = nl.m_form.matrix(tpts) if nl.m_form is not None else None

    dvs = [_partials(v, grid) for v in vals]

    def pair(dui, duj):
        """g(grad u, grad v) = g^{ab} d_a u d_b v, level by level."""
        return np.einsum("...ab,n...a,n...b->n...", ginv, dui, duj)

    def qg(source_vals):
        return solve_linear(m, GridField.full(grid, source_vals), grid,
                            store="all", sponge=sponge).values

    perms = list(itertools.permutations(range(4)))

    # quartic route
    if Wm is None:
        m1_vals = np.zeros_like(vals[0])
    else:
        raised = [np.einsum("...ab,n...b->n...a", ginv, dv) for dv in dvs]
        src = np.zeros_like(vals[0])
        for (i, j, k, l) in perms:
            mkl = np.einsum("n...a,...ab,n...b->n...", raised[k], Wm, raised[l])
            src += vals[i] * vals[j] * mkl
        m1_vals = -qg(src)

    # cubic route: needs both metric factors
    pair_cache = {}

    def pair_field(i, j):
        key = (min(i, j), max(i, j))
        if key not in pair_cache:
            pair_cache[key] = pair(dvs[key[0]], dvs[key[1]])
        return pair_cache[key]

    p_solu = {}

    def p_field(i, j):
        """Q[c0 g(grad v_i, grad v_j)] for an unordered pair."""
        key = (min(i, j), max(i, j))
        if key not in p_solu:
            p_solu[key] = qg(c0 * pair_field(*key))
        return p_solu[key]

    zero = np.zeros_like(vals[0])
    if np.max(np.abs(c1)) == 0.0 and np.max(np.abs(c0)) == 0.0:
        m2_vals = zero.copy()
        m3_vals = zero.copy()
    else:
        m2_src = np.zeros_like(vals[0])
        # inner solves of the first cubic piece, one (j, {k,l}) at a time
        for j in range(4):
            for k, l in itertools.combinations([r for r in range(4) if r != j], 2):
                z = qg(c1 * vals[j] * pair_field(k, l))
                dz = _partials(z, grid)
                for i in range(4):
                    if i in (j, k, l):
                        continue
                    # (k,l) and (l,k) orderings both occur in the literal sum
                    m2_src += 2.0 * 2.0 * c0 * pair(dvs[i], dz)
        for (i, j, k, l) in perms:
            m2_src += c1 * p_field(i, j) * pair_field(k, l)
        for i in range(4):
            for j in range(4):
                if j == i:
                    continue
                rest = [r for r in range(4) if r not in (i, j)]
                dp = _partials(p_field(*rest), grid)
                m2_src += 2.0 * 2.0 * c1 * vals[i] * pair(dvs[j], dp)
        m2_vals = qg(m2_src)

        m3_src = np.zeros_like(vals[0])
        for j in range(4):
            for k, l in itertools.combinations([r for r in range(4) if r != j], 2):
                dp = _partials(p_field(k, l), grid)
                y = qg(c0 * pair(dvs[j], dp))
                dy = _partials(y, grid)
                for i in range(4):
                    if i in (j, k, l):
                        continue
                    m3_src += 4.0 * 2.0 * c0 * pair(dvs[i], dy)
        for (i, j, k, l) in perms:
            key_ij = (min(i, j), max(i, j))
            key_kl = (min(k, l), max(k, l))
            dpi = _partials(p_field(*key_ij), grid)
            dpk = _partials(p_field(*key_kl), grid)
            m3_src += c0 * pair(dpi, dpk)
        m3_vals = -qg(m3_src)

    lv = np.arange(grid.nt + 1)
    return ExpansionTerms(GridField(grid, m1_vals, lv),
                          GridField(grid, m2_vals, lv),
                          GridField(grid, m3_vals, lv))


def second_order_reference(m: MetricSpec, nl: NonlinearTerm, v_i: GridField,
                           v_j: GridField, sponge=None) -> GridField:
    """Second amplitude derivative from the iteration: -2 Q[c0 g(grad v_i, grad v_j)]."""
    _require_classified(nl)
    grid = v_i.grid
    tpts = grid.points_at(grid.t[0])
    ginv = np.linalg.inv(m.matrix(tpts))
    c0 = nl.c0(tpts) if nl.c0 is not None else np.zeros(grid.shape)
    dui = _partials(v_i.require_complete(), grid)
    duj = _partials(v_j.require_complete(), grid)
    g_ij = np.einsum("...ab,n...a,n...b->n...", ginv, dui, duj)
    sol = solve_linear(m, GridField.full(grid, c0 * g_ij), grid,
                       store="all", sponge=sponge)
    return GridField(grid, -2.0 * sol.values, sol.levels)


# ---------------------------------------------------------------------------
# mixed differences in the source amplitudes
# ---------------------------------------------------------------------------

def _stencil_patterns(order):
    if order == 2:
        return [((1, 1), 1.0), ((1, 0), -1.0), ((0, 1), -1.0), ((0, 0), 1.0)]
    if order == 4:
        pats = []
        for signs in itertools.product((-1.0, 1.0), repeat=4):
            pats.append((signs, float(np.prod(signs))))
        return pats
    raise ValueError("order must be 2 or 4")


def mixed_difference(m: MetricSpec, nl, src: SourceTerm, grid: Grid, order=4,
                     delta=0.05, mode="stepping", richardson=True,
                     check_cancellation=True, threads=1, sponge=None,
                     amplitude_cap=2.0) -> GridField:
    """Mixed amplitude derivative of the solver map by difference stencils.

    Order 2 uses the four-point forward stencil in the first two source
    amplitudes divided by ``delta^2``; order 4 activates all four sources at
    ``+/- delta`` (sixteen solves) with the product-of-signs combination
    divided by ``(2 delta)^4``.  With ``richardson`` the stencil is evaluated
    at ``delta`` and ``delta / 2`` and the finer estimate is returned, with
    the relative change recorded in the metadata.
    """
    n_comp = len(src.components)
    if order == 4 and n_comp < 4:
        raise ValueError("order-4 stencil needs four source components")
    if order == 2 and n_comp < 2:
        raise ValueError("order-2 stencil needs two source components")

    def run(pattern_delta):
        pats = _stencil_patterns(order)
        results = [None] * len(pats)

        def one(idx):
            signs, coef = pats[idx]
            amps = np.zeros(n_comp)
            for k, s in enumerate(signs):
                amps[k] = s * pattern_delta
            if not np.any(amps):
                return coef, np.zeros((grid.nt + 1,) + grid.shape), 0.0
            scaled = src.with_amplitudes(amps)
            sol = solve_nonlinear(m, nl, scaled, grid, mode=mode, store="all",
                                  sponge=sponge, amplitude_cap=amplitude_cap)
            return coef, sol.values, float(np.max(np.abs(sol.values)))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, range(len(pats))))
        else:
            results = [one(i) for i in range(len(pats))]

        combo = np.zeros((grid.nt + 1,) + grid.shape)
        scale = 0.0
        for coef, vals, peak in results:
            combo += coef * vals
            scale = max(scale, peak)
        if check_cancellation and np.max(np.abs(combo)) < 1e3 * np.finfo(float).eps * scale:
            raise CancellationLoss(
                f"stencil output {np.max(np.abs(combo)):.3e} is below the "
                f"rounding floor for field scale {scale:.3e}")
        divisor = pattern_delta ** 2 if order == 2 else (2.0 * pattern_delta) ** 4
        return combo / divisor

    est = run(delta)
    meta = {"order": order, "delta": delta, "mode": mode}
    if richardson:
        fine = run(delta / 2.0)
        denom = max(float(np.max(np.abs(fine))), 1e-300)
        meta["richardson_rel_change"] = float(np.max(np.abs(fine - est)) / denom)
        meta["delta"] = delta / 2.0
        est = fine
    return GridField(grid, est, np.arange(grid.nt + 1), meta)


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    resolutions: list
    errors: list
    orders: list

    def as_dict(self):
        return {"resolutions": self.resolutions, "errors": self.errors,
                "orders": self.orders}


def convergence_study(solve_at, resolutions, exact=None, level="last") -> ConvergenceTable:
    """Observed order from nested runs.

    ``solve_at(nx) -> GridField``.  With ``exact(t, mesh)`` the error at each
    resolution is the interior relative L2 mismatch at the stored levels;
    otherwise fields are compared against the finest run by linear
    interpolation of the final-time slice.
    """
    if len(resolutions) < 3:
        raise ValueError("need at least 3 nested resolutions")
    fields = [solve_at(int(nx)) for nx in resolutions]
    errors = []
    if exact is not None:
        for f in fields:
            grid = f.grid
            sel = grid.interior()
            err = 0.0
            ref_norm = 0.0
            for row, lev in zip(f.values, f.levels):
                mesh = grid.spatial_mesh()
                ex = np.asarray(exact(grid.t[int(lev)], mesh), dtype=float)
                err += float(np.sum((row[sel] - ex[sel]) ** 2))
                ref_norm += float(np.sum(ex[sel] ** 2))
            errors.append(math.sqrt(err / max(ref_norm, 1e-300)))
    else:
        # consecutive-pair differences: ratios of ||u_k - u_{k+1}|| estimate
        # the order without the finest-grid correction factor
        for k in range(len(fields) - 1):
            errors.append(_self_error(fields[k], fields[k + 1]))
        errors.append(np.nan)
    orders = []
    for k in range(len(resolutions) - 1):
        e0, e1 = errors[k], errors[k + 1]
        if not (np.isfinite(e0) and np.isfinite(e1)) or e1 == 0:
            continue
        ratio = resolutions[k + 1] / resolutions[k]
        orders.append(float(np.log(e0 / e1) / np.log(ratio)))
    return ConvergenceTable([int(r) for r in resolutions], errors, orders)


def _self_error(f: GridField, finest: GridField):
    """Final-slice interior mismatch against the finest grid (d = 1 or 2)."""
    grid, ref = f.grid, finest.grid
    sel = grid.interior()
    coarse = f.last
    if grid.dim == 1:
        interp = np.interp(grid.axes[0], ref.axes[0], finest.last)
    else:
        interp = _bilinear(ref, finest.last, grid)
    num = float(np.sqrt(np.mean((coarse[sel] - interp[sel]) ** 2)))
    den = float(np.sqrt(np.mean(interp[sel] ** 2)))
    return num / max(den, 1e-300)


def _bilinear(ref: Grid, vals, target: Grid):
    x0, x1 = ref.axes
    tx0, tx1 = target.axes
    i = np.clip(np.searchsorted(x0, tx0) - 1, 0, len(x0) - 2)
    j = np.clip(np.searchsorted(x1, tx1) - 1, 0, len(x1) - 2)
    fx = (tx0 - x0[i]) / (x0[i + 1] - x0[i])
    fy = (tx1 - x1[j]) / (x1[j + 1] - x1[j])
    fx = fx[:, None]
    fy = fy[None, :]
    ii = i[:, None]
    jj = j[None, :]
    return ((1 - fx) * (1 - fy) * vals[ii, jj] + fx * (1 - fy) * vals[ii + 1, jj]
            + (1 - fx) * fy * vals[ii, jj + 1] + fx * fy * vals[ii + 1, jj + 1])


# ---------------------------------------------------------------------------
# causality checks
# ---------------------------------------------------------------------------

def _dilate(mask):
    out = mask.copy()
    for a in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        out[tuple(lo)] |= mask[tuple(hi)]
        out[tuple(hi)] |= mask[tuple(lo)]
    return out


def causal_future_mask(grid: Grid, support_mask, margin=2):
    """Numerically widened causal future of a per-level support mask.

    The explicit stencil moves information one cell per step; ``margin``
    extra dilations per level absorb the face-averaging halo.
    """
    out = np.zeros_like(support_mask)
    acc = np.zeros(grid.shape, dtype=bool)
    for n in range(support_mask.shape[0]):
        for _ in range(1 + margin if n > 0 else 0):
            acc = _dilate(acc)
        acc |= support_mask[n]
        out[n] = acc
    return out


def max_outside_causal_future(u: GridField, src: SourceTerm, margin=2):
    """Largest field magnitude outside the widened causal future, and the source scale."""
    grid = u.grid
    vals = u.require_complete()
    support = src.support_mask(grid)
    mask = causal_future_mask(grid, support, margin=margin)
    outside = ~mask
    peak = float(np.max(np.abs(vals[outside]))) if np.any(outside) else 0.0
    mesh = grid.spatial_mesh()
    f_scale = max(float(np.max(np.abs(src.evaluate(t, mesh)))) for t in grid.t)
    return peak, f_scale


# ---------------------------------------------------------------------------
# reporting container
# ---------------------------------------------------------------------------

@dataclass
class ExpansionReport:
    """Mixed-difference vs direct-evaluation comparison summary."""

    order: int
    delta: float
    resolutions: list
    relative_errors: list
    richardson_changes: list
    interior_collar: int

    def as_dict(self):
        return {
            "order": self.order,
            "delta": self.delta,
            "resolutions": self.resolutions,
            "relative_errors": self.relative_errors,
            "richardson_changes": self.richardson_changes,
            "interior_collar": self.interior_collar,
        }
