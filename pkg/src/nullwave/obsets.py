"""Light observation sets, earliest arrivals, and source distinguishability.

The light observation set of a source point ``q`` inside a region ``V`` is
the part of the boundary of its causal future that meets ``V``; the earliest
set keeps only the first arrival along each observer curve of a timelike
foliation of ``V`` (coordinate-time lines by default) and then discards any
kept point that lies strictly after another one.

Cone-exact metrics (flat and conformally flat) are handled by the exact cone
equation; other metrics shoot future null geodesics, truncating each ray at
its first conjugate point since the boundary structure past a caustic is not
resolved here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptySet
from .geometry import (
    CausalSearchConfig,
    MetricSpec,
    Vector,
    chronologically_precedes,
    first_conjugate_time,
    geodesic_trace,
)

__all__ = [
    "ObservationRegion",
    "ObservationSet",
    "light_observation_set",
    "earliest_observation_set",
    "distinguish",
    "hausdorff_distance",
    "distinguishability_matrix",
    "sets_to_csv",
]


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

@dataclass
class ObservationRegion:
    """Open coordinate box with a sampling lattice of observer lines.

    ``box`` is ``(d+1, 2)`` in coordinate order (time first); the lattice
    counts are spatial.  A tube region around a timelike path can be emulated
    by intersecting with ``center_path``/``radius``.
    """

    box: np.ndarray
    lattice: tuple
    center_path: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float)
        self.lattice = tuple(int(v) for v in self.lattice)
        if self.box.shape[0] != len(self.lattice) + 1:
            raise ValueError("lattice must have one count per spatial axis")

    @property
    def dim(self):
        return self.box.shape[0] - 1

    @property
    def t_range(self):
        return self.box[0]

    def spatial_lattice(self):
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in
                zip(self.box[1:], self.lattice)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1).reshape(-1, self.dim)
        if self.center_path is not None and self.radius is not None:
            keep = []
            for p in pts:
                d = np.min(np.linalg.norm(self.center_path[:, 1:] - p, axis=1))
                keep.append(d <= self.radius)
            pts = pts[np.asarray(keep, dtype=bool)]
        return pts

    def contains(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.all((points >= self.box[:, 0]) & (points <= self.box[:, 1]), axis=1)
        if self.center_path is not None and self.radius is not None:
            for k, p in enumerate(points):
                if not ok[k]:
                    continue
                d = np.min(np.linalg.norm(self.center_path[:, 1:] - p[1:], axis=1))
                ok[k] = d <= self.radius
        return ok


# ---------------------------------------------------------------------------
# observation sets
# ---------------------------------------------------------------------------

@dataclass
class ObservationSet:
    """Finite sample of cone points in the region with earliest-arrival flags."""

    source: np.ndarray
    points: np.ndarray           # (N, d+1)
    cone_parameter: np.ndarray   # (N,) affine/cone parameter of each point
    earliest: np.ndarray         # (N,) bool
    empty_flagged: bool = False

    def __len__(self):
        return len(self.points)

    @property
    def is_empty(self):
        return len(self.points) == 0

    def earliest_points(self):
        return self.points[self.earliest]

    def hausdorff_to(self, other: "ObservationSet", earliest_only=True):
        a = self.earliest_points() if earliest_only else self.points
        b = other.earliest_points() if earliest_only else other.points
        return hausdorff_distance(a, b)


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance between two finite point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("Hausdorff distance needs two nonempty sets")
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _exact_cone_set(m, q, region: ObservationRegion) -> ObservationSet:
    """First cone crossings along the coordinate-time observer lines."""
    q = np.asarray(q, dtype=float)
    lattice = region.spatial_lattice()
    pts, params = [], []
    for xs in lattice:
        r = float(np.linalg.norm(xs - q[1:]))
        t_star = q[0] + r
        p = np.concatenate([[t_star], xs])
        if region.contains(p)[0]:
            pts.append(p)
            params.append(r)
    if not pts:
        return ObservationSet(q, np.zeros((0, region.dim + 1)), np.zeros(0),
                              np.zeros(0, dtype=bool), empty_flagged=True)
    pts = np.asarray(pts)
    return ObservationSet(q, pts, np.asarray(params),
                          np.ones(len(pts), dtype=bool))


def _shoot_cone_set(m, q, region: ObservationRegion, n_dirs, step,
                    truncate_at_conjugate=True, seed=0) -> ObservationSet:
    q = np.asarray(q, dtype=float)
    dim = m.dim
    rng = np.random.default_rng(seed)
    t_hi = float(region.t_range[1])
    s_cap = 4.0 * max(t_hi - q[0], 1.0)

    dirs = _direction_lattice(dim, n_dirs)
    pts, params = [], []
    g = m.matrix(q)
    e0 = np.zeros(dim + 1)
    e0[0] = 1.0
    for omega in dirs:
        u = np.zeros(dim + 1)
        u[1:] = omega
        a = float(u @ g @ u)
        b = 2.0 * float(e0 @ g @ u)
        c = float(e0 @ g @ e0)
        disc = b * b - 4.0 * a * c
        if a == 0.0 or disc < 0.0:
            continue
        lam = (-b + math.sqrt(disc)) / (2.0 * a)
        v0 = e0 + lam * u
        stop = lambda x: x[0] > t_hi + 2 * step
        try:
            ray = geodesic_trace(m, q, Vector(v0), s_cap, step, stop=stop)
        except Exception:
            continue
        s_limit = np.inf
        if truncate_at_conjugate:
            tau = first_conjugate_time(m, ray)
            if tau is not None:
                s_limit = tau
        inside = region.contains(ray.x)
        for s, x, ok in zip(ray.s, ray.x, inside):
            if ok and s <= s_limit:
                pts.append(x)
                params.append(s)
    if not pts:
        return ObservationSet(q, np.zeros((0, dim + 1)), np.zeros(0),
                              np.zeros(0, dtype=bool), empty_flagged=True)
    pts = np.asarray(pts)
    flags = np.ones(len(pts), dtype=bool)
    return ObservationSet(q, pts, np.asarray(params), flags)


def _direction_lattice(dim, n):
    """Deterministic unit directions: endpoints (d=1), circle or spiral lattice."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n)
    zc = 1.0 - 2.0 * (k + 0.5) / n
    r = np.sqrt(1.0 - zc ** 2)
    th = golden * k
    return np.stack([r * np.cos(th), r * np.sin(th), zc], axis=-1)


def light_observation_set(m: MetricSpec, q, region: ObservationRegion,
                          n_dirs=64, step=0.02, seed=0) -> ObservationSet:
    """Sample the causal-future boundary of ``q`` inside the region.

    The source must precede the region in time.  An empty result is valid
    and flagged rather than raised.
    """
    q = np.asarray(q, dtype=float)
    if q[0] >= region.t_range[1]:
        raise ValueError("source point must lie before the region in time")
    if m.cone_exact:
        return _exact_cone_set(m, q, region)
    return _shoot_cone_set(m, q, region, n_dirs, step, seed=seed)


def earliest_observation_set(m: MetricSpec, q, region: ObservationRegion,
                             observer_family=None, n_dirs=64, step=0.02,
                             seed=0, cfg: Optional[CausalSearchConfig] = None
                             ) -> ObservationSet:
    """Keep the first arrival on each observer curve, then filter strict latecomers.

    The default observer family is the coordinate-time line lattice of the
    region; a custom family is a sequence of spatial anchor points.  A kept
    point is discarded when another kept point strictly timelike-precedes it.
    """
    base = light_observation_set(m, q, region, n_dirs=n_dirs, step=step, seed=seed)
    if base.is_empty:
        return base

    anchors = (np.atleast_2d(np.asarray(observer_family, dtype=float))
               if observer_family is not None else region.spatial_lattice())

    # first arrival per observer line (nearest-anchor binning)
    assign = np.argmin(
        np.linalg.norm(base.points[:, None, 1:] - anchors[None, :, :], axis=-1),
        axis=1)
    keep_idx = []
    for a in range(len(anchors)):
        members = np.nonzero(assign == a)[0]
        if len(members) == 0:
            continue
        keep_idx.append(members[np.argmin(base.points[members, 0])])
    keep_idx = np.asarray(sorted(set(int(i) for i in keep_idx)))

    pts = base.points[keep_idx]
    pars = base.cone_parameter[keep_idx]

    # pairwise strict-precedence filter
    n = len(pts)
    earliest = np.ones(n, dtype=bool)
    for i in range(n):
        if not earliest[i]:
            continue
        for j in range(n):
            if i == j or not earliest[j]:
                continue
            if chronologically_precedes(m, pts[j], pts[i], cfg):
                earliest[i] = False
                break
    sel = np.nonzero(earliest)[0]
    return ObservationSet(base.source, pts[sel], pars[sel],
                          np.ones(len(sel), dtype=bool))


def distinguish(m: MetricSpec, q1, q2, region: ObservationRegion, **kwargs) -> float:
    """Hausdorff distance between the earliest observation sets of two sources."""
    s1 = earliest_observation_set(m, q1, region, **kwargs)
    s2 = earliest_observation_set(m, q2, region, **kwargs)
    if s1.is_empty or s2.is_empty:
        raise EmptySet("both observation sets must be nonempty to compare")
    return hausdorff_distance(s1.points, s2.points)


def distinguishability_matrix(m: MetricSpec, sources, region: ObservationRegion,
                              **kwargs):
    """Symmetric matrix of pairwise earliest-set Hausdorff distances."""
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    sets = [earliest_observation_set(m, q, region, **kwargs) for q in sources]
    n = len(sets)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if sets[i].is_empty or sets[j].is_empty:
                out[i, j] = out[j, i] = np.nan
            else:
                out[i, j] = out[j, i] = hausdorff_distance(sets[i].points,
                                                           sets[j].points)
    return out


def sets_to_csv(sets, stream):
    """CSV rows: source coords, point coords, cone parameter, earliest flag."""
    writer = csv.writer(stream)
    first = sets[0]
    n = first.source.shape[0]
    writer.writerow([f"q{i}" for i in range(n)]
                    + [f"x{i}" for i in range(n)]
                    + ["cone_parameter", "earliest"])
    for s in sets:
        for p, par, fl in zip(s.points, s.cone_parameter, s.earliest):
            writer.writerow([repr(float(c)) for c in s.source]
                            + [repr(float(c)) for c in p]
                            + [repr(float(par)), int(fl)])
