"""Scenario configuration: JSON schema, loading, and object builders.

Configs are plain JSON validated against :data:`SCHEMA` (unknown keys are
rejected).  Scalar coefficient functions (conformal factors, lapse profiles)
are described by small typed specs rather than code:

``{"type": "constant", "value": c}``
    the constant ``c``;
``{"type": "sine", "offset": c, "amplitude": a, "wavevector": [k0, ...]}``
    ``c + a * sin(k . x)`` over spacetime coordinates.

Quadratic forms accept the basis string grammar (``"3*g + 2*E01 - 1*E23"``),
an explicit matrix, or ``null`` for an absent slot.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

import jsonschema
import numpy as np

from . import geometry as geo
from . import nullform as nf
from .errors import ConfigParseError, SchemaError
from .obsets import ObservationRegion
from .wavesolver import SourceComponent, SourceTerm, build_grid

__all__ = ["SCHEMA", "DEFAULT_TOLERANCES", "load_config", "validate_schema",
           "config_hash", "build_metric", "build_nonlinearity",
           "build_scenario_grid", "build_sources", "build_region",
           "scalar_field_from_spec"]

DEFAULT_TOLERANCES = {
    "tol_null": 1e-10,
    "tol_dec": 1e-9,
    "tol_conj": 1e-8,
    "tol_denom": 1e-8,
    "tol_rank": 1e-6,
    "tol_indep": 1e-3,
}

_SCALAR_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "type": {"enum": ["constant", "sine"]},
        "value": {"type": "number"},
        "offset": {"type": "number"},
        "amplitude": {"type": "number"},
        "wavevector": {"type": "array", "items": {"type": "number"}},
    },
    "required": ["type"],
}

_FORM_SPEC = {
    "oneOf": [
        {"type": "string"},
        {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        {"type": "null"},
    ]
}

_NUM_ARRAY = {"type": "array", "items": {"type": "number"}}
_BOUNDS = {"type": "array",
           "items": {"type": "array", "items": {"type": "number"},
                     "minItems": 2, "maxItems": 2}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["metric"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "dimension": {"type": "integer", "enum": [1, 2, 3]},
        "metric": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["minkowski", "conformal_minkowski",
                                    "ultrastatic_sphere", "product",
                                    "coefficient_table"]},
                "gamma": _SCALAR_SPEC,
                "beta": _SCALAR_SPEC,
                "kappa_diag": {"type": "array", "items": _SCALAR_SPEC},
                "matrix": {"type": "array",
                            "items": {"type": "array",
                                      "items": {"type": "number"}}},
            },
        },
        "nonlinearity": {
            "anyOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "N0": _FORM_SPEC, "N1": _FORM_SPEC, "M": _FORM_SPEC,
                        "allow_assumption_violation": {"type": "boolean"},
                    },
                },
            ]
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dimension", "t_max", "bounds", "nx"],
            "properties": {
                "dimension": {"type": "integer", "enum": [1, 2]},
                "t_max": {"type": "number", "exclusiveMinimum": 0},
                "bounds": _BOUNDS,
                "nx": {"type": "array", "items": {"type": "integer", "minimum": 8}},
                "cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.9},
                "collar_fraction": {"type": "number", "minimum": 0, "maximum": 0.4},
                "sponge": {"type": "number", "minimum": 0},
            },
        },
        "sources": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["amplitude", "center", "width"],
                "properties": {
                    "amplitude": {"type": "number"},
                    "center": _NUM_ARRAY,
                    "width": _NUM_ARRAY,
                    "velocity": _NUM_ARRAY,
                    "time_derivative": {"type": "boolean"},
                },
            },
        },
        "quadruple": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_point": _NUM_ARRAY,
                "count": {"type": "integer", "minimum": 1},
                "require_null_sum": {"type": "boolean"},
                "max_attempts": {"type": "integer", "minimum": 1},
            },
        },
        "witness": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "attempts": {"type": "integer", "minimum": 1},
                "threshold": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "conformal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"gamma_value": {"type": "number"},
                            "gamma": _SCALAR_SPEC},
        },
        "observation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["box", "lattice", "sources"],
            "properties": {
                "box": _BOUNDS,
                "lattice": {"type": "array",
                             "items": {"type": "integer", "minimum": 2}},
                "sources": {"type": "array", "items": _NUM_ARRAY},
                "n_dirs": {"type": "integer", "minimum": 2},
                "step": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "geodesics": {
            "type": "object",
            "additionalProperties": False,
            "required": ["start", "direction", "s_max", "step"],
            "properties": {
                "start": _NUM_ARRAY,
                "direction": _NUM_ARRAY,
                "s_max": {"type": "number", "exclusiveMinimum": 0},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "conjugate": {"type": "boolean"},
                "flowout": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "t0": {"type": "number", "exclusiveMinimum": 0},
                        "s0": {"type": "number", "exclusiveMinimum": 0},
                        "n_dirs": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "expand": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "order": {"type": "integer", "enum": [2, 4]},
                "mode": {"enum": ["stepping", "picard"]},
                "allow_zero_interaction": {"type": "boolean"},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "resolutions": {"type": "array", "minItems": 1,
                                 "items": {"type": "integer", "minimum": 8}},
            },
        },
        "solve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["stepping", "picard"]},
                "amplitude_cap": {"type": "number", "exclusiveMinimum": 0},
                "snapshot_levels": {"type": "array",
                                     "items": {"type": "integer", "minimum": 0}},
            },
        },
        "convergence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "resolutions": {"type": "array", "minItems": 3,
                                 "items": {"type": "integer", "minimum": 8}},
                "expected_order": {"type": "array", "minItems": 2, "maxItems": 2,
                                    "items": {"type": "number"}},
                "bounds": _BOUNDS,
                "t_max": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number", "exclusiveMinimum": 0}
                            for k in DEFAULT_TOLERANCES},
        },
    },
}


def load_config(path):
    """Parse a JSON scenario file; line information is preserved on failure."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigParseError(
            f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from err
    except OSError as err:
        raise ConfigParseError(f"{path}: {err}") from err


def validate_schema(cfg):
    """Schema validation; raises SchemaError with the offending path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{loc}: {e.message}")
        raise SchemaError("; ".join(lines))


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def resolved_tolerances(cfg, tol_scale=1.0):
    tols = dict(DEFAULT_TOLERANCES)
    tols.update(cfg.get("tolerances", {}))
    if tol_scale != 1.0:
        tols = {k: v * tol_scale for k, v in tols.items()}
    return tols


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def scalar_field_from_spec(spec) -> geo.ScalarField:
    if spec is None:
        return geo.ScalarField.constant(0.0)
    kind = spec["type"]
    if kind == "constant":
        return geo.ScalarField.constant(spec.get("value", 0.0))
    if kind == "sine":
        off = float(spec.get("offset", 0.0))
        amp = float(spec.get("amplitude", 0.0))
        k = np.asarray(spec.get("wavevector", [0.0]), dtype=float)

        def fn(x):
            phase = np.tensordot(x[..., :len(k)], k, axes=([-1], [0]))
            return off + amp * np.sin(phase)

        def grad(x):
            phase = np.tensordot(x[..., :len(k)], k, axes=([-1], [0]))
            out = np.zeros(np.shape(x))
            cos = amp * np.cos(phase)
            for a in range(min(len(k), np.shape(x)[-1])):
                out[..., a] = cos * k[a]
            return out

        time_dep = bool(len(k) > 0 and k[0] != 0.0 and amp != 0.0)
        return geo.ScalarField(fn, grad=grad, time_dependent=time_dep)
    raise SchemaError(f"unknown scalar spec type {kind!r}")


def build_metric(cfg, dim=None) -> geo.MetricSpec:
    """Metric from the config; ``dim`` overrides the scenario dimension.

    The interaction-coefficient operations live in 3+1 dimensions while the
    forward solver runs in 1+1 or 2+1; the same catalog entry serves both,
    instantiated per use.
    """
    mc = cfg["metric"]
    kind = mc["kind"]
    dim = int(cfg.get("dimension", 3)) if dim is None else int(dim)
    if kind == "minkowski":
        return geo.minkowski(dim)
    if kind == "conformal_minkowski":
        return geo.conformal_minkowski(scalar_field_from_spec(mc.get("gamma")), dim)
    if kind == "ultrastatic_sphere":
        return geo.ultrastatic_sphere()
    if kind == "product":
        beta = scalar_field_from_spec(mc.get("beta", {"type": "constant", "value": 1.0}))
        diag_specs = mc.get("kappa_diag")
        if diag_specs is None:
            diag_specs = [{"type": "constant", "value": 1.0}] * dim
        fields = [scalar_field_from_spec(s) for s in diag_specs]

        def kfn(x):
            out = np.zeros(np.shape(x)[:-1] + (dim, dim))
            for a, f in enumerate(fields):
                out[..., a, a] = f(x)
            return out

        def kgrad(x):
            n = np.shape(x)[-1]
            out = np.zeros(np.shape(x)[:-1] + (n, dim, dim))
            for a, f in enumerate(fields):
                out[..., :, a, a] = f.gradient(x)
            return out

        time_dep = any(f.time_dependent for f in fields) or beta.time_dependent
        kap = geo.MatrixField(kfn, grad=kgrad, time_dependent=time_dep)
        return geo.product_metric(beta, kap, dim)
    if kind == "coefficient_table":
        mat = np.asarray(mc["matrix"], dtype=float)
        if mat.shape != (dim + 1, dim + 1):
            raise SchemaError(
                f"coefficient_table matrix must be {(dim + 1, dim + 1)}")
        return geo.coefficient_table(
            lambda x, _m=mat: np.broadcast_to(_m, np.shape(x)[:-1] + _m.shape).copy(),
            dim, time_dependent=False)
    raise SchemaError(f"unknown metric kind {kind!r}")


def build_nonlinearity(cfg, metric) -> Optional[nf.NonlinearTerm]:
    spec = cfg.get("nonlinearity")
    if spec is None:
        return None
    term = nf.NonlinearTerm(
        n0=_form_or_none(spec.get("N0"), metric),
        n1=_form_or_none(spec.get("N1"), metric),
        m_form=_form_or_none(spec.get("M"), metric),
    )
    return None if term.is_zero else term


def _form_or_none(spec, metric):
    if spec is None:
        return None
    return nf.parse_form(spec, metric)


def build_scenario_grid(cfg, metric):
    gc = cfg["grid"]
    return build_grid(metric, gc["dimension"], gc["t_max"], gc["bounds"],
                      gc["nx"], cfl=gc.get("cfl", 0.45),
                      collar_fraction=gc.get("collar_fraction", 0.1))


def build_sources(cfg) -> SourceTerm:
    comps = []
    for s in cfg.get("sources", []):
        comps.append(SourceComponent(
            amplitude=float(s["amplitude"]),
            center=[float(v) for v in s["center"]],
            width=[float(v) for v in s["width"]],
            velocity=[float(v) for v in s["velocity"]] if "velocity" in s else None,
            time_derivative=bool(s.get("time_derivative", False)),
        ))
    return SourceTerm(comps)


def build_region(cfg) -> ObservationRegion:
    oc = cfg["observation"]
    return ObservationRegion(box=oc["box"], lattice=oc["lattice"])
