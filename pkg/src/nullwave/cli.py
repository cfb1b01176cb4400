"""Scenario runner: parse a config, dispatch a subcommand, emit reports.

Exit codes: 0 success, 1 configuration or I/O error, 2 mathematical
assertion failure (a science check did not hold).  Every JSON report embeds
the resolved config, its hash, the seed, and the tolerance set, so reruns
with the same config and seed are byte-identical apart from the timestamp
field.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fieldio
from . import geometry as geo
from . import nullform as nf
from . import obsets as ob
from . import symbolcalc as sc
from . import wavesolver as ws
from .errors import (
    AssumptionViolated,
    ConfigParseError,
    NullwaveError,
    SchemaError,
    SearchFailed,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSERTION = 2


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

class _Runner:
    def __init__(self, cfg, args):
        self.cfg = cfg
        self.seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        self.out_dir = Path(args.out_dir or cfg.get("output_dir", "out"))
        self.threads = int(args.threads)
        self.tolerances = cfgmod.resolved_tolerances(cfg, args.tol_scale)
        self.hash = cfgmod.config_hash(cfg)
        self.allow_violation = bool(args.allow_assumption_violation or (
            (cfg.get("nonlinearity") or {}).get("allow_assumption_violation", False)))
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def report(self, subcommand, results, extra_files=()):
        payload = {
            "subcommand": subcommand,
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "seed": self.seed,
            "config_sha256": self.hash,
            "tolerances": self.tolerances,
            "config": self.cfg,
            "results": results,
        }
        path = self.out_dir / f"{subcommand}_report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
        written = [str(path)] + [str(p) for p in extra_files]
        print(f"[{subcommand}] wrote " + ", ".join(written))
        return path

    def write_csv(self, name, render):
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            render(fh)
        return path

    def metric(self):
        return cfgmod.build_metric(self.cfg)

    def solver_metric(self):
        return cfgmod.build_metric(self.cfg, dim=self.cfg["grid"]["dimension"])

    def classified_nonlinearity(self, metric, points=None):
        """Build and classify the nonlinearity; gate on the classification."""
        nl = cfgmod.build_nonlinearity(self.cfg, metric)
        if nl is None:
            return None, None
        if points is None:
            points = [np.zeros(metric.n)]
        report = nf.classify_nonlinearity(nl, metric, points,
                                          rng=np.random.default_rng(self.seed))
        if not report.satisfied and not self.allow_violation:
            raise AssumptionViolated(
                "nonlinearity fails the null/null/non-null classification "
                f"({report.summary()}); rerun with --allow-assumption-violation "
                "to proceed anyway")
        return nl, report


def _json_safe(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(runner: _Runner):
    errors, warnings = [], []
    cfg = runner.cfg
    metric = runner.metric()

    nl = cfgmod.build_nonlinearity(cfg, metric)
    classification = None
    if nl is not None:
        report = nf.classify_nonlinearity(
            nl, metric, [np.zeros(metric.n)],
            rng=np.random.default_rng(runner.seed))
        classification = report.summary()
        if not report.satisfied:
            warnings.append("AssumptionAViolated: " + json.dumps(classification,
                                                                 sort_keys=True))

    if "grid" in cfg and cfg.get("sources"):
        grid = cfgmod.build_scenario_grid(cfg, runner.solver_metric())
        src = cfgmod.build_sources(cfg)
        if src.components and src.earliest_onset() < grid.t[0] + 2 * grid.dt:
            errors.append("sources must stay quiet for the first two time levels")
        for k, comp in enumerate(src.components):
            for a, (lo, hi) in enumerate(cfg["grid"]["bounds"]):
                c, w = comp.center[1 + a], comp.width[1 + a]
                if c - w < lo or c + w > hi:
                    errors.append(f"source {k} support leaves the grid along axis {a}")
    if "observation" in cfg and cfg.get("sources"):
        region = cfgmod.build_region(cfg)
        for k, comp in enumerate(cfgmod.build_sources(cfg).components):
            if len(comp.center) != region.box.shape[0]:
                continue  # source lives on the solver grid, not in this region
            lo = np.asarray(comp.center, float) - np.asarray(comp.width, float)
            hi = np.asarray(comp.center, float) + np.asarray(comp.width, float)
            if np.any(lo < region.box[:, 0]) or np.any(hi > region.box[:, 1]):
                warnings.append(
                    f"source {k} support is not inside the observation region")
    if cfg.get("expand") and cfg.get("expand", {}).get("order", 4) == 4 \
            and len(cfg.get("sources", [])) < 4:
        errors.append("order-4 expansion needs four sources")

    results = {"ok": not errors, "errors": errors, "warnings": warnings,
               "classification": classification}
    runner.report("validate", results)
    return EXIT_OK if not errors else EXIT_ERROR


def cmd_decompose(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    nl = cfgmod.build_nonlinearity(cfg, metric)
    if nl is None:
        runner.report("decompose", {"note": "no nonlinearity configured"})
        return EXIT_OK
    rng = np.random.default_rng(runner.seed)
    base = np.asarray(cfg.get("quadruple", {}).get("base_point",
                                                   [0.0] * metric.n), float)
    points = [base] + [base + 0.3 * rng.standard_normal(metric.n) for _ in range(4)]
    report = nf.classify_nonlinearity(nl, metric, points, rng=rng,
                                      tol_dec=runner.tolerances["tol_dec"])

    rows = []
    for k, x in enumerate(report.points):
        rows.append({
            "point": x.tolist(),
            "n0_null": bool(report.n0_null[k]) if report.n0_null else None,
            "n1_null": bool(report.n1_null[k]) if report.n1_null else None,
            "m_null": bool(report.m_null[k]) if report.m_null else None,
            "c0": float(report.c0_values[k]) if report.c0_values is not None else None,
            "c1": float(report.c1_values[k]) if report.c1_values is not None else None,
        })

    def render(fh):
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow(["point", "n0_null", "n1_null", "m_null", "c0", "c1"])
        for r in rows:
            w.writerow([";".join(repr(v) for v in r["point"]), r["n0_null"],
                         r["n1_null"], r["m_null"], r["c0"], r["c1"]])

    csv_path = runner.write_csv("decompose_points.csv", render)
    runner.report("decompose",
                  {"classification": report.summary(), "points": rows},
                  extra_files=[csv_path])
    return EXIT_OK


def cmd_witness(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    nl = cfgmod.build_nonlinearity(cfg, metric)
    if nl is None or nl.m_form is None:
        print("witness: no M form configured", file=sys.stderr)
        return EXIT_ERROR
    wc = cfg.get("witness", {})
    q0 = np.asarray(cfg.get("quadruple", {}).get("base_point",
                                                 [0.0] * metric.n), float)
    try:
        result = sc.nonvanishing_witness(
            metric, nl.m_form, q0,
            n_attempts=int(wc.get("attempts", 100)),
            threshold=float(wc.get("threshold", 1e-4)),
            seed=runner.seed)
    except SearchFailed as err:
        runner.report("witness", {"found": False, "max_normalized_p": err.best})
        return EXIT_ASSERTION
    if isinstance(result, sc.MNullCertificate):
        runner.report("witness", {"found": False, "m_null_certificate": True,
                                   "message": result.message})
        return EXIT_OK
    p = sc.interaction_P(metric, nl.m_form, result)
    runner.report("witness", {
        "found": True,
        "covectors": result.zetas.tolist(),
        "base_point": result.q0.tolist(),
        "sum_norm2": result.sum_norm2,
        "interaction_P": p,
        "normalized": abs(p) / result.norm2() ** 2,
        "orientations": list(result.orientations),
    })
    return EXIT_OK


def cmd_interact(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    nl = cfgmod.build_nonlinearity(cfg, metric)
    m_form = nl.m_form if nl is not None and nl.m_form is not None \
        else nf.constant_form(np.eye(metric.n), "identity")
    qc = cfg.get("quadruple", {})
    q0 = np.asarray(qc.get("base_point", [0.0] * metric.n), float)
    count = int(qc.get("count", 50))
    require_null = bool(qc.get("require_null_sum", False))

    rows = []
    ratios = []
    first_report = None
    for k in range(count):
        quad = sc.sample_quadruple(metric, q0, seed=runner.seed + k,
                                   require_null_sum=require_null)
        rep = sc.interaction_report(metric, m_form, quad)
        rows.append(rep.row(runner.seed + k))
        if first_report is None:
            first_report = {
                "P": rep.p, "A": rep.a, "B": rep.b, "rank": rep.rank,
                "gstar_zz": rep.sum_norm2,
                "metric": rep.metric_label, "form": rep.form_label,
                "covectors": rep.quad.zetas.tolist(),
                "base_point": rep.quad.q0.tolist(),
                "denominators": rep.denominators,
            }
        if abs(rep.sum_norm2) > 1e-8 * quad.norm2():
            ratios.append((rep.a / rep.sum_norm2, rep.b / rep.sum_norm2))

    def render(fh):
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow(["seed", "gstar_zz", "P", "A", "B", "rank"])
        for r in rows:
            w.writerow([r["seed"], repr(r["gstar_zz"]), repr(r["P"]),
                         repr(r["A"]), repr(r["B"]), r["rank"]])

    csv_path = runner.write_csv("interactions.csv", render)
    summary = {"count": count, "require_null_sum": require_null,
               "form": m_form.label, "first_report": _json_safe(first_report)}
    if ratios:
        arr = np.asarray(ratios)
        summary["a_slope"] = {"mean": float(arr[:, 0].mean()),
                               "spread": float(np.ptp(arr[:, 0]))}
        summary["b_slope"] = {"mean": float(arr[:, 1].mean()),
                               "spread": float(np.ptp(arr[:, 1]))}
    runner.report("interact", summary, extra_files=[csv_path])
    return EXIT_OK


def cmd_conformal(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    nl = cfgmod.build_nonlinearity(cfg, metric)
    m_form = nl.m_form if nl is not None and nl.m_form is not None \
        else nf.constant_form(np.eye(metric.n), "identity")
    cc = cfg.get("conformal", {})
    gamma = cc.get("gamma")
    gamma = cfgmod.scalar_field_from_spec(gamma) if gamma is not None \
        else float(cc.get("gamma_value", 0.5))
    q0 = np.asarray(cfg.get("quadruple", {}).get("base_point",
                                                 [0.0] * metric.n), float)
    quad = sc.sample_quadruple(metric, q0, seed=runner.seed, require_null_sum=True)
    rep = sc.conformal_relation(metric, gamma, m_form, quad)
    runner.report("conformal", _json_safe({
        "gamma_at_q0": rep.gamma_at_q0,
        "p_base": rep.p_base,
        "p_scaled": rep.p_scaled,
        "ratio": rep.ratio,
        "expected_ratio": rep.expected_ratio,
        "exponents": rep.exponents,
        "net_exponent": rep.net_exponent,
        "consistent": rep.consistent,
    }))
    return EXIT_OK if rep.consistent else EXIT_ASSERTION


def cmd_solve(runner: _Runner):
    cfg = runner.cfg
    metric = runner.solver_metric()
    nl, _ = runner.classified_nonlinearity(metric)
    grid = cfgmod.build_scenario_grid(cfg, metric)
    src = cfgmod.build_sources(cfg)
    sol_cfg = cfg.get("solve", {})
    sol = ws.solve_nonlinear(metric, nl, src, grid,
                             mode=sol_cfg.get("mode", "stepping"),
                             sponge=cfg.get("grid", {}).get("sponge"),
                             amplitude_cap=sol_cfg.get("amplitude_cap", 2.0))
    peak_outside, f_scale = ws.max_outside_causal_future(sol, src)
    causal_ok = peak_outside <= 1e-10 * max(f_scale, 1e-300)

    levels = sol_cfg.get("snapshot_levels")
    if levels is None:
        levels = sorted({0, grid.nt // 4, grid.nt // 2, 3 * grid.nt // 4, grid.nt})
    bin_path = runner.out_dir / "field.nwf"
    snap = ws.GridField(grid, sol.values[levels], np.asarray(levels, dtype=int))
    with open(bin_path, "wb") as fh:
        fieldio.write_field_binary(snap, fh)
    csv_path = runner.write_csv(
        "field.csv", lambda fh: fieldio.write_field_csv(snap, fh))

    runner.report("solve", {
        "grid": {"nt": grid.nt, "shape": list(grid.shape), "dt": grid.dt,
                  "dx": list(grid.dx)},
        "max_abs": float(np.max(np.abs(sol.values))),
        "interior_l2": sol.interior_norm(),
        "outside_causal_future": peak_outside,
        "source_scale": f_scale,
        "causal_ok": bool(causal_ok),
        "snapshot_levels": [int(l) for l in levels],
    }, extra_files=[bin_path, csv_path])
    return EXIT_OK if causal_ok else EXIT_ASSERTION


def cmd_expand(runner: _Runner):
    cfg = runner.cfg
    metric = runner.solver_metric()
    grid = cfgmod.build_scenario_grid(cfg, metric)
    src = cfgmod.build_sources(cfg)
    ec = cfg.get("expand", {})
    order = int(ec.get("order", 4))
    delta = float(ec.get("delta", 0.02))
    tol = float(ec.get("tolerance", 0.10))
    mode = ec.get("mode", "stepping")
    sponge = cfg.get("grid", {}).get("sponge")

    nl, _ = runner.classified_nonlinearity(metric)
    if nl is None:
        if not ec.get("allow_zero_interaction", False):
            print("expand: nonlinearity is zero; pass allow_zero_interaction "
                  "to run the zero-field check", file=sys.stderr)
            return EXIT_ASSERTION
        mix = ws.mixed_difference(metric, None, src, grid, order=order,
                                  delta=delta, mode=mode,
                                  check_cancellation=False, sponge=sponge,
                                  threads=runner.threads)
        peak = float(np.max(np.abs(mix.values)))
        runner.report("expand", {"zero_interaction": True, "stencil_peak": peak})
        return EXIT_OK if peak < 1e-8 else EXIT_ASSERTION

    gc = cfg["grid"]
    resolutions = ec.get("resolutions", [gc["nx"][0]])
    rel_errors = []
    rich_changes = []
    term_scales = None
    for nx in resolutions:
        grid_r = ws.build_grid(metric, gc["dimension"], gc["t_max"],
                               gc["bounds"], [int(nx)] * gc["dimension"],
                               cfl=gc.get("cfl", 0.45),
                               collar_fraction=gc.get("collar_fraction", 0.1))
        vs = [ws.solve_linear(
            metric,
            ws.SourceTerm([ws.SourceComponent(1.0, c.center, c.width,
                                              c.velocity, c.time_derivative)]),
            grid_r, sponge=sponge) for c in src.components[:4]]
        sel = (slice(None),) + grid_r.interior(4)
        if order == 4:
            terms = ws.expansion_terms(metric, nl, vs, sponge=sponge)
            mix = ws.mixed_difference(metric, nl, src, grid_r, order=4,
                                      delta=delta, mode=mode, sponge=sponge,
                                      threads=runner.threads)
            ref = terms.total.values
            term_scales = {"m1": float(np.max(np.abs(terms.m1.values))),
                           "m2": float(np.max(np.abs(terms.m2.values))),
                           "m3": float(np.max(np.abs(terms.m3.values)))}
        else:
            mix = ws.mixed_difference(metric, nl, src, grid_r, order=2,
                                      delta=delta, mode=mode, sponge=sponge,
                                      threads=runner.threads)
            ref = ws.second_order_reference(metric, nl, vs[0], vs[1],
                                            sponge=sponge).values
        rel_errors.append(_rel_l2(mix.values[sel], ref[sel]))
        rich_changes.append(mix.meta.get("richardson_rel_change"))

    report = ws.ExpansionReport(order, delta, [int(r) for r in resolutions],
                                rel_errors, rich_changes, grid.collar)
    rel = rel_errors[-1]
    results = dict(report.as_dict())
    results["relative_error"] = rel
    results["mode"] = mode
    if term_scales is not None:
        results["term_scales"] = term_scales
    runner.report("expand", results)
    return EXIT_OK if rel <= tol else EXIT_ASSERTION


def _rel_l2(a, b):
    den = float(np.sqrt(np.mean(b ** 2)))
    if den == 0.0:
        return float("inf")
    return float(np.sqrt(np.mean((a - b) ** 2)) / den)


def cmd_geodesics(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    gc = cfg["geodesics"]
    x0 = np.asarray(gc["start"], float)
    v0 = geo.Vector(np.asarray(gc["direction"], float))
    path = geo.geodesic_trace(metric, x0, v0, gc["s_max"], gc["step"])
    csv_path = runner.write_csv("geodesic.csv",
                                lambda fh: geo.path_to_csv(path, fh))
    results = {
        "character": path.character,
        "samples": len(path),
        "conservation_defect": path.conservation_defect(),
    }
    if gc.get("conjugate", False):
        tau = geo.first_conjugate_time(metric, path,
                                       tol_conj=runner.tolerances["tol_conj"])
        results["first_conjugate_parameter"] = tau
    fc = gc.get("flowout")
    if fc:
        surf = geo.flowout_surface(metric, x0, v0, fc["t0"], fc["s0"],
                                   fc.get("n_dirs", 16), seed=runner.seed)
        results["flowout"] = {
            "paths": len(surf.paths),
            "slice_points": len(surf.slice_points),
            "slice_time": 2 * surf.t0,
        }
    runner.report("geodesics", _json_safe(results), extra_files=[csv_path])
    return EXIT_OK


def cmd_obset(runner: _Runner):
    cfg = runner.cfg
    metric = runner.metric()
    region = cfgmod.build_region(cfg)
    oc = cfg["observation"]
    sources = [np.asarray(q, float) for q in oc["sources"]]
    kwargs = {"n_dirs": int(oc.get("n_dirs", 64)),
              "step": float(oc.get("step", 0.02))}
    sets = [ob.earliest_observation_set(metric, q, region, seed=runner.seed,
                                        **kwargs) for q in sources]
    csv_path = runner.write_csv("obsets.csv",
                                lambda fh: ob.sets_to_csv(sets, fh))
    matrix = ob.distinguishability_matrix(metric, sources, region,
                                          seed=runner.seed, **kwargs)

    def render_matrix(fh):
        import csv as _csv
        w = _csv.writer(fh)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])

    mat_path = runner.write_csv("distinguishability.csv", render_matrix)
    offdiag = matrix[np.triu_indices(len(sources), 1)] if len(sources) > 1 else np.array([])
    runner.report("obset", {
        "set_sizes": [len(s) for s in sets],
        "empty_flags": [bool(s.empty_flagged) for s in sets],
        "min_pairwise_distance": float(np.nanmin(offdiag)) if offdiag.size else None,
    }, extra_files=[csv_path, mat_path])
    return EXIT_OK


def cmd_convergence(runner: _Runner):
    cfg = runner.cfg
    metric = runner.solver_metric()
    src = cfgmod.build_sources(cfg)
    cc = cfg.get("convergence", {})
    resolutions = cc.get("resolutions", [128, 256, 512])
    lo, hi = cc.get("expected_order", [1.7, 2.3])
    gc = cfg["grid"]
    bounds = cc.get("bounds", gc["bounds"])
    t_max = cc.get("t_max", gc["t_max"])

    def solve_at(nx):
        grid = ws.build_grid(metric, gc["dimension"], t_max, bounds,
                             [nx] * gc["dimension"], cfl=gc.get("cfl", 0.45),
                             collar_fraction=gc.get("collar_fraction", 0.1))
        return ws.solve_linear(metric, src, grid, store="last",
                               sponge=gc.get("sponge"))

    table = ws.convergence_study(solve_at, resolutions)
    ok = all(lo <= p <= hi for p in table.orders)
    runner.report("convergence", _json_safe({
        "table": table.as_dict(), "expected_order": [lo, hi], "ok": ok}))
    return EXIT_OK if ok else EXIT_ASSERTION


COMMANDS = {
    "validate": cmd_validate,
    "decompose": cmd_decompose,
    "witness": cmd_witness,
    "interact": cmd_interact,
    "conformal": cmd_conformal,
    "solve": cmd_solve,
    "expand": cmd_expand,
    "geodesics": cmd_geodesics,
    "obset": cmd_obset,
    "convergence": cmd_convergence,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nullwave",
        description="Scenario runner for the null-form wave interaction lab")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=None,
                       help="override the config output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for independent solves")
        p.add_argument("--tol-scale", type=float, default=1.0,
                       help="multiply every tolerance by this factor")
        p.add_argument("--allow-assumption-violation", action="store_true",
                       help="run even when the nonlinearity fails classification")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        cfgmod.validate_schema(cfg)
    except (ConfigParseError, SchemaError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_ERROR
    runner = _Runner(cfg, args)
    try:
        return COMMANDS[args.subcommand](runner)
    except AssumptionViolated as err:
        print(f"assumption check failed: {err}", file=sys.stderr)
        return EXIT_ASSERTION
    except NullwaveError as err:
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
