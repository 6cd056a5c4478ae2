"""Command line front end: ``lagctrl {synthesize,simulate,verify,sweep}``.

Every run writes into ``--out``:

- ``config.json``: the fully resolved scenario (defaults included)
- ``timing.json``: wall-clock seconds per stage
- ``summary.json``: deterministic results, bit-identical for a fixed seed
- ``error.json``: only on failure, with the exit code

Exit codes: 0 pass, 2 validation error, 3 numerical failure,
4 acceptance threshold missed, 1 anything unexpected.
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .exceptions import NumericalError, ValidationError

log = logging.getLogger("lagctrl")

EXIT_OK, EXIT_INTERNAL, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4
SWEEP_NOISE = 0.10


class AcceptanceMiss(Exception):
    """A run finished but missed one of its thresholds."""


def _strict(obj):
    # JSON has no NaN or infinity; store them as null
    if isinstance(obj, dict):
        return {k: _strict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _dump(path, obj):
    with open(path, "w") as fh:
        plain = json.loads(json.dumps(obj, default=_json_default))
        json.dump(_strict(plain), fh, indent=2, sort_keys=True, default=_json_default, allow_nan=False)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def exit_code_for(exc) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, AcceptanceMiss):
        return EXIT_ACCEPTANCE
    return EXIT_INTERNAL


def error_record(exc, code) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("time", "index", "history"):
        v = getattr(exc, attr, None)
        if v is not None:
            rec[attr] = v
    if code == EXIT_INTERNAL:
        rec["traceback"] = traceback.format_exc()
    return rec


# -- stages ------------------------------------------------------------------------------

def _load(args):
    from .scenario import Scenario
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={int(args.seed)}")
    scen = Scenario.load(args.scenario, overrides)
    scen.validate()
    return scen


def _write_surface(surface, stem, t=None):
    from .geometry.io import write_obj, write_vtk
    write_obj(surface, f"{stem}.obj")
    write_vtk(surface, f"{stem}.vtk", title=f"surface t={t:.6g}" if t is not None else "surface")


def _synthesize(scen, out, timings):
    from .control import ControlSynthesizer
    t0 = time.perf_counter()
    domain = scen.domain()
    g0 = scen.gamma0()
    X = scen.isotopy(domain, g0)
    est = ControlSynthesizer(domain, scen.synthesis_config()).fit(X, g0)
    timings["synthesis"] = time.perf_counter() - t0
    control = est.control_
    _dump(out / "control.json", control.to_dict())
    _dump(out / "synthesis_report.json", [r.to_dict() if hasattr(r, "to_dict") else r for r in control.report])
    return est


def cmd_synthesize(scen, out, timings) -> dict:
    est = _synthesize(scen, out, timings)
    _write_surface(scen.gamma0(), out / "gamma0")
    _write_surface(scen.gamma1(), out / "gamma1")
    rep = est.control_.report
    def worst(key):
        vals = [float((r.to_dict() if hasattr(r, "to_dict") else r).get(key, 0.0)) for r in rep]
        return max(vals) if vals else 0.0
    return {"snapshots": len(est.control_.times), "poles": int(len(est.control_.all_poles())),
            "max_approx_residual": worst("approx_residual"), "max_seal_residual": worst("seal_residual"),
            "max_neumann_residual": worst("neumann_residual")}


def _export_run(run, scen, out):
    from .euler import Lattice
    from .geometry.mesh import enclosed_volume
    from .scenario import write_lattice_csv

    domain = scen.domain()
    _write_csv(out / "iteration_log.csv", ["iter", "residual", "ball_norm", "lambda_norms"],
               [(r["iter"], r["residual"], r["ball_norm"], r["lambda_norms"]) for r in run.picard.log_rows()])
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    rows = []
    for k, (t, s) in enumerate(run.trajectory):
        _write_surface(s, snaps / f"surface_{k:04d}", t)
        rows.append((k, t, enclosed_volume(s, validate=False),
                     float(-domain.signed_distance(s.vertices).max())))
    _write_csv(out / "trajectory.csv", ["snapshot", "time", "volume", "clearance"], rows)
    _write_surface(run.final_surface, out / "final")
    _write_surface(scen.gamma1(), out / "gamma1")
    if run.picard.clouds:
        lg = run.picard.clouds[0].log
        _write_csv(out / "transport_log.csv", ["time", "omega_sup", "grad_sup", "div_sup"],
                   zip(lg.times, lg.omega_sup, lg.grad_sup, lg.div_sup))
    run.diagnostics.to_json(out / "diagnostics.json")
    run.diagnostics.write_series_csv(out / "diagnostics_series.csv")
    lat = Lattice.covering(domain.c, domain.extent_radius(), float(scen.data["output"]["lattice_spacing"]))
    pts = lat.points()
    pts = pts[domain.signed_distance(pts) < 0]
    write_lattice_csv(out / "field.csv", pts, run.field(run.rho, pts))
    _dump(out / "control.json", run.control.to_dict())
    _dump(out / "synthesis_report.json", run.synthesis_report)


def _acceptance_failures(scen, summary, diagnostics=None):
    fails = []
    thr = scen.data["acceptance"]["final_hausdorff_max"]
    if thr is not None and not summary["final_hausdorff"] <= float(thr):
        fails.append(f"final_hausdorff {summary['final_hausdorff']:.4g} > {float(thr):g}")
    if diagnostics is not None:
        fails += [f"diagnostic {k} failed" for k in diagnostics.failures() if k != "final_hausdorff"]
    return fails


def cmd_simulate(scen, out, timings) -> dict:
    from .euler import solve_controlled_euler
    run = solve_controlled_euler(scen)
    timings.update(run.timings)
    t0 = time.perf_counter()
    _export_run(run, scen, out)
    timings["export"] = time.perf_counter() - t0
    summary = run.summary()
    summary["acceptance_failures"] = _acceptance_failures(scen, summary, run.diagnostics)
    return summary


def cmd_verify(scen, out, timings) -> dict:
    """Recompute containment, distance and Grönwall verdicts from stored files."""
    from .diagnostics import containment_check, gronwall_audit
    from .geometry.distance import surface_distance
    from .geometry.io import read_obj

    t0 = time.perf_counter()
    try:
        stored = json.loads((out / "summary.json").read_text())
    except FileNotFoundError:
        raise ValidationError(f"{out}/summary.json not found: run 'simulate' first") from None
    snaps = sorted((out / "snapshots").glob("surface_*.obj"))
    if not snaps:
        raise ValidationError(f"no snapshots under {out}/snapshots")
    times = {}
    if (out / "trajectory.csv").exists():
        with open(out / "trajectory.csv") as fh:
            times = {int(r["snapshot"]): float(r["time"]) for r in csv.DictReader(fh)}
    traj = [(times.get(k, float(k)), read_obj(p)) for k, p in enumerate(snaps)]
    domain = scen.domain()
    cont = containment_check(traj, domain)
    final = read_obj(out / "final.obj")
    dist = surface_distance(final, scen.gamma1())
    rec = {"final_hausdorff": dist.hausdorff, "final_mean_distance": dist.mean,
           "final_normal_deviation": dist.normal_deviation,
           "containment_passed": cont.passed, "min_clearance": cont.min_clearance}
    if (out / "transport_log.csv").exists():
        with open(out / "transport_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            lg = {k: [float(r[k]) for r in rows] for k in ("time", "omega_sup", "grad_sup", "div_sup")}
            g = gronwall_audit(lg, raise_on_failure=False)
            rec["gronwall_margin"] = g.margin
            rec["gronwall_passed"] = g.passed
    mismatches = []
    for k in ("final_hausdorff", "final_mean_distance", "min_clearance"):
        a, b = rec[k], stored.get(k)
        if b is None or not math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12):
            mismatches.append(f"{k}: stored {b} recomputed {a}")
    if stored.get("containment_passed") != cont.passed:
        mismatches.append("containment verdict differs")
    timings["verify"] = time.perf_counter() - t0
    rec["mismatches"] = mismatches
    rec["acceptance_failures"] = _acceptance_failures(scen, rec) + mismatches
    if rec.get("gronwall_passed") is False:
        rec["acceptance_failures"].append("Grönwall audit failed")
    _dump(out / "verify.json", rec)
    return rec


def cmd_sweep(scen, out, timings) -> dict:
    """Final distance for each value of ``sweep.parameter``."""
    from .euler import solve_controlled_euler

    sw = scen.data["sweep"]
    name, values = sw["parameter"], list(sw["values"])
    if not name or not values:
        raise ValidationError("sweep needs sweep.parameter and a nonempty sweep.values")
    rows = []
    for v in values:
        sub = scen.with_overrides([f"{name}={json.dumps(v)}"])
        sub.validate()
        t0 = time.perf_counter()
        run = solve_controlled_euler(sub)
        dt = time.perf_counter() - t0
        timings[f"sweep[{v}]"] = dt
        d = run.distance
        rows.append((v, d.hausdorff, d.mean, d.normal_deviation, run.picard.iterations))
        log.info("sweep %s=%s: hausdorff %.4g (%.1fs)", name, v, d.hausdorff, dt)
    _write_csv(out / "sweep.csv", [name, "final_hausdorff", "final_mean_distance", "final_normal_deviation",
                                   "picard_iterations"], rows)
    dists = [r[1] for r in rows]
    fails = [f"distance rose from {a:.4g} to {b:.4g}" for a, b in zip(dists, dists[1:])
             if b > (1.0 + SWEEP_NOISE) * a]
    return {"parameter": name, "values": values, "final_hausdorff": dists, "acceptance_failures": fails}


COMMANDS = {"synthesize": cmd_synthesize, "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep}


# -- entry points ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagctrl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", required=True, help="scenario JSON (path or shipped name)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="probe placement seed (u64)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, repeatable (e.g. synthesis.approx_pole_count=200)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command, scenario, out, seed=None, overrides=()) -> int:
    """Programmatic equivalent of the command line; returns the exit code."""
    argv = [command, "--scenario", str(scenario), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    for o in overrides:
        argv += ["--override", o]
    return main(argv)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    err = out / "error.json"
    if err.exists():
        err.unlink()
    timings = {}
    t_start = time.perf_counter()
    code = EXIT_OK
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ValidationError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        scen = _load(args)
        _dump(out / "config.json", scen.to_dict())
        summary = COMMANDS[args.command](scen, out, timings)
        summary = {"command": args.command, "scenario": scen.name, "seed": scen.seed, **summary}
        if args.command != "verify":
            _dump(out / "summary.json", summary)
        fails = summary.get("acceptance_failures", [])
        if fails:
            raise AcceptanceMiss("; ".join(fails))
        print(f"{args.command}: pass")
    except Exception as exc:
        code = exit_code_for(exc)
        _dump(err, error_record(exc, code))
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    finally:
        timings["total"] = time.perf_counter() - t_start
        _dump(out / "timing.json", timings)
    return code


if __name__ == "__main__":
    sys.exit(main())
