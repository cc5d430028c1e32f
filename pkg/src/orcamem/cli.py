"""Command-line front end.

    orcamem simulate <config.yaml> [--out DIR]
    orcamem sweep <config.yaml> [--out DIR] [--workers N]
    orcamem fit rabi <data.csv> [--seed N] [--boot N]
    orcamem fit lifetime <trace.csv> [--model gaussian|exponential] [--seed N] [--boot N]
    orcamem fit hfs-grid <trace.csv> --config <config.yaml> --A lo:hi:n --B lo:hi:n
    orcamem protocols list

Exit codes: 0 success, 2 configuration or input parse error, 3 validation
error, 4 numerical divergence, 5 fit failure. The default worker count comes
from ``ORCAMEM_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import io
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, artifacts, config, protocol, solver
from .errors import ConfigError, DivergenceError, DomainError, FitError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_FIT = 0, 2, 3, 4, 5
RABI_COLUMNS = ("energy_nJ", "efficiency", "sigma")
_VOLATILE_META = ("rk4_steps", "cached_windows")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, FitError):
        return EXIT_FIT
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ValidationError, DomainError)):
        return EXIT_VALIDATION
    return EXIT_CONFIG


# ---------------------------------------------------------------------------
# simulate


def _point_key(cfg: dict) -> dict:
    """The part of a resolved config that determines the numerical result."""
    return {k: v for k, v in cfg.items() if k not in ("output", "workers", "sweep")}


def run_point(cfg: dict, out_dir: Path) -> dict:
    """Simulate one resolved config and write its artifacts into ``out_dir``."""
    compiled = config.compile_run(cfg)
    start = time.perf_counter()
    record = solver.run(compiled.solver, compiled.sequence,
                        snapshot_times=tuple(cfg["output"]["snapshots"]))
    elapsed = time.perf_counter() - start
    summary = artifacts.record_summary(record, compiled.sequence)
    summary["storage_time_ns"] = config.storage_time(compiled.sequence)
    meta = {k: v for k, v in record.meta.items() if k not in _VOLATILE_META}
    manifest = {
        "kind": "simulation",
        "fingerprint": artifacts.fingerprint(_point_key(cfg)),
        "solver_fingerprint": record.fingerprint,
        "seed": cfg["seed"],
        "config": _point_key(cfg),
        "sequence": compiled.sequence.to_dict(),
        "summary": summary,
        "meta": meta,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "field.csv").write_text(artifacts.field_csv(record))
    (out_dir / "field.dat").write_text(artifacts.field_dat(record))
    if record.snapshots:
        np.savez(out_dir / "snapshots.npz",
                 **{f"{kind}_{t:.6f}": getattr(st, kind)
                    for t, st in record.snapshots.items() for kind in ("S_gs", "S_gd")})
    volatile = {"elapsed_s": elapsed, **{k: record.meta.get(k) for k in _VOLATILE_META}}
    artifacts.write_manifest(out_dir / "manifest.json", manifest, volatile)
    return manifest


def _print_summary(summary: dict, out=None):
    out = out or sys.stdout
    se = summary.get("storage_efficiency")
    print(f"{'quantity':<28}{'value':>14}", file=out)
    print(f"{'storage efficiency':<28}{'-' if se is None else f'{se:14.6f}':>14}", file=out)
    for w, eff in zip(summary.get("windows_ns", []), summary.get("retrieval_efficiencies", [])):
        label = f"retrieval [{w[0]:.3f}, {w[1]:.3f}] ns"
        print(f"{label:<28}{eff:14.6e}", file=out)


def cmd_simulate(args) -> int:
    cfg = config.load(args.config)
    out = Path(args.out or cfg["output"]["dir"])
    manifest = run_point(cfg, out)
    _print_summary(manifest["summary"])
    print(f"wrote {out}/manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _sweep_worker(job):
    cfg, out_dir = job
    try:
        run_point(cfg, Path(out_dir))
        return None
    except Exception as exc:  # recorded per point; the sweep keeps going
        return {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}


def sweep(cfg: dict, out: Path, workers: int = 1) -> dict:
    """Run every point not already on disk; return counts and the failure report."""
    axes = config.sweep_axes(cfg)
    points = config.sweep_points(cfg)
    keys = [artifacts.fingerprint(_point_key(p)) for p in points]
    pending = [(p, str(out / "points" / k)) for p, k in zip(points, keys)
               if not (out / "points" / k / "manifest.json").exists()]
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_worker, pending))
    else:
        results = [_sweep_worker(j) for j in pending]
    failures = {Path(d).name: r for (_, d), r in zip(pending, results) if r is not None}

    rows, trace_rows = [], []
    for p, k in zip(points, keys):
        mpath = out / "points" / k / "manifest.json"
        values = [config.get_path(p, path) for path, _ in axes]
        if mpath.exists():
            s = artifacts.read_manifest(mpath)["summary"]
            eff = s["retrieval_efficiencies"][-1] if s["retrieval_efficiencies"] else float("nan")
            rows.append(values + [k, s["storage_time_ns"], eff, "ok"])
            trace_rows.append((s["storage_time_ns"], eff))
        else:
            rows.append(values + [k, "", "", "failed"])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([path for path, _ in axes] + ["fingerprint", "t_storage_ns", "efficiency", "status"])
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())

    trace_written = False
    if trace_rows:
        t = np.array([r[0] for r in trace_rows])
        if np.all(np.diff(t) > 0):
            eff = np.clip([r[1] for r in trace_rows], 0.0, 1.0)
            trace = analysis.EfficiencyTrace.from_arrays(t, eff, protocol=cfg["protocol"].get("name"))
            (out / "trace.csv").write_text(trace.to_csv())
            (out / "trace.dat").write_text(artifacts.trace_dat(trace))
            trace_written = True
    fail_path = out / "failures.json"
    if failures:
        fail_path.write_text(artifacts.canonical_json(failures))
    elif fail_path.exists():
        fail_path.unlink()
    artifacts.write_manifest(out / "manifest.json", {
        "kind": "sweep",
        "seed": cfg["seed"],
        "axes": [{"path": p, "values": v} for p, v in axes],
        "points": keys,
        "trace": trace_written,
        "fingerprint": artifacts.fingerprint({"points": keys}),
    })
    return {"points": len(points), "ran": len(pending), "skipped": len(points) - len(pending),
            "failed": len(failures), "failures": failures, "succeeded": len(trace_rows)}


def cmd_sweep(args) -> int:
    cfg = config.load(args.config)
    out = Path(args.out or cfg["output"]["dir"])
    n = config.workers(cfg, args.workers)
    report = sweep(cfg, out, n)
    print(f"{report['points']} points: {report['ran']} run, {report['skipped']} already done, "
          f"{report['failed']} failed")
    if report["succeeded"] == 0:
        first = next(iter(report["failures"].values()), None)
        print("no sweep point succeeded", file=sys.stderr)
        return first["exit_code"] if first else EXIT_VALIDATION
    if report["failed"]:
        print(f"failure report: {out}/failures.json", file=sys.stderr)
    print(f"wrote {out}/sweep.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def read_rabi_csv(path: Path):
    try:
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        if not rows or set(RABI_COLUMNS[:2]) - set(rows[0]):
            raise ConfigError(f"{path}: expected columns {', '.join(RABI_COLUMNS)}")
        E = np.array([float(r["energy_nJ"]) for r in rows])
        y = np.array([float(r["efficiency"]) for r in rows])
        s = np.array([float(r.get("sigma") or 0.0) for r in rows])
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed CSV ({exc})") from exc
    return E, y, s


def read_trace(path: Path) -> analysis.EfficiencyTrace:
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    try:
        return analysis.EfficiencyTrace.from_csv(path.read_text(), source=str(path))
    except (ValidationError, DomainError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _axis(spec: str) -> np.ndarray:
    try:
        lo, hi, n = spec.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ConfigError(f"axis {spec!r} must look like lo:hi:n") from exc


class HyperfineEvaluator:
    """Simulated, normalized retrieval trace for given shelving-state constants.

    Picklable so grid nodes can be farmed out to worker processes.
    """

    def __init__(self, cfg: dict, normalize: str = "first"):
        self.cfg = cfg
        self.normalize = normalize

    def __call__(self, A, B, times):
        base = config.set_path(self.cfg, "atoms.hfs", {"d": [float(A), float(B)]})
        eff = []
        for t in times:
            point = config.set_path(base, "protocol.params", {"storage_time": float(t)})
            compiled = config.compile_run(point)
            record = solver.run(compiled.solver, compiled.sequence)
            eff.append(record.energy(compiled.sequence.windows[-1]) / record.energy(which="in"))
        eff = np.array(eff)
        return eff / eff[0] if self.normalize == "first" else eff


def _write_result(args, default_name: str, payload: dict):
    out = Path(args.out) if args.out else Path(args.data).with_suffix(f".{default_name}.json")
    artifacts.write_manifest(out, payload)
    print(f"wrote {out}")


def cmd_fit(args) -> int:
    data = Path(args.data)
    if not data.exists():
        raise ConfigError(f"data file not found: {data}")
    if args.sub == "rabi":
        E, y, s = read_rabi_csv(data)
        res = analysis.fit_rabi(E, y, s, seed=args.seed, n_boot=args.boot, workers=args.workers)
        print(f"{'parameter':<16}{'value':>14}{'sd':>14}")
        for k, v in {**res.params, **res.derived}.items():
            sd = {**res.uncertainties, **res.derived_uncertainties}.get(k, 0.0)
            print(f"{k:<16}{v:14.6g}{sd:14.3g}")
        _write_result(args, "rabi", {"kind": "fit-rabi", "data": artifacts.fingerprint(
            [E, y, s]), **res.to_dict()})
        return EXIT_OK
    if args.sub == "lifetime":
        trace = read_trace(data)
        res = analysis.fit_lifetime(trace, args.model, seed=args.seed, n_boot=args.boot,
                                    workers=args.workers)
        for k, v in res.params.items():
            print(f"{k:<8}{v:14.6g} +- {res.uncertainties.get(k, 0.0):.3g}")
        _write_result(args, "lifetime", {"kind": "fit-lifetime", "data": artifacts.fingerprint(
            list(trace.arrays())), **res.to_dict()})
        return EXIT_OK
    # hfs-grid
    if not args.config:
        raise ConfigError("fit hfs-grid needs --config")
    trace = read_trace(data)
    cfg = config.load(args.config)
    evaluator = HyperfineEvaluator(cfg, args.normalize)
    grid = analysis.hyperfine_grid_search(trace, _axis(args.A), _axis(args.B), evaluator,
                                          seed=args.seed, n_resample=args.boot,
                                          workers=config.workers(cfg, args.workers))
    print(f"best node A={grid.best_node[0]:g} B={grid.best_node[1]:g} MHz; interpolated minimum "
          f"A={grid.minimum[0]:.4g} B={grid.minimum[1]:.4g} MHz; flags: {', '.join(grid.flags) or 'none'}")
    _write_result(args, "hfs-grid", {
        "kind": "fit-hfs-grid",
        "data": artifacts.fingerprint(list(trace.arrays())),
        "polarizations": cfg["pulses"]["polarizations"],
        "config": _point_key(cfg),
        **grid.to_dict(),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# protocols


def cmd_protocols(args) -> int:
    for name, builder in protocol.PROTOCOLS.items():
        params = [p for p in inspect.signature(builder).parameters if p not in ("defaults", "t_deph")]
        doc = (inspect.getdoc(builder) or "").splitlines()[0]
        print(f"{name:<16}{', '.join(params):<48}{doc}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orcamem", description="Rephased ORCA memory simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one configuration")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run the Cartesian product of the sweep axes")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", help="fit measured or simulated data")
    p.add_argument("sub", choices=("rabi", "lifetime", "hfs-grid"))
    p.add_argument("data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--boot", type=int, default=1000, help="bootstrap replicas (grid: resamples)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--model", choices=tuple(analysis.LIFETIME_MODELS), default="exponential")
    p.add_argument("--config", help="run config for hfs-grid")
    p.add_argument("--A", default="2.4:4.4:3", help="lo:hi:n in MHz")
    p.add_argument("--B", default="-6:-2:3", help="lo:hi:n in MHz (write --B=-6:-2:3 for negative values)")
    p.add_argument("--normalize", choices=("first", "none"), default="first")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("protocols", help="list protocol builders")
    p.add_argument("action", choices=("list",))
    p.set_defaults(func=cmd_protocols)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DomainError, DivergenceError, FitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(f"diagnostics: {diag}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
