"""Command-line entry points.

Exit codes: 0 success, 1 I/O or output-directory conflict, 2 usage or
malformed input, 3 invariant violation during simulation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

from . import __version__
from . import io as bio
from .model import cost_vector, generate_instance, ground_state_probability
from .opensystem import (
    NOISE_COLUMNS,
    DephasingConfig,
    InvariantViolation,
    LinearRamp,
    RedfieldConfig,
    check_invariants,
    dephasing_evolve,
    noise_row,
    redfield_evolve,
)
from .optimizers import RESULT_COLUMNS, derive_seed, optimize, result_row, run_jobs
from .pontryagin import certify_protocol
from .statevector import energy, evolve_protocol, initial_state, ramp_protocol
from .stats import (
    COMPARISON_COLUMNS,
    DEFAULT_BIN_WIDTH,
    DEFAULT_UPPER,
    HISTOGRAM_COLUMNS,
    collect_durations,
    comparison_table,
)

log = logging.getLogger(__name__)

NORM_DRIFT_TOL = 1e-9


class UsageError(ValueError):
    """Bad command-line arguments or sweep configuration."""


# ------------------------------------------------------------------- helpers


def _run(out_dir, command, params, seed, inputs, body):
    """Claim ``out_dir``, run ``body(out_path, resume)`` and write the manifest."""
    manifest = bio.RunManifest(command, params, seed, [str(p) for p in inputs])
    resume = bio.claim_output_dir(out_dir, manifest)
    t0 = time.perf_counter()
    outputs = body(Path(out_dir), resume)
    manifest.outputs = [str(p) for p in outputs]
    manifest.wall_clock = round(time.perf_counter() - t0, 6)
    bio.write_manifest(out_dir, manifest)
    return outputs


def _closed_metrics(inst, protocol):
    cv = cost_vector(inst)
    psi = evolve_protocol(initial_state(inst.n), protocol, cv)
    e = energy(psi, cv)
    p = ground_state_probability(psi, cv)
    drift = abs(psi.norm - 1.0)
    if drift > NORM_DRIFT_TOL:
        raise InvariantViolation(f"norm drift {drift:.3e}")
    return {"model": "closed", "T": protocol.T, "final_energy": e, "energy_error": e - cv.ground_energy,
            "fidelity_error": 1.0 - p, "success_prob": p, "diagnostics": {"norm_drift": drift}}


def _open_metrics(inst, schedule, model, strength, beta=None, step=1e-3):
    if model == "dephasing":
        dm = dephasing_evolve(None, schedule, DephasingConfig(strength), inst, step)
    else:
        dm = redfield_evolve(None, schedule, RedfieldConfig(strength, beta, step), inst)
    T = schedule.T
    check_invariants(dm, T)
    d = dict(dm.diagnostics)
    cv = cost_vector(inst)
    return dm, {"model": model, "strength": strength, "beta": beta, "T": T,
                "final_energy": d["energy_error"] + cv.ground_energy,
                "energy_error": d.pop("energy_error"), "fidelity_error": d.pop("fidelity_error"),
                "success_prob": 1.0 - dm.diagnostics["fidelity_error"], "diagnostics": d}


def _evolve_metrics(inst, protocol, dephasing=None, redfield=None, step=1e-3):
    if dephasing is not None and redfield is not None:
        raise UsageError("choose at most one of --dephasing and --redfield")
    if dephasing is not None:
        return _open_metrics(inst, protocol, "dephasing", dephasing, step=step)[1]
    if redfield is not None:
        return _open_metrics(inst, protocol, "redfield", redfield[0], redfield[1], step)[1]
    return _closed_metrics(inst, protocol)


def _opt_options(args):
    if args.method == "mc":
        return {"slices": args.slices, "sweeps": args.sweeps}
    return {"max_pulses": args.max_pulses, "restarts": args.restarts}


# ------------------------------------------------------------------ commands


def cmd_gen(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    params = {"n": args.n, "count": args.count}

    def body(out, resume):
        files = []
        for i in range(args.count):
            inst = generate_instance(args.n, derive_seed(args.seed, i))
            files.append(bio.write_instance(out / f"sk_n{args.n}_s{args.seed}_{i:04d}.json", inst))
        return files

    files = _run(args.out, "gen", params, args.seed, [], body)
    print(f"wrote {len(files)} instance(s) to {args.out}")


def cmd_optimize(args):
    inst = bio.read_instance(args.instance)
    if args.T <= 0:
        raise UsageError("--T must be positive")
    opts = _opt_options(args)
    params = {"method": args.method, "T": args.T, "certify": args.certify, "options": opts}

    def body(out, resume):
        res = optimize(inst, args.T, args.method, seed=args.seed, **opts)
        prot = res.best_protocol
        row = result_row(inst, args.T, args.method, prot, res.evaluations)
        files = [bio.write_protocol(out / "protocol.json", prot),
                 bio.write_csv(out / "result.csv", RESULT_COLUMNS, [row])]
        summary = dict(row, converged=bool(res.converged), best_cost=float(res.best_cost))
        if args.certify:
            cert = certify_protocol(prot, cost_vector(inst))
            files.append(bio.write_switching_trace(out / "switching_trace.csv", cert.trace))
            files.append(bio.write_json(out / "switch_report.json", cert.to_dict()))
            summary["certificate"] = cert.status
        files.append(bio.write_json(out / "result.json", summary))
        print(f"{args.method}: energy error {row['energy_error']:.6g}, "
              f"success probability {row['success_prob']:.6g}"
              + (f", certificate {summary['certificate']}" if args.certify else ""))
        return files

    _run(args.out, "optimize", params, args.seed, [args.instance], body)


def _load_schedule(args):
    if (args.protocol is None) == (args.ramp is None):
        raise UsageError("give exactly one of a protocol file or --ramp T")
    if args.protocol is not None:
        return bio.read_protocol(args.protocol)
    if args.ramp <= 0:
        raise UsageError("--ramp must be positive")
    return ramp_protocol(args.ramp)


def cmd_evolve(args):
    inst = bio.read_instance(args.instance)
    schedule = _load_schedule(args)
    params = {"protocol": args.protocol, "ramp": args.ramp, "dephasing": args.dephasing,
              "redfield": args.redfield, "step": args.step}
    inputs = [args.instance] + ([args.protocol] if args.protocol else [])

    def body(out, resume):
        m = _evolve_metrics(inst, schedule, args.dephasing, args.redfield, args.step)
        print(f"{m['model']}: fidelity error {m['fidelity_error']:.6g}, energy error {m['energy_error']:.6g}")
        return [bio.write_json(out / "metrics.json", m)]

    _run(args.out, "evolve", params, None, inputs, body)


def cmd_certify(args):
    inst = bio.read_instance(args.instance)
    prot = bio.read_protocol(args.protocol)
    params = {"switch_tol": args.switch_tol, "sign_tol": args.sign_tol}

    def body(out, resume):
        cert = certify_protocol(prot, cost_vector(inst), args.switch_tol, args.sign_tol)
        print(f"certificate: {cert.status}")
        return [bio.write_switching_trace(out / "switching_trace.csv", cert.trace),
                bio.write_json(out / "switch_report.json", cert.to_dict())]

    _run(args.out, "certify", params, None, [args.instance, args.protocol], body)


def cmd_qaa(args):
    inst = bio.read_instance(args.instance)
    if args.T <= 0:
        raise UsageError("--T must be positive")

    def body(out, resume):
        row = result_row(inst, args.T, "qaa", ramp_protocol(args.T, args.steps))
        print(f"qaa: energy error {row['energy_error']:.6g}, fidelity error {row['fidelity_error']:.6g}")
        return [bio.write_csv(out / "result.csv", RESULT_COLUMNS, [row])]

    _run(args.out, "qaa", {"T": args.T, "steps": args.steps}, None, [args.instance], body)


# --------------------------------------------------------------------- sweep

_SWEEP_KEYS = {"n", "T", "method", "instances", "seed", "selection", "W", "eta", "beta", "step",
               "options", "histogram"}


def _as_list(v, name, kind):
    vals = v if isinstance(v, list) else [v]
    if not vals:
        raise UsageError(f"sweep grid '{name}' is empty")
    try:
        return [kind(x) for x in vals]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"sweep grid '{name}': {exc}") from exc


def load_sweep_config(d: dict) -> dict:
    """Validate a sweep grid and fill in defaults."""
    if not isinstance(d, dict):
        raise UsageError("sweep config must be a JSON object")
    unknown = set(d) - _SWEEP_KEYS
    if unknown:
        raise UsageError(f"unknown sweep keys {sorted(unknown)}")
    for key in ("n", "T"):
        if key not in d:
            raise UsageError(f"sweep config needs '{key}'")
    cfg = {
        "n": _as_list(d["n"], "n", int),
        "T": _as_list(d["T"], "T", float),
        "method": _as_list(d.get("method", "bb"), "method", str),
        "instances": int(d.get("instances", 1)),
        "seed": int(d.get("seed", 0)),
        "selection": None if d.get("selection") is None else int(d["selection"]),
        "W": _as_list(d.get("W", []), "W", float) if d.get("W", []) != [] else [],
        "eta": _as_list(d.get("eta", []), "eta", float) if d.get("eta", []) != [] else [],
        "beta": float(d.get("beta", 2.0)),
        "step": float(d.get("step", 1e-3)),
        "options": dict(d.get("options", {})),
        "histogram": {"bin_width": DEFAULT_BIN_WIDTH, "upper": DEFAULT_UPPER, "include": "both",
                      **d.get("histogram", {})},
    }
    if any(not 1 <= n <= 10 for n in cfg["n"]):
        raise UsageError("sweep sizes must lie in [1, 10]")
    if any(T <= 0 for T in cfg["T"]):
        raise UsageError("sweep times must be positive")
    if any(m not in ("bb", "mc") for m in cfg["method"]):
        raise UsageError("sweep methods must be 'bb' or 'mc'")
    if cfg["instances"] < 1:
        raise UsageError("'instances' must be >= 1")
    if cfg["selection"] is not None and not 1 <= cfg["selection"] <= cfg["instances"]:
        raise UsageError("'selection' must lie in [1, instances]")
    if any(w < 0 for w in cfg["W"]) or any(e < 0 for e in cfg["eta"]) or cfg["beta"] <= 0:
        raise UsageError("noise strengths must be >= 0 and beta > 0")
    if cfg["histogram"]["include"] not in ("both", "g0", "g1"):
        raise UsageError("histogram include must be 'both', 'g0' or 'g1'")
    return cfg


def _job_key(method, n, T, index):
    return f"{method}_n{n}_T{T!r}_i{index:04d}"


def sweep_job(job):
    """One instance of the grid: optimize, then evaluate closed and noisy runs."""
    method, n, T, index, cfg = job
    inst = generate_instance(n, derive_seed(cfg["seed"], index))
    res = optimize(inst, T, method, **cfg["options"])
    prot = res.best_protocol
    ramp = ramp_protocol(T)
    key = _job_key(method, n, T, index)
    results = [result_row(inst, T, method, prot, res.evaluations), result_row(inst, T, "qaa", ramp)]
    noise, compare = [], []
    for r in results:
        compare.append({k: r[k] for k in ("instance_seed", "n", "T", "method", "fidelity_error", "energy_error")})
    settings = [("dephasing", w, None) for w in cfg["W"]] + [("redfield", e, cfg["beta"]) for e in cfg["eta"]]
    for model, strength, beta in settings:
        for label, sched in ((method, prot), ("qaa", LinearRamp(T))):
            dm, m = _open_metrics(inst, sched, model, strength, beta, cfg["step"])
            noise.append(noise_row(f"{key}:{label}", model, strength, beta, T, dm))
            compare.append({"instance_seed": inst.seed, "n": n, "T": T, "method": label,
                            "noise": model, "strength": strength,
                            "fidelity_error": m["fidelity_error"], "energy_error": m["energy_error"]})
    return {"key": key, "method": method, "n": n, "T": T, "index": index,
            "protocol": bio.protocol_to_dict(prot), "results": results, "noise": noise, "compare": compare}


def run_sweep(cfg: dict, out: Path, threads: int = 1, resume: bool = True) -> list:
    jobs_dir = out / "jobs"
    jobs_dir.mkdir(exist_ok=True)
    grid = [(m, n, T, i) for m in cfg["method"] for n in cfg["n"] for T in cfg["T"]
            for i in range(cfg["instances"])]
    done = {}
    todo = []
    for m, n, T, i in grid:
        path = jobs_dir / f"{_job_key(m, n, T, i)}.json"
        if resume and path.exists():
            done[path.stem] = json.loads(path.read_text())
        else:
            todo.append((m, n, T, i, cfg))
    log.info("sweep: %d jobs, %d already complete", len(grid), len(done))
    for result in run_jobs(sweep_job, todo, threads):
        path = bio.write_json(jobs_dir / f"{result['key']}.json", result)
        done[result["key"]] = json.loads(path.read_text())
    ordered = [done[_job_key(m, n, T, i)] for m, n, T, i in grid]
    return _aggregate(cfg, out, ordered)


def _aggregate(cfg, out, jobs):
    files = []
    results = [r for j in jobs for r in j["results"]]
    files.append(bio.write_csv(out / "results.csv", RESULT_COLUMNS, results))
    if cfg["W"] or cfg["eta"]:
        files.append(bio.write_csv(out / "noise.csv", NOISE_COLUMNS, [r for j in jobs for r in j["noise"]]))
    groups = defaultdict(list)
    for j in jobs:
        groups[(j["method"], j["n"], j["T"])].append(j)
    compare = []
    hist_rows = defaultdict(list)
    h = cfg["histogram"]
    for (method, n, T), members in sorted(groups.items()):
        if cfg["selection"] is not None:
            ranked = sorted(members, key=lambda j: (-j["results"][0]["success_prob"], j["index"]))
            chosen = sorted(ranked[: cfg["selection"]], key=lambda j: j["index"])
        else:
            chosen = members
        compare.extend(r for j in chosen for r in j["compare"])
        prots = [bio.protocol_from_dict(j["protocol"]) for j in members]
        if method == "mc":
            prots = [p.to_bang_bang(0.5) for p in prots]
        hist = collect_durations(prots, h["bin_width"], h["upper"], h["include"], n=n)
        hist_rows[method].extend(hist.csv_rows())
    files.append(bio.write_csv(out / "comparison.csv", COMPARISON_COLUMNS, comparison_table(compare)))
    for method, rows in sorted(hist_rows.items()):
        files.append(bio.write_csv(out / f"histograms_{method}.csv", HISTOGRAM_COLUMNS, rows))
    return files


def cmd_sweep(args):
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: not valid JSON ({exc})") from exc
    cfg = load_sweep_config(raw)

    def body(out, resume):
        files = run_sweep(cfg, out, args.threads, resume)
        print(f"sweep complete: {len(files)} output file(s) in {out}")
        return files

    _run(args.out, "sweep", cfg, cfg["seed"], [args.config], body)


# ---------------------------------------------------------------------- hist


def _protocols_from_paths(paths):
    found = []
    for p in map(Path, paths):
        if not p.exists():
            raise UsageError(f"{p}: no such file or directory")
        files = sorted(p.rglob("*.json")) if p.is_dir() else [p]
        for f in files:
            if f.name == bio.MANIFEST_NAME:
                continue
            d = json.loads(f.read_text())
            if "protocol" in d:
                found.append((d.get("n"), bio.protocol_from_dict(d["protocol"])))
            elif "durations" in d or "segments" in d:
                found.append((None, bio.protocol_from_dict(d)))
    return found


def cmd_hist(args):
    found = _protocols_from_paths(args.paths)
    if not found:
        raise UsageError("no protocols found")
    params = {"bin_width": args.bin_width, "upper": args.upper, "include": args.include, "n": args.n}

    def body(out, resume):
        groups = defaultdict(list)
        for n, prot in found:
            n = args.n if args.n is not None else n
            groups[(-1 if n is None else n, round(prot.T, 12))].append(prot)
        rows = []
        for (n, T), prots in sorted(groups.items()):
            prots = [p if not hasattr(p, "segments") else p.to_bang_bang(0.5) for p in prots]
            hist = collect_durations(prots, args.bin_width, args.upper, args.include, None if n < 0 else n)
            print(f"n={'' if n < 0 else n} T={T}: {hist.sample_count} pulses, peak at {hist.peak:.4g}")
            rows.extend(hist.csv_rows())
        return [bio.write_csv(out / "histogram.csv", HISTOGRAM_COLUMNS, rows)]

    _run(args.out, "hist", params, None, [str(p) for p in args.paths], body)


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (one run per directory)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for parallel jobs")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bangbang", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate SK instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("optimize", parents=[common], help="optimize a protocol for one instance")
    p.add_argument("instance")
    p.add_argument("--method", choices=("mc", "bb"), default="bb")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--certify", action="store_true", help="also write the switching-function report")
    p.add_argument("--slices", type=int, default=40)
    p.add_argument("--sweeps", type=int, default=400)
    p.add_argument("--max-pulses", type=int, default=40)
    p.add_argument("--restarts", type=int, default=4)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evolve", parents=[common], help="evolve a protocol, optionally with noise")
    p.add_argument("instance")
    p.add_argument("protocol", nargs="?")
    p.add_argument("--ramp", type=float, default=None, help="use the linear ramp of this length")
    p.add_argument("--dephasing", type=float, default=None, metavar="W")
    p.add_argument("--redfield", type=float, nargs=2, default=None, metavar=("ETA", "BETA"))
    p.add_argument("--step", type=float, default=1e-3)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("certify", parents=[common], help="switching-function optimality check")
    p.add_argument("instance")
    p.add_argument("protocol")
    p.add_argument("--switch-tol", type=float, default=1e-3)
    p.add_argument("--sign-tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("qaa", parents=[common], help="linear-ramp baseline")
    p.add_argument("instance")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_qaa)

    p = sub.add_parser("sweep", parents=[common], help="run a JSON grid of experiments")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("hist", parents=[common], help="duration histograms from protocol files")
    p.add_argument("paths", nargs="+")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH)
    p.add_argument("--upper", type=float, default=DEFAULT_UPPER)
    p.add_argument("--include", choices=("both", "g0", "g1"), default="both")
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger("bangbang").setLevel(logging.DEBUG)
    if args.command == "gen" and args.seed is None:
        args.seed = 0
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
