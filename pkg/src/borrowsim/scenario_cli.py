"""Study configuration, scenario grids, batch runs and plot-ready tables.

Config file (YAML)::

    preset: botox                 # name, or an inline preset mapping with a `name` key
    sample_sizes: [117, 58]       # per arm; default: the preset grid
    drifts: [consistent, partially_consistent, null, -0.1]   # or {auto: 7}
    std_ratios: [1]
    denominator_factors: [1]
    methods:
      - separate
      - cpp: {gamma: [0.25, 0.5]}
      - commensurate: {tau: [1, 10]}
    n_reps: {success: 10000, estimation: 2000}
    seed: 1
    estimator: PosteriorMean
    compute_ess: true
    out: results

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import datagen as G
from . import methods as M
from . import oc_harness as H

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
JOBS_ENV = "BORROWSIM_JOBS"
VIEWS = ("ForestBySuccess", "MetricVsTIE", "MetricVsDrift", "MetricVsESS")
DRIFT_KEYWORDS = ("consistent", "partially_consistent", "null")

METHOD_PARAMS = {
    "separate": (),
    "pooling": (),
    "cpp": ("gamma",),
    "npp": ("xi_gamma", "sd_gamma"),
    "ebpp": (),
    "pvalue_pp": ("k", "lam"),
    "ttp_diff": ("eta",),
    "ttp_equiv": ("eta", "lam"),
    "commensurate": ("tau", "log_tau_cauchy"),
    "rmp": ("w", "vague_mean"),
}
TOP_KEYS = {"preset", "sample_sizes", "drifts", "std_ratios", "denominator_factors", "methods", "n_reps",
            "seed", "estimator", "compute_ess", "out"}


class ConfigError(ValueError):
    """Invalid study configuration; the message starts with the offending key path."""


@dataclass(frozen=True)
class StudyConfig:
    preset: G.CaseStudyPreset
    sample_sizes: tuple
    drifts: tuple  # numbers, keywords, or ("auto", count)
    std_ratios: tuple = (1.0,)
    denominator_factors: tuple = (1.0,)
    methods: tuple = ()
    n_reps_success: int = 10_000
    n_reps_estimation: int = 2_000
    seed: int = 1
    estimator: str = H.Estimator.MEAN.value
    compute_ess: bool = True
    out: str = "results"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def config_hash(self) -> str:
        return format(G.stable_key(self.raw), "016x")


@dataclass(frozen=True)
class Task:
    index: int
    scenario: H.Scenario
    method: M.MethodSpec
    drift_label: str

    def task_hash(self, cfg: StudyConfig) -> str:
        return format(G.stable_key({
            "scenario": self.scenario.data_dict(),
            "preset": repr(self.scenario.preset),
            "method": M.method_to_dict(self.method),
            "seed": cfg.seed,
            "n_reps": [cfg.n_reps_success, cfg.n_reps_estimation],
            "estimator": cfg.estimator,
            "ess": cfg.compute_ess,
            "version": __version__,
        }), "016x")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _as_list(v, path):
    if isinstance(v, list):
        if not v:
            raise ConfigError(f"{path}: must not be empty")
        return v
    return [v]


def _positive_ints(v, path):
    out = []
    for i, x in enumerate(_as_list(v, path)):
        if isinstance(x, bool) or not isinstance(x, int) or x < 2:
            raise ConfigError(f"{path}[{i}]: expected an integer >= 2, got {x!r}")
        out.append(x)
    return tuple(out)


def _positive_floats(v, path):
    out = []
    for i, x in enumerate(_as_list(v, path)):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not x > 0:
            raise ConfigError(f"{path}[{i}]: expected a positive number, got {x!r}")
        out.append(float(x))
    return tuple(out)


def parse_methods(items, path="methods") -> tuple:
    """Expand method entries; list-valued parameters give one config per combination."""
    out = []
    for i, item in enumerate(_as_list(items, path)):
        p = f"{path}[{i}]"
        if isinstance(item, str):
            name, params = item, {}
        elif isinstance(item, dict) and len(item) == 1:
            (name, params), = item.items()
            params = params or {}
            if not isinstance(params, dict):
                raise ConfigError(f"{p}.{name}: parameters must be a mapping")
        else:
            raise ConfigError(f"{p}: expected a method name or a one-key mapping")
        if name not in METHOD_PARAMS:
            raise ConfigError(f"{p}: unknown method {name!r}; known: {sorted(METHOD_PARAMS)}")
        bad = set(params) - set(METHOD_PARAMS[name])
        if bad:
            raise ConfigError(f"{p}.{name}: unknown parameter(s) {sorted(bad)}")
        keys = list(params)
        grids = []
        for k in keys:
            v = params[k]
            if k == "log_tau_cauchy":
                # a single [loc, scale] pair or a list of pairs
                v = [v] if v and not isinstance(v[0], list) else v
            grids.append(_as_list(v, f"{p}.{name}.{k}"))
        for combo in itertools.product(*grids):
            d = {"method": name, **dict(zip(keys, combo))}
            try:
                out.append(M.method_from_dict(d))
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"{p}.{name}: {exc}") from None
    return tuple(out)


def _parse_drifts(v, path="drifts"):
    if isinstance(v, dict):
        if set(v) != {"auto"}:
            raise ConfigError(f"{path}: only the 'auto' key is allowed, got {sorted(v)}")
        n = v["auto"]
        if isinstance(n, bool) or not isinstance(n, int) or n < 2:
            raise ConfigError(f"{path}.auto: expected an integer >= 2")
        return (("auto", n),)
    out = []
    for i, x in enumerate(_as_list(v, path)):
        if x is None:  # bare `null` in YAML
            x = "null"
        if isinstance(x, str):
            if x not in DRIFT_KEYWORDS:
                raise ConfigError(f"{path}[{i}]: unknown drift keyword {x!r}; known: {list(DRIFT_KEYWORDS)}")
            out.append(x)
        elif isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x):
            out.append(float(x))
        else:
            raise ConfigError(f"{path}[{i}]: expected a number or keyword, got {x!r}")
    return tuple(out)


def config_from_dict(raw: dict) -> StudyConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a mapping")
    bad = set(raw) - TOP_KEYS
    if bad:
        raise ConfigError(f"<root>: unknown key(s) {sorted(bad)}")
    for k in ("preset", "methods"):
        if k not in raw:
            raise ConfigError(f"{k}: required")
    pr = raw["preset"]
    try:
        if isinstance(pr, str):
            preset = G.get_preset(pr)
        elif isinstance(pr, dict) and "name" in pr:
            body = {k: v for k, v in pr.items() if k != "name"}
            preset = G.preset_from_dict(str(pr["name"]), body)
        else:
            raise ConfigError("preset: expected a name or a mapping with a 'name' key")
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"preset: {exc}") from None
    sizes = _positive_ints(raw["sample_sizes"], "sample_sizes") if "sample_sizes" in raw else preset.sample_size_grid
    drifts = _parse_drifts(raw.get("drifts", list(DRIFT_KEYWORDS)))
    ratios = _positive_floats(raw.get("std_ratios", [1.0]), "std_ratios")
    factors = _positive_floats(raw.get("denominator_factors", [1.0]), "denominator_factors")
    methods = parse_methods(raw["methods"])
    reps = raw.get("n_reps", {})
    if isinstance(reps, int) and not isinstance(reps, bool):
        reps = {"success": reps, "estimation": reps}
    if not isinstance(reps, dict) or set(reps) - {"success", "estimation"}:
        raise ConfigError("n_reps: expected an integer or a mapping with keys success / estimation")
    n_succ = reps.get("success", 10_000)
    n_est = reps.get("estimation", min(2_000, n_succ))
    for k, v in (("success", n_succ), ("estimation", n_est)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 100:
            raise ConfigError(f"n_reps.{k}: expected an integer >= 100")
    seed = raw.get("seed", 1)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: expected a nonnegative integer")
    est = raw.get("estimator", H.Estimator.MEAN.value)
    if est not in {e.value for e in H.Estimator}:
        raise ConfigError(f"estimator: expected one of {[e.value for e in H.Estimator]}")
    ess = raw.get("compute_ess", True)
    if not isinstance(ess, bool):
        raise ConfigError("compute_ess: expected true or false")
    return StudyConfig(preset, tuple(sizes), drifts, ratios, factors, methods, n_succ, n_est, seed, est, ess,
                       str(raw.get("out", "results")), raw)


def load_config(path) -> StudyConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"<file>: {exc}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def resolve_drifts(cfg: StudyConfig, n_per_arm: int, std_ratio: float, source) -> list[tuple[float, str]]:
    out = []
    for d in cfg.drifts:
        if isinstance(d, tuple):
            se = G.expected_target_se(cfg.preset, n_per_arm, std_ratio)
            lo, hi = G.drift_range(source, se, cfg.preset.decision)
            out.extend((float(x), f"auto{i}") for i, x in enumerate(np.linspace(lo, hi, d[1])))
        elif isinstance(d, str):
            out.append((G.drift_keyword(d, cfg.preset.source, cfg.preset.decision), d))
        else:
            out.append((d, format(d, ".17g")))
    return out


def expand_grid(cfg: StudyConfig) -> list[Task]:
    """sample sizes x drifts x std ratios x denominator factors x methods, in declaration order."""
    tasks = []
    for n in cfg.sample_sizes:
        for ratio in cfg.std_ratios:
            for factor in cfg.denominator_factors:
                try:
                    src = G.apply_denominator_factor(cfg.preset.source, factor)
                except ValueError as exc:
                    raise ConfigError(f"denominator_factors: {exc}") from None
                for drift, label in resolve_drifts(cfg, n, ratio, src):
                    try:
                        sc = H.Scenario(cfg.preset, n, G.ScenarioKnobs(drift, ratio, factor), cfg.seed)
                    except ValueError as exc:
                        raise ConfigError(f"std_ratios: {exc}") from None
                    for m in cfg.methods:
                        tasks.append(Task(len(tasks), sc, m, label))
    # reorder: n -> drift -> ratio -> factor -> method
    def sort_key(t):
        return (cfg.sample_sizes.index(t.scenario.n_per_arm), _drift_pos(cfg, t),
                cfg.std_ratios.index(t.scenario.knobs.target_to_source_std_ratio),
                cfg.denominator_factors.index(t.scenario.knobs.source_denominator_factor),
                cfg.methods.index(t.method))
    tasks.sort(key=sort_key)
    return [Task(i, t.scenario, t.method, t.drift_label) for i, t in enumerate(tasks)]


def _drift_pos(cfg, t):
    label = t.drift_label
    for i, d in enumerate(cfg.drifts):
        if isinstance(d, tuple) and label.startswith("auto"):
            return (i, int(label[4:]))
        if isinstance(d, str) and d == label:
            return (i, 0)
        if isinstance(d, float) and format(d, ".17g") == label:
            return (i, 0)
    return (len(cfg.drifts), 0)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, bool):
        return "true" if v else "false"
    return v


def run_task(task: Task, cfg: StudyConfig) -> dict:
    rec = H.estimate_oc(task.scenario, task.method, cfg.n_reps_success, cfg.estimator,
                        compute_ess=cfg.compute_ess, n_reps_estimation=cfg.n_reps_estimation)
    row = H.record_to_row(rec)
    k = task.scenario.knobs
    row = {
        "index": task.index,
        "case_study": cfg.preset.name,
        "n_per_arm": task.scenario.n_per_arm,
        "drift": k.drift,
        "drift_label": task.drift_label,
        "std_ratio": k.target_to_source_std_ratio,
        "denominator_factor": k.source_denominator_factor,
        **row,
    }
    row["params"] = json.dumps(row["params"], sort_keys=True)
    row["status"] = "unreliable" if rec.unreliable else "ok"
    return row


def _worker(task: Task, cfg: StudyConfig):
    t0 = time.perf_counter()
    try:
        row = run_task(task, cfg)
        return task.index, row, None, time.perf_counter() - t0
    except Exception as exc:  # recorded per scenario, never aborts the run
        return task.index, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


RESULT_COLUMNS = [
    "index", "case_study", "n_per_arm", "drift", "drift_label", "std_ratio", "denominator_factor",
    "scenario_id", "method", "label", "params", "n_reps", "n_failed", "estimator", "theta_true",
    "success_prob", "success_prob_lo", "success_prob_hi", "mse", "mse_lo", "mse_hi", "bias", "bias_lo",
    "bias_hi", "precision", "precision_lo", "precision_hi", "coverage", "coverage_lo", "coverage_hi",
    "ess_moment", "ess_moment_lo", "ess_moment_hi", "ess_precision", "ess_precision_lo", "ess_precision_hi",
    "ess_elir", "ess_elir_lo", "ess_elir_hi", "mc_seed", "resamples", "unreliable", "status",
]


def write_results(rows: list[dict], path: Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in RESULT_COLUMNS})
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _scenario_file(out: Path, index: int) -> Path:
    return out / "scenarios" / f"{index:06d}.json"


def default_jobs() -> int:
    env = os.environ.get(JOBS_ENV)
    if env:
        return max(1, int(env))
    return 1


def run(config_path, jobs: Optional[int] = None, out: Optional[str] = None, resume: bool = False,
        log=print) -> dict:
    """Run every scenario of a study; return the manifest.

    Finished scenarios are stored one JSON file each under ``out/scenarios``;
    with ``resume`` those whose hash matches are not recomputed.
    """
    cfg = load_config(config_path)
    tasks = expand_grid(cfg)
    jobs = jobs or default_jobs()
    outdir = Path(out or cfg.out)
    (outdir / "scenarios").mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    rows: dict[int, dict] = {}
    status: dict[int, dict] = {}
    pending = []
    for t in tasks:
        f = _scenario_file(outdir, t.index)
        h = t.task_hash(cfg)
        if resume and f.exists():
            stored = json.loads(f.read_text())
            if stored.get("hash") == h and stored.get("row") is not None:
                rows[t.index] = stored["row"]
                status[t.index] = {"status": stored["row"]["status"], "seconds": stored.get("seconds", 0.0),
                                   "reused": True}
                continue
        pending.append(t)
    log(f"{len(tasks)} scenarios, {len(pending)} to run, {jobs} worker(s)")

    def record(index, row, err, secs):
        t = tasks[index]
        payload = {"hash": t.task_hash(cfg), "row": row, "error": err, "seconds": secs}
        if row is not None:
            rows[index] = row
            _scenario_file(outdir, index).write_text(json.dumps(payload, sort_keys=True))
            status[index] = {"status": row["status"], "seconds": secs, "reused": False}
        else:
            status[index] = {"status": "failed", "error": err, "seconds": secs, "reused": False}
            log(f"scenario {index} failed: {err}")

    if jobs == 1 or len(pending) <= 1:
        for t in pending:
            record(*_worker(t, cfg))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_worker, t, cfg) for t in pending]
            for fut in as_completed(futs):
                record(*fut.result())

    ordered = [rows[i] for i in sorted(rows)]
    write_results(ordered, outdir / "results.csv")
    manifest = {
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "n_scenarios": len(tasks),
        "wall_clock_seconds": time.perf_counter() - t_start,
        "scenarios": [
            {"index": t.index, "scenario_id": t.scenario.scenario_id, "method": t.method.label,
             "hash": t.task_hash(cfg), **status[t.index],
             "resamples": rows[t.index]["resamples"] if t.index in rows else None,
             "n_failed_replicates": rows[t.index]["n_failed"] if t.index in rows else None}
            for t in tasks
        ],
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def manifest_exit_code(manifest: dict) -> int:
    return EXIT_PARTIAL if any(s["status"] == "failed" for s in manifest["scenarios"]) else EXIT_OK


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

PLOT_COLUMNS = ["case_study", "method", "params_label", "x", "y", "y_lo", "y_hi"]


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _metric(row, metric):
    y, lo, hi = row[metric], row[f"{metric}_lo"], row[f"{metric}_hi"]
    if y == "" or lo == "" or hi == "":
        return None
    return float(y), float(lo), float(hi)


def emit_plotdata(rows: list[dict], view: str, metric: Optional[str] = None) -> list[dict]:
    """Long-format rows for one of the four plot views."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}; choose from {list(VIEWS)}")
    metric = metric or ("mse" if view == "MetricVsESS" else "success_prob")
    order = {}
    for r in rows:
        order.setdefault(r["params"], len(order))
    out = []

    def emit(r, x, m):
        y = _metric(r, m)
        if y is not None:
            out.append({"case_study": r["case_study"], "method": r["method"], "params_label": r["label"],
                        "x": x, "y": y[0], "y_lo": y[1], "y_hi": y[2]})

    if view in ("ForestBySuccess", "MetricVsDrift"):
        m = "success_prob" if view == "ForestBySuccess" else metric
        for r in sorted(rows, key=lambda r: (order[r["params"]], int(r["index"]))):
            emit(r, float(r["drift"]), m)
    elif view == "MetricVsESS":
        for r in sorted(rows, key=lambda r: (order[r["params"]], int(r["index"]))):
            if r.get("ess_moment", "") != "":
                emit(r, float(r["ess_moment"]), metric)
    else:
        # x = type 1 error rate of the same method and design at the null drift
        def design(r):
            return (r["case_study"], r["n_per_arm"], r["std_ratio"], r["denominator_factor"], r["params"])

        tie = {design(r): float(r["success_prob"]) for r in rows if r["drift_label"] == "null"}
        for r in sorted(rows, key=lambda r: (order[r["params"]], int(r["index"]))):
            if r["drift_label"] != "null" and design(r) in tie:
                emit(r, tie[design(r)], metric)
    return out


def write_plotdata(rows: list[dict], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def _preset_summary(p: G.CaseStudyPreset) -> dict:
    s = p.source
    aux = {k: (list(v) if isinstance(v, tuple) else v) for k, v in s.aux.items()}
    return {
        "name": p.name,
        "endpoint": p.endpoint.value,
        "scale": s.scale.value,
        "direction": p.decision.direction.value,
        "theta0": p.decision.theta0,
        "rho": p.decision.rho,
        "source_estimate": s.estimate,
        "source_std_err": s.std_err,
        "source_arms": [s.n_control, s.n_treatment],
        "sample_size_grid": list(p.sample_size_grid),
        "aux": aux,
    }


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="borrowsim", description="Operating characteristics of Bayesian borrowing.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every scenario of a study config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: ${JOBS_ENV} or 1)")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--resume", action="store_true", help="skip scenarios already stored in --out")

    p = sub.add_parser("plot", help="emit a plot-ready table from results.csv")
    p.add_argument("results")
    p.add_argument("--view", required=True, choices=VIEWS)
    p.add_argument("--metric", default=None)
    p.add_argument("--out", default=None, help="write here instead of stdout")

    pr = sub.add_parser("presets", help="list or show case-study presets")
    pr.add_argument("action", choices=("list", "show"))
    pr.add_argument("name", nargs="?")

    v = sub.add_parser("validate", help="check a config and report the grid size")
    v.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            manifest = run(args.config, args.jobs, args.out, args.resume)
            code = manifest_exit_code(manifest)
            n_fail = sum(s["status"] == "failed" for s in manifest["scenarios"])
            print(f"done: {manifest['n_scenarios']} scenarios, {n_fail} failed, "
                  f"{manifest['wall_clock_seconds']:.1f} s")
            return code
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {len(expand_grid(cfg))} scenarios (config {cfg.config_hash()})")
            return EXIT_OK
        if args.command == "presets":
            presets = G.load_presets()
            if args.action == "list":
                for name, p in presets.items():
                    print(f"{name}\t{p.endpoint.value}\t{p.sample_size_grid}")
                return EXIT_OK
            if not args.name or args.name not in presets:
                print(f"unknown preset {args.name!r}; available: {sorted(presets)}", file=sys.stderr)
                return EXIT_CONFIG
            print(json.dumps(_preset_summary(presets[args.name]), indent=2))
            return EXIT_OK
        rows = read_results(args.results)
        data = emit_plotdata(rows, args.view, args.metric)
        if args.out:
            with open(args.out, "w", newline="", encoding="utf-8") as fh:
                write_plotdata(data, fh)
        else:
            write_plotdata(data, sys.stdout)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
