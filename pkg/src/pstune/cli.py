"""Command-line entry point.

Commands::

    pstune run      --config cfg.json [--fixed setting.json] [--out DIR]
    pstune sweep    --config cfg.json -n N [--jobs K] [--out DIR]
    pstune estimate --trace trace.csv --epsilon E --policy NAME [--d D]
    pstune report   --dir RUN_DIR [--sweep sweep.csv]

Exit codes: 0 success, 1 bad input or configuration, 2 the job diverged or
did not reach epsilon, 3 the trace could not be fitted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import progress
from .acquisition import random_sample
from .domain import KnobSpace, MetricsRepository, SystemSetting
from .errors import DivergenceError, FitError, PSTuneError, ValidationError
from .pssim import CostModel, WorkloadSpec
from .pssim.simulator import DEFAULT_NODE_BUDGET
from .tuner import Job, JobReport, TimelineEntry, TunerConfig, report_json, run_fixed, run_job

log = logging.getLogger("pstune")

CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DIVERGED = 2
EXIT_UNFITTABLE = 3

REPO_FILE = "repository.jsonl"
CATALOG_FILE = "settings.json"
REPORT_FILE = "report.json"
TIMELINE_FILE = "timeline.csv"
MANIFEST_FILE = "manifest.json"
SWEEP_FILE = "sweep.csv"
SWEEP_SUMMARY_FILE = "sweep_summary.json"


class ConfigError(PSTuneError):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to run one experiment; see ``configs/`` for samples."""

    workload: WorkloadSpec
    space: KnobSpace
    initial: SystemSetting
    tuner: TunerConfig
    cost: CostModel = field(default_factory=CostModel)
    output_dir: Path = Path("out")
    node_budget: int = DEFAULT_NODE_BUDGET
    sim_seed: int = 0
    sweep_seed: int = 0

    @classmethod
    def from_json(cls, doc: dict, base: Path = Path(".")) -> ExperimentConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc.get('version')!r}; expected {CONFIG_VERSION}")
        known = {"version", "workload", "space", "initial", "tuner", "cost", "output_dir",
                 "node_budget", "sim_seed", "sweep_seed"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("workload", "space", "initial", "tuner"):
            if key not in doc:
                raise ConfigError(f"config lacks {key!r}")
        for key in ("sim_seed", "sweep_seed", "node_budget"):
            if key in doc and not isinstance(doc[key], int):
                raise ConfigError(f"{key} must be an integer")
        try:
            space = KnobSpace.from_json(doc["space"])
            out = Path(doc.get("output_dir", "out"))
            return cls(
                workload=WorkloadSpec.from_json(doc["workload"]),
                space=space,
                initial=space.validate(SystemSetting(doc["initial"])),
                tuner=TunerConfig.from_json(doc["tuner"]),
                cost=CostModel.from_json(doc.get("cost", {})),
                output_dir=out if out.is_absolute() else base / out,
                node_budget=doc.get("node_budget", DEFAULT_NODE_BUDGET),
                sim_seed=doc.get("sim_seed", 0),
                sweep_seed=doc.get("sweep_seed", 0),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_json(doc, path.parent)

    def job(self) -> Job:
        return Job(self.workload, self.space, self.initial, self.cost, self.node_budget, self.sim_seed)


# ---------------------------------------------------------------------------
# Output helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _manifest(out: Path, files: Sequence[str], command: str) -> None:
    doc = {"command": command, "files": sorted(files)}
    _write(out / MANIFEST_FILE, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _save_run(out: Path, report: JobReport, repo: MetricsRepository, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    repo.save(out / REPO_FILE, out / CATALOG_FILE)
    _write(out / REPORT_FILE, report_json(report))
    _write(out / TIMELINE_FILE, report.timeline_csv())
    _manifest(out, [REPO_FILE, CATALOG_FILE, REPORT_FILE, TIMELINE_FILE], command)


def _load_setting(path) -> SystemSetting:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read setting {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"setting {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("a setting file must hold a JSON object")
    return SystemSetting(doc)


# ---------------------------------------------------------------------------
# Commands


def cmd_run(config: ExperimentConfig, fixed: SystemSetting | None = None) -> int:
    """Run one tuned (or fixed-setting) job and write its repository and report."""
    job = config.job()
    out = config.output_dir
    try:
        if fixed is None:
            report, repo = run_job(job, config.tuner)
        else:
            report, repo = run_fixed(job, fixed, config.tuner.epsilon, config.tuner.max_iterations)
    except DivergenceError as exc:
        _save_run(out, exc.report, exc.repo, "run")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _save_run(out, report, repo, "run")
    if not report.converged:
        print(f"did not reach epsilon={config.tuner.epsilon} within {report.iterations} iterations",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"converged in {report.iterations} iterations, {report.completion_time:.3f} s, "
          f"{report.reconfig_count} reconfigurations", file=sys.stderr)
    return EXIT_OK


def _sweep_settings(config: ExperimentConfig, n: int) -> list[SystemSetting]:
    """``n`` distinct seeded settings, or the whole space when it is no larger."""
    space = config.space
    if n >= space.size():
        return space.enumerate()
    out: list[SystemSetting] = []
    seen: set[SystemSetting] = set()
    round_ = 0
    while len(out) < n:
        for s in random_sample(space, n, config.sweep_seed + 7919 * round_):
            if s not in seen and len(out) < n:
                seen.add(s)
                out.append(s)
        round_ += 1
    return out


def _sweep_one(args) -> tuple[str, float, int, float]:
    config, setting = args
    try:
        report, repo = run_fixed(config.job(), setting, config.tuner.epsilon, config.tuner.max_iterations)
    except DivergenceError as exc:
        its = exc.report.iterations
        return setting.id, math.inf, its, exc.report.completion_time / max(its, 1)
    if not report.converged:
        return setting.id, math.inf, report.iterations, report.completion_time / max(report.iterations, 1)
    return setting.id, report.completion_time, report.iterations, report.completion_time / report.iterations


def sweep_rows(config: ExperimentConfig, n: int, jobs: int = 1) -> list[tuple[str, float, int, float]]:
    """Fixed-setting results ``(setting_id, completion_time, iterations, mean_iter_time)``, fastest first."""
    tasks = [(config, s) for s in _sweep_settings(config, n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    return sorted(rows, key=lambda r: (r[1], r[0]))


def sweep_summary(times: Sequence[float]) -> dict:
    """Worst / average / best over converged runs plus the count that failed."""
    finite = [t for t in times if math.isfinite(t)]
    if not finite:
        return {"n": len(times), "failed": len(times), "worst": None, "average": None, "best": None}
    return {"n": len(times), "failed": len(times) - len(finite),
            "worst": max(finite), "average": float(np.mean(finite)), "best": min(finite)}


def cmd_sweep(config: ExperimentConfig, n_settings: int, jobs: int = 1) -> int:
    """Run ``n_settings`` fixed-setting jobs and write the ranking CSV."""
    if n_settings < 1:
        raise ConfigError("-n must be at least 1")
    rows = sweep_rows(config, n_settings, jobs)
    out = config.output_dir
    _write(out / SWEEP_FILE, _csv(["setting_id", "completion_time", "iterations", "mean_iter_time"],
                                  [(sid, repr(t), its, repr(m)) for sid, t, its, m in rows]))
    summary = sweep_summary([r[1] for r in rows])
    _write(out / SWEEP_SUMMARY_FILE, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _manifest(out, [SWEEP_FILE, SWEEP_SUMMARY_FILE], "sweep")
    print(f"{len(rows)} settings, best {rows[0][0]}", file=sys.stderr)
    return EXIT_OK


def read_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns ``j, t, l`` from a CSV with a header row."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ConfigError("trace is empty")
    missing = {"j", "t", "l"} - set(rows[0])
    if missing:
        raise ConfigError(f"trace lacks columns {sorted(missing)}")
    try:
        js = np.array([int(r["j"]) for r in rows], dtype=np.int64)
        ts = np.array([float(r["t"]) for r in rows])
        ls = np.array([float(r["l"]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"unparseable trace row: {exc}") from exc
    if np.any(np.diff(js) <= 0):
        raise ConfigError("trace iterations must increase")
    return js, ts, ls


def estimate_trace(js, ts, ls, epsilon: float, policy_name: str, d_value: float | None = None) -> dict:
    """Fit the convergence curve to a whole trace and estimate the time left.

    The curve starts just before the first row, whose loss serves as the
    switch-point loss for the d-policy.
    """
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise ConfigError("epsilon must be positive")
    if d_value is None:
        d_value = 2.0 * float(np.max(ls))
    try:
        policy = progress.policy_from_name(policy_name, d_value)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    if len(ls) < 2:
        raise FitError("need at least two rows")
    if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
        raise FitError("losses must be finite and positive")
    j0 = int(js[0]) - 1
    d = progress.select_d(policy, np.concatenate([[ls[0]], ls]))
    fit = progress.fit_H(js, ls, d, j0)
    if not epsilon < fit.d:
        raise FitError(f"epsilon={epsilon!r} is not below d={fit.d!r}")
    r = progress.remaining_iterations(fit, epsilon, int(js[-1]))
    t_bar = progress.mean_iteration_time(ts)
    est = progress.RemainingEstimate(r, t_bar, t_bar * r, fit, policy.name)
    return {"fit": fit.to_json(), "estimate": est.to_json()}


def cmd_estimate(trace, epsilon: float, policy: str, d_value: float | None = None) -> int:
    js, ts, ls = read_trace(trace)
    try:
        doc = estimate_trace(js, ts, ls, epsilon, policy, d_value)
    except (FitError, ValidationError) as exc:
        print(f"cannot fit trace: {exc}", file=sys.stderr)
        return EXIT_UNFITTABLE
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def read_sweep(path) -> list[tuple[str, float]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read sweep {path}: {exc.strerror or exc}") from exc
    try:
        return [(r["setting_id"], float(r["completion_time"])) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed sweep CSV: {exc}") from exc


def run_series(repo: MetricsRepository, report: JobReport):
    """Loss series against wall time and iteration, plus the reconfiguration markers.

    Wall time includes reconfiguration charges, added where they occurred.
    """
    charges: dict[int, float] = {}
    for ev in repo.events:
        charges[ev["j"]] = charges.get(ev["j"], 0.0) + float(ev["cost"])
    time_rows, iter_rows = [], []
    at_j: dict[int, float] = {0: charges.get(0, 0.0)}
    clock = at_j[0]
    for rec in repo.records:
        clock += rec.t
        time_rows.append((repr(clock), repr(rec.l), rec.setting_id))
        iter_rows.append((rec.j, repr(rec.l), rec.setting_id))
        clock += charges.get(rec.j, 0.0)
        at_j[rec.j] = clock
    markers = [(e.j, repr(at_j.get(e.j, 0.0)), e.setting_id, e.reason)
               for e in report.setting_timeline if e.reason not in ("initial", "fixed")]
    return time_rows, iter_rows, markers


def cmd_report(run_dir, sweep=None) -> int:
    """Write plot-ready CSV series for a run, plus a speedup summary against a sweep."""
    run_dir = Path(run_dir)
    for name in (REPO_FILE, CATALOG_FILE, REPORT_FILE):
        if not (run_dir / name).is_file():
            raise ConfigError(f"{run_dir} lacks {name}")
    repo = MetricsRepository.load(run_dir / REPO_FILE, run_dir / CATALOG_FILE)
    doc = json.loads((run_dir / REPORT_FILE).read_text())
    report = _report_from_json(doc)
    time_rows, iter_rows, markers = run_series(repo, report)
    out = run_dir / "report"
    files = ["loss_vs_time.csv", "loss_vs_iteration.csv", "markers.csv"]
    _write(out / files[0], _csv(["time", "loss", "setting_id"], time_rows))
    _write(out / files[1], _csv(["j", "loss", "setting_id"], iter_rows))
    _write(out / files[2], _csv(["j", "time", "setting_id", "reason"], markers))
    if sweep is not None:
        stats = sweep_summary([t for _, t in read_sweep(sweep)])
        tuned = report.completion_time
        row = [repr(tuned)]
        for key in ("worst", "average", "best"):
            row.append(repr(stats[key]) if stats[key] is not None else "")
        for key in ("worst", "average", "best"):
            row.append(repr(stats[key] / tuned) if stats[key] is not None and tuned > 0 else "")
        _write(out / "summary.csv", _csv(
            ["tuned_time", "worst", "average", "best",
             "speedup_vs_worst", "speedup_vs_average", "speedup_vs_best"], [row]))
        files.append("summary.csv")
    _manifest(out, files, "report")
    return EXIT_OK


def _report_from_json(doc: dict) -> JobReport:
    try:
        return JobReport(
            completion_time=float(doc["completion_time"]),
            iterations=int(doc["iterations"]),
            setting_timeline=[TimelineEntry(int(j), sid, reason) for j, sid, reason in doc["setting_timeline"]],
            reconfig_count=int(doc["reconfig_count"]),
            total_reconfig_cost=float(doc["total_reconfig_cost"]),
            final_loss=float(doc["final_loss"]),
            converged=bool(doc["converged"]),
            diverged=bool(doc.get("diverged", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed report: {exc}") from exc


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pstune", description="Online system-setting tuning for a simulated parameter server")
    p.add_argument("-v", "--verbose", action="store_true", help="log tuning decisions to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one tuned or fixed-setting job")
    run.add_argument("--config", required=True)
    run.add_argument("--fixed", help="JSON file holding a setting to train under, no tuning")
    run.add_argument("--out", help="output directory (overrides the config)")

    sweep = sub.add_parser("sweep", help="run many fixed settings and rank them")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("-n", type=int, required=True, help="number of settings")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel processes")
    sweep.add_argument("--out", help="output directory (overrides the config)")

    est = sub.add_parser("estimate", help="fit the convergence curve to a trace")
    est.add_argument("--trace", required=True, help="CSV with columns j,t,l")
    est.add_argument("--epsilon", type=float, required=True)
    est.add_argument("--policy", required=True, choices=["bounded_supremum", "stateful_first_loss", "stateless_constant"])
    est.add_argument("--d", type=float, help="d for stateless_constant (default twice the largest loss)")

    rep = sub.add_parser("report", help="plot-ready CSV series for a run")
    rep.add_argument("--dir", required=True)
    rep.add_argument("--sweep", help="sweep CSV to compute speedups against")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command in ("run", "sweep"):
            config = ExperimentConfig.load(args.config)
            if args.out:
                config.output_dir = Path(args.out)
            if args.command == "run":
                fixed = _load_setting(args.fixed) if args.fixed else None
                if fixed is not None:
                    fixed = config.space.validate(fixed)
                return cmd_run(config, fixed)
            return cmd_sweep(config, args.n, args.jobs)
        if args.command == "estimate":
            return cmd_estimate(args.trace, args.epsilon, args.policy, args.d)
        return cmd_report(args.dir, args.sweep)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
