"""Tuning manager: initialization, the online loop and rank evaluation.

The tuner trains a job in the simulator while searching for a faster
system setting. Every ``a`` iterations it turns the metrics collected so
far into ``<setting, loss, remaining seconds>`` triples, refits the
Gaussian process, and moves to the setting with the largest expected
improvement when that improvement outweighs the reconfiguration cost.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gp, progress
from .acquisition import orthogonal_sample, propose_next, random_sample
from .domain import (
    KnobSpace, MetricsRepository, SegmentSpan, SystemSetting, build_training_triples, encode_setting,
)
from .errors import DegenerateSegmentWarning, DivergenceError, FitError, NumericalError, ValidationError
from .pssim import CostModel, Dataset, Simulator, WorkloadSpec, generate_dataset, layout_of
from .pssim.simulator import DEFAULT_NODE_BUDGET
from .reconfig import (
    ACTION_TYPES, ODMR, TECHNIQUES, TYPE_IB, ReconfigAction,
    action_cost, estimate_reconfig_cost, plan_reconfig, reconfigure,
)

log = logging.getLogger(__name__)

ORTHOGONAL = "orthogonal"
RANDOM = "random"
# floor (seconds) before taking logs of remaining-time targets
MIN_REMAINING = 1e-3


@dataclass(frozen=True)
class TunerConfig:
    """``a=None`` means three times the current worker count, clamped to [3, 50]."""

    epsilon: float
    a: int | None = None
    b: int = 10
    candidate_pool: int = 200
    d_policy: str = progress.BoundedSupremum.name
    seed: int = 0
    sampling: str = ORTHOGONAL
    technique: str = ODMR
    max_iterations: int = 200_000

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValidationError("epsilon must be positive")
        if self.a is not None and self.a < 2:
            raise ValidationError("a must be >= 2")
        if self.b < 1:
            raise ValidationError("b must be >= 1")
        if self.candidate_pool < 1:
            raise ValidationError("candidate_pool must be >= 1")
        if self.sampling not in (ORTHOGONAL, RANDOM):
            raise ValidationError(f"unknown sampling {self.sampling!r}")
        if self.technique not in TECHNIQUES:
            raise ValidationError(f"unknown technique {self.technique!r}")
        progress.policy_from_name(self.d_policy, 1.0)

    def policy(self, run_max: float) -> progress.DPolicy:
        return progress.policy_from_name(self.d_policy, 2.0 * run_max)

    def segment_length(self, setting: Mapping, node_budget: int = DEFAULT_NODE_BUDGET) -> int:
        if self.a is not None:
            return self.a
        return min(max(3 * layout_of(setting, node_budget).workers, 3), 50)

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon, "a": self.a, "b": self.b, "candidate_pool": self.candidate_pool,
            "d_policy": self.d_policy, "seed": self.seed, "sampling": self.sampling,
            "technique": self.technique, "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> TunerConfig:
        return cls(**doc)


@dataclass
class Job:
    """A training job: what to train, the knobs to tune and where to start."""

    workload: WorkloadSpec
    space: KnobSpace
    initial: SystemSetting
    cost: CostModel = field(default_factory=CostModel)
    node_budget: int = DEFAULT_NODE_BUDGET
    sim_seed: int = 0
    _dataset: Dataset | None = field(default=None, repr=False)

    def __post_init__(self):
        self.initial = self.space.validate(self.initial)

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = generate_dataset(self.workload)
        return self._dataset

    def simulator(self, setting: SystemSetting | None = None) -> Simulator:
        return Simulator(self.dataset, self.cost, setting or self.initial, self.node_budget, seed=self.sim_seed)


@dataclass(frozen=True)
class TimelineEntry:
    j: int
    setting_id: str
    reason: str


@dataclass(frozen=True)
class Decision:
    j: int
    action: str  # "keep" | "reconfigure"
    current: str
    proposed: str | None = None
    ei: float = 0.0
    r_cost: float = 0.0
    best_remaining: float = math.inf
    note: str = ""
    target: SystemSetting | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "j": self.j, "action": self.action, "current": self.current, "proposed": self.proposed,
            "ei": self.ei, "r_cost": self.r_cost,
            "best_remaining": None if math.isinf(self.best_remaining) else self.best_remaining,
            "note": self.note,
        }


@dataclass
class JobReport:
    completion_time: float
    iterations: int
    setting_timeline: list[TimelineEntry]
    reconfig_count: int
    total_reconfig_cost: float
    final_loss: float
    converged: bool
    diverged: bool = False
    decisions: list[Decision] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "completion_time": self.completion_time,
            "iterations": self.iterations,
            "setting_timeline": [[e.j, e.setting_id, e.reason] for e in self.setting_timeline],
            "reconfig_count": self.reconfig_count,
            "total_reconfig_cost": self.total_reconfig_cost,
            "final_loss": self.final_loss,
            "converged": self.converged,
            "diverged": self.diverged,
            "decisions": [d.to_json() for d in self.decisions],
        }

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "setting_id", "reason"])
        for e in self.setting_timeline:
            w.writerow([e.j, e.setting_id, e.reason])
        return buf.getvalue()


@dataclass
class TuningState:
    job: Job
    config: TunerConfig
    sim: Simulator
    repo: MetricsRepository
    model: gp.GaussianProcessModel | None = None
    best_remaining: float = math.inf
    timeline: list[TimelineEntry] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)
    reconfig_count: int = 0
    total_reconfig_cost: float = 0.0
    converged: bool = False
    n_decisions: int = 0

    @property
    def current(self) -> SystemSetting:
        return self.sim.setting

    def report(self, diverged: bool = False) -> JobReport:
        return JobReport(
            completion_time=self.sim.clock,
            iterations=self.sim.j,
            setting_timeline=list(self.timeline),
            reconfig_count=self.reconfig_count,
            total_reconfig_cost=self.total_reconfig_cost,
            final_loss=self.sim.last_loss,
            converged=self.converged,
            diverged=diverged,
            decisions=list(self.decisions),
        )


# ---------------------------------------------------------------------------
# Building blocks


def _train(state: TuningState, count: int) -> bool:
    """Run ``count`` iterations (fewer if the budget or convergence stops it)."""
    room = state.config.max_iterations - state.sim.j
    result = state.sim.run_iterations(min(count, max(room, 0)), state.repo, state.config.epsilon)
    state.converged = result.converged
    return result.converged


def _switch(state: TuningState, new: SystemSetting, reason: str) -> None:
    outcome = reconfigure(state.sim, new, state.config.technique, state.repo)
    state.reconfig_count += 1
    state.total_reconfig_cost += outcome.cost
    state.timeline.append(TimelineEntry(state.sim.j, new.id, reason))


def _sample(space: KnobSpace, size: int, seed: int, method: str) -> list[SystemSetting]:
    return (orthogonal_sample if method == ORTHOGONAL else random_sample)(space, size, seed)


def _init_settings(job: Job, config: TunerConfig) -> list[SystemSetting]:
    """``b`` distinct settings other than the initial one (fewer if the space is smaller)."""
    out: list[SystemSetting] = []
    seen = {job.initial}
    limit = job.space.size() - 1
    round_ = 0
    while len(out) < min(config.b, limit) and round_ < 50:
        for s in _sample(job.space, config.b, config.seed + 7919 * round_, config.sampling):
            if s not in seen and len(out) < config.b:
                seen.add(s)
                out.append(s)
        round_ += 1
    return out


def _probe_missing(state: TuningState) -> None:
    """Charge and log one probe of every action type not yet measured."""
    measured = {kind for ev in state.repo.events for kind, _ in ev.get("action_costs", [])}
    missing = [k for k in ACTION_TYPES if k not in measured]
    if not missing:
        return
    sim, current = state.sim, state.sim.setting
    layout = layout_of(current, sim.node_budget)
    probes = []
    for kind in missing:
        # price the action that a one-worker step would need
        other = current.replace(num_workers=layout.workers + (1 if layout.workers == 1 else -1)) \
            if "num_workers" in current else current
        plan = [a for a in plan_reconfig(current, other, sim.store.owner, sim.dataset.n, sim.node_budget)
                if a.kind == kind]
        action = plan[0] if plan else ReconfigAction(kind) if kind != TYPE_IB else None
        if action is None:
            continue
        c = action_cost(action, sim.cost)
        if sim.time_noise:
            c *= 1.0 + sim.cost.noise * (2.0 * sim.time_rng.random() - 1.0)
        probes.append((kind, c))
    if not probes:
        return
    total = float(sum(c for _, c in probes))
    sim.clock += total
    state.total_reconfig_cost += total
    state.repo.log_event({
        "j": sim.j, "to": current.id, "plan": [{"kind": k} for k, _ in probes],
        "technique": "probe", "cost": total, "action_costs": [[k, c] for k, c in probes],
    })


def _triples_and_model(state: TuningState) -> gp.GaussianProcessModel:
    repo, space = state.repo, state.job.space
    _, _, ls = repo.arrays()
    run_max = max(float(ls.max()) if len(ls) else 0.0, repo.l_init)
    policy = state.config.policy(run_max)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSegmentWarning)
        triples = build_training_triples(repo, state.config.epsilon, policy)
    for w in caught:
        log.warning("%s", w.message)
    if len(triples) < 1:
        raise FitError("no usable segments")
    X = np.stack([encode_setting(repo.setting(t.setting_id), space, t.loss_at_switch, repo.l_init) for t in triples])
    # remaining time is positive and multiplicative (seconds/iteration x
    # iterations), so the model works on its logarithm
    y = np.log(np.maximum([t.remaining_time for t in triples], MIN_REMAINING))
    if len(triples) == 1:
        raise FitError("need at least two usable segments")
    return gp.fit(X, y)


def run_initialization(job: Job, config: TunerConfig) -> TuningState:
    """Run ``a`` iterations under the initial setting, then ``a`` under each of ``b`` samples.

    Returns the tuning state with a fitted model, or with ``converged`` set
    (and no model) when the job finished during initialization.
    """
    return _initialize(_new_state(job, config))


def _new_state(job: Job, config: TunerConfig) -> TuningState:
    sim = job.simulator()
    state = TuningState(job, config, sim, MetricsRepository(sim.initial_loss))
    state.timeline.append(TimelineEntry(0, job.initial.id, "initial"))
    return state


def _initialize(state: TuningState) -> TuningState:
    job, config = state.job, state.config
    if _train(state, config.segment_length(job.initial, job.node_budget)):
        return state
    for s in _init_settings(job, config):
        _switch(state, s, "init")
        if _train(state, config.segment_length(s, job.node_budget)):
            return state
    _probe_missing(state)
    try:
        state.model = _triples_and_model(state)
    except (FitError, NumericalError) as exc:
        log.warning("initial model fit failed: %s", exc)
    return state


def online_step(state: TuningState) -> Decision:
    """Refit the model and decide whether to keep the current setting."""
    sim, repo, space, config = state.sim, state.repo, state.job.space, state.config
    current = sim.setting
    state.n_decisions += 1
    try:
        state.model = _triples_and_model(state)
    except (FitError, NumericalError) as exc:
        log.warning("keeping %s: %s", current.id, exc)
        return Decision(sim.j, "keep", current.id, best_remaining=state.best_remaining, note=str(exc))
    model = state.model
    loss = sim.last_loss
    executed = [repo.setting(seg.setting_id) for seg in repo.segments]
    executed = list(dict.fromkeys(executed))
    X_exec = np.stack([encode_setting(s, space, loss, repo.l_init) for s in executed])
    means, _ = model.predict_many(X_exec)
    state.best_remaining = min(state.best_remaining, float(np.exp(np.min(means))))
    pool = _sample(space, config.candidate_pool, config.seed * 1_000_003 + state.n_decisions, config.sampling)
    prop = propose_next(model, pool, executed, loss, state.best_remaining, space, repo.l_init, log_targets=True)
    if prop.setting == current:
        return Decision(sim.j, "keep", current.id, prop.setting.id, prop.ei_seconds, 0.0, state.best_remaining,
                        "already running the proposal")
    plan = plan_reconfig(current, prop.setting, sim.store.owner, sim.dataset.n, sim.node_budget)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r_cost = estimate_reconfig_cost(repo, plan, sim.cost)
    action = "reconfigure" if prop.ei_seconds - r_cost > 0 else "keep"
    return Decision(sim.j, action, current.id, prop.setting.id, prop.ei_seconds, r_cost, state.best_remaining,
                    target=prop.setting)


def run_job(job: Job, config: TunerConfig) -> tuple[JobReport, MetricsRepository]:
    """Tune ``job`` until its loss is at most ``epsilon``.

    Raises ``DivergenceError`` with ``.report`` and ``.repo`` attached when
    training diverges.
    """
    state = _new_state(job, config)
    try:
        _initialize(state)
        while not state.converged and state.sim.j < config.max_iterations:
            if state.model is not None or state.sim.j > 0:
                decision = online_step(state)
                state.decisions.append(decision)
                if decision.action == "reconfigure":
                    _switch(state, decision.target, "tuned")
            _train(state, config.segment_length(state.sim.setting, job.node_budget))
    except DivergenceError as exc:
        exc.report = state.report(diverged=True)
        exc.repo = state.repo
        raise
    return state.report(), state.repo


def run_fixed(job: Job, setting: SystemSetting, epsilon: float, max_iterations: int = 200_000) -> tuple[JobReport, MetricsRepository]:
    """Train under one setting for the whole job (the comparison baseline)."""
    setting = job.space.validate(setting)
    sim = job.simulator(setting)
    repo = MetricsRepository(sim.initial_loss)
    state = TuningState(job, TunerConfig(epsilon, max_iterations=max_iterations), sim, repo)
    state.timeline.append(TimelineEntry(0, setting.id, "fixed"))
    try:
        _train(state, max_iterations)
    except DivergenceError as exc:
        exc.report = state.report(diverged=True)
        exc.repo = repo
        raise
    return state.report(), repo


# ---------------------------------------------------------------------------
# Estimator quality


Estimator = Callable[[str, MetricsRepository, SegmentSpan, float], "float | None"]


def progress_estimator(config: TunerConfig) -> Estimator:
    """Remaining seconds from a segment via the convergence-curve fit."""

    def estimate(setting_id: str, repo: MetricsRepository, seg: SegmentSpan, epsilon: float):
        js, ts, ls = repo.arrays(seg)
        anchor = repo.loss_before(seg)
        _, _, all_l = repo.arrays(SegmentSpan(setting_id, 0, seg.stop))
        run_max = max(float(all_l.max()), repo.l_init or 0.0)
        segment = progress.Segment(j0=int(js[0]) - 1, anchor_loss=anchor, js=js, losses=ls, times=ts)
        try:
            est = progress.estimate_remaining_time(segment, epsilon, config.policy(run_max),
                                                   j_now=segment.j0, fallback_d=2.0 * run_max)
        except (FitError, ValidationError):
            return None
        return est.Y

    return estimate


@dataclass(frozen=True)
class RankResult:
    average_rank: float
    n_segments: int
    skipped: int
    n_settings: int


def rank_evaluation(
    repos: Mapping[str, MetricsRepository],
    oracle: Mapping[str, float],
    config: TunerConfig,
    estimator: Estimator | None = None,
) -> RankResult:
    """Mean oracle rank of the setting the estimator deems fastest, per segment.

    Each setting's full-run trace is cut into segments of ``a`` iterations
    (``config.a``, default 15). Segment ``k`` is evaluated while every
    converging setting is still running: each gets an estimated completion
    time, the seconds elapsed before the segment plus the estimated
    remaining seconds. The oracle ranks settings by true completion time
    (rank 1 is fastest); settings that diverged are not candidates.
    """
    missing = set(repos) - set(oracle)
    if missing:
        raise ValidationError(f"oracle lacks settings: {sorted(missing)}")
    estimator = estimator or progress_estimator(config)
    a = config.a or 15
    ids = sorted(oracle, key=lambda s: (oracle[s], s))
    rank = {sid: i + 1 for i, sid in enumerate(ids)}
    live = sorted(sid for sid in repos if math.isfinite(oracle[sid]))
    elapsed = {}
    for sid in live:
        _, ts, _ = repos[sid].arrays()
        elapsed[sid] = np.concatenate([[0.0], np.cumsum(ts)])
    n_seg = min((len(elapsed[sid]) - 1) // a for sid in live) if live else 0
    total, counted, skipped = 0.0, 0, 0
    for k in range(n_seg):
        start, stop = k * a, (k + 1) * a
        scores: dict[str, float] = {}
        for sid in live:
            y = estimator(sid, repos[sid], SegmentSpan(sid, start, stop), config.epsilon)
            if y is None or not math.isfinite(y):
                skipped += 1
                continue
            scores[sid] = float(elapsed[sid][start]) + float(y)
        if not scores:
            continue
        best = min(scores, key=lambda s: (scores[s], s))
        total += rank[best]
        counted += 1
    if counted == 0:
        raise FitError("no segment could be evaluated")
    return RankResult(total / counted, counted, skipped, len(ids))


def oracle_estimator(oracle: Mapping[str, float], reverse: bool = False) -> Estimator:
    """Feeds the true remaining time (or its mirror image) to ``rank_evaluation``."""
    top = max(v for v in oracle.values() if math.isfinite(v))

    def estimate(setting_id, repo, seg, epsilon):
        _, ts, _ = repo.arrays()
        total = 2 * top - oracle[setting_id] if reverse else oracle[setting_id]
        return float(total) - float(np.sum(ts[:seg.start]))

    return estimate


def report_json(report: JobReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
