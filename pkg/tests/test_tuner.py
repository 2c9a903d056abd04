import json
import math

import numpy as np
import pytest

from conftest import benchmark_space
from pstune.domain import KnobSpace, KnobSpec, SystemSetting
from pstune.errors import DivergenceError, ValidationError
from pstune.pssim import CostModel, WorkloadSpec
from pstune.tuner import (
    Job,
    TunerConfig,
    oracle_estimator,
    rank_evaluation,
    report_json,
    run_fixed,
    run_initialization,
    run_job,
)

SERIAL = SystemSetting({"num_workers": 1, "threads": 1})


def _job(**kw):
    return Job(WorkloadSpec(**kw), benchmark_space(), SERIAL)


def test_config_validation():
    with pytest.raises(ValidationError):
        TunerConfig(0.0)
    with pytest.raises(ValidationError):
        TunerConfig(0.1, a=1)
    with pytest.raises(ValidationError):
        TunerConfig(0.1, d_policy="psychic")
    with pytest.raises(ValidationError):
        TunerConfig(0.1, technique="hot-swap")
    assert TunerConfig.from_json(TunerConfig(0.1, a=4).to_json()) == TunerConfig(0.1, a=4)


def test_default_segment_length_tracks_workers():
    cfg = TunerConfig(0.1)
    assert cfg.segment_length({"num_workers": 1}) == 3
    assert cfg.segment_length({"num_workers": 5}) == 15
    assert cfg.segment_length({"num_workers": 30}) == 50
    assert TunerConfig(0.1, a=7).segment_length({"num_workers": 5}) == 7


def test_initialization_runs_a_plus_b_segments():
    state = run_initialization(_job(), TunerConfig(1e-6, a=5, b=10))
    assert state.sim.j == 55
    assert len(state.repo.segments) == 11
    assert len({seg.setting_id for seg in state.repo.segments}) == 11
    assert state.model is not None
    # a probe charge exists for every action type
    kinds = {k for ev in state.repo.events for k, _ in ev["action_costs"]}
    assert kinds == {"TypeIa", "TypeIb", "TypeII"}


@pytest.fixture(scope="module")
def tuned():
    job = _job()
    cfg = TunerConfig(0.04)
    return run_job(job, cfg)


def test_job_converges(tuned):
    report, repo = tuned
    assert report.converged and not report.diverged
    assert report.final_loss <= 0.04
    assert repo.records[-1].l <= 0.04 and all(r.l > 0.04 for r in repo.records[:-1])
    assert report.iterations == len(repo)


def test_completion_time_adds_iterations_and_reconfigs(tuned):
    report, repo = tuned
    iter_time = sum(r.t for r in repo.records)
    assert report.completion_time == pytest.approx(iter_time + report.total_reconfig_cost, rel=1e-12)


def test_gate_soundness(tuned):
    report, _ = tuned
    assert report.decisions
    for d in report.decisions:
        if d.action == "reconfigure":
            assert d.ei - d.r_cost > 0
        elif d.proposed is not None and d.proposed != d.current:
            assert d.ei - d.r_cost <= 0


def test_best_remaining_non_increasing(tuned):
    report, _ = tuned
    seen = [d.best_remaining for d in report.decisions if math.isfinite(d.best_remaining)]
    assert seen and all(b <= a for a, b in zip(seen, seen[1:]))


def test_timeline_matches_switches(tuned):
    report, repo = tuned
    assert report.setting_timeline[0].reason == "initial"
    assert report.reconfig_count == len(report.setting_timeline) - 1
    tuned_switches = [d for d in report.decisions if d.action == "reconfigure"]
    assert len(tuned_switches) == sum(e.reason == "tuned" for e in report.setting_timeline)
    lines = report.timeline_csv().splitlines()
    assert lines[0] == "j,setting_id,reason" and len(lines) == len(report.setting_timeline) + 1


def test_run_is_deterministic(tuned):
    again, _ = run_job(_job(), TunerConfig(0.04))
    assert report_json(again) == report_json(tuned[0])
    json.loads(report_json(again))


def test_single_setting_space_never_reconfigures():
    space = KnobSpace((KnobSpec.ordinal("threads", (2,)),))
    job = Job(WorkloadSpec(), space, SystemSetting({"threads": 2}))
    report, _ = run_job(job, TunerConfig(0.04))
    assert report.converged and report.reconfig_count == 0
    assert all(d.action == "keep" for d in report.decisions)


def test_epsilon_above_initial_loss_finishes_in_one_iteration():
    job = _job()
    report, repo = run_job(job, TunerConfig(1e6))
    assert report.iterations == 1 and report.converged and report.reconfig_count == 0


def test_divergence_carries_report():
    job = _job(learning_rate=5.0)
    with pytest.raises(DivergenceError) as exc:
        run_job(job, TunerConfig(0.04))
    assert exc.value.report.diverged and not exc.value.report.converged


def test_fixed_run_baseline():
    report, repo = run_fixed(_job(), SystemSetting({"num_workers": 4, "threads": 2}), 0.04)
    assert report.converged and report.reconfig_count == 0
    assert {r.setting_id for r in repo.records} == {"num_workers=4,threads=2"}


# -- rank evaluation ---------------------------------------------------------------


@pytest.fixture(scope="module")
def fixed_runs():
    job = _job()
    repos, oracle = {}, {}
    for w in (1, 3, 6, 12):
        s = SystemSetting({"num_workers": w, "threads": 2})
        report, repo = run_fixed(job, s, 0.04)
        repos[s.id], oracle[s.id] = repo, report.completion_time
    return repos, oracle


def test_true_oracle_scores_rank_one(fixed_runs):
    repos, oracle = fixed_runs
    res = rank_evaluation(repos, oracle, TunerConfig(0.04), oracle_estimator(oracle))
    assert res.average_rank == 1.0 and res.n_settings == 4 and res.n_segments > 0


def test_reversed_oracle_scores_rank_n(fixed_runs):
    repos, oracle = fixed_runs
    res = rank_evaluation(repos, oracle, TunerConfig(0.04), oracle_estimator(oracle, reverse=True))
    assert res.average_rank == 4.0


def test_progress_estimator_rank_in_range(fixed_runs):
    repos, oracle = fixed_runs
    res = rank_evaluation(repos, oracle, TunerConfig(0.04))
    assert 1.0 <= res.average_rank <= 4.0


def test_rank_requires_oracle_for_every_setting(fixed_runs):
    repos, oracle = fixed_runs
    partial = dict(list(oracle.items())[:2])
    with pytest.raises(ValidationError):
        rank_evaluation(repos, partial, TunerConfig(0.04))


def test_baseline_technique_costs_more():
    job = Job(WorkloadSpec(), benchmark_space(), SERIAL, CostModel())
    odmr, _ = run_job(job, TunerConfig(0.04, technique="odmr"))
    base, _ = run_job(job, TunerConfig(0.04, technique="baseline"))
    if odmr.reconfig_count and base.reconfig_count:
        assert base.total_reconfig_cost / base.reconfig_count > odmr.total_reconfig_cost / odmr.reconfig_count
    assert np.isfinite(base.completion_time)
