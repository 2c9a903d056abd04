import itertools
import math

import numpy as np
import pytest

from pstune.domain import MetricsRepository, SystemSetting
from pstune.errors import DivergenceError, ValidationError
from pstune.progress import q_lower_bound_check
from pstune.pssim import (
    ASP,
    LOGISTIC,
    QUADRATIC,
    SVM,
    CostModel,
    Layout,
    Simulator,
    WorkloadSpec,
    cost_model_time,
    empirical_risk,
    example_losses,
    generate_dataset,
    minibatch_loss,
    run_iterations,
    sgd_step,
)

SERIAL_SETTING = SystemSetting({"num_workers": 1, "mode": "serial"})


def _sim(spec, setting=SERIAL_SETTING, seed=0, **kw):
    return Simulator(generate_dataset(spec), CostModel(), setting, seed=seed, **kw)


def _trace(sim, n):
    repo = MetricsRepository()
    sim.run_iterations(n, repo)
    return repo


# -- datasets ------------------------------------------------------------------


@pytest.mark.parametrize("kind", [QUADRATIC, LOGISTIC, SVM])
def test_dataset_deterministic(kind):
    l2 = 0.0 if kind == QUADRATIC else 1e-3
    a = generate_dataset(WorkloadSpec(kind=kind, l2_strength=l2, seed=4))
    b = generate_dataset(WorkloadSpec(kind=kind, l2_strength=l2, seed=4))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y) and np.array_equal(a.w0, b.w0)


def test_quadratic_constants_exposed():
    ds = generate_dataset(WorkloadSpec(dimension=2, eigenvalues=(2.0, 10.0), n_examples=64, batch_size=4))
    assert ds.L == 10.0 and ds.c == 2.0
    assert q_lower_bound_check(ds.L, ds.c)


def test_n_examples_respected():
    ds = generate_dataset(WorkloadSpec(kind=LOGISTIC, n_examples=4, batch_size=2))
    assert ds.n == 4 and ds.X.shape == (4, ds.dim)


def test_spec_validation():
    with pytest.raises(ValidationError):
        WorkloadSpec(batch_size=10, n_examples=4)
    with pytest.raises(ValidationError):
        WorkloadSpec(kind="cnn")
    with pytest.raises(ValidationError):
        WorkloadSpec(dimension=2, eigenvalues=(0.0, 1.0))
    with pytest.raises(ValidationError):
        WorkloadSpec(learning_rate=0.0)


def test_spec_json_round_trip():
    spec = WorkloadSpec(dimension=3, eigenvalues=(1.0, 2.0, 3.0), seed=9)
    assert WorkloadSpec.from_json(spec.to_json()) == spec


# -- losses --------------------------------------------------------------------


def test_logistic_loss_at_zero_is_ln2():
    ds = generate_dataset(WorkloadSpec(kind=LOGISTIC, l2_strength=0.5, seed=2))
    w = np.zeros(ds.dim)
    assert minibatch_loss(w, ds, [0, 5, 9]) == pytest.approx(math.log(2), rel=1e-12)


def test_full_batch_equals_empirical_risk():
    ds = generate_dataset(WorkloadSpec(kind=SVM, l2_strength=1e-2))
    w = np.random.default_rng(0).standard_normal(ds.dim)
    assert minibatch_loss(w, ds, np.arange(ds.n)) == empirical_risk(w, ds)


@pytest.mark.parametrize("kind", [QUADRATIC, LOGISTIC, SVM])
def test_minibatch_loss_unbiased(kind):
    l2 = 0.0 if kind == QUADRATIC else 0.1
    ds = generate_dataset(WorkloadSpec(kind=kind, dimension=3, n_examples=4, batch_size=2, l2_strength=l2))
    w = np.array([0.3, -1.2, 0.7])
    batches = list(itertools.combinations(range(4), 2))
    assert len(batches) == 6
    mean = np.mean([minibatch_loss(w, ds, list(b)) for b in batches])
    assert mean == pytest.approx(empirical_risk(w, ds), rel=1e-13)


@pytest.mark.parametrize("kind", [QUADRATIC, LOGISTIC, SVM])
def test_risk_is_mean_of_independent_example_losses(kind):
    l2 = 0.0 if kind == QUADRATIC else 0.05
    ds = generate_dataset(WorkloadSpec(kind=kind, l2_strength=l2, n_examples=50, batch_size=5, dimension=4))
    w = np.random.default_rng(1).standard_normal(4)
    if kind == QUADRATIC:
        per = 0.5 * (ds.X * w * w).sum(axis=1)
    elif kind == LOGISTIC:
        per = np.log1p(np.exp(-ds.y * (ds.X @ w)))
    else:
        per = np.maximum(0.0, 1.0 - ds.y * (ds.X @ w))
    np.testing.assert_allclose(example_losses(w, ds), per, rtol=1e-12)
    assert empirical_risk(w, ds) == pytest.approx(per.mean() + 0.5 * l2 * w @ w, rel=1e-12)


def test_single_example_risk():
    ds = generate_dataset(WorkloadSpec(kind=LOGISTIC, n_examples=1, batch_size=1, dimension=3))
    w = np.array([1.0, 2.0, -1.0])
    assert empirical_risk(w, ds) == pytest.approx(example_losses(w, ds)[0] + 0.5 * ds.spec.l2_strength * 6.0)


def test_quadratic_optimum_has_zero_risk():
    ds = generate_dataset(WorkloadSpec())
    assert empirical_risk(ds.w_star, ds) == 0.0
    assert empirical_risk(ds.w0, ds) > 0


# -- SGD dynamics --------------------------------------------------------------


def test_asp_one_worker_matches_serial():
    spec = WorkloadSpec()
    a = _sim(spec, SERIAL_SETTING, seed=3)
    b = _sim(spec, SystemSetting({"num_workers": 1, "mode": ASP}), seed=3)
    for _ in range(50):
        wa, ra = sgd_step(a)
        wb, rb = sgd_step(b)
        assert np.array_equal(wa, wb) and ra.l == rb.l


def test_serial_loss_strictly_decreases_below_2_over_L():
    # no curvature spread: every minibatch sees the exact Hessian
    spec = WorkloadSpec(curvature_spread=0.0, learning_rate=1.9 / 4.0)
    sim = _sim(spec)
    prev = sim.initial_loss
    for _ in range(200):
        _, rec = sgd_step(sim)
        assert rec.l < prev
        prev = rec.l


def test_large_step_diverges_quickly():
    spec = WorkloadSpec(learning_rate=10.0 / 4.0)
    sim = _sim(spec)
    with pytest.raises(DivergenceError) as exc:
        for _ in range(50):
            sim.step()
    assert exc.value.iteration < 50


def _closed_form_iterations(ds, epsilon):
    lam, alpha = ds.eigenvalues, ds.spec.learning_rate
    w0 = ds.w0
    for t in range(1, 10**6):
        w = (1 - alpha * lam) ** t * w0
        if 0.5 * np.dot(lam, w * w) <= epsilon:
            return t
    raise AssertionError("closed form never converges")


@pytest.mark.parametrize("spread", [0.0, 0.5])
def test_serial_iterations_near_closed_form(spread):
    spec = WorkloadSpec(curvature_spread=spread)
    ds = generate_dataset(spec)
    eps = 0.04
    predicted = _closed_form_iterations(ds, eps)
    sim = Simulator(ds, CostModel(), SERIAL_SETTING, seed=0)
    res = sim.run_iterations(20 * predicted, MetricsRepository(), eps)
    assert res.converged
    assert predicted / 2 <= res.executed <= 2 * predicted


def test_iterations_grow_with_asp_workers():
    ds = generate_dataset(WorkloadSpec())
    means = []
    for workers in (1, 4, 16):
        counts = []
        for seed in range(4):
            sim = Simulator(ds, CostModel(), SystemSetting({"num_workers": workers}), seed=seed)
            counts.append(sim.run_iterations(20000, MetricsRepository(), 0.04).executed)
        means.append(np.mean(counts))
    assert means[0] <= means[1] <= means[2]


def test_staleness_bound_and_shards_complete():
    ds = generate_dataset(WorkloadSpec())
    sim = Simulator(ds, CostModel(), SystemSetting({"num_workers": 8}), seed=1)
    assert sim.state.tau == 7
    for _ in range(300):
        sim.step()
        sim.store.check()
    assert 0 < sim.state.max_staleness_seen <= 7


def test_bsp_averages_worker_gradients():
    spec = WorkloadSpec(curvature_spread=0.0)
    ds = generate_dataset(spec)
    sim = Simulator(ds, CostModel(), SystemSetting({"num_workers": 4, "mode": "BSP"}), seed=0)
    w_before = sim.model().copy()
    sim.step()
    # zero spread: every batch gradient is eig * w, so the average is too
    expected = w_before - spec.learning_rate * ds.eigenvalues * w_before
    np.testing.assert_allclose(sim.model(), expected, rtol=1e-12)


# -- cost model ----------------------------------------------------------------


def test_compute_term_independent_of_servers():
    cost = CostModel(network_per_param=0.0)
    a = cost.terms(Layout(4, 8, 1, ASP, False), 20)
    b = cost.terms(Layout(4, 16, 1, ASP, False), 20)
    assert a["compute"] == b["compute"]


def test_worker_axis_has_interior_optimum():
    cost = CostModel()
    times = [cost_model_time({"num_workers": n}, cost, 20, 36) for n in range(1, 36)]
    best = int(np.argmin(times))
    assert 0 < best < len(times) - 1


def test_times_positive_and_deterministic_without_noise():
    ds = generate_dataset(WorkloadSpec())
    a = Simulator(ds, CostModel(), SystemSetting({"num_workers": 3}), time_noise=False)
    assert a.iteration_time() == a.iteration_time() > 0


def test_noise_within_three_percent():
    ds = generate_dataset(WorkloadSpec())
    sim = Simulator(ds, CostModel(), SystemSetting({"num_workers": 3}))
    base = sim.iteration_time(noisy=False)
    ts = [sim.iteration_time() for _ in range(500)]
    assert all(abs(t / base - 1) <= 0.03 + 1e-12 for t in ts)


def test_cost_rejects_negative_coefficients():
    with pytest.raises(ValidationError):
        CostModel(aggregation=-1.0)


def test_layout_over_budget_rejected():
    with pytest.raises(ValidationError):
        cost_model_time({"num_workers": 30, "num_servers": 10}, CostModel(), 20, 36)


# -- runs ----------------------------------------------------------------------


def test_run_zero_iterations():
    sim = _sim(WorkloadSpec())
    w = sim.model().copy()
    repo = MetricsRepository()
    res = run_iterations(sim, 0, repo)
    assert res.executed == 0 and len(repo) == 0 and np.array_equal(sim.model(), w)


def test_run_layout_matches_figure():
    ds = generate_dataset(WorkloadSpec())
    x0 = SystemSetting({"num_workers": 1})
    x1 = SystemSetting({"num_workers": 2})
    sim = Simulator(ds, CostModel(), x0)
    repo = MetricsRepository()
    run_iterations(sim, 5, repo)
    sim.configure(x1, quiesce=True)
    run_iterations(sim, 5, repo)
    assert [(r.j, r.setting_id) for r in repo.records] == [(j, x0.id if j < 5 else x1.id) for j in range(10)]


def test_run_stops_at_epsilon():
    sim = _sim(WorkloadSpec())
    repo = MetricsRepository()
    res = run_iterations(sim, 100000, repo, epsilon=0.5)
    assert res.converged and len(repo) == res.executed < 100000
    assert repo.records[-1].l <= 0.5 and all(r.l > 0.5 for r in repo.records[:-1])


def test_same_seeds_bit_identical_repositories():
    ds = generate_dataset(WorkloadSpec())
    reps = []
    for _ in range(2):
        sim = Simulator(ds, CostModel(), SystemSetting({"num_workers": 6}), seed=5)
        reps.append(_trace(sim, 200).records)
    assert reps[0] == reps[1]
