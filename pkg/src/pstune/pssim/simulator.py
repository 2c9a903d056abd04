"""Seeded, single-threaded parameter-server training simulator.

One iteration is one model update applied at the servers:

* ``serial``: one worker, gradient at the current model.
* ``BSP``: every worker computes a gradient at the current model on its own
  partition; the average is applied.
* ``ASP``: workers take turns; each gradient is computed from a snapshot
  that is ``s`` updates old, with ``s`` drawn uniformly from ``0..tau`` and
  ``tau = workers - 1``. Unless the workload opts out, the step is damped
  to ``lr / (1 + s)``.

Iteration times come from the cost model, never from the wall clock.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..domain import MetricRecord, MetricsRepository, SystemSetting
from ..errors import DivergenceError, ValidationError
from .cluster import ParameterStore, even_owner
from .cost import ASP, BSP, SERIAL, CostModel, Layout, layout_of
from .workload import Dataset, empirical_risk

DEFAULT_NODE_BUDGET = 36
# a loss this many times the initial loss counts as divergence
BLOWUP_FACTOR = 1e8


@dataclass
class RunResult:
    executed: int
    converged: bool


@dataclass
class ClusterState:
    layout: Layout
    partitions: list[np.ndarray]
    tau: int
    history: deque = field(default_factory=deque)
    max_staleness_seen: int = 0


def partition_examples(n_examples: int, workers: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(p, dtype=np.int64) for p in np.array_split(np.arange(n_examples), workers)]


class Simulator:
    """Trains ``dataset`` under a (changeable) system setting."""

    def __init__(
        self,
        dataset: Dataset,
        cost: CostModel,
        setting: SystemSetting,
        node_budget: int = DEFAULT_NODE_BUDGET,
        seed: int = 0,
        time_noise: bool = True,
    ):
        self.dataset = dataset
        self.cost = cost
        self.node_budget = node_budget
        self.time_noise = time_noise
        ss = np.random.SeedSequence(seed)
        batch_ss, stale_ss, time_ss = ss.spawn(3)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.stale_rng = np.random.default_rng(stale_ss)
        self.time_rng = np.random.default_rng(time_ss)
        self.j = 0
        self.clock = 0.0
        self.blocked_time = 0.0
        self.setting = setting
        layout = layout_of(setting, node_budget)
        self._check_layout(layout)
        self.store = ParameterStore(dataset.w0, even_owner(dataset.dim, layout.servers), layout.servers)
        self.state = self._make_state(layout)
        self.initial_loss = empirical_risk(dataset.w0, dataset)
        self.last_loss = self.initial_loss
        self._grad = np.empty(dataset.dim)
        self._scratch = np.empty(dataset.dim)

    # -- configuration ------------------------------------------------------

    def _check_layout(self, layout: Layout) -> None:
        if self.dataset.spec.batch_size > self.dataset.n // layout.workers:
            raise ValidationError(f"{layout.workers} workers leave partitions smaller than the batch size")

    def _make_state(self, layout: Layout) -> ClusterState:
        workers = 1 if layout.mode == SERIAL else layout.workers
        tau = workers - 1 if layout.mode == ASP else 0
        state = ClusterState(layout, partitions_for(self.dataset.n, workers), tau)
        state.history = deque(maxlen=tau + 1)
        state.history.append(self.store.pull())
        return state

    def configure(self, setting: SystemSetting, quiesce: bool) -> None:
        """Adopt ``setting``'s layout; shard moves are the caller's job."""
        layout = layout_of(setting, self.node_budget)
        self._check_layout(layout)
        old_history = self.state.history
        self.setting = setting
        self.state = self._make_state(layout)
        if not quiesce:
            # in-flight snapshots survive a live reconfiguration
            kept = list(old_history)[-(self.state.tau + 1):]
            self.state.history = deque(kept, maxlen=self.state.tau + 1)
            if self.state.history[-1][1] != self.store.epoch:
                self.state.history.append(self.store.pull())

    @property
    def layout(self) -> Layout:
        return self.state.layout

    def model(self) -> np.ndarray:
        return self.store.model()

    def iteration_time(self, noisy: bool | None = None) -> float:
        t = self.cost.iteration_time(self.layout, self.dataset.dim)
        if self.time_noise if noisy is None else noisy:
            t *= 1.0 + self.cost.noise * (2.0 * self.time_rng.random() - 1.0)
        return t

    # -- training -------------------------------------------------------------

    def _batch(self, worker: int) -> np.ndarray:
        part = self.state.partitions[worker]
        pick = self.batch_rng.choice(len(part), self.dataset.spec.batch_size, replace=False)
        return part[pick]

    def _grad_at(self, w: np.ndarray, batch: np.ndarray, out: np.ndarray) -> float:
        ds = self.dataset
        return kernels.loss_grad(ds.kind_code, ds.X, ds.y, batch, w, ds.spec.l2_strength, out)

    def _loss_at(self, w: np.ndarray, batch: np.ndarray) -> float:
        return self._grad_at(w, batch, self._scratch)

    def step(self) -> MetricRecord:
        """Run one iteration and return its metric record."""
        st = self.state
        alpha = self.dataset.spec.learning_rate
        if st.layout.mode == BSP:
            pulled, epoch = self.store.pull()
            grad = np.zeros(self.dataset.dim)
            batches = []
            for k in range(len(st.partitions)):
                b = self._batch(k)
                self._grad_at(pulled, b, self._grad)
                grad += self._grad
                batches.append(b)
            grad /= len(batches)
            self._check_finite(grad)
            self.store.push(-alpha * grad, pulled, epoch)
            w = self.store.values
            loss = float(np.mean([self._loss_at(w, b) for b in batches]))
        else:
            worker = self.j % len(st.partitions)
            age = int(self.stale_rng.integers(0, min(st.tau, len(st.history) - 1) + 1)) if st.tau else 0
            if age > st.tau:
                raise AssertionError("staleness bound violated")
            st.max_staleness_seen = max(st.max_staleness_seen, age)
            pulled, epoch = st.history[-1 - age]
            b = self._batch(worker)
            self._grad_at(pulled, b, self._grad)
            self._check_finite(self._grad)
            if self.dataset.spec.staleness_aware:
                alpha /= 1.0 + age
            self.store.push(-alpha * self._grad, pulled, epoch)
            loss = self._loss_at(self.store.values, b)
        if st.tau:
            st.history.append(self.store.pull())
        else:
            st.history[-1] = self.store.pull()
        if not np.isfinite(loss) or loss > BLOWUP_FACTOR * max(self.initial_loss, 1e-12):
            raise DivergenceError(self.j)
        t = self.iteration_time()
        rec = MetricRecord(self.j, self.setting.id, t, loss)
        self.j += 1
        self.clock += t
        self.last_loss = loss
        return rec

    def _check_finite(self, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(self.j)

    def run_iterations(self, count: int, repo: MetricsRepository, epsilon: float | None = None) -> RunResult:
        """Run up to ``count`` iterations, stopping once the loss is at most ``epsilon``."""
        if repo.l_init is None:
            repo.l_init = self.initial_loss
        repo.register(self.setting)
        for i in range(count):
            rec = self.step()
            repo.append(rec)
            if epsilon is not None and rec.l <= epsilon:
                return RunResult(i + 1, True)
        return RunResult(count, False)


def partitions_for(n_examples: int, workers: int) -> list[np.ndarray]:
    return partition_examples(n_examples, workers)


def sgd_step(sim: Simulator) -> tuple[np.ndarray, MetricRecord]:
    rec = sim.step()
    return sim.model(), rec


def run_iterations(sim: Simulator, count: int, repo: MetricsRepository, epsilon: float | None = None) -> RunResult:
    return sim.run_iterations(count, repo, epsilon)
