"""Online reconfiguration: plan a setting change, apply it, price it.

Three action types cover every change:

* ``TypeIa`` moves training examples between workers (worker count changed).
* ``TypeIb`` moves parameter ranges between servers (server count changed).
* ``TypeII`` changes knob values with no data movement.

A plan is applied either lazily (on-demand model relocation, no worker
pause) or with the stop-checkpoint-rebuild-restore baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import MetricsRepository, SystemSetting
from .errors import ValidationError
from .pssim.cluster import rebalance_owner
from .pssim.cost import SERVERS, WORKERS, CostModel, layout_of
from .pssim.simulator import DEFAULT_NODE_BUDGET, Simulator, partition_examples

TYPE_IA = "TypeIa"
TYPE_IB = "TypeIb"
TYPE_II = "TypeII"
ACTION_TYPES = (TYPE_IA, TYPE_IB, TYPE_II)

ODMR = "odmr"
BASELINE = "baseline"
TECHNIQUES = (ODMR, BASELINE)


@dataclass(frozen=True)
class ParamMove:
    """Parameters ``lo..hi-1`` move from server ``src`` to server ``dst``."""

    lo: int
    hi: int
    src: int
    dst: int

    def to_json(self) -> list[int]:
        return [self.lo, self.hi, self.src, self.dst]


@dataclass(frozen=True)
class ReconfigAction:
    kind: str
    # TypeIa
    old_workers: int = 0
    new_workers: int = 0
    moved_examples: int = 0
    # TypeIb
    moves: tuple[ParamMove, ...] = ()
    new_owner: tuple[int, ...] = ()
    n_servers: int = 0
    # TypeII
    knobs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ACTION_TYPES:
            raise ValidationError(f"unknown action type {self.kind!r}")
        if self.kind == TYPE_IB:
            dim = len(self.new_owner)
            covered = np.zeros(dim, dtype=bool)
            for m in self.moves:
                if not 0 <= m.lo < m.hi <= dim:
                    raise ValidationError(f"move {m} outside the model")
                if covered[m.lo:m.hi].any():
                    raise ValidationError("parameter moves overlap")
                covered[m.lo:m.hi] = True

    @property
    def moved_params(self) -> int:
        return sum(m.hi - m.lo for m in self.moves)

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.kind == TYPE_IA:
            doc.update(old_workers=self.old_workers, new_workers=self.new_workers, moved_examples=self.moved_examples)
        elif self.kind == TYPE_IB:
            doc.update(moves=[m.to_json() for m in self.moves], n_servers=self.n_servers)
        else:
            doc["knobs"] = list(self.knobs)
        return doc


def _runs(idx: np.ndarray, src: np.ndarray, dst: np.ndarray) -> list[ParamMove]:
    # group moved indices into maximal contiguous runs with one (src, dst)
    moves: list[ParamMove] = []
    for i in idx:
        i = int(i)
        if moves and moves[-1].hi == i and moves[-1].src == src[i] and moves[-1].dst == dst[i]:
            last = moves[-1]
            moves[-1] = ParamMove(last.lo, i + 1, last.src, last.dst)
        else:
            moves.append(ParamMove(i, i + 1, int(src[i]), int(dst[i])))
    return moves


def _moved_examples(n_examples: int, old_workers: int, new_workers: int) -> int:
    old = np.empty(n_examples, dtype=np.int64)
    new = np.empty(n_examples, dtype=np.int64)
    for k, part in enumerate(partition_examples(n_examples, old_workers)):
        old[part] = k
    for k, part in enumerate(partition_examples(n_examples, new_workers)):
        new[part] = k
    return int(np.count_nonzero(old != new))


def plan_reconfig(
    old: Mapping,
    new: Mapping,
    owner: Sequence[int],
    n_examples: int,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> list[ReconfigAction]:
    """Minimal action list turning ``old`` into ``new``.

    ``owner`` maps each parameter to its current server. A change in the
    worker or server count yields ``TypeIa`` and ``TypeIb`` (the new shard
    map keeps as many parameters in place as possible); any other knob
    difference yields one ``TypeII``.
    """
    old, new = SystemSetting(old), SystemSetting(new)
    if set(old) != set(new):
        raise ValidationError("settings must assign the same knobs")
    if old == new:
        return []
    lo, ln = layout_of(old, node_budget), layout_of(new, node_budget)
    owner = np.asarray(owner, dtype=np.int64)
    plan: list[ReconfigAction] = []
    if (lo.workers, lo.servers) != (ln.workers, ln.servers):
        plan.append(ReconfigAction(
            TYPE_IA, old_workers=lo.workers, new_workers=ln.workers,
            moved_examples=_moved_examples(n_examples, lo.workers, ln.workers),
        ))
        new_owner = rebalance_owner(owner, ln.servers)
        moved = np.flatnonzero(new_owner != owner)
        plan.append(ReconfigAction(
            TYPE_IB, moves=tuple(_runs(moved, owner, new_owner)),
            new_owner=tuple(int(s) for s in new_owner), n_servers=ln.servers,
        ))
    other = tuple(k for k in sorted(new) if k not in (WORKERS, SERVERS) and old[k] != new[k])
    if other:
        plan.append(ReconfigAction(TYPE_II, knobs=other))
    return plan


# ---------------------------------------------------------------------------
# Costs


def action_cost(action: ReconfigAction, cost: CostModel) -> float:
    """Simulated seconds one action takes under lazy relocation."""
    if action.kind == TYPE_IA:
        return cost.tdr_per_example * action.moved_examples
    if action.kind == TYPE_IB:
        return cost.ssr + cost.odmr_per_param * action.moved_params
    return cost.ssr


def baseline_cost(plan: Sequence[ReconfigAction], cost: CostModel, n_params: int, n_examples: int) -> float:
    """Seconds for quiesce + checkpoint + full rebuild + restore + data reload."""
    if not plan:
        return 0.0
    return (cost.quiesce + cost.ckp_per_param * n_params + cost.ssr
            + cost.mdr_per_param * n_params + cost.tdr_per_example * n_examples)


@dataclass
class ReconfigCostModel:
    """Measured mean seconds per action type."""

    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for kind, v in self.means.items():
            if v < 0:
                raise ValidationError(f"negative cost for {kind}")

    @classmethod
    def from_repository(cls, repo: MetricsRepository) -> ReconfigCostModel:
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for ev in repo.events:
            if ev.get("technique") == BASELINE:
                continue
            for kind, c in ev.get("action_costs", []):
                sums[kind] = sums.get(kind, 0.0) + c
                counts[kind] = counts.get(kind, 0) + 1
        return cls({k: sums[k] / counts[k] for k in sums}, counts)


def estimate_reconfig_cost(
    repo: MetricsRepository,
    plan: Sequence[ReconfigAction],
    cost: CostModel | None = None,
) -> float:
    """R_cost: sum over the plan's actions of the measured mean cost of each type.

    Types never measured fall back to the simulated charge, with a warning.
    """
    model = ReconfigCostModel.from_repository(repo)
    total = 0.0
    for action in plan:
        if action.kind in model.means:
            total += model.means[action.kind]
        else:
            warnings.warn(f"no measured cost for {action.kind}; using the cost model", RuntimeWarning)
            total += action_cost(action, cost or CostModel())
    return total


# ---------------------------------------------------------------------------
# Application


@dataclass(frozen=True)
class ReconfigOutcome:
    technique: str
    cost: float
    action_costs: tuple[tuple[str, float], ...]
    moved_params: int


def _noisy(sim: Simulator, seconds: float) -> float:
    noise = sim.cost.noise
    if not sim.time_noise or noise == 0:
        return seconds
    return seconds * (1.0 + noise * (2.0 * sim.time_rng.random() - 1.0))


def _log(repo, sim, plan, outcome, new: SystemSetting) -> None:
    if repo is None:
        return
    repo.register(new)
    repo.log_event({
        "j": sim.j,
        "to": new.id,
        "plan": [a.to_json() for a in plan],
        "technique": outcome.technique,
        "cost": outcome.cost,
        "action_costs": [list(ac) for ac in outcome.action_costs],
    })


def _new_owner(sim: Simulator, plan) -> tuple[np.ndarray, int] | None:
    for a in plan:
        if a.kind == TYPE_IB:
            return np.asarray(a.new_owner, dtype=np.int64), a.n_servers
    return None


def apply_odmr(
    sim: Simulator,
    new: SystemSetting,
    plan: Sequence[ReconfigAction],
    repo: MetricsRepository | None = None,
) -> ReconfigOutcome:
    """Switch routing at once and let parameters move on their first push.

    Workers never wait: the charged time advances the clock but not the
    simulator's blocked time.
    """
    moved = 0
    target = _new_owner(sim, plan)
    if target is not None:
        moved = len(sim.store.begin_relocation(*target))
    sim.configure(new, quiesce=False)
    action_costs = tuple((a.kind, _noisy(sim, action_cost(a, sim.cost))) for a in plan)
    total = float(sum(c for _, c in action_costs))
    sim.clock += total
    outcome = ReconfigOutcome(ODMR, total, action_costs, moved)
    _log(repo, sim, plan, outcome, new)
    return outcome


def apply_baseline(
    sim: Simulator,
    new: SystemSetting,
    plan: Sequence[ReconfigAction],
    repo: MetricsRepository | None = None,
) -> ReconfigOutcome:
    """Quiesce, checkpoint, rebuild for ``new``, restore and reload data."""
    moved = 0
    target = _new_owner(sim, plan)
    if target is not None:
        moved = int(np.count_nonzero(target[0] != sim.store.owner))
        sim.store.rebuild(*target)
    else:
        sim.store.finalize()
    sim.configure(new, quiesce=True)
    total = _noisy(sim, baseline_cost(plan, sim.cost, sim.dataset.dim, sim.dataset.n)) if plan else 0.0
    sim.clock += total
    sim.blocked_time += total
    outcome = ReconfigOutcome(BASELINE, total, ((BASELINE, total),) if plan else (), moved)
    _log(repo, sim, plan, outcome, new)
    return outcome


def reconfigure(
    sim: Simulator,
    new: SystemSetting,
    technique: str = ODMR,
    repo: MetricsRepository | None = None,
) -> ReconfigOutcome:
    """Plan and apply the change from the simulator's current setting to ``new``."""
    if technique not in TECHNIQUES:
        raise ValidationError(f"unknown technique {technique!r}")
    plan = plan_reconfig(sim.setting, new, sim.store.owner, sim.dataset.n, sim.node_budget)
    apply = apply_odmr if technique == ODMR else apply_baseline
    return apply(sim, SystemSetting(new), plan, repo)
