"""Synthetic hardware-efficiency model: seconds per iteration for a setting.

This is ground truth for the simulator only; it makes no claim about any
real system. Knob names are fixed module constants so that settings from
any knob space can be mapped onto a cluster layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

from ..errors import ValidationError

WORKERS = "num_workers"
SERVERS = "num_servers"
THREADS = "threads"
MODE = "mode"
INLINING = "inlining"

ASP = "ASP"
BSP = "BSP"
SERIAL = "serial"
MODES = (ASP, BSP, SERIAL)


@dataclass(frozen=True)
class Layout:
    workers: int
    servers: int
    threads: int
    mode: str
    inlining: bool


def layout_of(setting: Mapping, node_budget: int) -> Layout:
    """Cluster layout implied by a setting under a fixed node budget.

    Absent knobs take defaults: one worker, the rest of the budget as
    servers, one thread, ASP, inlining off.
    """
    workers = int(setting.get(WORKERS, 1))
    servers = int(setting.get(SERVERS, node_budget - workers))
    mode = setting.get(MODE, ASP)
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    if workers < 1 or servers < 1:
        raise ValidationError(f"need at least one worker and one server, got {workers}/{servers}")
    if WORKERS in setting and SERVERS in setting and workers + servers > node_budget:
        raise ValidationError(f"{workers} workers + {servers} servers exceed the node budget {node_budget}")
    return Layout(workers, servers, int(setting.get(THREADS, 1)), mode, bool(setting.get(INLINING, False)))


@dataclass(frozen=True)
class CostModel:
    # per-iteration time
    compute: float = 1.0  # seconds for one minibatch on one thread
    thread_contention: float = 0.15  # diminishing returns of intra-op threads
    inlining_speedup: float = 0.85
    aggregation: float = 0.02  # server contention, x workers / servers
    network_per_param: float = 0.025  # transfer, x params / servers
    message: float = 0.002  # per-worker message overhead
    interaction: float = 0.004  # threads x workers / servers
    barrier: float = 0.03  # BSP straggler wait, x log2(workers + 1)
    noise: float = 0.03  # multiplicative, uniform in [1 - noise, 1 + noise]
    # reconfiguration (seconds)
    ssr: float = 0.4  # push new knob values / routing to every node
    tdr_per_example: float = 0.0001
    odmr_per_param: float = 0.005
    quiesce: float = 1.5
    ckp_per_param: float = 0.05
    mdr_per_param: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"cost coefficient {f.name} must be non-negative")
        if self.compute <= 0:
            raise ValidationError("compute coefficient must be positive")
        if self.noise >= 1:
            raise ValidationError("noise must be < 1")

    def thread_efficiency(self, threads: int) -> float:
        return threads / (1.0 + self.thread_contention * (threads - 1))

    def terms(self, layout: Layout, n_params: int) -> dict[str, float]:
        n, s = layout.workers, layout.servers
        per_batch = self.compute / self.thread_efficiency(layout.threads)
        if layout.inlining:
            per_batch *= self.inlining_speedup
        if layout.mode == ASP:
            # n workers push concurrently: one update lands every 1/n batches
            compute = per_batch / n
            barrier = 0.0
        elif layout.mode == BSP:
            compute = per_batch
            barrier = self.barrier * math.log2(n + 1)
        else:
            compute = per_batch
            barrier = 0.0
            n = 1
        return {
            "compute": compute,
            "aggregation": self.aggregation * n / s,
            "network": self.network_per_param * n_params / s + self.message * n,
            "interaction": self.interaction * layout.threads * n / s,
            "barrier": barrier,
        }

    def iteration_time(self, layout: Layout, n_params: int) -> float:
        """Noise-free seconds per iteration."""
        return sum(self.terms(layout, n_params).values())

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, doc: Mapping) -> CostModel:
        return cls(**doc)


def cost_model_time(setting: Mapping, cost: CostModel, n_params: int, node_budget: int = 36) -> float:
    return cost.iteration_time(layout_of(setting, node_budget), n_params)
