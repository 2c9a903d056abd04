"""Discrete-event parameter-server training simulator."""

from .cluster import Normal, ParameterStore, PushMessage, Relocating, even_owner, rebalance_owner
from .cost import ASP, BSP, SERIAL, CostModel, Layout, cost_model_time, layout_of
from .simulator import DEFAULT_NODE_BUDGET, RunResult, Simulator, run_iterations, sgd_step
from .workload import (
    LOGISTIC,
    QUADRATIC,
    SVM,
    Dataset,
    WorkloadSpec,
    empirical_risk,
    example_losses,
    generate_dataset,
    minibatch_loss,
)
