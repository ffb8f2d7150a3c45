"""Ready-made tasks and clusters used by the demos, the CLI and the tests.

The model presets carry hand-calibrated coefficients: throughput ratios
between TP degrees and activation/state sizes in MiB.  On healthy clusters
the 110B preset runs DP2 TP8 PP4 on 64 GPUs and the 32B preset DP2 TP4 PP4 on
32 GPUs, both with micro-batch size 1.  See the decisions ledger for how the
numbers were derived.
"""
from __future__ import annotations

from .domain import ClusterState, GpuId, Node, ProfiledCoefficients, TaskSpec
from .traces import situation_rates

# time per layer per micro-batch grows linearly with b
_TAU = {1: 1.0, 2: 2.0, 4: 4.0}

LLM_110B = ProfiledCoefficients(
    tau=_TAU,
    zeta={1: 1.0, 2: 0.4063, 4: 0.1816, 8: 0.0956},
    act_fwd=2500.0,
    act_fwd_bwd=1750.0,
    states=15750.0,
    head_states=9500.0,
    tail_states=12000.0,
)

LLM_32B = ProfiledCoefficients(
    tau=_TAU,
    zeta={1: 1.0, 2: 0.455, 4: 0.158, 8: 0.095},
    act_fwd=2600.0,
    act_fwd_bwd=2100.0,
    states=9150.0,
    head_states=3350.0,
    tail_states=11850.0,
)

# small model with plenty of memory; handy for tests and quick demos
TOY = ProfiledCoefficients(
    tau={1: 1.0, 2: 1.9},
    zeta={1: 1.0, 2: 0.4, 4: 0.19, 8: 0.1},
    act_fwd=10.0,
    act_fwd_bwd=20.0,
    states=100.0,
)


def cluster(num_nodes: int, rates: dict[GpuId, float] | None = None, gpus_per_node: int = 8) -> ClusterState:
    return ClusterState(tuple(Node(gpus_per_node) for _ in range(num_nodes)), dict(rates or {}))


def task_110b(dp: int = 2) -> TaskSpec:
    return TaskSpec(80, 64, (1, 2, 4), dp, (1, 2, 4, 8), LLM_110B)


def task_32b(dp: int = 2) -> TaskSpec:
    return TaskSpec(60, 64, (1, 2, 4), dp, (1, 2, 4, 8), LLM_32B)


def toy_task(num_layers: int = 8, global_batch: int = 16, dp: int = 2,
             tp_degrees: tuple[int, ...] = (1, 2, 4)) -> TaskSpec:
    return TaskSpec(num_layers, global_batch, (1, 2), dp, tp_degrees, TOY)


def case_110b_s4() -> tuple[TaskSpec, ClusterState]:
    """64 GPUs with one heavy, one medium and one light straggler on three nodes."""
    rates = {GpuId(0, 0): 5.42, GpuId(1, 0): 3.75, GpuId(2, 0): 2.57}
    return task_110b(), cluster(8, rates)


def case_32b_s5() -> tuple[TaskSpec, ClusterState]:
    """32 GPUs: a whole node of light stragglers plus one medium straggler next door."""
    return task_32b(), cluster(4, situation_rates("S5"))


def case_overview() -> tuple[TaskSpec, ClusterState]:
    """16 GPUs, 3 stragglers, 32 layers, global batch 64."""
    rates = {GpuId(0, 0): 5.42, GpuId(0, 1): 2.62, GpuId(1, 0): 3.8}
    return TaskSpec(32, 64, (1, 2, 4), 2, (1, 2, 4, 8), LLM_32B), cluster(2, rates)


PRESETS = {
    "110b-s4": case_110b_s4,
    "32b-s5": case_32b_s5,
    "overview": case_overview,
}
