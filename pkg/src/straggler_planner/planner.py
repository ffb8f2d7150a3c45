"""Top-level planning: try each TP limit, solve both levels, keep the fastest plan."""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from .assignment import solve_lower
from .costmodel import group_rate
from .domain import ClusterState, GpuId, ParallelizationPlan, TaskSpec, TpGroup
from .grouping import group_cluster
from .orchestration import divide, order_mixed
from .solver import Infeasible


DIVISION_RTOL = 0.01


class PlanningError(RuntimeError):
    """No candidate produced a feasible plan."""

    def __init__(self, message: str, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


@dataclass
class PlanReport:
    plan: ParallelizationPlan
    candidates: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "candidates": self.candidates,
                "wall_seconds": self.wall_seconds}


def _candidate(cluster: ClusterState, task: TaskSpec, tp_limit: int, dp: int, explain: bool,
               division_rtol: float = DIVISION_RTOL):
    info = {"tp_limit": tp_limit, "dp": dp}
    try:
        grouping = group_cluster(cluster, tp_limit, task.coefficients, explain)
        bs = task.candidate_micro_batch_sizes()
        if not bs:
            raise Infeasible("no micro-batch size divides the global batch")
        b0 = bs[0]
        order_trace = [] if explain else None
        division_trace = [] if explain else None

        def lower_level(pipes):
            return solve_lower([order_mixed(p, task, bs) for p in pipes], task)

        tau = task.coefficients.tau
        division = divide(grouping.groups, dp, task.global_batch_size // b0, tau[b0],
                          rtol=division_rtol, evaluate=lambda p: lower_level(p).estimated_seconds,
                          trace=division_trace,
                          also=[(task.global_batch_size // b, tau[b]) for b in bs[1:]])
        ordered = [order_mixed(p, task, bs, order_trace) for p in division.pipelines]
        lower = solve_lower(ordered, task)
        plan = lower.to_plan(grouping.failed)
    except Infeasible as exc:
        info["error"] = str(exc)
        return info, None
    info.update(groups=len(grouping.groups), division_objective=division.objective,
                division_timed_out=division.timed_out, estimated_seconds=plan.estimated_seconds,
                micro_batch_size=plan.micro_batch_size)
    if explain:
        info["grouping"] = list(grouping.trace)
        info["division"] = {"fast_rate": division.fast_rate, "fast_counts": list(division.fast_counts),
                            "slow_pipeline": list(division.slow_pipeline),
                            "micro_batches": list(division.micro_batches),
                            "candidates": division_trace}
        info["ordering"] = order_trace
        info["per_b_seconds"] = {str(b): s for b, s in lower.per_b.items()}
    return info, plan


def _search(cluster, task, explain, max_workers):
    jobs = [(tp, dp) for dp in (task.dp_range or (task.dp_degree,)) for tp in task.tp_degrees]
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(lambda j: _candidate(cluster, task, j[0], j[1], explain), jobs))
    else:
        results = [_candidate(cluster, task, tp, dp, explain) for tp, dp in jobs]
    return results


def _pick(results):
    best = None
    for info, plan in results:
        if plan is not None and (best is None or plan.estimated_seconds < best.estimated_seconds):
            best = plan
    return best


def uniform_plan(cluster: ClusterState, task: TaskSpec) -> ParallelizationPlan:
    """The plan chosen when every GPU is healthy."""
    healthy = cluster.with_rates({g: 1.0 for g in cluster.gpus()})
    best = _pick(_search(healthy, task, False, None))
    if best is None:
        raise PlanningError("even the healthy cluster has no feasible plan")
    return best


def _rerate(group: TpGroup, cluster: ClusterState, task: TaskSpec) -> TpGroup:
    rate = group_rate([cluster.rate(g) for g in group.members], group.size, task.coefficients)
    return TpGroup(group.members, rate, group.min_capacity)


def fallback_candidate(cluster: ClusterState, task: TaskSpec):
    """Healthy-cluster layout with layers and data re-balanced for the current rates."""
    info = {"tp_limit": None, "dp": None, "fallback": "uniform"}
    try:
        base = uniform_plan(cluster, task)
        pipes = [[_rerate(s.group, cluster, task) for s in p.stages] for p in base.pipelines]
        lower = solve_lower(pipes, task)
        failed = cluster.failed()
        plan = lower.to_plan()
        if failed & set(plan.gpus()):
            raise Infeasible("failed GPUs still hold layers")
        plan = ParallelizationPlan(plan.pipelines, plan.micro_batch_size,
                                   plan.removed | (failed & set(base.gpus())), plan.estimated_seconds)
    except (Infeasible, PlanningError) as exc:
        info["error"] = str(exc)
        return info, None
    info.update(dp=base.dp_degree, estimated_seconds=plan.estimated_seconds,
                micro_batch_size=plan.micro_batch_size)
    return info, plan


def plan(cluster: ClusterState, task: TaskSpec, explain: bool = False,
         max_workers: int | None = None) -> PlanReport:
    """Best plan over all TP limits (and DP degrees when a range is given).

    The healthy-cluster layout, re-balanced for the current rates, is always
    among the candidates, so the result is never worse than staying uniform.
    """
    start = time.perf_counter()
    task.check_cluster(cluster)
    results = _search(cluster, task, explain, max_workers)
    if any(not math.isclose(x, 1.0) for x in cluster.rates.values()):
        results.append(fallback_candidate(cluster, task))
    best = _pick(results)
    infos = [info for info, _ in results]
    if best is None:
        reasons = "; ".join(f"tp<={i.get('tp_limit')}: {i.get('error')}" for i in infos)
        raise PlanningError(f"no feasible plan ({reasons})", infos)
    return PlanReport(best, infos, time.perf_counter() - start)


def replan_needed(prev_rates: Mapping[GpuId, float], new_rates: Mapping[GpuId, float],
                  threshold: float = 0.05) -> bool:
    """True iff some GPU's rate moved by strictly more than ``threshold`` relative to before."""
    for g, new in new_rates.items():
        if g not in prev_rates:
            continue
        prev = prev_rates[g]
        if prev == new:
            continue
        if math.isinf(prev) or math.isinf(new):
            return True
        # a relative slack keeps an exact decimal 5% (1.00 -> 1.05) below the threshold
        if abs(new - prev) > threshold * prev * (1.0 + 1e-9):
            return True
    return False
