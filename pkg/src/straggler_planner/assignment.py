"""Lower-level problem: layers per stage, micro-batches per pipeline, and b.

For a fixed micro-batch size the joint problem separates: each pipeline's
layer split only affects its bottleneck ``o_i = max_j y_ij * l_ij`` and the
data split then minimises ``max_i o_i * m_i``.  Both are exact minimax ILPs.
"""
from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

from .costmodel import MemoryBound, memory_bound, stage_time
from .domain import GpuId, ParallelizationPlan, Pipeline, Stage, TaskSpec, TpGroup
from .solver import Infeasible, MinimaxProblem, solve_minimax_ilp


def stage_bounds(groups: Sequence[TpGroup], task: TaskSpec, b: int) -> list[MemoryBound]:
    pp = len(groups)
    return [memory_bound(b, j, pp, g.size, g.min_capacity, task.coefficients)
            for j, g in enumerate(groups, start=1)]


def assign_layers(rates: Sequence[float], num_layers: int,
                  max_layers: Sequence[int] | None = None) -> tuple[tuple[int, ...], float]:
    """Split ``num_layers`` over stages minimising ``max_j rate_j * layers_j``.

    ``max_layers`` caps each stage (memory); a negative cap means the stage
    cannot even hold its fixed overhead, which makes the pipeline infeasible.
    """
    if not rates:
        raise ValueError("a pipeline needs at least one stage")
    if max_layers is not None and min(max_layers) < 0:
        raise Infeasible("a stage overflows memory before any layer is placed")
    bounds = None if max_layers is None else tuple(max_layers)
    return solve_minimax_ilp(MinimaxProblem(tuple(rates), num_layers, bounds))


def assign_data(bottlenecks: Sequence[float], micro_total: int) -> tuple[tuple[int, ...], float]:
    """Split micro-batches over pipelines minimising ``max_i o_i * m_i``; infinite o gets 0."""
    if micro_total < 0:
        raise ValueError("negative micro-batch count")
    return solve_minimax_ilp(MinimaxProblem(tuple(bottlenecks), micro_total))


@dataclass(frozen=True)
class FixedBSolution:
    layers: tuple[tuple[int, ...], ...]
    bottlenecks: tuple[float, ...]
    micro_batches: tuple[int, ...]
    objective: float  # max_i o_i * m_i, multiply by tau(b) for seconds


def solve_for_b(rates: Sequence[Sequence[float]], max_layers: Sequence[Sequence[int]],
                num_layers: int, micro_total: int) -> FixedBSolution:
    """Exact lower-level solution for one micro-batch size given per-stage layer caps.

    Every pipeline must be able to hold all layers; otherwise :class:`Infeasible`.
    """
    layers = []
    obs = []
    for r, cap in zip(rates, max_layers):
        lay, o = assign_layers(r, num_layers, cap)
        layers.append(lay)
        obs.append(o)
    m, obj = assign_data(obs, micro_total)
    return FixedBSolution(tuple(layers), tuple(obs), m, obj)


def layer_objective(groups: Sequence[TpGroup], task: TaskSpec, b: int) -> float:
    """Best bottleneck ``o`` of an ordered pipeline at micro-batch size b, inf if it does not fit."""
    caps = [mb.max_layers() for mb in stage_bounds(groups, task, b)]
    try:
        return assign_layers([g.rate for g in groups], task.num_layers, caps)[1]
    except Infeasible:
        return math.inf


def exact_pipeline_costs(rates: Sequence[float], max_layers: Sequence[int], num_layers: int,
                         micro_max: int, tau_b: float) -> list[tuple[float, tuple[int, ...]]]:
    """Least 1F1B makespan of one pipeline for every micro-batch count ``0..micro_max``.

    Entry ``m`` is ``(seconds, layers)``.  For a fixed bottleneck bound ``o``
    the cheapest layer split fills the fastest stages first, so enumerating
    every reachable ``o`` gives the exact optimum.
    """
    if min(max_layers) < 0 or sum(max_layers) < num_layers:
        raise Infeasible("the pipeline cannot hold every layer")
    reach = [[y * v for v in range(1, min(cap, num_layers) + 1)] if not math.isinf(y) else []
             for y, cap in zip(rates, max_layers)]
    fast_first = sorted(range(len(rates)), key=lambda j: (rates[j], j))
    fills = []  # (max stage time, sum of stage times, layers)
    for o in sorted({x for r in reach for x in r}):
        room = [bisect.bisect_right(r, o) for r in reach]
        if sum(room) < num_layers:
            continue
        layers = [0] * len(rates)
        left = num_layers
        for j in fast_first:
            layers[j] = min(room[j], left)
            left -= layers[j]
        t = [stage_time(y, l, tau_b) for y, l in zip(rates, layers)]
        fills.append((max(t), math.fsum(t), tuple(layers)))
    if not fills:
        raise Infeasible("the pipeline cannot hold every layer")
    # keep the Pareto front: a fill is useful only if no other has both a smaller max and sum
    front = []
    for top, total, lay in sorted(fills):
        if not front or total < front[-1][1]:
            front.append((top, total, lay))
    fills = front
    out = [(0.0, fills[0][2])]
    for m in range(1, micro_max + 1):
        # same arithmetic as pipeline_time_exact
        out.append(min((((m - 1) * top + total, lay) for top, total, lay in fills), key=lambda c: c[0]))
    return out


def solve_exact_for_b(rates: Sequence[Sequence[float]], max_layers: Sequence[Sequence[int]],
                      num_layers: int, micro_total: int, tau_b: float) -> tuple[FixedBSolution, float]:
    """Lower level at one b minimising the simulated makespan instead of the surrogate.

    Each pipeline's best makespan is nondecreasing in its micro-batch count, so
    handing out micro-batches one at a time to the pipeline whose next count is
    cheapest minimises the slowest pipeline.  Returns the solution and its
    makespan in seconds.
    """
    costs = [exact_pipeline_costs(r, c, num_layers, micro_total, tau_b) for r, c in zip(rates, max_layers)]
    m = [0] * len(costs)
    heap = [(c[1][0], i) for i, c in enumerate(costs) if micro_total > 0]
    heapq.heapify(heap)
    for _ in range(micro_total):
        _, i = heapq.heappop(heap)
        m[i] += 1
        if m[i] < micro_total:
            heapq.heappush(heap, (costs[i][m[i] + 1][0], i))
    layers = tuple(costs[i][min(max(m[i], 1), micro_total)][1] for i in range(len(costs)))
    obs = tuple(max((y * l for y, l in zip(r, lay) if l), default=0.0) for r, lay in zip(rates, layers))
    seconds = max((costs[i][m[i]][0] for i in range(len(costs))), default=0.0)
    objective = max((o * k for o, k in zip(obs, m) if k), default=0.0)
    return FixedBSolution(layers, obs, tuple(m), objective), seconds


@dataclass
class LowerSolution:
    pipelines: list[list[TpGroup]]
    layers: tuple[tuple[int, ...], ...]
    bottlenecks: tuple[float, ...]
    micro_batches: tuple[int, ...]
    micro_batch_size: int
    estimated_seconds: float
    removed: frozenset[GpuId] = frozenset()
    per_b: dict = field(default_factory=dict)
    exact_seconds: float | None = None  # set when solved for the simulated makespan

    def objective(self) -> float:
        return self.estimated_seconds if self.exact_seconds is None else self.exact_seconds

    def to_plan(self, extra_removed=()) -> ParallelizationPlan:
        pipes = []
        for groups, lay, m, o in zip(self.pipelines, self.layers, self.micro_batches, self.bottlenecks):
            pipes.append(Pipeline(tuple(Stage(g, l) for g, l in zip(groups, lay)), m, o))
        return ParallelizationPlan(tuple(pipes), self.micro_batch_size,
                                   frozenset(self.removed) | frozenset(extra_removed),
                                   self.estimated_seconds)


def _solve_uncompacted(pipelines: Sequence[Sequence[TpGroup]], task: TaskSpec,
                       exact: bool = False) -> LowerSolution:
    best = None
    per_b = {}
    for b in task.candidate_micro_batch_sizes():
        caps = []
        feasible = []
        for groups in pipelines:
            c = [mb.max_layers() for mb in stage_bounds(groups, task, b)]
            caps.append(c)
            feasible.append(min(c) >= 0 and sum(c) >= task.num_layers)
        if not any(feasible):
            # memory only grows with b
            break
        if not all(feasible):
            per_b[b] = math.inf
            continue
        rates = [[g.rate for g in groups] for groups in pipelines]
        tau = task.coefficients.tau[b]
        try:
            if exact:
                sol, seconds = solve_exact_for_b(rates, caps, task.num_layers, task.global_batch_size // b, tau)
            else:
                sol = solve_for_b(rates, caps, task.num_layers, task.global_batch_size // b)
                seconds = tau * sol.objective
        except Infeasible:
            per_b[b] = math.inf
            continue
        per_b[b] = seconds
        if best is None or seconds < best[0]:
            best = (seconds, b, sol)
    if best is None:
        raise Infeasible("no micro-batch size fits every pipeline in memory")
    seconds, b, sol = best
    tau = task.coefficients.tau[b]
    return LowerSolution([list(p) for p in pipelines], sol.layers, sol.bottlenecks,
                         sol.micro_batches, b, tau * sol.objective, frozenset(), per_b,
                         seconds if exact else None)


def solve_lower(pipelines: Sequence[Sequence[TpGroup]], task: TaskSpec,
                compact: bool = True, exact: bool = False) -> LowerSolution:
    """Pick b, layers and micro-batches for ordered pipelines; drop zero-layer stages.

    Stages left with no layers are removed and the shortened pipelines are
    solved again (their memory bounds change with the depth).  If the shorter
    layout no longer fits, the previous solution is kept as is.

    With ``exact`` the objective is the simulated 1F1B makespan (warm-up
    included) rather than the planner's surrogate; used to evaluate groupings.
    """
    sol = _solve_uncompacted(pipelines, task, exact)
    removed: set[GpuId] = set()
    while compact:
        keep = []
        dropped = []
        for groups, lay in zip(sol.pipelines, sol.layers):
            kept = [g for g, l in zip(groups, lay) if l > 0]
            dropped.extend(g for g, l in zip(groups, lay) if l == 0)
            keep.append(kept)
        if not dropped:
            break
        try:
            shorter = _solve_uncompacted(keep, task, exact)
        except Infeasible:
            break
        if shorter.objective() > sol.objective():
            break
        for g in dropped:
            removed.update(g.members)
        sol = shorter
    sol.removed = frozenset(removed)
    return sol
