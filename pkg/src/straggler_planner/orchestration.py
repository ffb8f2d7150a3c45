"""Dividing TP groups among pipelines and ordering the stages of each pipeline."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from itertools import permutations
from typing import Callable, Sequence

from .assignment import layer_objective
from .domain import TaskSpec, TpGroup
from .solver import DivisionResult, Infeasible, near_optimal_divisions, solve_division_minlp


# rates closer than this (relative) share one class in the relaxed division, so
# +-1% measurement noise on healthy groups (spread up to 2.02%) forms one class
RATE_RTOL = 0.025


def rate_classes(rates: Sequence[float], rtol: float = RATE_RTOL) -> list[float]:
    """Representative rate of each input: the largest rate of its class.

    Sorted rates start a new class once they exceed the class's first rate by
    more than ``rtol``; ``rtol = 0`` keeps every distinct rate apart.
    """
    rep: dict[float, float] = {}
    members: list[float] = []
    for r in sorted(set(rates)):
        if members and (math.isinf(r) or r > members[0] * (1.0 + rtol)):
            for x in members:
                rep[x] = members[-1]
            members = []
        members.append(r)
    for x in members:
        rep[x] = members[-1]
    return [rep[r] for r in rates]


def majority_rate(rates: Sequence[float]) -> float:
    """Most common group rate; on a tie the smallest rate among the largest cohorts."""
    counts = Counter(r for r in rates if not math.isinf(r))
    if not counts:
        raise Infeasible("no usable group")
    top = max(counts.values())
    return min(r for r, c in counts.items() if c == top)


@dataclass(frozen=True)
class PipelineDivision:
    pipelines: tuple[tuple[TpGroup, ...], ...]
    fast_rate: float
    fast_counts: tuple[int, ...]
    slow_pipeline: tuple[int, ...]
    micro_batches: tuple[int, ...]
    objective: float
    timed_out: bool = False


def _materialise(fast, slow, dp, fast_rate, res: DivisionResult) -> PipelineDivision:
    pipes: list[list[TpGroup]] = [[] for _ in range(dp)]
    it = iter(fast)
    for i, h in enumerate(res.fast_counts):
        pipes[i].extend(next(it) for _ in range(h))
    for g, i in zip(slow, res.slow_pipeline):
        pipes[i].append(g)
    return PipelineDivision(tuple(tuple(p) for p in pipes), fast_rate, res.fast_counts,
                            res.slow_pipeline, res.micro_batches, res.objective, res.timed_out)


def divide(groups: Sequence[TpGroup], dp: int, micro_total: int, tau: float = 1.0,
           time_budget: float | None = None, rtol: float = 0.0,
           evaluate: Callable[[Sequence[Sequence[TpGroup]]], float] | None = None,
           trace: list | None = None, also: Sequence[tuple[int, float]] = (),
           rate_rtol: float = RATE_RTOL) -> PipelineDivision:
    """Split groups into ``dp`` pipelines via the relaxed division program.

    Groups at the majority rate are the interchangeable "fast" cohort; all
    others are placed individually.  Fast groups are dealt out in input order.

    The relaxed objective barely separates divisions (total throughput is the
    same for all of them), so with ``evaluate`` every division whose relaxed
    objective is within ``rtol`` of the optimum is scored by ``evaluate`` and
    the lowest score wins; ties keep the relaxed ranking.  ``also`` lists extra
    ``(micro_total, tau)`` settings (other micro-batch sizes) whose near-optimal
    divisions join the scored pool.

    The relaxed program sees each group at its class representative (see
    :func:`rate_classes`); the lower level and ``evaluate`` see true rates.
    """
    groups = [g for g in groups if not math.isinf(g.rate)]
    if len(groups) < dp:
        raise Infeasible(f"{len(groups)} groups cannot fill {dp} pipelines")
    reps = rate_classes([g.rate for g in groups], rate_rtol)
    fast_rate = majority_rate(reps)
    fast = [g for g, r in zip(groups, reps) if r == fast_rate]
    slow = [g for g, r in zip(groups, reps) if r != fast_rate]
    n_fast = len(fast)
    slow_rates = [r for r in reps if r != fast_rate]
    if evaluate is None:
        res = solve_division_minlp(n_fast, slow_rates, fast_rate, dp, micro_total, tau, time_budget)
        return _materialise(fast, slow, dp, fast_rate, res)
    best = None
    seen = set()
    for total, t in [(micro_total, tau), *also]:
        try:
            cands = near_optimal_divisions(n_fast, slow_rates, fast_rate, dp, total, t, rtol, time_budget)
        except Infeasible:
            continue
        for res in cands:
            div = _materialise(fast, slow, dp, fast_rate, res)
            key = frozenset(frozenset(g.members for g in p) for p in div.pipelines)
            if key in seen:
                continue
            seen.add(key)
            try:
                score = evaluate(div.pipelines)
            except Infeasible:
                score = math.inf
            if trace is not None:
                trace.append({"micro_total": total, "sizes": [[g.size for g in p] for p in div.pipelines],
                              "relaxed_objective": res.objective, "score": score})
            if best is None or score < best[0]:
                best = (score, div)
    if best is None or math.isinf(best[0]):
        raise Infeasible("no near-optimal division has a feasible lower level")
    return best[1]


def order_equal(groups: Sequence[TpGroup]) -> list[TpGroup]:
    """Slowest group first, fastest last; stable for equal rates."""
    return sorted(groups, key=lambda g: -g.rate)


def bundle_orders(groups: Sequence[TpGroup]) -> list[list[TpGroup]]:
    """Every ordering that keeps equal-size groups together, each bundle sorted slowest first."""
    bundles: dict[int, list[TpGroup]] = {}
    for g in groups:
        bundles.setdefault(g.size, []).append(g)
    sizes = sorted(bundles)
    ordered = {s: order_equal(bundles[s]) for s in sizes}
    return [[g for s in perm for g in ordered[s]] for perm in permutations(sizes)]


def order_mixed(groups: Sequence[TpGroup], task: TaskSpec, b_values: Sequence[int],
                trace: list | None = None) -> list[TpGroup]:
    """Choose the bundle permutation with the smallest layer-split bottleneck.

    Candidates are scored at the first micro-batch size in ``b_values`` for
    which any of them fits in memory; the earliest permutation wins ties.
    """
    if not groups:
        raise ValueError("a pipeline needs at least one group")
    candidates = bundle_orders(groups)
    if len(candidates) == 1:
        return candidates[0]
    for b in b_values:
        scores = [layer_objective(c, task, b) for c in candidates]
        if trace is not None:
            trace.append({"b": b, "orders": [[g.size for g in c] for c in candidates],
                          "objectives": scores})
        best = min(range(len(candidates)), key=lambda i: (scores[i], i))
        if not math.isinf(scores[best]):
            return candidates[best]
    raise Infeasible("no bundle order fits in memory")
