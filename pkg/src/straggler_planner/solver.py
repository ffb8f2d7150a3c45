"""Exact solvers for the small minimax integer programs the planner emits.

Two shapes occur.  The layer split and the micro-batch split are both
"distribute ``total`` units over buckets to minimise the largest
``weight * load``", handled by :func:`solve_minimax_ilp`.  Dividing TP groups
into pipelines is a small mixed-integer program handled by enumeration in
:func:`solve_division_minlp`.
"""
from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

# relative slack when breaking ties between division splits
TIE_RTOL = 1e-12


class Infeasible(Exception):
    """No assignment satisfies the constraints."""


@dataclass(frozen=True)
class MinimaxProblem:
    """Minimise ``max_j weights[j] * x[j]`` s.t. ``sum(x) == total``, ``0 <= x[j] <= bounds[j]``.

    An infinite weight forbids its bucket.  ``bounds`` of ``None`` means unbounded.
    """

    weights: tuple[float, ...]
    total: int
    bounds: tuple[int, ...] | None = None

    def bound(self, j: int) -> int:
        if math.isinf(self.weights[j]):
            return 0
        if self.bounds is None:
            return self.total
        return max(0, min(self.bounds[j], self.total))


def _cost(w: float, x: int) -> float:
    # 0 * inf would be nan; an empty bucket costs nothing
    return 0.0 if x == 0 else w * x


def _capacity_at(w: float, z: float, bound: int) -> int:
    """Largest x <= bound with w * x <= z, evaluated with the same float product."""
    if w <= 0:
        return bound
    x = min(bound, int(z / w))
    while x > 0 and _cost(w, x) > z:
        x -= 1
    while x < bound and _cost(w, x + 1) <= z:
        x += 1
    return x


def solve_minimax_ilp(problem: MinimaxProblem) -> tuple[tuple[int, ...], float]:
    """Return ``(assignment, objective)``; among optima the lexicographically smallest.

    The optimal value is the ``total``-th smallest element of the merged
    sequences ``w_j, 2 w_j, ...`` which a greedy heap finds directly.  The
    assignment is then rebuilt front to back giving each bucket as little as
    the later buckets allow.
    """
    n = len(problem.weights)
    total = problem.total
    if total < 0:
        raise Infeasible("negative total")
    bounds = [problem.bound(j) for j in range(n)]
    if sum(bounds) < total:
        raise Infeasible(f"bounds sum to {sum(bounds)} < {total}")
    if total == 0:
        return tuple([0] * n), 0.0
    heap = [(_cost(problem.weights[j], 1), j) for j in range(n) if bounds[j] > 0]
    heapq.heapify(heap)
    load = [0] * n
    z = 0.0
    for _ in range(total):
        c, j = heapq.heappop(heap)
        z = c
        load[j] += 1
        if load[j] < bounds[j]:
            heapq.heappush(heap, (_cost(problem.weights[j], load[j] + 1), j))
    caps = [_capacity_at(problem.weights[j], z, bounds[j]) for j in range(n)]
    suffix = [0] * (n + 1)
    for j in range(n - 1, -1, -1):
        suffix[j] = suffix[j + 1] + caps[j]
    out = []
    rem = total
    for j in range(n):
        x = max(0, rem - suffix[j + 1])
        out.append(x)
        rem -= x
    obj = max(_cost(problem.weights[j], out[j]) for j in range(n))
    return tuple(out), obj


@dataclass(frozen=True)
class DivisionResult:
    """Outcome of the group-to-pipeline division.

    ``fast_counts[i]`` is how many majority-rate groups pipeline ``i`` gets,
    ``slow_pipeline[k]`` the pipeline of slow group ``k`` and ``micro_batches``
    the provisional data split.  ``objective`` is in seconds.
    """

    fast_counts: tuple[int, ...]
    slow_pipeline: tuple[int, ...]
    micro_batches: tuple[int, ...]
    objective: float
    timed_out: bool = False

    def pipeline_sizes(self) -> tuple[int, ...]:
        sizes = list(self.fast_counts)
        for p in self.slow_pipeline:
            sizes[p] += 1
        return tuple(sizes)


def throughput_capacity(fast_count: int, fast_rate: float, slow_rates: Sequence[float]) -> float:
    """Sum of 1/y over a pipeline's groups, rounded once so order never matters."""
    terms = [1.0 / fast_rate] * fast_count
    terms.extend(0.0 if math.isinf(y) else 1.0 / y for y in slow_rates)
    return math.fsum(terms)


def division_weight(capacity: float, tau: float) -> float:
    return math.inf if capacity <= 0 else tau / capacity


def _sub_vectors_desc(limit: Sequence[int], upper: Sequence[int] | None) -> Iterator[tuple[int, ...]]:
    """Nonzero vectors v <= limit componentwise and v <= upper lexicographically, descending."""
    n = len(limit)

    def rec(i: int, prefix: list[int], tight: bool):
        if i == n:
            if any(prefix):
                yield tuple(prefix)
            return
        hi = limit[i]
        if tight and upper is not None:
            hi = min(hi, upper[i])
        for v in range(hi, -1, -1):
            prefix.append(v)
            yield from rec(i + 1, prefix, tight and upper is not None and v == upper[i])
            prefix.pop()

    yield from rec(0, [], True)


def vector_partitions(total: Sequence[int], parts: int) -> Iterator[tuple[tuple[int, ...], ...]]:
    """Split a count vector into ``parts`` nonzero vectors listed in nonincreasing lex order."""
    total = tuple(total)

    def rec(remaining, k, upper):
        if k == 0:
            if not any(remaining):
                yield ()
            return
        if sum(remaining) < k:
            return
        if k == 1:
            if upper is None or remaining <= upper:
                yield (remaining,)
            return
        for v in _sub_vectors_desc(remaining, upper):
            rest = tuple(r - x for r, x in zip(remaining, v))
            if sum(rest) < k - 1:
                continue
            for tail in rec(rest, k - 1, v):
                yield (v,) + tail

    yield from rec(total, parts, None)


def slow_placements(counts: Sequence[int], dp: int) -> Iterator[tuple[tuple[int, ...], ...]]:
    """Ways to spread slow-group class counts over ``dp`` pipelines, up to relabelling."""
    counts = tuple(counts)
    if not any(counts):
        yield tuple(tuple(0 for _ in counts) for _ in range(dp))
        return
    zero = tuple(0 for _ in counts)
    for used in range(min(dp, sum(counts)), 0, -1):
        for parts in vector_partitions(counts, used):
            yield parts + (zero,) * (dp - used)


def _micro_capacity(weights: np.ndarray, z: float, limit: int) -> np.ndarray:
    """Per entry, the largest x <= limit with weights * x <= z (same float product)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(weights > 0, np.floor(z / weights), limit)
        x = np.clip(np.nan_to_num(x, nan=0.0, posinf=limit), 0, limit).astype(np.int64)
        # repair rounding so the test matches _cost exactly
        over = (x > 0) & (weights * x > z)
        while over.any():
            x[over] -= 1
            over = (x > 0) & (weights * x > z)
        under = (x < limit) & (weights * (x + 1) <= z)
        while under.any():
            x[under] += 1
            under = (x < limit) & (weights * (x + 1) <= z)
    return x


def _best_fast_split(fill: np.ndarray, fast_count: int, min_fast: Sequence[int],
                     size_cap: Sequence[int] | None = None) -> tuple[int, list[int]]:
    """Knapsack over pipelines: pick h_i (summing to fast_count) maximising sum fill[i, h_i]."""
    dp_n = fill.shape[0]
    neg = np.iinfo(np.int64).min // 4
    best = np.full(fast_count + 1, neg, dtype=np.int64)
    best[0] = 0
    choice = []
    idx = np.arange(fast_count + 1)
    for i in range(dp_n):
        row = fill[i].copy()
        row[:min_fast[i]] = neg
        if size_cap is not None:
            row[size_cap[i] + 1:] = neg
        # cand[t, h] = best[t - h] + row[h]
        shifted = idx[:, None] - idx[None, :]
        prev = np.where(shifted >= 0, best[np.clip(shifted, 0, None)], neg)
        cand = prev + row[None, :]
        cand[prev <= neg // 2] = neg
        cand[:, row <= neg // 2] = neg
        arg = np.argmax(cand, axis=1)
        choice.append(arg)
        best = cand[idx, arg]
    total = int(best[fast_count])
    if total <= neg // 2:
        return -1, []
    h = [0] * dp_n
    t = fast_count
    for i in range(dp_n - 1, -1, -1):
        h[i] = int(choice[i][t])
        t -= h[i]
    return total, h


def _solve_placement(fast_count: int, fast_rate: float, slow_sets: Sequence[Sequence[float]],
                     micro_total: int, tau: float):
    """Optimal fast counts and micro-batches for a fixed slow-group placement."""
    dp = len(slow_sets)
    min_fast = [0 if s else 1 for s in slow_sets]
    if sum(min_fast) > fast_count:
        return None
    weights = np.array([[division_weight(throughput_capacity(h, fast_rate, s), tau)
                         for h in range(fast_count + 1)] for s in slow_sets])
    if micro_total == 0:
        zs = [0.0]
    else:
        finite = weights[np.isfinite(weights)]
        mult = np.arange(1, micro_total + 1, dtype=float)
        zs = np.unique((finite[:, None] * mult[None, :]).ravel())
        zs = np.concatenate(([0.0], zs))
    lo, hi = 0, len(zs) - 1

    def feasible(z):
        fill = _micro_capacity(weights, z, micro_total)
        total, h = _best_fast_split(fill, fast_count, min_fast)
        return total >= micro_total, h

    ok, _ = feasible(zs[hi])
    if not ok:
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(zs[mid])[0]:
            hi = mid
        else:
            lo = mid + 1
    z = zs[lo]
    # splits that tie with the optimum in exact arithmetic can miss it by an ulp,
    # so the tie-break below looks a hair above z
    fill = _micro_capacity(weights, z * (1.0 + TIE_RTOL), micro_total)
    # among optimal fast splits prefer the shortest longest pipeline
    lengths = [len(s) for s in slow_sets]
    h = None
    for longest in range(max(1, max(lengths)), fast_count + max(lengths) + 1):
        caps = [max(-1, longest - n) for n in lengths]
        if any(c < m for c, m in zip(caps, min_fast)):
            continue
        total, cand = _best_fast_split(fill, fast_count, min_fast, caps)
        if total >= micro_total:
            h = cand
            break
    w = tuple(float(weights[i, h[i]]) for i in range(dp))
    m, _ = solve_minimax_ilp(MinimaxProblem(w, micro_total))
    return tuple(h), m, float(z), max(h[i] + lengths[i] for i in range(dp))


def _placement_optima(fast_count, slow_rates, fast_rate, dp, micro_total, tau, time_budget):
    """Yield ``(placement, fast_counts, micro_batches, objective, longest)`` per slow placement."""
    classes = sorted(set(slow_rates))
    class_of = [classes.index(y) for y in slow_rates]
    counts = tuple(class_of.count(c) for c in range(len(classes)))
    start = time.perf_counter()
    for n, placement in enumerate(slow_placements(counts, dp)):
        if time_budget is not None and n and time.perf_counter() - start > time_budget:
            yield None
            return
        slow_sets = [[y for c, y in enumerate(classes) for _ in range(part[c])] for part in placement]
        sol = _solve_placement(fast_count, fast_rate, slow_sets, micro_total, tau)
        if sol is not None:
            yield (placement,) + sol


def _to_result(slow_rates, dp, placement, fast, m, obj, timed_out) -> DivisionResult:
    classes = sorted(set(slow_rates))
    # hand concrete slow groups to pipelines in index order
    need = [list(p) for p in placement]
    slow_pipeline = []
    for y in slow_rates:
        c = classes.index(y)
        for i in range(dp):
            if need[i][c] > 0:
                need[i][c] -= 1
                slow_pipeline.append(i)
                break
    return DivisionResult(tuple(fast), tuple(slow_pipeline), tuple(m), obj, timed_out)


def _check_division_args(fast_count, slow_rates, dp):
    if dp < 1:
        raise ValueError("dp must be >= 1")
    if fast_count + len(slow_rates) < dp:
        raise Infeasible(f"{fast_count + len(slow_rates)} groups cannot fill {dp} pipelines")


def solve_division_minlp(fast_count: int, slow_rates: Sequence[float], fast_rate: float, dp: int,
                         micro_total: int, tau: float = 1.0,
                         time_budget: float | None = None) -> DivisionResult:
    """Divide groups among ``dp`` pipelines minimising the relaxed step time.

    Each pipeline ``i`` is scored by ``m_i * tau / (h_i / fast_rate + sum 1/y_k)``
    over the slow groups it receives.  Slow groups of equal rate are
    interchangeable, so placements are enumerated as partitions of the per-rate
    count vector.  For each placement the fast counts and micro-batch split are
    found exactly: binary search over candidate objective values, each checked
    by a knapsack over pipelines.  Ties prefer the shorter longest pipeline, then
    the earlier placement.  With a ``time_budget`` (seconds) the best incumbent
    is returned once it runs out.
    """
    slow_rates = list(slow_rates)
    _check_division_args(fast_count, slow_rates, dp)
    best = None
    timed_out = False
    for item in _placement_optima(fast_count, slow_rates, fast_rate, dp, micro_total, tau, time_budget):
        if item is None:
            timed_out = True
            break
        if best is None or (item[3], item[4]) < (best[3], best[4]):
            best = item
    if best is None:
        raise Infeasible("no division admits the micro-batches")
    placement, fast, m, obj, _ = best
    return _to_result(slow_rates, dp, placement, fast, m, obj, timed_out)


def near_optimal_divisions(fast_count: int, slow_rates: Sequence[float], fast_rate: float, dp: int,
                           micro_total: int, tau: float = 1.0, rtol: float = 0.0,
                           time_budget: float | None = None) -> list[DivisionResult]:
    """Per-placement optimal divisions within ``rtol`` of the overall optimum, best first.

    The first entry is exactly what :func:`solve_division_minlp` returns.
    """
    slow_rates = list(slow_rates)
    _check_division_args(fast_count, slow_rates, dp)
    items = []
    timed_out = False
    for item in _placement_optima(fast_count, slow_rates, fast_rate, dp, micro_total, tau, time_budget):
        if item is None:
            timed_out = True
            break
        items.append(item)
    if not items:
        raise Infeasible("no division admits the micro-batches")
    order = sorted(range(len(items)), key=lambda k: (items[k][3], items[k][4], k))
    limit = items[order[0]][3] * (1.0 + rtol)
    return [_to_result(slow_rates, dp, items[k][0], items[k][1], items[k][2], items[k][3], timed_out)
            for k in order if items[k][3] <= limit]
