"""Partitioning each node's GPUs into tensor-parallel groups.

A node starts from the sorted even partition at the candidate TP limit.  Each
straggler, slowest first, may then be isolated in a group of its own while
the rest of its old group is re-split into smaller consecutive blocks.  A
split is adopted only if it raises the node's total throughput sum(1/y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence

from .costmodel import group_rate
from .domain import ClusterState, GpuId, ProfiledCoefficients, TpGroup

SPLIT_EPS = 1e-9


def descending_order(rates: Sequence[float]) -> list[int]:
    """Indices sorted by rate, slowest first; ties keep index order."""
    return sorted(range(len(rates)), key=lambda i: -rates[i])


def even_partition(rates: Sequence[float], k: int) -> list[tuple[int, ...]]:
    """Chunk the descending-rate order into consecutive groups of ``k`` (indices into ``rates``)."""
    n = len(rates)
    if k < 1 or n % k:
        raise ValueError(f"group size {k} does not divide {n} GPUs")
    order = descending_order(rates)
    return [tuple(order[i:i + k]) for i in range(0, n, k)]


def throughput(group_rates: Sequence[float]) -> float:
    """sum(1/y); a failed group contributes nothing."""
    return math.fsum(0.0 if math.isinf(y) else 1.0 / y for y in group_rates)


def relaxed_ratio(rates_a: Sequence[float], rates_b: Sequence[float]) -> float:
    """Relaxed step time of grouping ``a`` divided by that of grouping ``b``.

    Under a perfectly divisible workload the step time is inversely
    proportional to sum(1/y), so the ratio is ``sum(1/y_b) / sum(1/y_a)``.
    Values below 1 mean ``a`` is faster.
    """
    if not rates_a or not rates_b:
        raise ValueError("both groupings need at least one group")
    ta, tb = throughput(rates_a), throughput(rates_b)
    if ta == 0:
        return 0.0 if tb == 0 else math.inf
    return tb / ta


def remainder_sizes(size: int) -> list[int]:
    """Group sizes left after isolating one GPU from a power-of-two group: 8 -> [1, 2, 4]."""
    if size < 2 or size & (size - 1):
        raise ValueError(f"cannot split a group of {size}")
    out = []
    s = 1
    while s < size:
        out.append(s)
        s *= 2
    return out


def enumerate_splits(sorted_rates_desc: Sequence[float], target_sizes: Sequence[int]) -> list[tuple[tuple[int, ...], ...]]:
    """Consecutive-block groupings of a descending-sorted run into the given sizes.

    Every candidate is a left-to-right sequence of blocks whose sizes are a
    distinct permutation of ``target_sizes``.  Groups inside a candidate are
    listed by size then position, and candidates are ordered by the block start
    positions taken size by size.  Positions are 0-based.
    """
    n = len(sorted_rates_desc)
    if sum(target_sizes) != n:
        raise ValueError(f"sizes {list(target_sizes)} do not cover {n} GPUs")
    if any(sorted_rates_desc[i] < sorted_rates_desc[i + 1] for i in range(n - 1)):
        raise ValueError("rates must be sorted in descending order")
    keyed = []
    for order in sorted(set(permutations(target_sizes))):
        blocks = []
        pos = 0
        for s in order:
            blocks.append(tuple(range(pos, pos + s)))
            pos += s
        blocks.sort(key=lambda blk: (len(blk), blk[0]))
        keyed.append((tuple(blk[0] for blk in blocks), tuple(blocks)))
    keyed.sort()
    return [blocks for _, blocks in keyed]


def _rates_of(groups, rates, coeffs) -> list[float]:
    return [group_rate([rates[i] for i in g], len(g), coeffs) for g in groups]


@dataclass
class NodeGrouping:
    groups: list[tuple[int, ...]]
    failed: list[int] = field(default_factory=list)


def group_node(rates: Sequence[float], tp_limit: int, coeffs: ProfiledCoefficients,
               trace: list | None = None) -> NodeGrouping:
    """Best grouping of one node's GPUs (indices into ``rates``).

    Failed GPUs are always isolated and reported in ``failed`` rather than
    grouped.  When ``trace`` is a list, one dict per examined straggler is
    appended describing the candidates and their ratios.
    """
    rates = list(rates)
    groups = even_partition(rates, tp_limit)
    for gpu in descending_order(rates):
        x = rates[gpu]
        if x <= 1.0:
            break
        gi = next(i for i, g in enumerate(groups) if gpu in g)
        old = groups[gi]
        if len(old) == 1:
            continue
        others = [i for i in old if i != gpu]
        others.sort(key=lambda i: (-rates[i], old.index(i)))
        current = _rates_of(groups, rates, coeffs)
        best = None
        entry = {"gpu": gpu, "rate": x, "group": list(old), "candidates": []}
        for split in enumerate_splits([rates[i] for i in others], remainder_sizes(len(old))):
            new_groups = [(gpu,)] + [tuple(others[p] for p in blk) for blk in split]
            cand = groups[:gi] + new_groups + groups[gi + 1:]
            cand_rates = _rates_of(cand, rates, coeffs)
            ratio = relaxed_ratio(cand_rates, current)
            entry["candidates"].append({"groups": [list(g) for g in new_groups], "ratio": ratio})
            # rank by throughput: the ratio is 0 for every candidate when the
            # current grouping holds a failed GPU
            score = throughput(cand_rates)
            if best is None or score > best[2]:
                best = (ratio, cand, score)
        forced = math.isinf(x)
        adopted = best is not None and (forced or best[0] < 1.0 - SPLIT_EPS)
        entry["adopted"] = adopted
        if trace is not None:
            trace.append(entry)
        if adopted:
            groups = best[1]
    failed = [i for i in range(len(rates)) if math.isinf(rates[i])]
    groups = [g for g in groups if not (len(g) == 1 and g[0] in failed)]
    return NodeGrouping(groups, failed)


@dataclass(frozen=True)
class GroupingResult:
    groups: tuple[TpGroup, ...]
    tp_limit: int
    failed: frozenset[GpuId] = frozenset()
    trace: tuple = ()


def group_cluster(cluster: ClusterState, tp_limit: int, coeffs: ProfiledCoefficients,
                  explain: bool = False) -> GroupingResult:
    """Group every node independently and collect the groups node by node."""
    out = []
    failed = set()
    traces = []
    for n in range(len(cluster.nodes)):
        gpus = cluster.node_gpus(n)
        rates = [cluster.rate(g) for g in gpus]
        trace = [] if explain else None
        res = group_node(rates, tp_limit, coeffs, trace)
        for g in res.groups:
            members = tuple(gpus[i] for i in g)
            out.append(TpGroup(members, group_rate([rates[i] for i in g], len(g), coeffs),
                               min(cluster.capacity(m) for m in members)))
        failed.update(gpus[i] for i in res.failed)
        if explain:
            traces.append({"node": n, "splits": trace})
    return GroupingResult(tuple(out), tp_limit, frozenset(failed), tuple(traces))
