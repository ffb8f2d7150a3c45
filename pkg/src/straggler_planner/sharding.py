"""Optimizer-state sharding across pipelines of differing TP degree, and migration.

For every layer the states are cut into ``DP * TP_max`` equal slices, where
``TP_max`` is the largest TP degree any pipeline uses for that layer.  Pipeline
``i`` owns the block of slices ``[i * TP_max, (i + 1) * TP_max)`` and each GPU of
its group owns ``TP_max / TP_i`` consecutive slices of that block.

Moving between two plans is computed on byte ranges (fractions of a layer),
so two layouts with different slice counts can be compared directly.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .domain import GpuId, ParallelizationPlan

MIB = 2 ** 20


class MigrationError(RuntimeError):
    """A slice has no live source and checkpoint restore is not permitted."""


@dataclass(frozen=True)
class LayerShards:
    tp_max: int
    owners: tuple[GpuId, ...]  # owner of each slice

    @property
    def slice_count(self) -> int:
        return len(self.owners)

    def slices_per_gpu(self) -> dict[GpuId, int]:
        out: dict[GpuId, int] = defaultdict(int)
        for g in self.owners:
            out[g] += 1
        return dict(out)

    def collective_groups(self) -> list[tuple[GpuId, ...]]:
        """Owners of slice column ``c`` across pipelines, one reduce-scatter group per column."""
        dp = self.slice_count // self.tp_max
        return [tuple(self.owners[i * self.tp_max + c] for i in range(dp)) for c in range(self.tp_max)]

    def multi_collective_gpus(self) -> set[GpuId]:
        return {g for g, n in self.slices_per_gpu().items() if n >= 2}

    def segments(self) -> list[tuple[Fraction, Fraction, GpuId]]:
        n = self.slice_count
        return [(Fraction(s, n), Fraction(s + 1, n), g) for s, g in enumerate(self.owners)]


@dataclass(frozen=True)
class ShardLayout:
    layers: tuple[LayerShards, ...]
    dp: int

    def owner_map(self) -> list[dict[int, GpuId]]:
        return [dict(enumerate(ls.owners)) for ls in self.layers]


def layer_holders(plan: ParallelizationPlan) -> list[list[tuple[GpuId, ...]]]:
    """For each layer, the TP group holding it in each pipeline."""
    per_pipe = []
    for p in plan.pipelines:
        seq = []
        for s in p.stages:
            seq.extend([s.group.members] * s.layers)
        per_pipe.append(seq)
    num_layers = len(per_pipe[0]) if per_pipe else 0
    if any(len(seq) != num_layers for seq in per_pipe):
        raise ValueError("pipelines hold different layer counts")
    return [[seq[layer] for seq in per_pipe] for layer in range(num_layers)]


def shard_layout(plan: ParallelizationPlan) -> ShardLayout:
    layers = []
    for holders in layer_holders(plan):
        tp_max = max(len(m) for m in holders)
        owners = []
        for members in holders:
            if tp_max % len(members):
                raise ValueError(f"TP degree {len(members)} does not divide {tp_max}")
            per = tp_max // len(members)
            for g in members:
                owners.extend([g] * per)
        layers.append(LayerShards(tp_max, tuple(owners)))
    return ShardLayout(tuple(layers), plan.dp_degree)


@dataclass(frozen=True)
class Transfer:
    layer: int
    start: Fraction  # byte range as a fraction of the layer's states
    end: Fraction
    source: GpuId | None  # None: restore from checkpoint
    destination: GpuId
    mib: float

    def to_dict(self) -> dict:
        return {"layer": self.layer, "start": str(self.start), "end": str(self.end),
                "source": None if self.source is None else str(self.source),
                "destination": str(self.destination), "mib": self.mib}


@dataclass(frozen=True)
class FusedSend:
    """All ranges between one (source, destination) pair inside a batch."""

    source: GpuId | None
    destination: GpuId
    transfers: tuple[Transfer, ...]

    @property
    def mib(self) -> float:
        return math.fsum(t.mib for t in self.transfers)


@dataclass(frozen=True)
class MigrationBatch:
    layers: tuple[int, ...]
    sends: tuple[FusedSend, ...]
    seconds: float

    def call_order(self) -> dict[GpuId, list[tuple]]:
        """Per-GPU ordered list of send/recv calls; one global order avoids deadlock."""
        out: dict[GpuId, list[tuple]] = defaultdict(list)
        for s in self.sends:
            if s.source is not None:
                out[s.source].append(("send", s.destination))
            out[s.destination].append(("recv", s.source))
        return dict(out)


@dataclass(frozen=True)
class MigrationSchedule:
    batches: tuple[MigrationBatch, ...] = ()
    checkpoint_restore: bool = False

    @property
    def seconds(self) -> float:
        return math.fsum(b.seconds for b in self.batches)

    @property
    def mib(self) -> float:
        return math.fsum(s.mib for b in self.batches for s in b.sends)

    def transfers(self) -> list[Transfer]:
        return [t for b in self.batches for s in b.sends for t in s.transfers]

    def is_empty(self) -> bool:
        return not self.batches

    def to_dict(self) -> dict:
        return {
            "estimated_seconds": self.seconds,
            "total_mib": self.mib,
            "checkpoint_restore": self.checkpoint_restore,
            "batches": [{
                "layers": list(b.layers),
                "seconds": b.seconds,
                "sends": [{"source": None if s.source is None else str(s.source),
                           "destination": str(s.destination), "mib": s.mib,
                           "ranges": [t.to_dict() for t in s.transfers]} for s in b.sends],
            } for b in self.batches],
        }


@dataclass(frozen=True)
class Bandwidth:
    intra_node_gbps: float = 400.0
    inter_node_gbps: float = 200.0
    checkpoint_gbps: float = 10.0

    def seconds(self, src: GpuId | None, dst: GpuId, mib: float) -> float:
        if src is None:
            gbps = self.checkpoint_gbps
        elif src.node == dst.node:
            gbps = self.intra_node_gbps
        else:
            gbps = self.inter_node_gbps
        return mib * MIB / (gbps * 1e9)


def _overlaps(old: LayerShards, new: LayerShards):
    """Maximal byte ranges on which the old and new owners are both constant."""
    cuts = sorted({Fraction(s, old.slice_count) for s in range(old.slice_count + 1)}
                  | {Fraction(s, new.slice_count) for s in range(new.slice_count + 1)})
    for lo, hi in zip(cuts, cuts[1:]):
        mid = (lo + hi) / 2
        yield lo, hi, old.owners[math.floor(mid * old.slice_count)], new.owners[math.floor(mid * new.slice_count)]


def compile_migration(old: ParallelizationPlan | ShardLayout, new: ParallelizationPlan | ShardLayout,
                      layer_mib: float, pack_size: int = 4, bandwidth: Bandwidth | None = None,
                      failed: Iterable[GpuId] = (), allow_checkpoint: bool = True) -> MigrationSchedule:
    """Transfers that turn the old ownership into the new one.

    Ranges already on their new owner are skipped; adjacent ranges between the
    same pair are merged; affected layers are packed ``pack_size`` per batch and
    each batch lasts as long as its slowest (source, destination) pair.
    """
    if pack_size < 1:
        raise ValueError("pack_size must be >= 1")
    bandwidth = bandwidth or Bandwidth()
    old_l = old if isinstance(old, ShardLayout) else shard_layout(old)
    new_l = new if isinstance(new, ShardLayout) else shard_layout(new)
    if len(old_l.layers) != len(new_l.layers):
        raise ValueError("plans hold different numbers of layers")
    failed = set(failed)
    per_layer: dict[int, list[Transfer]] = {}
    restore = False
    for idx, (o, n) in enumerate(zip(old_l.layers, new_l.layers)):
        moves: list[Transfer] = []
        for lo, hi, src, dst in _overlaps(o, n):
            if src == dst and src not in failed:
                continue
            if src in failed:
                if not allow_checkpoint:
                    raise MigrationError(f"layer {idx} range [{lo}, {hi}) lived on failed GPU {src};"
                                         " restore from checkpoint")
                restore = True
                src = None
            if moves and moves[-1].source == src and moves[-1].destination == dst and moves[-1].end == lo:
                prev = moves.pop()
                lo = prev.start
            moves.append(Transfer(idx, lo, hi, src, dst, float((hi - lo) * layer_mib)))
        if moves:
            per_layer[idx] = moves
    affected = sorted(per_layer)
    batches = []
    for start in range(0, len(affected), pack_size):
        chunk = affected[start:start + pack_size]
        pairs: dict[tuple, list[Transfer]] = defaultdict(list)
        for layer in chunk:
            for t in per_layer[layer]:
                pairs[(t.source, t.destination)].append(t)
        key = lambda p: (p[0] is not None, p[0] or GpuId(-1, -1), p[1])
        sends = tuple(FusedSend(s, d, tuple(pairs[(s, d)])) for s, d in sorted(pairs, key=key))
        seconds = max(bandwidth.seconds(s.source, s.destination, s.mib) for s in sends)
        batches.append(MigrationBatch(tuple(chunk), sends, seconds))
    return MigrationSchedule(tuple(batches), restore)


def apply_migration(old: ShardLayout, schedule: MigrationSchedule) -> list[list[tuple[Fraction, Fraction, GpuId]]]:
    """Replay a schedule on the old ownership; returns merged (start, end, owner) ranges per layer."""
    layers = [ls.segments() for ls in old.layers]
    for t in schedule.transfers():
        segs = layers[t.layer]
        out = []
        for lo, hi, g in segs:
            if hi <= t.start or lo >= t.end:
                out.append((lo, hi, g))
                continue
            if lo < t.start:
                out.append((lo, t.start, g))
            out.append((max(lo, t.start), min(hi, t.end), t.destination))
            if hi > t.end:
                out.append((t.end, hi, g))
        layers[t.layer] = out
    return [_merge(segs) for segs in layers]


def ownership_ranges(layout: ShardLayout) -> list[list[tuple[Fraction, Fraction, GpuId]]]:
    return [_merge(ls.segments()) for ls in layout.layers]


def _merge(segs: Sequence[tuple[Fraction, Fraction, GpuId]]):
    out: list[tuple[Fraction, Fraction, GpuId]] = []
    for lo, hi, g in sorted(segs):
        if out and out[-1][2] == g and out[-1][1] == lo:
            out[-1] = (out[-1][0], hi, g)
        else:
            out.append((lo, hi, g))
    return out


def naive_migration_mib(plan: ParallelizationPlan, layer_mib: float) -> float:
    """Bytes moved if every layer's states were re-sent regardless of residency."""
    return layer_mib * sum(s.layers for s in plan.pipelines[0].stages)
