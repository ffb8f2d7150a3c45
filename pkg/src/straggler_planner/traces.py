"""Straggler traces: timed rate changes, plus a generator for standard situations."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import ConfigError, GpuId, _decode_rate, _encode_rate

DEFAULT_LEVEL_RATES = {1: 2.62, 2: 3.8, 3: 5.42}

# situation -> list of (gpus, level); a gpu spec is (node, local) or (node, "all")
SITUATIONS: dict[str, list[tuple]] = {
    "normal": [],
    "S1": [((0, 0), 1)],
    "S2": [((0, 0), 3)],
    "S3": [((0, 0), 3), ((2, 0), 1)],
    "S4": [((0, 0), 3), ((1, 0), 2), ((2, 0), 1)],
    "S5": [((0, "all"), 1), ((1, 0), 2)],
    "S6": [((0, "all"), 1)],
}


@dataclass(frozen=True)
class TraceEvent:
    iteration: int
    gpu: GpuId
    rate: float


@dataclass(frozen=True)
class StragglerTrace:
    events: tuple[TraceEvent, ...] = ()
    noise: float = 0.0
    situations: tuple[tuple[int, str], ...] = ()  # (first iteration, label)
    iterations: int | None = None

    def __post_init__(self):
        its = [e.iteration for e in self.events]
        if its != sorted(its):
            raise ConfigError("trace events must be in nondecreasing iteration order")
        for e in self.events:
            if math.isnan(e.rate) or e.rate < 1.0:
                raise ConfigError(f"trace rate {e.rate} for {e.gpu} must be >= 1 or failed")
        if self.noise < 0:
            raise ConfigError("noise amplitude must be >= 0")

    def events_at(self, iteration: int) -> list[TraceEvent]:
        return [e for e in self.events if e.iteration == iteration]

    def situation_at(self, iteration: int) -> str:
        label = "normal"
        for start, name in self.situations:
            if start <= iteration:
                label = name
        return label

    def to_dict(self) -> dict:
        out = {"noise": self.noise,
               "events": [{"iteration": e.iteration, "gpu": str(e.gpu), "rate": _encode_rate(e.rate)}
                          for e in self.events],
               "situations": [{"iteration": i, "label": s} for i, s in self.situations]}
        if self.iterations is not None:
            out["iterations"] = self.iterations
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "StragglerTrace":
        try:
            events = tuple(TraceEvent(int(e["iteration"]), GpuId.parse(e["gpu"]), _decode_rate(e["rate"]))
                           for e in data.get("events", ()))
            sits = tuple((int(s["iteration"]), str(s["label"])) for s in data.get("situations", ()))
        except KeyError as exc:
            raise ConfigError(f"trace: missing field {exc.args[0]!r}") from None
        its = data.get("iterations")
        return cls(events, float(data.get("noise", 0.0)), sits, None if its is None else int(its))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def situation_rates(label: str, levels: Mapping[int, float] | None = None,
                    gpus_per_node: int = 8) -> dict[GpuId, float]:
    """Straggler rates that define one situation (GPUs not listed are normal)."""
    levels = {**DEFAULT_LEVEL_RATES, **(levels or {})}
    try:
        spec = SITUATIONS[label]
    except KeyError:
        raise ConfigError(f"unknown situation {label!r}; known: {sorted(SITUATIONS)}") from None
    out: dict[GpuId, float] = {}
    for (node, local), level in spec:
        locals_ = range(gpus_per_node) if local == "all" else [local]
        for k in locals_:
            out[GpuId(node, k)] = levels[level]
    return out


def gen_trace(situations: Sequence[str], dwell: int = 50, levels: Mapping[int, float] | None = None,
              seed: int = 0, jitter: int = 0, noise: float = 0.0, gpus_per_node: int = 8,
              align: int = 1) -> StragglerTrace:
    """Trace that visits ``situations`` in order, each for about ``dwell`` iterations.

    Each switch resets the previous situation's stragglers to 1.0 and applies
    the new ones at the same iteration.  ``jitter`` perturbs dwell lengths by up
    to that many iterations (seeded); switch points are rounded up to a
    multiple of ``align`` so they coincide with standby probes.
    """
    rng = random.Random(seed)
    events: list[TraceEvent] = []
    marks: list[tuple[int, str]] = []
    current: dict[GpuId, float] = {}
    it = 0
    for label in situations:
        target = situation_rates(label, levels, gpus_per_node)
        for g in sorted(set(current) | set(target)):
            new = target.get(g, 1.0)
            if current.get(g, 1.0) != new:
                events.append(TraceEvent(it, g, new))
        current = target
        marks.append((it, label))
        length = dwell + (rng.randint(-jitter, jitter) if jitter else 0)
        nxt = it + max(1, length)
        if align > 1:
            nxt = -(-nxt // align) * align
        it = nxt
    return StragglerTrace(tuple(events), noise, tuple(marks), it)
