"""Shared value records for the planner and simulator.

All records are frozen dataclasses.  Mappings stored inside them are treated as
read-only; use the ``with_*`` helpers to derive modified copies.

Straggling rates are plain floats: 1.0 is a normal GPU, larger is slower and
``FAILED`` (``math.inf``) marks a GPU that stopped responding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, NamedTuple

FAILED = math.inf
DEFAULT_GPUS_PER_NODE = 8
DEFAULT_CAPACITY_MIB = 81920.0
DEFAULT_GAP_MIB = 4096.0


class ConfigError(ValueError):
    """Raised when a record violates its documented invariants."""


class GpuId(NamedTuple):
    node: int
    local: int

    def __str__(self) -> str:
        return f"{self.node}:{self.local}"

    @classmethod
    def parse(cls, text) -> "GpuId":
        if isinstance(text, GpuId):
            return text
        if isinstance(text, (list, tuple)):
            node, local = text
            return cls(int(node), int(local))
        node, _, local = str(text).partition(":")
        if not local:
            raise ConfigError(f"malformed GPU id {text!r}, expected 'node:local'")
        return cls(int(node), int(local))


def _encode_rate(x: float):
    return "inf" if math.isinf(x) else x


def _decode_rate(x) -> float:
    if isinstance(x, str):
        if x.lower() in ("inf", "infinity", "failed"):
            return FAILED
        raise ConfigError(f"bad straggling rate {x!r}")
    return float(x)


def _check_rate(gpu, x: float) -> None:
    if math.isnan(x) or x < 1.0:
        raise ConfigError(f"straggling rate of {gpu} must be >= 1.0 or failed, got {x}")


@dataclass(frozen=True)
class Node:
    gpus: int = DEFAULT_GPUS_PER_NODE


@dataclass(frozen=True)
class ClusterState:
    nodes: tuple[Node, ...]
    rates: Mapping[GpuId, float]
    standby: frozenset[GpuId] = frozenset()
    memory_capacity: Mapping[GpuId, float] = field(default_factory=dict)

    def __post_init__(self):
        gpus = set(self.gpus())
        full_rates = {g: 1.0 for g in self.gpus()}
        for g, x in self.rates.items():
            g = GpuId.parse(g)
            if g not in gpus:
                raise ConfigError(f"rate given for unknown GPU {g}")
            x = float(x)
            _check_rate(g, x)
            full_rates[g] = x
        caps = {g: DEFAULT_CAPACITY_MIB for g in self.gpus()}
        for g, c in self.memory_capacity.items():
            g = GpuId.parse(g)
            if g not in gpus:
                raise ConfigError(f"memory capacity given for unknown GPU {g}")
            if c < 0:
                raise ConfigError(f"negative memory capacity for {g}")
            caps[g] = float(c)
        standby = frozenset(GpuId.parse(g) for g in self.standby)
        if not standby <= gpus:
            raise ConfigError(f"standby GPUs {sorted(standby - gpus)} are not in the cluster")
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "rates", full_rates)
        object.__setattr__(self, "memory_capacity", caps)
        object.__setattr__(self, "standby", standby)

    @classmethod
    def uniform(cls, num_nodes: int, gpus_per_node: int = DEFAULT_GPUS_PER_NODE,
                capacity_mib: float = DEFAULT_CAPACITY_MIB, rates=None) -> "ClusterState":
        nodes = tuple(Node(gpus_per_node) for _ in range(num_nodes))
        caps = {GpuId(n, k): capacity_mib for n in range(num_nodes) for k in range(gpus_per_node)}
        return cls(nodes, dict(rates or {}), frozenset(), caps)

    def gpus(self) -> list[GpuId]:
        return [GpuId(n, k) for n, node in enumerate(self.nodes) for k in range(node.gpus)]

    def node_gpus(self, node: int) -> list[GpuId]:
        return [GpuId(node, k) for k in range(self.nodes[node].gpus)]

    @property
    def num_gpus(self) -> int:
        return sum(node.gpus for node in self.nodes)

    def rate(self, gpu: GpuId) -> float:
        return self.rates[gpu]

    def capacity(self, gpu: GpuId) -> float:
        return self.memory_capacity[gpu]

    def failed(self) -> frozenset[GpuId]:
        return frozenset(g for g, x in self.rates.items() if math.isinf(x))

    def with_rates(self, rates: Mapping[GpuId, float]) -> "ClusterState":
        merged = dict(self.rates)
        merged.update(rates)
        return replace(self, rates=merged)

    def with_standby(self, standby: Iterable[GpuId]) -> "ClusterState":
        return replace(self, standby=frozenset(standby))

    def to_dict(self) -> dict:
        return {
            "nodes": [{"gpus": node.gpus} for node in self.nodes],
            "rates": {str(g): _encode_rate(x) for g, x in sorted(self.rates.items())},
            "standby": sorted(str(g) for g in self.standby),
            "memory_capacity": {str(g): c for g, c in sorted(self.memory_capacity.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterState":
        try:
            nodes = tuple(Node(int(n.get("gpus", DEFAULT_GPUS_PER_NODE))) for n in data["nodes"])
        except KeyError as exc:
            raise ConfigError(f"cluster: missing field {exc.args[0]!r}") from None
        rates = {GpuId.parse(k): _decode_rate(v) for k, v in data.get("rates", {}).items()}
        caps = {GpuId.parse(k): float(v) for k, v in data.get("memory_capacity", {}).items()}
        if "default_capacity" in data:
            default = float(data["default_capacity"])
            for n, node in enumerate(nodes):
                for k in range(node.gpus):
                    caps.setdefault(GpuId(n, k), default)
        standby = frozenset(GpuId.parse(g) for g in data.get("standby", ()))
        return cls(nodes, rates, standby, caps)


@dataclass(frozen=True)
class ProfiledCoefficients:
    """Profiled time and memory coefficients.

    ``tau`` maps micro-batch size to the fwd+bwd seconds of one layer on a group
    whose straggling rate is 1.  ``zeta`` maps group size to the unit-workload
    time; the efficiency factor of a group size is derived from it, never
    stored.  Memory coefficients are per-GPU MiB at TP=1.
    """

    tau: Mapping[int, float]
    zeta: Mapping[int, float]
    act_fwd: float = 0.0
    act_fwd_bwd: float = 0.0
    states: float = 0.0
    head_act_fwd: float = 0.0
    head_act_fwd_bwd: float = 0.0
    head_states: float = 0.0
    tail_act_fwd_bwd: float = 0.0
    tail_states: float = 0.0
    gap_mib: float = DEFAULT_GAP_MIB
    layer_state_mib: float | None = None

    def __post_init__(self):
        tau = {int(b): float(t) for b, t in self.tau.items()}
        zeta = {int(n): float(z) for n, z in self.zeta.items()}
        object.__setattr__(self, "tau", dict(sorted(tau.items())))
        object.__setattr__(self, "zeta", dict(sorted(zeta.items())))
        if not tau or not zeta:
            raise ConfigError("coefficients need at least one tau and one zeta entry")
        prev = 0.0
        for b, t in self.tau.items():
            if b < 1 or t <= 0:
                raise ConfigError(f"tau({b}) must be positive")
            if t < prev:
                raise ConfigError("tau must be nondecreasing in the micro-batch size")
            prev = t
        prev = math.inf
        for n, z in self.zeta.items():
            if n < 1 or z <= 0:
                raise ConfigError(f"zeta({n}) must be positive")
            if z > prev:
                raise ConfigError("zeta must be nonincreasing in the group size")
            prev = z
        for name in ("act_fwd", "act_fwd_bwd", "states", "head_act_fwd", "head_act_fwd_bwd",
                     "head_states", "tail_act_fwd_bwd", "tail_states", "gap_mib"):
            if getattr(self, name) < 0:
                raise ConfigError(f"memory coefficient {name} must be >= 0")

    def rho(self, n: int) -> float:
        """Efficiency factor of an ``n``-GPU group, in (0, 1]."""
        try:
            z = self.zeta[n]
        except KeyError:
            raise ConfigError(f"no zeta entry for group size {n}") from None
        return z / max(self.zeta.values())

    @property
    def state_mib_per_layer(self) -> float:
        return self.states if self.layer_state_mib is None else self.layer_state_mib

    def to_dict(self) -> dict:
        out = {
            "tau": {str(b): t for b, t in self.tau.items()},
            "zeta": {str(n): z for n, z in self.zeta.items()},
        }
        for name in ("act_fwd", "act_fwd_bwd", "states", "head_act_fwd", "head_act_fwd_bwd",
                     "head_states", "tail_act_fwd_bwd", "tail_states", "gap_mib"):
            out[name] = getattr(self, name)
        if self.layer_state_mib is not None:
            out["layer_state_mib"] = self.layer_state_mib
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProfiledCoefficients":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"coefficients: unknown fields {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True)
class TaskSpec:
    num_layers: int
    global_batch_size: int
    micro_batch_sizes: tuple[int, ...]
    dp_degree: int
    tp_degrees: tuple[int, ...]
    coefficients: ProfiledCoefficients
    dp_range: tuple[int, ...] = ()
    max_micro_batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "micro_batch_sizes", tuple(sorted(set(self.micro_batch_sizes))))
        object.__setattr__(self, "tp_degrees", tuple(sorted(set(self.tp_degrees))))
        object.__setattr__(self, "dp_range", tuple(sorted(set(self.dp_range))))
        if self.num_layers < 1 or self.global_batch_size < 1 or self.dp_degree < 1:
            raise ConfigError("num_layers, global_batch_size and dp_degree must be >= 1")
        if not self.micro_batch_sizes or self.micro_batch_sizes[0] < 1:
            raise ConfigError("micro_batch_sizes must be positive integers")
        if not self.tp_degrees or not set(self.tp_degrees) <= {1, 2, 4, 8}:
            raise ConfigError("tp_degrees must be a nonempty subset of {1, 2, 4, 8}")
        missing = [n for n in self.tp_degrees if n not in self.coefficients.zeta]
        if missing:
            raise ConfigError(f"coefficients.zeta lacks entries for TP degrees {missing}")
        if any(d < 1 for d in self.dp_range):
            raise ConfigError("dp_range entries must be >= 1")

    def candidate_micro_batch_sizes(self) -> list[int]:
        """Sizes worth trying: dividing B, profiled, and under the cap."""
        return [b for b in self.micro_batch_sizes
                if b <= self.max_micro_batch_size and self.global_batch_size % b == 0
                and b in self.coefficients.tau]

    def check_cluster(self, cluster: ClusterState) -> None:
        for n, node in enumerate(cluster.nodes):
            bad = [k for k in self.tp_degrees if node.gpus % k]
            if bad:
                raise ConfigError(f"node {n} has {node.gpus} GPUs, not divisible by TP {bad}")

    def to_dict(self) -> dict:
        out = {
            "num_layers": self.num_layers,
            "global_batch_size": self.global_batch_size,
            "micro_batch_sizes": list(self.micro_batch_sizes),
            "dp_degree": self.dp_degree,
            "tp_degrees": list(self.tp_degrees),
            "coefficients": self.coefficients.to_dict(),
            "max_micro_batch_size": self.max_micro_batch_size,
        }
        if self.dp_range:
            out["dp_range"] = list(self.dp_range)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TaskSpec":
        data = dict(data)
        # short symbolic aliases are accepted on input
        for short, long in (("L", "num_layers"), ("B", "global_batch_size")):
            if short in data:
                data[long] = data.pop(short)
        try:
            return cls(
                num_layers=int(data["num_layers"]),
                global_batch_size=int(data["global_batch_size"]),
                micro_batch_sizes=tuple(int(b) for b in data.get("micro_batch_sizes", (1,))),
                dp_degree=int(data["dp_degree"]),
                tp_degrees=tuple(int(k) for k in data.get("tp_degrees", (1, 2, 4, 8))),
                coefficients=ProfiledCoefficients.from_dict(data["coefficients"]),
                dp_range=tuple(int(d) for d in data.get("dp_range", ())),
                max_micro_batch_size=int(data.get("max_micro_batch_size", 16)),
            )
        except KeyError as exc:
            raise ConfigError(f"task: missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class TpGroup:
    """GPUs on one node running one pipeline stage with tensor parallelism."""

    members: tuple[GpuId, ...]
    rate: float
    min_capacity: float = DEFAULT_CAPACITY_MIB

    def __post_init__(self):
        members = tuple(GpuId.parse(g) for g in self.members)
        if not members:
            raise ConfigError("a TP group needs at least one member")
        if len({g.node for g in members}) != 1:
            raise ConfigError(f"TP group {[str(g) for g in members]} spans several nodes")
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def node(self) -> int:
        return self.members[0].node

    def to_dict(self) -> dict:
        return {"members": [str(g) for g in self.members], "rate": _encode_rate(self.rate),
                "min_capacity": self.min_capacity}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TpGroup":
        return cls(tuple(GpuId.parse(g) for g in data["members"]), _decode_rate(data["rate"]),
                   float(data.get("min_capacity", DEFAULT_CAPACITY_MIB)))


@dataclass(frozen=True)
class Stage:
    group: TpGroup
    layers: int

    def to_dict(self) -> dict:
        d = self.group.to_dict()
        d["layers"] = self.layers
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Stage":
        return cls(TpGroup.from_dict(data), int(data["layers"]))


@dataclass(frozen=True)
class Pipeline:
    stages: tuple[Stage, ...]
    micro_batches: int
    bottleneck: float = 0.0  # max_j rate * layers, the layer-ILP optimum

    @property
    def depth(self) -> int:
        return len(self.stages)

    def gpus(self) -> list[GpuId]:
        return [g for st in self.stages for g in st.group.members]

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages], "micro_batches": self.micro_batches,
                "bottleneck": _encode_rate(self.bottleneck)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Pipeline":
        return cls(tuple(Stage.from_dict(s) for s in data["stages"]), int(data["micro_batches"]),
                   _decode_rate(data.get("bottleneck", 0.0)))


@dataclass(frozen=True)
class ParallelizationPlan:
    pipelines: tuple[Pipeline, ...]
    micro_batch_size: int
    removed: frozenset[GpuId] = frozenset()
    estimated_seconds: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        object.__setattr__(self, "removed", frozenset(GpuId.parse(g) for g in self.removed))

    @property
    def dp_degree(self) -> int:
        return len(self.pipelines)

    def gpus(self) -> list[GpuId]:
        return [g for p in self.pipelines for g in p.gpus()]

    def structure(self) -> tuple:
        """Hashable summary used to decide whether two plans differ."""
        return (self.micro_batch_size,
                tuple((tuple((s.group.members, s.layers) for s in p.stages), p.micro_batches)
                      for p in self.pipelines))

    def same_layout(self, other: "ParallelizationPlan") -> bool:
        return self.structure() == other.structure()

    def validate(self, task: TaskSpec, cluster: ClusterState | None = None) -> None:
        """Raise ConfigError unless every plan invariant holds."""
        from .costmodel import memory_bound  # local import, costmodel imports domain

        b = self.micro_batch_size
        if sum(p.micro_batches for p in self.pipelines) * b != task.global_batch_size:
            raise ConfigError("micro-batches times b do not add up to the global batch size")
        seen: set[GpuId] = set()
        for i, p in enumerate(self.pipelines):
            if sum(s.layers for s in p.stages) != task.num_layers:
                raise ConfigError(f"pipeline {i} does not hold all {task.num_layers} layers")
            if p.micro_batches < 0 or any(s.layers < 0 for s in p.stages):
                raise ConfigError(f"pipeline {i} has negative counts")
            for j, s in enumerate(p.stages, start=1):
                for g in s.group.members:
                    if g in seen:
                        raise ConfigError(f"GPU {g} appears twice")
                    seen.add(g)
                cap = s.group.min_capacity
                if cluster is not None:
                    cap = min(cluster.capacity(g) for g in s.group.members)
                bound = memory_bound(b, j, p.depth, s.group.size, cap, task.coefficients)
                if s.layers * bound.mu + bound.nu > bound.cap:
                    raise ConfigError(f"stage {j} of pipeline {i} exceeds its memory")
        if seen & self.removed:
            raise ConfigError("removed GPUs still hold stages")

    def to_dict(self) -> dict:
        return {
            "pipelines": [p.to_dict() for p in self.pipelines],
            "micro_batch_size": self.micro_batch_size,
            "removed": sorted(str(g) for g in self.removed),
            "estimated_seconds": _encode_rate(self.estimated_seconds),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ParallelizationPlan":
        try:
            return cls(tuple(Pipeline.from_dict(p) for p in data["pipelines"]),
                       int(data["micro_batch_size"]),
                       frozenset(GpuId.parse(g) for g in data.get("removed", ())),
                       _decode_rate(data.get("estimated_seconds", 0.0)))
        except KeyError as exc:
            raise ConfigError(f"plan: missing field {exc.args[0]!r}") from None


def dump_json(record, path) -> None:
    with open(path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")


def load_json(cls, path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return cls.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{path}: malformed {cls.__name__}: {exc}") from None
