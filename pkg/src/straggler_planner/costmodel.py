"""Closed-form time and memory formulas used by the planner and simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .domain import ConfigError, ProfiledCoefficients


@dataclass(frozen=True)
class MemoryBound:
    """Stage memory check ``layers * mu + nu <= cap``, all in MiB."""

    mu: float
    nu: float
    cap: float

    def fits(self, layers: int) -> bool:
        return layers * self.mu + self.nu <= self.cap

    def max_layers(self) -> int:
        """Largest layer count that fits, or -1 if even zero layers overflow."""
        if self.nu > self.cap:
            return -1
        if self.mu <= 0:
            return 1 << 30
        n = int((self.cap - self.nu) // self.mu)
        # floor division on floats can be off by one near integers
        while n > 0 and not self.fits(n):
            n -= 1
        while self.fits(n + 1):
            n += 1
        return n


def group_rate(member_rates: Sequence[float], group_size: int, coeffs: ProfiledCoefficients) -> float:
    """Effective straggling rate of a TP group: rho(n) times the slowest member."""
    if group_size != len(member_rates) or group_size < 1:
        raise ConfigError(f"group size {group_size} does not match {len(member_rates)} members")
    return coeffs.rho(group_size) * max(member_rates)


def stage_time(rate: float, layers: int, tau_b: float) -> float:
    """Seconds one stage spends on one micro-batch."""
    if layers == 0:
        return 0.0
    return rate * layers * tau_b


def pipeline_time_exact(m: int, stage_times: Sequence[float]) -> float:
    """1F1B makespan: (m - 1) * max(t) + sum(t); an idle pipeline takes 0."""
    if not stage_times:
        raise ValueError("a pipeline needs at least one stage")
    if m == 0:
        return 0.0
    return (m - 1) * max(stage_times) + math.fsum(stage_times)


def pipeline_time_approx(m: int, stage_times: Sequence[float]) -> float:
    """Planner surrogate m * max(t); drops the warm-up and cool-down term."""
    if not stage_times:
        raise ValueError("a pipeline needs at least one stage")
    if m == 0:
        return 0.0
    return m * max(stage_times)


def memory_bound(b: int, j: int, pp: int, k: int, min_capacity: float,
                 coeffs: ProfiledCoefficients) -> MemoryBound:
    """Memory coefficients of stage ``j`` (1-based) in a ``pp``-stage pipeline.

    The first stage keeps activations of ``pp - 1`` in-flight micro-batches and
    hosts the embedding-like head layers; the last stage hosts the tail layers.
    A one-stage pipeline carries both head and tail constants.  The per-GPU
    limit ``min_capacity - gap`` is lifted to the group by multiplying by ``k``.
    """
    if not 1 <= j <= pp or k < 1:
        raise ValueError(f"bad stage index {j} for a {pp}-stage pipeline")
    c = coeffs
    ahead = pp - j
    mu = b * (c.act_fwd * ahead + c.act_fwd_bwd) + c.states
    nu = 0.0
    if j == 1:
        nu += b * (c.head_act_fwd * (pp - 1) + c.head_act_fwd_bwd) + c.head_states
    if j == pp:
        nu += b * c.tail_act_fwd_bwd + c.tail_states
    cap = max(0.0, k * (min_capacity - c.gap_mib))
    return MemoryBound(mu, nu, cap)


def theoretic_optimum_ratio(num_gpus: int, straggler_rates: Sequence[float]) -> float:
    """Best achievable slowdown if work could be spread perfectly by throughput."""
    n = len(straggler_rates)
    if n > num_gpus:
        raise ValueError("more stragglers than GPUs")
    throughput = (num_gpus - n) + math.fsum(0.0 if math.isinf(x) else 1.0 / x
                                            for x in straggler_rates)
    if throughput <= 0:
        return math.inf
    return num_gpus / throughput
