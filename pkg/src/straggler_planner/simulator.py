"""Iteration-level simulation of 1F1B hybrid-parallel training under a straggler trace.

Each iteration: trace events take effect, a finished background plan lands
(paying for the migration), the step runs under the live rates, the profiler
reports rates, and a rate change above the threshold starts a new plan in the
background.  Planning latency is a fixed number of simulated seconds so runs
are reproducible.
"""
from __future__ import annotations

import csv
import io
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .costmodel import group_rate, pipeline_time_exact, stage_time, theoretic_optimum_ratio
from .domain import ClusterState, ConfigError, GpuId, ParallelizationPlan, TaskSpec
from .planner import PlanningError, plan as make_plan, replan_needed
from .sharding import Bandwidth, MigrationError, compile_migration
from .traces import StragglerTrace


CSV_COLUMNS = ["iteration", "seconds", "plan_id", "event", "estimate", "situation", "step_seconds",
               "migration_seconds"]


@dataclass
class SimConfig:
    iterations: int | None = None
    threshold: float = 0.05
    probe_period: int = 10
    planning_seconds: float = 1.0
    restore_seconds: float = 60.0
    sync_seconds: float = 0.0
    pack_size: int = 4
    bandwidth: Bandwidth = field(default_factory=Bandwidth)
    seed: int = 0
    noise: float | None = None  # overrides the trace's amplitude when set
    allow_checkpoint: bool = True
    initial_plan: ParallelizationPlan | None = None


@dataclass
class IterationRecord:
    iteration: int
    seconds: float
    plan_id: int
    event: str
    estimate: float
    situation: str
    step_seconds: float
    migration_seconds: float = 0.0


@dataclass
class ReplanEvent:
    trigger_iteration: int
    land_iteration: int
    plan_id: int
    planning_seconds: float
    changed: bool


@dataclass
class MigrationEvent:
    iteration: int
    seconds: float
    mib: float
    checkpoint_restore: bool


@dataclass
class SimTimeline:
    records: list[IterationRecord] = field(default_factory=list)
    replans: list[ReplanEvent] = field(default_factory=list)
    migrations: list[MigrationEvent] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    plans: dict[int, ParallelizationPlan] = field(default_factory=dict)

    def step_times(self) -> list[float]:
        return [r.step_seconds for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([r.iteration, repr(r.seconds), r.plan_id, r.event, repr(r.estimate), r.situation,
                        repr(r.step_seconds), repr(r.migration_seconds)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SimTimeline":
        """Records only; re-plan, migration and plan details are not in the CSV."""
        rows = csv.DictReader(io.StringIO(text))
        if rows.fieldnames != CSV_COLUMNS:
            raise ConfigError(f"timeline CSV needs columns {CSV_COLUMNS}, got {rows.fieldnames}")
        out = cls()
        for n, row in enumerate(rows, start=2):
            try:
                out.records.append(IterationRecord(int(row["iteration"]), float(row["seconds"]),
                                                   int(row["plan_id"]), row["event"], float(row["estimate"]),
                                                   row["situation"], float(row["step_seconds"]),
                                                   float(row["migration_seconds"])))
            except ValueError as exc:
                raise ConfigError(f"timeline CSV line {n}: {exc}") from None
        return out


def live_step_seconds(plan: ParallelizationPlan, rates: Mapping[GpuId, float], task: TaskSpec,
                      sync_seconds: float = 0.0) -> float:
    """Exact 1F1B step time of ``plan`` under the given rates; slowest pipeline wins."""
    tau = task.coefficients.tau[plan.micro_batch_size]
    worst = 0.0
    for p in plan.pipelines:
        times = []
        for s in p.stages:
            y = group_rate([rates[g] for g in s.group.members], s.group.size, task.coefficients)
            times.append(stage_time(y, s.layers, tau))
        worst = max(worst, pipeline_time_exact(p.micro_batches, times))
    return worst + sync_seconds


def warmup_gap(plan: ParallelizationPlan, rates: Mapping[GpuId, float], task: TaskSpec) -> float:
    """Simulated minus estimated step time: the warm-up term the planner ignores."""
    return live_step_seconds(plan, rates, task) - estimated_step_seconds(plan, rates, task)


def estimated_step_seconds(plan: ParallelizationPlan, rates: Mapping[GpuId, float], task: TaskSpec) -> float:
    """Planner surrogate max_i m_i * max_j t_ij under the given rates."""
    tau = task.coefficients.tau[plan.micro_batch_size]
    worst = 0.0
    for p in plan.pipelines:
        if p.micro_batches == 0:
            continue
        o = max(group_rate([rates[g] for g in s.group.members], s.group.size, task.coefficients) * s.layers
                if s.layers else 0.0 for s in p.stages)
        worst = max(worst, tau * (o * p.micro_batches))
    return worst


def measure_rates(true_rates: Mapping[GpuId, float], active: Iterable[GpuId], iteration: int,
                  probe_period: int, noise: float, rng: random.Random,
                  last: Mapping[GpuId, float] | None = None) -> dict[GpuId, float]:
    """Profiler emulation: noisy readings for active GPUs, periodic probes for the rest.

    Failures are visible immediately on every GPU.  Noise is multiplicative,
    uniform in ``[-noise, noise]``, and never pushes a rate below 1.
    """
    active = set(active)
    probe = probe_period > 0 and iteration % probe_period == 0
    out = {}
    for g in sorted(true_rates):
        x = true_rates[g]
        if math.isinf(x):
            out[g] = x
            continue
        if g in active or probe or last is None or g not in last:
            if noise:
                x = max(1.0, x * (1.0 + rng.uniform(-noise, noise)))
            out[g] = x
        else:
            out[g] = last[g]
    return out


def simulate(task: TaskSpec, cluster: ClusterState, trace: StragglerTrace, config: SimConfig | None = None,
             planner: Callable[[ClusterState, TaskSpec], ParallelizationPlan] | None = None) -> SimTimeline:
    """Run the training loop; see the module docstring for the per-iteration order."""
    config = config or SimConfig()
    planner = planner or (lambda c, t: make_plan(c, t).plan)
    iterations = config.iterations or trace.iterations or 100
    noise = trace.noise if config.noise is None else config.noise
    rng = random.Random(config.seed)
    layer_mib = task.coefficients.state_mib_per_layer
    timeline = SimTimeline()

    true_rates = dict(cluster.rates)
    current = config.initial_plan or planner(cluster, task)
    plan_id = 0
    timeline.plans[plan_id] = current
    measured = None
    pending = None  # (land_iteration, trigger_iteration, plan or exception, seconds)
    dirty = False

    def switch(new_plan, it, failed=(), restore=False):
        nonlocal current, plan_id
        if new_plan.same_layout(current):
            return False, 0.0
        sched = compile_migration(current, new_plan, layer_mib, config.pack_size, config.bandwidth,
                                  failed, config.allow_checkpoint or restore)
        seconds = sched.seconds
        timeline.migrations.append(MigrationEvent(it, seconds, sched.mib, sched.checkpoint_restore))
        plan_id += 1
        current = new_plan
        timeline.plans[plan_id] = current
        return True, seconds

    def run_planner(rates):
        state = cluster.with_rates(rates)
        t0 = time.perf_counter()
        try:
            result = planner(state, task)
        except PlanningError as exc:
            result = exc
        return result, time.perf_counter() - t0

    for it in range(iterations):
        events = []
        extra = 0.0
        for e in trace.events_at(it):
            true_rates[e.gpu] = e.rate
        # failure of a GPU in use: synchronous re-plan and checkpoint restore
        failed_now = {g for g in current.gpus() if math.isinf(true_rates[g])}
        if failed_now:
            rates = dict(measured or true_rates)
            rates.update({g: x for g, x in true_rates.items() if math.isinf(x)})
            result, _ = run_planner(rates)
            pending = None
            dirty = False
            if isinstance(result, Exception):
                timeline.warnings.append(f"iteration {it}: planning failed after failure: {result}")
                raise RuntimeError(f"no plan survives the failure at iteration {it}") from result
            old_id = plan_id
            failed_all = {g for g, x in true_rates.items() if math.isinf(x)}
            try:
                changed, mig = switch(result, it, failed_all, restore=True)
            except MigrationError as exc:
                raise RuntimeError(str(exc)) from exc
            extra += config.restore_seconds + mig
            timeline.replans.append(ReplanEvent(it, it, plan_id, 0.0, plan_id != old_id))
            events.append("failure-replan")
            if measured is not None:
                for g in failed_all:
                    measured[g] = math.inf
        # background plan lands at the iteration boundary
        if pending is not None and pending[0] == it:
            _, trigger_it, result, seconds = pending
            pending = None
            if isinstance(result, Exception):
                timeline.warnings.append(f"iteration {it}: planning failed: {result}")
                events.append("plan-failed")
            else:
                changed, mig = switch(result, it)
                extra += mig
                timeline.replans.append(ReplanEvent(trigger_it, it, plan_id, seconds, changed))
                events.append("migrate" if changed else "replan-same")
        step = live_step_seconds(current, true_rates, task, config.sync_seconds)
        new_measured = measure_rates(true_rates, current.gpus(), it, config.probe_period, noise, rng, measured)
        triggered = measured is not None and replan_needed(measured, new_measured, config.threshold)
        measured = new_measured
        if dirty and pending is None:
            triggered = True
            dirty = False
        if triggered:
            if pending is None:
                result, wall = run_planner(measured)
                seconds = config.planning_seconds if config.planning_seconds is not None else wall
                delay = max(1, math.ceil(seconds / step)) if step > 0 else 1
                pending = (it + delay, it, result, seconds)
                events.append("trigger")
            else:
                dirty = True
        est = estimated_step_seconds(current, true_rates, task)
        timeline.records.append(IterationRecord(it, step + extra, plan_id, "|".join(events), est,
                                                trace.situation_at(it), step, extra))
    return timeline


@dataclass
class SituationSummary:
    label: str
    mean_seconds: float
    mean_estimate: float
    actual_ratio: float
    estimated_ratio: float
    optimum_ratio: float
    steady_iterations: int


def _segments(timeline: SimTimeline):
    segs: list[tuple[str, list[IterationRecord]]] = []
    for r in timeline.records:
        if segs and segs[-1][0] == r.situation and segs[-1][1][-1].iteration == r.iteration - 1:
            segs[-1][1].append(r)
        else:
            segs.append((r.situation, [r]))
    return segs


def steady_records(records: list[IterationRecord]) -> list[IterationRecord]:
    """Records after the last event of a segment (its settled state)."""
    last = -1
    for k, r in enumerate(records):
        if r.event:
            last = k
    tail = records[last + 1:]
    return tail


def summarize(timeline: SimTimeline, trace: StragglerTrace, cluster: ClusterState) -> list[SituationSummary]:
    """Per-situation steady-state means and the actual / estimated / optimal slowdown ratios.

    Ratios are relative to the first ``normal`` segment.  The optimum is the
    perfect-rebalancing bound for the situation's straggler rates.
    """
    segs = _segments(timeline)
    base = next((recs for label, recs in segs if label == "normal"), None)
    if base is None:
        raise ValueError("the timeline needs a 'normal' segment as the baseline")
    base_steady = steady_records(base) or base
    t0 = sum(r.step_seconds for r in base_steady) / len(base_steady)
    e0 = sum(r.estimate for r in base_steady) / len(base_steady)
    out = []
    rates = dict(cluster.rates)
    applied = 0
    events = list(trace.events)
    for label, recs in segs:
        start = recs[0].iteration
        while applied < len(events) and events[applied].iteration <= start:
            rates[events[applied].gpu] = events[applied].rate
            applied += 1
        steady = steady_records(recs)
        if not steady:
            continue
        mean = sum(r.step_seconds for r in steady) / len(steady)
        est = sum(r.estimate for r in steady) / len(steady)
        stragglers = [x for x in rates.values() if x != 1.0]
        out.append(SituationSummary(label, mean, est, mean / t0, est / e0,
                                    theoretic_optimum_ratio(len(rates), stragglers), len(steady)))
    return out


def summary_csv(rows: list[SituationSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["situation", "mean_seconds", "mean_estimate", "R_actual", "R_est", "R_opt", "steady_iterations"])
    for r in rows:
        w.writerow([r.label, f"{r.mean_seconds:.6f}", f"{r.mean_estimate:.6f}", f"{r.actual_ratio:.4f}",
                    f"{r.estimated_ratio:.4f}", f"{r.optimum_ratio:.4f}", r.steady_iterations])
    return buf.getvalue()
