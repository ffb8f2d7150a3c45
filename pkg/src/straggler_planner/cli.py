"""Command-line entry point: plan, simulate, migrate, report and trace generation."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .domain import ClusterState, ConfigError, ParallelizationPlan, TaskSpec, dump_json, load_json
from .planner import PlanningError, plan
from .scenarios import PRESETS
from .sharding import Bandwidth, MigrationError, compile_migration
from .simulator import SimConfig, SimTimeline, simulate, summarize, summary_csv
from .traces import DEFAULT_LEVEL_RATES, StragglerTrace, gen_trace


def _load_task(args) -> TaskSpec:
    task = load_json(TaskSpec, args.task)
    if getattr(args, "gap_mib", None) is not None:
        task = dataclasses.replace(task, coefficients=dataclasses.replace(task.coefficients, gap_mib=args.gap_mib))
    if getattr(args, "dp", None) is not None:
        task = dataclasses.replace(task, dp_degree=args.dp)
    return task


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def plan_table(p: ParallelizationPlan) -> str:
    """Per-stage listing: one row per stage with its GPUs, TP size, layers and rate."""
    lines = [f"estimated step time: {p.estimated_seconds:.4f}  micro-batch size: {p.micro_batch_size}"]
    for i, pipe in enumerate(p.pipelines, start=1):
        lines.append(f"pipeline {i}: m = {pipe.micro_batches} ({pipe.depth} stages)")
        for j, s in enumerate(pipe.stages, start=1):
            gpus = ",".join(str(g) for g in s.group.members)
            lines.append(f"  stage {j}: tp={s.group.size:<2d} layers={s.layers:<3d} y={s.group.rate:.4f}  [{gpus}]")
    if p.removed:
        lines.append("removed: " + ", ".join(str(g) for g in sorted(p.removed)))
    return "\n".join(lines) + "\n"


def cmd_plan(args) -> int:
    task = _load_task(args)
    cluster = load_json(ClusterState, args.cluster)
    report = plan(cluster, task, explain=args.explain)
    sys.stdout.write(plan_table(report.plan))
    sys.stdout.write(f"planning wall time: {report.wall_seconds:.2f} s\n")
    if args.explain:
        sys.stdout.write(json.dumps(report.candidates, indent=2, default=str) + "\n")
    if args.out:
        dump_json(report.plan, args.out)
    return 0


def cmd_simulate(args) -> int:
    task = _load_task(args)
    cluster = load_json(ClusterState, args.cluster)
    trace = load_json(StragglerTrace, args.trace) if args.trace else StragglerTrace(iterations=args.iterations)
    config = SimConfig(iterations=args.iterations, threshold=args.threshold, probe_period=args.probe_period,
                       planning_seconds=args.planning_seconds, pack_size=args.pack_size, seed=args.seed)
    timeline = simulate(task, cluster, trace, config)
    for w in timeline.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write(timeline.to_csv(), args.out)
    return 0


def cmd_migrate(args) -> int:
    task = load_json(TaskSpec, args.task)
    old = load_json(ParallelizationPlan, args.old)
    new = load_json(ParallelizationPlan, args.new)
    failed = load_json(ClusterState, args.cluster).failed() if args.cluster else ()
    schedule = compile_migration(old, new, task.coefficients.state_mib_per_layer, args.pack_size,
                                 Bandwidth(), failed)
    _write(json.dumps(schedule.to_dict(), indent=2) + "\n", args.out)
    print(f"{len(schedule.batches)} batches, {schedule.mib:.1f} MiB, {schedule.seconds:.3f} s", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    cluster = load_json(ClusterState, args.cluster)
    trace = load_json(StragglerTrace, args.trace)
    timeline = SimTimeline.from_csv(Path(args.timeline).read_text())
    _write(summary_csv(summarize(timeline, trace, cluster)), args.out)
    return 0


def cmd_gen_trace(args) -> int:
    levels = dict(DEFAULT_LEVEL_RATES)
    for item in args.level or ():
        key, _, value = item.partition("=")
        try:
            levels[int(key)] = float(value)
        except ValueError:
            raise ConfigError(f"--level expects N=RATE, got {item!r}") from None
    trace = gen_trace(args.situations, args.dwell, levels, seed=args.seed, jitter=args.jitter,
                      noise=args.noise, gpus_per_node=args.gpus_per_node, align=args.align)
    _write(trace.dumps(), args.out)
    return 0


def cmd_scenario(args) -> int:
    task, cluster = PRESETS[args.name]()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(task, out / "task.json")
    dump_json(cluster, out / "cluster.json")
    print(f"wrote {out / 'task.json'} and {out / 'cluster.json'}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="straggler-planner", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def task_flags(p, needs_cluster=True):
        p.add_argument("--task", required=True, help="task JSON")
        p.add_argument("--cluster", required=needs_cluster, help="cluster JSON")
        p.add_argument("--dp", type=int, help="override the task's DP degree")
        p.add_argument("--gap-mib", type=float, help="per-GPU memory reserve in MiB (default 4096)")

    p = sub.add_parser("plan", help="plan one cluster state")
    task_flags(p)
    p.add_argument("--explain", action="store_true", help="print per-candidate diagnostics")
    p.add_argument("--out", "-o", help="write plan JSON here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run the re-planning loop over a straggler trace")
    task_flags(p)
    p.add_argument("--trace", help="trace JSON (default: no stragglers)")
    p.add_argument("--iterations", type=int, help="iterations to simulate (default: trace length)")
    p.add_argument("--threshold", type=float, default=0.05, help="relative rate change that triggers a re-plan")
    p.add_argument("--probe-period", type=int, default=10, help="iterations between standby probes")
    p.add_argument("--planning-seconds", type=float, default=1.0, help="simulated planning latency")
    p.add_argument("--pack-size", type=int, default=4, help="layers per migration batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", help="timeline CSV (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("migrate", help="compile the state migration between two plans")
    p.add_argument("--task", required=True, help="task JSON (per-layer state size)")
    p.add_argument("--old", required=True, help="current plan JSON")
    p.add_argument("--new", required=True, help="target plan JSON")
    p.add_argument("--cluster", help="cluster JSON; its failed GPUs are restored from checkpoint")
    p.add_argument("--pack-size", type=int, default=4, help="layers per migration batch")
    p.add_argument("--out", "-o", help="schedule JSON (default: stdout)")
    p.set_defaults(func=cmd_migrate)

    p = sub.add_parser("report", help="per-situation slowdown summary from a simulated timeline")
    p.add_argument("--timeline", required=True, help="timeline CSV written by 'simulate'")
    p.add_argument("--trace", required=True, help="the trace the timeline was simulated with")
    p.add_argument("--cluster", required=True, help="cluster JSON")
    p.add_argument("--out", "-o", help="summary CSV (default: stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-trace", help="write a trace visiting standard straggler situations")
    p.add_argument("situations", nargs="+", help="labels such as normal S1 ... S6")
    p.add_argument("--dwell", type=int, default=50, help="iterations per situation")
    p.add_argument("--level", action="append", metavar="N=RATE", help="override a level's rate")
    p.add_argument("--jitter", type=int, default=0, help="random +- change of each dwell")
    p.add_argument("--noise", type=float, default=0.0, help="relative measurement noise amplitude")
    p.add_argument("--gpus-per-node", type=int, default=8)
    p.add_argument("--align", type=int, default=10, help="round switch points up to this multiple")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", help="trace JSON (default: stdout)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("scenario", help="write task and cluster JSON for a built-in scenario")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PlanningError, MigrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
