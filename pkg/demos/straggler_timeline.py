"""Simulate the re-planning loop over the six standard straggler situations.

Prints the per-situation slowdown summary and writes the iteration timeline to
``timeline.csv`` in the current directory.  Run with
``python demos/straggler_timeline.py [32b|110b]``.
"""
import sys

from straggler_planner.scenarios import cluster, task_110b, task_32b
from straggler_planner.simulator import SimConfig, simulate, summarize
from straggler_planner.traces import gen_trace

SITUATIONS = ["normal", "S1", "S2", "S3", "S4", "S5", "S6", "normal"]


def main(model="32b"):
    task, nodes = (task_110b(), 8) if model == "110b" else (task_32b(), 4)
    cl = cluster(nodes)
    trace = gen_trace(SITUATIONS, dwell=30, align=10)
    timeline = simulate(task, cl, trace, SimConfig())
    print(f"{model}: {len(timeline.replans)} re-plans, {len(timeline.migrations)} migrations")
    print(f"{'situation':10s} {'R_actual':>9s} {'R_est':>7s} {'R_opt':>7s}")
    for r in summarize(timeline, trace, cl):
        print(f"{r.label:10s} {r.actual_ratio:9.4f} {r.estimated_ratio:7.4f} {r.optimum_ratio:7.4f}")
    with open("timeline.csv", "w") as f:
        f.write(timeline.to_csv())


if __name__ == "__main__":
    main(*sys.argv[1:])
