"""Plan the 110B model on 64 GPUs under three stragglers and the 32B model under a slow node.

Run with ``python demos/case_study.py``.
"""
from straggler_planner.cli import plan_table
from straggler_planner.planner import plan, uniform_plan
from straggler_planner.scenarios import case_110b_s4, case_32b_s5
from straggler_planner.simulator import estimated_step_seconds, live_step_seconds


def show(title, task, cluster):
    report = plan(cluster, task)
    p = report.plan
    base = uniform_plan(cluster.with_rates({}), task)
    print(f"== {title} ({report.wall_seconds:.1f} s to plan)")
    print(plan_table(p), end="")
    print(f"simulated step: {live_step_seconds(p, cluster.rates, task):.2f}   "
          f"healthy layout under the same stragglers: {estimated_step_seconds(base, cluster.rates, task):.2f} "
          f"(estimate)\n")


if __name__ == "__main__":
    show("110B, S4", *case_110b_s4())
    show("32B, S5", *case_32b_s5())
