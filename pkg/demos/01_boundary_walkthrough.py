"""
A policy boundary, step by step
===============================

32 replicas, 8 microbatches each, so every committed iteration sums a
global batch of exactly 256. We kill one major mid-reduce and watch the
survivors stretch the iteration to land on 256 anyway, then kill the new
minor one iteration later and watch a spare absorb it with no boundary
at all.
"""

import numpy as np

from steadybatch import (ExperimentConfig, FailureSchedule, GenerationSpec,
                         InjectionPoint, ScheduleEntry, run_experiment)

config = ExperimentConfig(
    w_init=32, g_init=8, iterations=4, k_buckets=4, dim=4,
    model_kind="constant", stream_seed=7, policy="static")

# iteration 1: replica 5 (a major) dies inside the reduce of bucket 1.
# iteration 2: replica 29 dies inside bucket 0. By then the layout has
# advanced, so 29 is the minor and a minor-spare is standing by.
schedule = FailureSchedule(
    GenerationSpec(w_init=32, ranks_per_replica=8, k_buckets=4,
                   seed=0, count=2, step_lo=1, step_hi=3),
    [ScheduleEntry(1, 5, 0, InjectionPoint("during_sync", 1)),
     ScheduleEntry(2, 29, 3, InjectionPoint("during_sync", 0))])

res = run_experiment(config, schedule)

print("batch B = w_init * g_init =", config.w_init * config.g_init)
print()

for row in res.rows:
    names = dict(iteration="t", w_cur="W", g_cur="G", contrib_total="total")
    head = "  ".join("%s=%s" % (v, row[k]) for k, v in names.items())
    print(head, " boundary" if row["boundary"] else "")
    for ev in row["events"]:
        if ev["at_boundary"]:
            # the survivors had banked ev["contrib"] microbatches when the
            # death surfaced; each one owes ceil((B - C) / W) extra rounds,
            # and n_bdry of them get to skip the last round so the total
            # lands exactly on B.
            print("   death of %d at the boundary: C_cur=%d, G_ext=%d,"
                  " n_bdry=%d" % (ev["failed"][0], ev["contrib"],
                                  ev["g_ext"], ev["n_bdry"]))
        else:
            print("   death of %d absorbed by promotion: %s"
                  % (ev["failed"][0], ev["promoted"]))

print()

# The boundary iteration reports the layout the policy advanced to, so the
# row where the death happened already shows what the next iteration runs.
r1 = res.rows[1]
roles = [role for _, role in r1["roles"]]
print("layout after the boundary: %d majors, %d minor, %d major-spare,"
      " %d minor-spare, G=%d"
      % (roles.count("major"), roles.count("minor"),
         roles.count("major_spare"), roles.count("minor_spare"),
         r1["g_cur"]))

# 28 majors * 9 + 1 minor * 4 = 256 again. The promoted ex-spare in
# iteration 2 picks up the dead minor's quota of 4.
r2 = res.rows[2]
contrib = dict(tuple(p) for p in r2["contributions"])
print("iteration 2 quotas:", sorted(contrib.values()))
print("promoted replica 31 contributes", contrib[31])

totals = [row["contrib_total"] for row in res.rows]
assert totals == [256, 256, 256, 256], totals
print()
print("every committed iteration summed exactly", totals[0], "microbatches")
