"""Deterministic simulator and protocol library for forward recovery in
synchronous data-parallel training.

Three cooperating layers keep the optimizer step identical to the failure-free
run while replicas crash mid-iteration: fault-aware collectives that shrink
the group and agree on a failure record, epoch-tagged gradient snapshots that
rewind and re-reduce work tainted by a membership change, and a workload
policy that keeps every committed iteration at exactly B = W_init * G_init
microbatches.
"""

from .buckets import (
    BucketLedger,
    GradientBucket,
    RestoreMode,
    RestoreOutcome,
    RestoreOutcomeKind,
    classify_stale,
    gradient_restoration,
    make_ledger,
    snapshot_and_tag,
)
from .comm import (
    Communicator,
    EmptyMembership,
    FailureRecord,
    NoSpareAvailable,
    ReplicaRole,
    WorkResult,
    WorkStatus,
    designate_boundary_minors,
    elect_promotion,
)
from .policy import (
    InvariantViolation,
    PolicyDecision,
    PolicyState,
    adaptive_policy_adjustment,
    assign_roles,
    contribution_quota,
    initial_state,
    policy_adjustment,
    policy_advancement,
)
from .trainer import (
    AllReplicasDead,
    DataStream,
    IterationOutcome,
    ReplicaState,
    ToyModel,
    example_loss,
    per_example_gradient,
    run_iteration,
)
from .sim import (
    CostModel,
    ExperimentConfig,
    ExperimentResult,
    FailureSchedule,
    GenerationSpec,
    InjectionPoint,
    Injector,
    InvalidSpec,
    ScheduleEntry,
    generate_schedule,
    load_schedule,
    read_metrics,
    run_experiment,
    run_reference,
    save_schedule,
    write_metrics,
)

__version__ = "0.1.0"
