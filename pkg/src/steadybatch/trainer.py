"""Per-replica iteration state machine over a toy model and partitioned stream.

One call to run_iteration drives every surviving replica through the same
lockstep rounds: local microbatch accumulation, the per-bucket snapshot/reduce
cascade, the consensus gate, failure handling with restoration, a possible
boundary extension, and the optimizer commit. Failures are observed only at
collectives, so by the time a failure surfaces all rounds granted so far have
executed; that property keeps the extension accounting simple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .buckets import (
    RestoreMode,
    RestoreOutcomeKind,
    clear_bookkeeping,
    gradient_restoration,
    invalidate_reduced_marks,
    make_ledger,
    snapshot_and_tag,
)
from .comm import (
    Communicator,
    ReplicaRole,
    SPARE_ROLES,
    WorkResult,
    WorkStatus,
    designate_boundary_minors,
)
from .policy import (
    InvariantViolation,
    PolicyState,
    adaptive_policy_adjustment,
    assign_roles,
    contribution_quota,
    policy_adjustment,
    policy_advancement,
)

# injection phases, shared with the failure schedule
BEFORE_SYNC = "before_sync"
DURING_SYNC = "during_sync"
AFTER_SYNC = "after_sync"


class AllReplicasDead(RuntimeError):
    """No replica survives to run the iteration."""


class NullInjector:
    """Injector that never kills anything (the failure-free reference)."""

    def fire(self, phase, bucket=None):
        return []


# ---- deterministic example synthesis ----

_MASK64 = (1 << 64) - 1
_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xBF58476D1CE4E5B9)
_C3 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _C2
    z = (z ^ (z >> np.uint64(27))) * _C3
    return z ^ (z >> np.uint64(31))


def _unit_lanes(seed: int, index: int, salt: int, n: int) -> np.ndarray:
    """n floats in [0, 1), a pure function of (seed, index, salt, lane)."""
    base = (seed * 0x9E3779B97F4A7C15
            + index * 0xBF58476D1CE4E5B9
            + salt * 0x94D049BB133111EB) & _MASK64
    lanes = np.arange(n, dtype=np.uint64)
    z = _mix64(np.uint64(base) + lanes * _C1)
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _symmetric_lanes(seed, index, salt, n):
    return _unit_lanes(seed, index, salt, n) * 2.0 - 1.0


MODEL_KINDS = ("linear", "constant")


@dataclass
class ToyModel:
    kind: str
    params: np.ndarray

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError("unknown model kind %r" % (self.kind,))


def per_example_gradient(model: ToyModel, example) -> np.ndarray:
    """Exact analytic per-example gradient.

    linear: gradient of 0.5 * (theta . x - y)^2, i.e. (theta . x - y) * x.
    constant: the example's x vector itself, independent of theta.
    """
    x, y = example
    if model.kind == "linear":
        return (model.params @ x - y) * x
    return x


def example_loss(model: ToyModel, example) -> float:
    """Reporting loss: squared error for linear, the linear functional
    theta . x for constant (whose gradient is exactly x)."""
    x, y = example
    if model.kind == "linear":
        r = model.params @ x - y
        return float(r * r)
    return float(model.params @ x)


def _grad_and_loss(model: ToyModel, example):
    # one residual evaluation covers both, for the accumulation hot path
    x, y = example
    if model.kind == "linear":
        r = model.params @ x - y
        return r * x, float(r * r)
    return x, float(model.params @ x)


class DataStream:
    """Unbounded synthetic stream; example at index i is a pure function of
    (seed, i). Replica r owns the slice {i : i mod w_init == r}; slices are
    disjoint and a dead replica's slice is never consumed again.

    kind "linear" draws x uniform in [-1, 1)^dim with y = w* . x + 0.1 * noise
    for a hidden w*. kind "constant" makes every example identical: a fixed
    integer-valued vector g0, so sums of any B examples are exact in float64.
    """

    def __init__(self, seed: int, w_init: int, dim: int, kind: str = "linear"):
        if kind not in ("linear", "constant"):
            raise ValueError("unknown stream kind %r" % (kind,))
        self.seed = int(seed)
        self.w_init = int(w_init)
        self.dim = int(dim)
        self.kind = kind
        if kind == "constant":
            g0 = np.floor(_unit_lanes(self.seed, 0, 4, dim) * 7.0) - 3.0
            if not g0.any():
                g0[0] = 1.0
            self._g0 = g0
        else:
            self._wstar = _symmetric_lanes(self.seed, 0, 3, dim)

    def global_index(self, replica: int, cursor: int) -> int:
        return replica + self.w_init * cursor

    def example(self, i: int):
        if self.kind == "constant":
            return self._g0, 0.0
        lanes = _symmetric_lanes(self.seed, i, 1, self.dim + 1)
        x = lanes[: self.dim]
        y = float(self._wstar @ x + 0.1 * lanes[self.dim])
        return x, y


class ReplicaState:
    """One replica: its model copy, flat gradient buffer, bucket ledger,
    stream cursor and per-iteration contribution bookkeeping."""

    def __init__(self, rid: int, model: ToyModel, k_buckets: int):
        self.rid = rid
        self.alive = True
        self.model = model
        self.flat = np.zeros(model.params.shape[0], dtype=np.float64)
        self.ledger = make_ledger(self.flat, k_buckets)
        self.cursor = 0
        self.role = ReplicaRole.MAJOR
        self.contrib_indices: List[int] = []
        self.provisional_indices: List[int] = []
        self.loss_admitted = 0.0
        self.loss_provisional = 0.0
        self.rem_regular = 0
        self.rem_ext = 0

    def begin_iteration(self, role: ReplicaRole, executed_quota: int):
        self.role = role
        self.flat[:] = 0.0
        clear_bookkeeping(self.ledger)
        self.ledger.pending_restore = RestoreMode.SKIP
        self.contrib_indices = []
        self.provisional_indices = []
        self.loss_admitted = 0.0
        self.loss_provisional = 0.0
        self.rem_regular = executed_quota
        self.rem_ext = 0

    def execute_microbatch(self, stream: DataStream, comm: Communicator):
        """Run one lockstep round: always consume the next slice index;
        accumulate it only while a quota remains, otherwise the gradient is
        computed and discarded (a zeroed microbatch)."""
        i = stream.global_index(self.rid, self.cursor)
        self.cursor += 1
        ex = stream.example(i)
        if self.rem_regular > 0:
            self.rem_regular -= 1
            grad, loss = _grad_and_loss(self.model, ex)
            self.flat += grad
            if self.role in SPARE_ROLES:
                # executed on the counterpart's quota but zeroed at reduce
                # time; admitted only if this replica gets promoted
                self.provisional_indices.append(i)
                self.loss_provisional += loss
            else:
                self.contrib_indices.append(i)
                self.loss_admitted += loss
                comm.contrib_regular[self.rid] += 1
        elif self.rem_ext > 0:
            self.rem_ext -= 1
            grad, loss = _grad_and_loss(self.model, ex)
            self.flat += grad
            self.contrib_indices.append(i)
            self.loss_admitted += loss
            comm.contrib_boundary[self.rid] += 1
        # else: executed and zeroed, the index is consumed and dropped


@dataclass
class IterationOutcome:
    iteration: int
    loss: float
    committed_update: np.ndarray
    contributions: Dict[int, int]
    contrib_total: int
    contrib_regular: int
    contrib_boundary: int
    final_epoch: int
    w_cur: int
    roles: Dict[int, str]
    state: PolicyState
    events: List[dict] = field(default_factory=list)
    admitted_indices: frozenset = frozenset()
    bucket_epochs: List[Optional[int]] = field(default_factory=list)
    rounds: int = 0
    passes: int = 0
    reduces: int = 0
    rewinds: int = 0
    boundary_crossed: bool = False


def _kill(victims, replicas, comm):
    for rid in victims:
        rep = replicas.get(rid)
        if rep is not None and rep.alive:
            rep.alive = False
            comm.mark_dead(rid)


def _apply_promotions(record, replicas, comm):
    """Admit a promoted spare's provisional work into the contribution log."""
    for rid, new_role in record.promotions:
        rep = replicas[rid]
        rep.contrib_indices.extend(rep.provisional_indices)
        rep.loss_admitted += rep.loss_provisional
        comm.contrib_regular[rid] += len(rep.provisional_indices)
        rep.provisional_indices = []
        rep.loss_provisional = 0.0
        rep.role = new_role


def handle_work_failure(work: WorkResult, replicas, comm: Communicator,
                        state: PolicyState, policy_kind: str,
                        events: List[dict]):
    """Alg-style failure handling: promote, decide, latch, maybe quiesce.

    Returns (decision, grants) where grants maps surviving replica id to the
    extra microbatches it owes in the extension pass (empty off-boundary).
    """
    record = work.record
    _apply_promotions(record, replicas, comm)
    if policy_kind == "adaptive":
        decision = adaptive_policy_adjustment(record)
        state.w_cur = len(comm.members)
        state.n_maj = state.w_cur
        state.n_min = state.n_ms = state.n_mi = 0
    else:
        decision = policy_adjustment(state, record)
    for rid in comm.members:
        replicas[rid].ledger.pending_restore = decision.restore_mode
        # the new epoch makes earlier reductions stale
        invalidate_reduced_marks(replicas[rid].ledger)
    grants: Dict[int, int] = {}
    if decision.at_boundary:
        comm.quiesced = True
        comm.boundary_latch = True
        chosen = set(designate_boundary_minors(comm, decision.n_bdry))
        for rid in comm.members:
            grants[rid] = decision.g_ext - 1 if rid in chosen else decision.g_ext
            comm.targets[rid] = comm.targets.get(rid, 0) + grants[rid]
    events.append({
        "failed": sorted(record.failed_replicas),
        "contrib": record.contrib,
        "at_boundary": decision.at_boundary,
        "g_ext": decision.g_ext,
        "n_bdry": decision.n_bdry,
        "promoted": [[rid, role.value] for rid, role in decision.promoted],
        "epoch_after": record.epoch_after,
    })
    return decision, grants


_EXEC_QUOTA_ROLE = {
    ReplicaRole.MAJOR: "g",
    ReplicaRole.MAJOR_SPARE: "g",
    ReplicaRole.MINOR: "r",
    ReplicaRole.MINOR_SPARE: "r",
}


def run_iteration(iteration: int, replicas: Dict[int, ReplicaState],
                  comm: Communicator, state: PolicyState, stream: DataStream,
                  injector=None, policy_kind: str = "static",
                  lr: float = 0.05) -> IterationOutcome:
    """Run one full training iteration and commit the optimizer step.

    Mutates replicas, comm and the models; returns the outcome whose .state
    carries the (possibly advanced) policy state for the next iteration.
    """
    if injector is None:
        injector = NullInjector()
    if policy_kind not in ("static", "adaptive"):
        raise ValueError("unknown policy kind %r" % (policy_kind,))

    _kill(injector.fire(BEFORE_SYNC), replicas, comm)
    if not any(replicas[rid].alive for rid in comm.members):
        raise AllReplicasDead("no replica survives iteration %d" % iteration)

    comm.reset_iteration()
    b = state.b
    for rid in comm.members:
        rep = replicas[rid]
        if not rep.alive:
            continue
        role = comm.roles[rid]
        executed = state.g_cur if _EXEC_QUOTA_ROLE[role] == "g" else state.r_cur
        rep.begin_iteration(role, executed)
        comm.targets[rid] = contribution_quota(state, role)

    k_buckets = len(next(iter(replicas.values())).ledger.buckets)
    p_major = state.g_cur
    m = 0
    rounds = passes = reduces = rewinds = 0
    events: List[dict] = []
    boundary_crossed = False
    fired_after_sync = False
    touched_buckets: set = set()

    def _absorb(decision, grants):
        nonlocal p_major, boundary_crossed
        if decision.at_boundary:
            boundary_crossed = True
            p_major = m + decision.g_ext
            # stacked boundaries re-issue grants: replace, never add
            for rid, extra in grants.items():
                replicas[rid].rem_ext = extra

    while True:
        while m < p_major:
            for rid in comm.members:
                rep = replicas[rid]
                if rep.alive:
                    rep.execute_microbatch(stream, comm)
            m += 1
            rounds += 1

        passes += 1
        for k in range(k_buckets):
            if k not in touched_buckets:
                touched_buckets.add(k)
                _kill(injector.fire(DURING_SYNC, k), replicas, comm)
            if not comm.quiesced:
                for rid in comm.members:
                    if replicas[rid].alive:
                        snapshot_and_tag(replicas[rid].ledger, k, comm.epoch)
            views = {rid: replicas[rid].ledger.buckets[k].data
                     for rid in comm.members if replicas[rid].alive}
            work = comm.ulfm_allreduce(views)
            if work.status is WorkStatus.SUCCESS:
                reduces += 1
                for rid in comm.members:
                    replicas[rid].ledger.buckets[k].reduced_under = work.reduced_epoch
            elif work.status is WorkStatus.FAILURE:
                _absorb(*handle_work_failure(work, replicas, comm, state,
                                             policy_kind, events))

        if not fired_after_sync:
            fired_after_sync = True
            _kill(injector.fire(AFTER_SYNC), replicas, comm)
        work = comm.ulfm_consensus()
        if work.status is WorkStatus.FAILURE:
            _absorb(*handle_work_failure(work, replicas, comm, state,
                                         policy_kind, events))

        while True:
            ledgers = {rid: replicas[rid].ledger for rid in comm.members}
            out = gradient_restoration(ledgers, comm)
            rewinds += out.rewound
            if out.kind is RestoreOutcomeKind.COMMITTED:
                break
            _absorb(*handle_work_failure(out.failing_work, replicas, comm,
                                         state, policy_kind, events))

        if m >= p_major:
            break

    # ---- commit ----
    members = list(comm.members)
    survivors = [replicas[rid] for rid in members]
    reg, bdy = comm.census_contrib()
    total = reg + bdy
    admitted: List[int] = []
    for rep in survivors:
        admitted.extend(rep.contrib_indices)
    admitted_set = frozenset(admitted)

    if policy_kind == "static" and (total != b or len(admitted) != b
                                    or len(admitted_set) != b):
        raise InvariantViolation(
            "iteration %d committed %d microbatches (%d distinct), want %d"
            % (iteration, total, len(admitted_set), b))
    for rep in survivors:
        for bkt in rep.ledger.buckets:
            if bkt.reduced_under != comm.epoch:
                raise InvariantViolation(
                    "bucket %d of replica %d reduced under %r, world epoch %d"
                    % (bkt.index, rep.rid, bkt.reduced_under, comm.epoch))
    ref = survivors[0]
    for rep in survivors[1:]:
        if not np.array_equal(rep.flat, ref.flat):
            raise InvariantViolation("replica gradient buffers diverged")

    update = ref.flat / float(b)
    loss_sum = sum(rep.loss_admitted for rep in survivors)
    loss = loss_sum / float(total) if total else 0.0
    for rep in survivors:
        rep.model.params -= lr * (rep.flat / float(b))
    for rep in survivors[1:]:
        if not np.array_equal(rep.model.params, ref.model.params):
            raise InvariantViolation("replica parameters diverged after the step")

    contributions = {rid: comm.contrib_regular[rid] + comm.contrib_boundary[rid]
                     for rid in members}
    bucket_epochs = [bkt.reduced_under for bkt in ref.ledger.buckets]

    new_state = state
    if boundary_crossed:
        new_state = policy_advancement(state, w_cur=len(members))
        comm.boundary_latch = False
        comm.prior_roles.clear()
        comm.roles = assign_roles(new_state, members)
    roles = {rid: comm.roles[rid].value for rid in members}

    return IterationOutcome(
        iteration=iteration,
        loss=loss,
        committed_update=update.copy(),
        contributions=contributions,
        contrib_total=total,
        contrib_regular=reg,
        contrib_boundary=bdy,
        final_epoch=comm.epoch,
        w_cur=len(members),
        roles=roles,
        state=new_state,
        events=events,
        admitted_indices=admitted_set,
        bucket_epochs=bucket_epochs,
        rounds=rounds,
        passes=passes,
        reduces=reduces,
        rewinds=rewinds,
        boundary_crossed=boundary_crossed,
    )
