"""Simulated fault-tolerant cross-replica communicator.

Implements the detect/repair/record/reduce collective and the barrier-like
consensus over a shrinkable membership with a monotone world epoch. Failures
are crash-stop: the harness marks a replica dead and the next collective on
the communicator observes it. All collectives are atomic global rounds here,
one call covers every member and returns the single result all survivors
share, which is what makes the agreement property hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np


class ReplicaRole(Enum):
    MAJOR = "major"
    MINOR = "minor"
    MAJOR_SPARE = "major_spare"
    MINOR_SPARE = "minor_spare"
    BOUNDARY_MINOR = "boundary_minor"


# which spare kind fills a vacancy of a given contributor role
SPARE_FOR = {
    ReplicaRole.MAJOR: ReplicaRole.MAJOR_SPARE,
    ReplicaRole.MINOR: ReplicaRole.MINOR_SPARE,
}

SPARE_ROLES = (ReplicaRole.MAJOR_SPARE, ReplicaRole.MINOR_SPARE)


class WorkStatus(Enum):
    SUCCESS = "success"
    NOOP = "noop"
    FAILURE = "failure"


class EmptyMembership(RuntimeError):
    """Every replica is dead; the job cannot continue."""


class NoSpareAvailable(RuntimeError):
    """No surviving spare of the required kind; the caller should have taken
    the boundary branch."""


@dataclass(frozen=True)
class FailureRecord:
    """Collectively agreed view of one failure event (possibly multi-death).

    role_counts is the surviving population per role after any promotion,
    ordered (n_maj, n_min, n_ms, n_mi, n_bm). contrib is the census of
    microbatches already committed by survivors this iteration, with the
    regular and boundary-pass parts also reported separately.
    """

    failed_replicas: frozenset
    role_counts: Tuple[int, int, int, int, int]
    contrib: int
    contrib_regular: int
    contrib_boundary: int
    at_boundary: bool
    epoch_after: int
    promotions: Tuple[Tuple[int, ReplicaRole], ...] = ()


@dataclass(frozen=True)
class WorkResult:
    status: WorkStatus
    record: Optional[FailureRecord] = None
    reduced_epoch: Optional[int] = None


class Communicator:
    """Shrinkable replica group with epoch, latches and per-replica registers."""

    def __init__(self, members: Iterable[int],
                 roles: Optional[Dict[int, ReplicaRole]] = None):
        self.members: List[int] = sorted(members)
        if not self.members:
            raise EmptyMembership("cannot create a communicator with no members")
        self.epoch: int = 0
        self.quiesced: bool = False
        # set while the current iteration is a boundary pass; during a pass
        # spares are real contributors and nobody is zeroed at reduce time
        self.boundary_latch: bool = False
        if roles is None:
            roles = {r: ReplicaRole.MAJOR for r in self.members}
        self.roles: Dict[int, ReplicaRole] = dict(roles)
        self.contrib_regular: Dict[int, int] = {r: 0 for r in self.members}
        self.contrib_boundary: Dict[int, int] = {r: 0 for r in self.members}
        self.targets: Dict[int, int] = {r: 0 for r in self.members}
        # original roles of currently designated boundary minors
        self.prior_roles: Dict[int, ReplicaRole] = {}
        self._pending_dead: set = set()

    # ---- membership and registers ----

    def mark_dead(self, replica: int) -> None:
        """Crash-stop a replica; visible at the next collective."""
        if replica in self.members:
            self._pending_dead.add(replica)

    def reset_iteration(self) -> None:
        for r in self.members:
            self.contrib_regular[r] = 0
            self.contrib_boundary[r] = 0

    def census_contrib(self) -> Tuple[int, int]:
        reg = sum(self.contrib_regular[r] for r in self.members)
        bdy = sum(self.contrib_boundary[r] for r in self.members)
        return reg, bdy

    def census_roles(self) -> Tuple[int, int, int, int, int]:
        counts = {role: 0 for role in ReplicaRole}
        for r in self.members:
            counts[self.roles[r]] += 1
        return (counts[ReplicaRole.MAJOR], counts[ReplicaRole.MINOR],
                counts[ReplicaRole.MAJOR_SPARE], counts[ReplicaRole.MINOR_SPARE],
                counts[ReplicaRole.BOUNDARY_MINOR])

    # ---- detect / repair / record ----

    def _detect_and_record(self) -> Optional[FailureRecord]:
        dead = sorted(self._pending_dead & set(self.members))
        if not dead:
            return None
        dead_roles = {r: self.roles[r] for r in dead}
        # Repair: shrink the membership and bump the world epoch.
        self.members = [r for r in self.members if r not in dead_roles]
        self._pending_dead -= set(dead)
        for r in dead:
            self.roles.pop(r, None)
            self.contrib_regular.pop(r, None)
            self.contrib_boundary.pop(r, None)
            self.targets.pop(r, None)
            self.prior_roles.pop(r, None)
        if not self.members:
            raise EmptyMembership("all replicas dead")
        self.epoch += 1
        # Record: boundary verdict evaluated per role over the whole failed
        # set, against the spares that actually survived.
        failed_majors = sum(1 for ro in dead_roles.values() if ro is ReplicaRole.MAJOR)
        failed_minors = sum(1 for ro in dead_roles.values() if ro is ReplicaRole.MINOR)
        _, _, n_ms, n_mi, _ = self.census_roles()
        if self.boundary_latch:
            at_boundary = True  # any death during a boundary pass stacks
        else:
            at_boundary = failed_majors > n_ms or failed_minors > n_mi
        promotions: Tuple[Tuple[int, ReplicaRole], ...] = ()
        if not at_boundary:
            for r in dead:
                vacated = dead_roles[r]
                if vacated in SPARE_FOR:
                    chosen = elect_promotion(self, vacated)
                    promotions += ((chosen, vacated),)
        reg, bdy = self.census_contrib()
        return FailureRecord(
            failed_replicas=frozenset(dead),
            role_counts=self.census_roles(),
            contrib=reg + bdy,
            contrib_regular=reg,
            contrib_boundary=bdy,
            at_boundary=at_boundary,
            epoch_after=self.epoch,
            promotions=promotions,
        )

    # ---- collectives ----

    def ulfm_allreduce(self, views: Mapping[int, np.ndarray]) -> WorkResult:
        """Fault-aware sum all-reduce over one bucket.

        views maps every live member to its local partial sum. On SUCCESS each
        member's view is overwritten with the identical elementwise sum
        (ascending replica id, pairwise left fold). On FAILURE the agreed
        record is returned and no view is touched. Spare contributions are
        zeroed virtually at reduce time outside boundary passes; their buffers
        keep the accumulated values so promotion can rewind into them.
        """
        if self.quiesced:
            return WorkResult(WorkStatus.NOOP)
        record = self._detect_and_record()
        if record is not None:
            return WorkResult(WorkStatus.FAILURE, record=record)
        total: Optional[np.ndarray] = None
        for r in self.members:
            if self.roles[r] in SPARE_ROLES and not self.boundary_latch:
                continue
            vec = views[r]
            total = vec.copy() if total is None else total + vec
        if total is None:
            total = np.zeros_like(views[self.members[0]])
        for r in self.members:
            views[r][:] = total
        return WorkResult(WorkStatus.SUCCESS, reduced_epoch=self.epoch)

    def ulfm_consensus(self) -> WorkResult:
        """Barrier-like failure detection with no data motion.

        Unlike the all-reduce this never no-ops on the quiesce latch: deaths
        must surface even while the iteration's remaining reductions are
        quiesced, otherwise a post-reduce failure would go unrecorded.
        """
        record = self._detect_and_record()
        if record is not None:
            return WorkResult(WorkStatus.FAILURE, record=record)
        return WorkResult(WorkStatus.SUCCESS, reduced_epoch=self.epoch)


def elect_promotion(comm: Communicator, vacated_role: ReplicaRole) -> int:
    """Promote the lowest-indexed surviving spare of the matching kind."""
    kind = SPARE_FOR.get(vacated_role)
    if kind is None:
        raise ValueError("only major/minor vacancies can be filled, got %r"
                         % (vacated_role,))
    for r in comm.members:
        if comm.roles[r] is kind:
            comm.roles[r] = vacated_role
            return r
    raise NoSpareAvailable("no surviving %s to fill a %s vacancy"
                           % (kind.value, vacated_role.value))


def designate_boundary_minors(comm: Communicator, n_bdry: int) -> List[int]:
    """Mark the n_bdry highest-indexed survivors as boundary minors.

    Any previous designation is undone first; a stacked boundary re-issues
    the split from scratch.
    """
    for r, prior in comm.prior_roles.items():
        if r in comm.roles:
            comm.roles[r] = prior
    comm.prior_roles.clear()
    chosen = sorted(comm.members)[len(comm.members) - n_bdry:] if n_bdry > 0 else []
    for r in chosen:
        comm.prior_roles[r] = comm.roles[r]
        comm.roles[r] = ReplicaRole.BOUNDARY_MINOR
    return chosen
