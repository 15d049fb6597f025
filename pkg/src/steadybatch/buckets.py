"""Gradient bucket bookkeeping: snapshots, epoch tags, staleness, restoration.

Each replica's flat gradient is split into K contiguous bucket views. Before
every reduce a bucket's pre-reduce state is snapshotted and tagged with the
world epoch; a repair bumps the epoch, which is exactly what makes the buckets
reduced under the old membership classify as stale and get rewound.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Set

import numpy as np

from .comm import SPARE_ROLES, Communicator, ReplicaRole, WorkResult, WorkStatus


class RestoreMode(Enum):
    SKIP = "skip"
    BLOCKING = "blocking"
    NON_BLOCKING = "non_blocking"


@dataclass
class GradientBucket:
    index: int
    data: np.ndarray  # view into the replica's flat gradient
    snapshot: Optional[np.ndarray] = None
    epoch_tag: Optional[int] = None
    reduced_under: Optional[int] = None


class BucketLedger:
    """Ordered buckets of one replica plus the pending-restore latch."""

    def __init__(self, buckets: List[GradientBucket]):
        assert [b.index for b in buckets] == list(range(len(buckets)))
        self.buckets = buckets
        self.pending_restore = RestoreMode.SKIP


def make_ledger(flat: np.ndarray, k: int) -> BucketLedger:
    """Partition a flat gradient into k contiguous slices, last takes the rest.

    Zero-length slices are valid (they occur when k exceeds the dimension).
    """
    if k < 1:
        raise ValueError("bucket count must be >= 1")
    d = flat.shape[0]
    base = d // k
    buckets = []
    for i in range(k):
        lo = i * base
        hi = (i + 1) * base if i < k - 1 else d
        buckets.append(GradientBucket(index=i, data=flat[lo:hi]))
    return BucketLedger(buckets)


def snapshot_and_tag(ledger: BucketLedger, index: int, epoch: int) -> None:
    """Deep-copy the bucket's pre-reduce state and tag it with the epoch.

    Snapshotting again in the same iteration (a boundary re-pass) overwrites
    the old snapshot and tag.
    """
    b = ledger.buckets[index]
    b.snapshot = b.data.copy()
    b.epoch_tag = epoch


def classify_stale(ledger: BucketLedger, current: int) -> Set[int]:
    """Indices whose snapshot tag predates the current epoch. Pure."""
    return {b.index for b in ledger.buckets
            if b.epoch_tag is not None and b.epoch_tag < current}


def invalidate_reduced_marks(ledger: BucketLedger) -> None:
    for b in ledger.buckets:
        b.reduced_under = None


def clear_bookkeeping(ledger: BucketLedger) -> None:
    """Drop snapshots, tags and reduce marks; the next pass repopulates them."""
    for b in ledger.buckets:
        b.snapshot = None
        b.epoch_tag = None
        b.reduced_under = None


class RestoreOutcomeKind(Enum):
    COMMITTED = "committed"
    REENTER_FAILURE_HANDLING = "reenter_failure_handling"


@dataclass
class RestoreOutcome:
    kind: RestoreOutcomeKind
    failing_work: Optional[WorkResult] = None
    rewound: int = 0  # stale-bucket rewind rounds performed (for the clock)


def gradient_restoration(ledgers: Dict[int, BucketLedger],
                         comm: Communicator) -> RestoreOutcome:
    """Apply the latched restore mode across all surviving replicas.

    Blocking: rewind every stale bucket to its snapshot and re-reduce it under
    the repaired world, marking reduced_under; a further failure during the
    re-reduce returns REENTER_FAILURE_HANDLING so the caller can run failure
    handling again and re-enter.

    NonBlocking (boundary): rewind stale buckets, discard the provisional
    buffers of unpromoted spares (their work was never admitted and the
    extension counts them as fresh contributors), clear all bookkeeping and
    lift the quiesce latch; the extension pass re-reduces everything.
    """
    live = {r: ledgers[r] for r in comm.members}
    modes = {led.pending_restore for led in live.values()}
    assert len(modes) == 1, "restore latch diverged across replicas"
    mode = modes.pop()
    if mode is RestoreMode.SKIP:
        return RestoreOutcome(RestoreOutcomeKind.COMMITTED)

    if mode is RestoreMode.NON_BLOCKING:
        current = comm.epoch
        rewound = 0
        first = True
        for r in comm.members:
            led = live[r]
            stale = classify_stale(led, current)
            if first:
                rewound = len(stale)  # lockstep across replicas, count once
                first = False
            for idx in sorted(stale):
                b = led.buckets[idx]
                b.data[:] = b.snapshot
            # the spare check must look through a boundary-minor designation
            # to the underlying role: spares sit at the highest ids, so they
            # are the usual designees, and their unadmitted provisional work
            # must not leak into the extension pass
            role = comm.roles[r]
            if role is ReplicaRole.BOUNDARY_MINOR:
                role = comm.prior_roles.get(r, role)
            if (role in SPARE_ROLES
                    and comm.contrib_regular[r] == 0
                    and comm.contrib_boundary[r] == 0):
                for b in led.buckets:
                    b.data[:] = 0.0
            clear_bookkeeping(led)
            led.pending_restore = RestoreMode.SKIP
        comm.quiesced = False
        return RestoreOutcome(RestoreOutcomeKind.COMMITTED, rewound=rewound)

    # blocking
    stale_sets = [classify_stale(live[r], comm.epoch) for r in comm.members]
    stale = stale_sets[0]
    assert all(s == stale for s in stale_sets), "stale sets diverged"
    rewound = 0
    for idx in sorted(stale):
        for r in comm.members:
            b = live[r].buckets[idx]
            b.data[:] = b.snapshot
        rewound += 1
        work = comm.ulfm_allreduce({r: live[r].buckets[idx].data
                                    for r in comm.members})
        if work.status is WorkStatus.FAILURE:
            return RestoreOutcome(RestoreOutcomeKind.REENTER_FAILURE_HANDLING,
                                  failing_work=work, rewound=rewound)
        assert work.status is WorkStatus.SUCCESS
        for r in comm.members:
            live[r].buckets[idx].reduced_under = work.reduced_epoch
    for r in comm.members:
        live[r].pending_restore = RestoreMode.SKIP
    comm.quiesced = False
    return RestoreOutcome(RestoreOutcomeKind.COMMITTED, rewound=rewound)
