"""Versatile workload policy: role layouts, boundary extension, advancement.

The policy keeps the committed microbatch count of every optimizer step equal
to B = W_init * G_init no matter how many replicas have died. A failure that a
spare can absorb changes nothing about quotas; a failure that exhausts the
spares of the failed role crosses a policy boundary, stretching the current
iteration by G_ext extra rounds so the total still lands exactly on B, and the
steady-state layout is rebalanced right after that iteration commits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .buckets import RestoreMode
from .comm import FailureRecord, ReplicaRole


class InvariantViolation(RuntimeError):
    """A bookkeeping invariant that must hold by construction was broken."""


@dataclass
class PolicyState:
    w_init: int
    g_init: int
    b: int
    w_cur: int
    g_cur: int
    r_cur: int = 0
    n_maj: int = 0
    n_min: int = 0
    n_ms: int = 0
    n_mi: int = 0
    at_boundary: bool = False
    g_ext: Optional[int] = None
    n_bdry: Optional[int] = None


@dataclass(frozen=True)
class PolicyDecision:
    restore_mode: RestoreMode
    should_quiesce: bool
    at_boundary: bool
    g_ext: Optional[int] = None
    n_bdry: Optional[int] = None
    promoted: Tuple[Tuple[int, ReplicaRole], ...] = ()


def extension_rounds(w_cur, contrib, b):
    """Smallest g >= 1 with contrib + w_cur * g >= b.

    Works elementwise on arrays as well as on plain ints, so sweeps can drive
    the exact production arithmetic in bulk.
    """
    return np.maximum(1, -((np.asarray(contrib) - b) // w_cur))


def boundary_minor_count(w_cur, contrib, b, g_ext):
    """How many replicas must contribute one extension round less so the
    iteration lands exactly on b. Elementwise like extension_rounds."""
    return contrib + w_cur * g_ext - b


def initial_state(w_init: int, g_init: int) -> PolicyState:
    """All replicas start as majors at the configured accumulation factor."""
    if w_init < 1 or g_init < 1:
        raise ValueError("w_init and g_init must be positive")
    return PolicyState(w_init=w_init, g_init=g_init, b=w_init * g_init,
                       w_cur=w_init, g_cur=g_init, r_cur=0,
                       n_maj=w_init, n_min=0, n_ms=0, n_mi=0)


def policy_adjustment(state: PolicyState, event: FailureRecord) -> PolicyDecision:
    """React to one failure record.

    Non-boundary: the spare was already promoted inside the collective's
    record phase, quotas stay, counts refresh, restoration is blocking.

    Boundary: compute the smallest extension G_ext >= 1 with
    C_cur + W_cur * G_ext >= B, and the number of boundary minors that must
    contribute one round less so the total lands exactly on B. C_cur already
    merges any boundary-pass contributions committed earlier this iteration,
    which is what makes stacked boundaries fold transparently.
    """
    n_maj, n_min, n_ms, n_mi, n_bm = event.role_counts
    survivors = n_maj + n_min + n_ms + n_mi + n_bm
    state.w_cur = survivors
    if not event.at_boundary:
        state.n_maj, state.n_min = n_maj, n_min
        state.n_ms, state.n_mi = n_ms, n_mi
        return PolicyDecision(RestoreMode.BLOCKING, should_quiesce=False,
                              at_boundary=False, promoted=event.promotions)
    c_cur = event.contrib
    if c_cur > state.b:
        raise InvariantViolation(
            "contribution census %d exceeds the batch %d" % (c_cur, state.b))
    g_ext = int(extension_rounds(survivors, c_cur, state.b))
    n_bdry = int(boundary_minor_count(survivors, c_cur, state.b, g_ext))
    state.at_boundary = True
    state.g_ext = g_ext
    state.n_bdry = n_bdry
    return PolicyDecision(RestoreMode.NON_BLOCKING, should_quiesce=True,
                          at_boundary=True, g_ext=g_ext, n_bdry=n_bdry)


def policy_advancement(state: PolicyState, w_cur: Optional[int] = None) -> PolicyState:
    """Recompute the steady-state layout after a boundary iteration commits.

    G_cur becomes the smallest factor whose full-rate capacity covers B, the
    remainder goes to a single minor, and the replicas left over become
    spares: one minor-spare is reserved when a minor exists and at least two
    replicas remain, everything else is a major-spare.
    """
    w = state.w_cur if w_cur is None else w_cur
    if w < 1:
        raise InvariantViolation("no survivors to lay out")
    b = state.b
    g = (b + w - 1) // w
    n_maj = b // g
    r = b - n_maj * g
    n_min = 1 if r > 0 else 0
    spares = w - n_maj - n_min
    n_mi = 1 if (n_min == 1 and spares >= 2) else 0
    n_ms = spares - n_mi
    return PolicyState(w_init=state.w_init, g_init=state.g_init, b=b,
                       w_cur=w, g_cur=g, r_cur=r,
                       n_maj=n_maj, n_min=n_min, n_ms=n_ms, n_mi=n_mi,
                       at_boundary=False)


def adaptive_policy_adjustment(event: FailureRecord) -> PolicyDecision:
    """Strawman world-shrink policy: absorb nothing, extend nothing.

    Always blocking, never quiesces, never declares a boundary; after an
    unabsorbed failure the iteration commits W_cur * G_cur < B microbatches.
    """
    return PolicyDecision(RestoreMode.BLOCKING, should_quiesce=False,
                          at_boundary=False, promoted=event.promotions)


def assign_roles(state: PolicyState, members: List[int]) -> Dict[int, ReplicaRole]:
    """Deterministic role map in ascending id order: majors first, then the
    minor, then major-spares, the minor-spare last."""
    ordered = sorted(members)
    expected = state.n_maj + state.n_min + state.n_ms + state.n_mi
    if len(ordered) != expected:
        raise InvariantViolation("layout names %d replicas but %d survive"
                                 % (expected, len(ordered)))
    roles: Dict[int, ReplicaRole] = {}
    cut_minor = state.n_maj
    cut_ms = cut_minor + state.n_min
    cut_mi = cut_ms + state.n_ms
    for i, rid in enumerate(ordered):
        if i < cut_minor:
            roles[rid] = ReplicaRole.MAJOR
        elif i < cut_ms:
            roles[rid] = ReplicaRole.MINOR
        elif i < cut_mi:
            roles[rid] = ReplicaRole.MAJOR_SPARE
        else:
            roles[rid] = ReplicaRole.MINOR_SPARE
    return roles


def contribution_quota(state: PolicyState, role: ReplicaRole,
                       in_boundary_pass: bool = False,
                       prior_role: Optional[ReplicaRole] = None) -> int:
    """Microbatches the role contributes this iteration.

    Spares execute their counterpart's workload but contribute none of it
    outside a boundary pass. In a boundary pass every survivor contributes
    G_ext extras except boundary minors, which contribute one less on top of
    their prior role's quota (pass prior_role for those).
    """
    base = {
        ReplicaRole.MAJOR: state.g_cur,
        ReplicaRole.MINOR: state.r_cur,
        ReplicaRole.MAJOR_SPARE: 0,
        ReplicaRole.MINOR_SPARE: 0,
    }
    if role is ReplicaRole.BOUNDARY_MINOR:
        if not in_boundary_pass:
            raise ValueError("boundary minors exist only during a boundary pass")
        if prior_role is None or prior_role is ReplicaRole.BOUNDARY_MINOR:
            raise ValueError("a boundary minor's quota needs its prior role")
        if state.g_ext is None:
            raise InvariantViolation("boundary pass without an extension size")
        return base[prior_role] + state.g_ext - 1
    quota = base[role]
    if in_boundary_pass:
        if state.g_ext is None:
            raise InvariantViolation("boundary pass without an extension size")
        quota += state.g_ext
    return quota
