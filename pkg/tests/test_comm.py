"""Unit tests for the fault-tolerant communicator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steadybatch.comm import (
    Communicator,
    EmptyMembership,
    NoSpareAvailable,
    ReplicaRole,
    WorkStatus,
    designate_boundary_minors,
    elect_promotion,
)


def healthy_comm(n, roles=None):
    return Communicator(range(n), roles=roles)


def test_allreduce_sums_identical_inputs():
    comm = healthy_comm(4)
    views = {r: np.array([1.0, 2.0]) for r in range(4)}
    res = comm.ulfm_allreduce(views)
    assert res.status is WorkStatus.SUCCESS
    assert res.reduced_epoch == 0
    for r in range(4):
        assert np.array_equal(views[r], [4.0, 8.0])
    assert comm.epoch == 0


def test_allreduce_zeroes_spares_virtually():
    roles = {0: ReplicaRole.MAJOR, 1: ReplicaRole.MAJOR,
             2: ReplicaRole.MAJOR, 3: ReplicaRole.MAJOR_SPARE}
    comm = healthy_comm(4, roles)
    views = {r: np.array([2.0]) for r in range(3)}
    views[3] = np.array([5.0])
    local_before = views[3].copy()
    res = comm.ulfm_allreduce(views)
    assert res.status is WorkStatus.SUCCESS
    for r in range(4):
        assert np.array_equal(views[r], [6.0])
    # the spare's accumulated value was only zeroed inside the reduce; a
    # snapshot taken beforehand would still hold it
    assert np.array_equal(local_before, [5.0])


def test_allreduce_failure_reports_and_does_not_reduce():
    comm = healthy_comm(32)
    for r in comm.members:
        comm.contrib_regular[r] = 8
    views = {r: np.full(3, float(r)) for r in range(32)}
    before = {r: views[r].copy() for r in views}
    comm.mark_dead(31)
    res = comm.ulfm_allreduce(views)
    assert res.status is WorkStatus.FAILURE
    rec = res.record
    assert rec.failed_replicas == frozenset({31})
    assert rec.contrib == 248  # 31 survivors * 8
    assert rec.at_boundary
    assert rec.epoch_after == 1 and comm.epoch == 1
    assert comm.members == list(range(31))
    for r in range(31):
        assert np.array_equal(views[r], before[r])  # buckets untouched


def test_quiesced_allreduce_is_a_noop():
    comm = healthy_comm(4)
    comm.quiesced = True
    comm.mark_dead(2)
    views = {r: np.array([1.0]) for r in range(4)}
    res = comm.ulfm_allreduce(views)
    assert res.status is WorkStatus.NOOP
    assert res.record is None
    assert comm.epoch == 0
    assert comm.members == list(range(4))  # not even detection ran
    for r in range(4):
        assert np.array_equal(views[r], [1.0])


def test_consensus_detects_despite_quiesce():
    comm = healthy_comm(4)
    comm.quiesced = True
    comm.mark_dead(2)
    res = comm.ulfm_consensus()
    assert res.status is WorkStatus.FAILURE
    assert res.record.failed_replicas == frozenset({2})
    assert comm.epoch == 1


def test_consensus_healthy_group():
    comm = healthy_comm(8)
    res = comm.ulfm_consensus()
    assert res.status is WorkStatus.SUCCESS
    assert comm.epoch == 0


def test_simultaneous_major_and_minor_death_with_spares():
    roles = {0: ReplicaRole.MAJOR, 1: ReplicaRole.MAJOR, 2: ReplicaRole.MINOR,
             3: ReplicaRole.MAJOR_SPARE, 4: ReplicaRole.MINOR_SPARE}
    comm = healthy_comm(5, roles)
    comm.mark_dead(0)
    comm.mark_dead(2)
    res = comm.ulfm_consensus()
    rec = res.record
    assert not rec.at_boundary
    assert rec.promotions == ((3, ReplicaRole.MAJOR), (4, ReplicaRole.MINOR))
    # post-promotion census: 2 majors, 1 minor, no spares
    assert rec.role_counts == (2, 1, 0, 0, 0)


def test_two_major_deaths_with_one_spare_is_boundary():
    roles = {r: ReplicaRole.MAJOR for r in range(4)}
    roles[4] = ReplicaRole.MAJOR_SPARE
    comm = healthy_comm(5, roles)
    comm.mark_dead(1)
    comm.mark_dead(2)
    rec = comm.ulfm_consensus().record
    assert rec.at_boundary
    assert rec.promotions == ()  # no promotion on the boundary branch


def test_dead_spare_is_not_a_boundary():
    roles = {0: ReplicaRole.MAJOR, 1: ReplicaRole.MAJOR,
             2: ReplicaRole.MAJOR_SPARE}
    comm = healthy_comm(3, roles)
    comm.mark_dead(2)
    rec = comm.ulfm_consensus().record
    assert not rec.at_boundary
    assert rec.promotions == ()
    assert rec.role_counts == (2, 0, 0, 0, 0)


def test_death_during_boundary_pass_stacks():
    comm = healthy_comm(4)
    comm.boundary_latch = True
    comm.mark_dead(3)
    rec = comm.ulfm_consensus().record
    assert rec.at_boundary


def test_boundary_latch_admits_spares_to_the_sum():
    roles = {0: ReplicaRole.MAJOR, 1: ReplicaRole.MAJOR_SPARE}
    comm = healthy_comm(2, roles)
    comm.boundary_latch = True
    views = {0: np.array([1.0]), 1: np.array([10.0])}
    res = comm.ulfm_allreduce(views)
    assert res.status is WorkStatus.SUCCESS
    assert np.array_equal(views[0], [11.0])


def test_elect_promotion_lowest_index():
    roles = {0: ReplicaRole.MAJOR, 5: ReplicaRole.MAJOR_SPARE,
             9: ReplicaRole.MAJOR_SPARE}
    comm = Communicator([0, 5, 9], roles=roles)
    assert elect_promotion(comm, ReplicaRole.MAJOR) == 5
    assert comm.roles[5] is ReplicaRole.MAJOR


def test_elect_promotion_minor_spare_for_minor():
    # after the walkthrough's first boundary: majors 0..27, minor 28,
    # major-spare 29, minor-spare 30
    roles = {r: ReplicaRole.MAJOR for r in range(28)}
    roles[28] = ReplicaRole.MINOR
    roles[29] = ReplicaRole.MAJOR_SPARE
    roles[30] = ReplicaRole.MINOR_SPARE
    comm = Communicator(range(31), roles=roles)
    comm.mark_dead(28)
    rec = comm.ulfm_consensus().record
    assert not rec.at_boundary
    assert rec.promotions == ((30, ReplicaRole.MINOR),)
    assert comm.roles[30] is ReplicaRole.MINOR


def test_elect_promotion_no_spare():
    comm = healthy_comm(3)
    with pytest.raises(NoSpareAvailable):
        elect_promotion(comm, ReplicaRole.MAJOR)


def test_empty_membership_raises():
    comm = healthy_comm(1)
    comm.mark_dead(0)
    with pytest.raises(EmptyMembership):
        comm.ulfm_consensus()


def test_designate_boundary_minors_highest_indexed_and_reissue():
    comm = healthy_comm(6)
    chosen = designate_boundary_minors(comm, 2)
    assert chosen == [4, 5]
    assert comm.roles[4] is ReplicaRole.BOUNDARY_MINOR
    assert comm.prior_roles[4] is ReplicaRole.MAJOR
    # a stacked boundary re-issues the split from scratch
    comm.mark_dead(5)
    comm.boundary_latch = True
    comm.ulfm_consensus()
    chosen = designate_boundary_minors(comm, 3)
    assert chosen == [2, 3, 4]
    assert comm.roles[4] is ReplicaRole.BOUNDARY_MINOR
    assert comm.roles[0] is ReplicaRole.MAJOR
    assert set(comm.prior_roles) == {2, 3, 4}


def test_deaths_accumulate_into_one_event():
    comm = healthy_comm(8)
    comm.mark_dead(1)
    comm.mark_dead(5)
    rec = comm.ulfm_consensus().record
    assert rec.failed_replicas == frozenset({1, 5})
    assert comm.epoch == 1  # one repair for the whole batch of deaths


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 16), data=st.data())
def test_epoch_monotone_over_random_kill_sequences(n, data):
    comm = healthy_comm(n)
    seen = [comm.epoch]
    alive = list(range(n))
    kills = data.draw(st.integers(0, n - 1))
    order = data.draw(st.permutations(alive))
    for rid in order[:kills]:
        comm.mark_dead(rid)
        if data.draw(st.booleans()):
            comm.ulfm_consensus()
            seen.append(comm.epoch)
    comm.ulfm_consensus()
    seen.append(comm.epoch)
    assert seen == sorted(seen)
    assert len(comm.members) == n - kills


def test_reduce_fold_order_is_ascending_id():
    # three values whose float sum depends on association; the contract is a
    # pairwise left fold in ascending replica id order
    vals = {0: np.array([1e16]), 1: np.array([1.0]), 2: np.array([-1e16])}
    comm = healthy_comm(3)
    views = {r: vals[r].copy() for r in vals}
    comm.ulfm_allreduce(views)
    expected = (vals[0] + vals[1]) + vals[2]
    assert np.array_equal(views[0], expected)
