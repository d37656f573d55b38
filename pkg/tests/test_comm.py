import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqpar.comm import (PRIMITIVES, CollectiveError, CommFabric, ConfigError, all_gather, all_reduce_array,
                         all_reduce_grad_aware, all_reduce_plain, all_to_all, init_groups, report, ring_shift,
                         write_stats_csv)
from seqpar.tensor import Tensor, backward
from seqpar.verification import toy_gradients, toy_local_gradient

SCHEDS = ["lockstep", "threads"]


def test_init_groups_examples():
    assert init_groups(8, 4).groups == [(0, 1, 2, 3), (4, 5, 6, 7)]
    assert init_groups(2, 2).groups == [(0, 1)]
    with pytest.raises(ConfigError):
        init_groups(8, 3)


def test_groups_are_independent():
    f = CommFabric(4, 2)
    res = f.run(lambda c: all_reduce_array(c.sp_group, np.array([float(c.rank)])).tolist())
    assert res == [[1.0], [1.0], [5.0], [5.0]]
    assert [c for c in (f.context(r).sp_rank for r in range(4))] == [0, 1, 0, 1]


@pytest.mark.parametrize("sched", SCHEDS)
def test_all_to_all_permutation(sched):
    # rank 0 holds [A0, A1], rank 1 holds [B0, B1] along axis 0
    data = {0: np.array([[1.0], [2.0]]), 1: np.array([[3.0], [4.0]])}
    f = CommFabric(2, 2)
    res = f.run(lambda c: all_to_all(c.sp_group, Tensor(data[c.rank]), 0, 1).data, scheduler=sched)
    assert res[0].tolist() == [[1.0, 3.0]]
    assert res[1].tolist() == [[2.0, 4.0]]


def test_all_to_all_sp1_identity_and_zero_bytes():
    f = CommFabric(1, 1)
    x = np.arange(6.0).reshape(2, 3)
    out = f.run(lambda c: all_to_all(c.sp_group, Tensor(x), 0, 1).data)[0]
    assert np.array_equal(out, x)
    assert f.bytes_sent(0) == 0


@pytest.mark.parametrize("sp", [2, 4])
def test_all_to_all_round_trip_is_bitwise(sp):
    rng = np.random.default_rng(sp)
    xs = [rng.normal(size=(1, 3, 4 * sp, 2)) for _ in range(sp)]
    f = CommFabric(sp, sp)

    def prog(c):
        y = all_to_all(c.sp_group, Tensor(xs[c.rank]), 2, 1)
        return all_to_all(c.sp_group, y, 1, 2).data

    for r, out in enumerate(f.run(prog)):
        assert np.array_equal(out, xs[r])


def test_all_to_all_indivisible_extent_errors():
    f = CommFabric(2, 2)
    with pytest.raises(CollectiveError, match="not divisible"):
        f.run(lambda c: all_to_all(c.sp_group, Tensor(np.zeros((3, 2))), 0, 1))


def test_all_gather_example_and_bytes():
    f = CommFabric(2, 2)
    res = f.run(lambda c: all_gather(c.sp_group, Tensor([1.0, 2.0] if c.rank == 0 else [3.0, 4.0]), 0).data)
    assert [r.tolist() for r in res] == [[1, 2, 3, 4]] * 2

    f = CommFabric(2, 2)
    f.run(lambda c: all_gather(c.sp_group, Tensor(np.zeros(16)), 0))
    stats = {(s.rank, s.primitive): (s.calls, s.bytes) for s in report(f)}
    assert stats[(0, "all_gather")] == (1, 128)
    assert stats[(1, "all_gather")] == (1, 128)


def test_all_gather_mismatched_extents_error():
    f = CommFabric(2, 2)
    with pytest.raises(CollectiveError):
        f.run(lambda c: all_gather(c.sp_group, Tensor(np.zeros((2, 2 + c.rank))), 0))


@pytest.mark.parametrize("sched", SCHEDS)
def test_ring_shift_examples(sched):
    f = CommFabric(2, 2)
    assert f.run(lambda c: ring_shift(c.sp_group, Tensor([float(c.rank)])).data.tolist(), scheduler=sched) == [
        [1.0], [0.0]]
    f = CommFabric(4, 4)
    out = f.run(lambda c: ring_shift(c.sp_group, Tensor([float(c.rank)])).data[0], scheduler=sched)
    assert out[2] == 1.0

    def cycle(c):
        x = Tensor([float(c.rank)])
        for _ in range(4):
            x = ring_shift(c.sp_group, x)
        return x.data[0]

    assert CommFabric(4, 4).run(cycle, scheduler=sched) == [0.0, 1.0, 2.0, 3.0]


def test_ring_shift_counts_payload_bytes():
    f = CommFabric(4, 4)
    f.run(lambda c: ring_shift(c.sp_group, Tensor(np.zeros(5))))
    assert all(f.bytes_sent(r, "p2p") == 40 for r in range(4))


def test_ring_shift_shape_mismatch_errors():
    f = CommFabric(2, 2)
    with pytest.raises(CollectiveError):
        f.run(lambda c: ring_shift(c.sp_group, Tensor(np.zeros(2 + c.rank))))


@pytest.mark.parametrize("sched", SCHEDS)
def test_toy_gradients(sched):
    assert toy_gradients(2, True, sched) == [8.0, 12.0]
    assert toy_gradients(2, False, sched) == [4.0, 6.0]
    assert toy_local_gradient(2) == 10.0
    assert sum(toy_gradients(2, True, sched)) / 2 == toy_local_gradient(2)


@pytest.mark.parametrize("sp", [2, 3, 4, 8])
def test_toy_grad_aware_is_sp_times_plain(sp):
    a, p = toy_gradients(sp, True), toy_gradients(sp, False)
    assert all(x == sp * y for x, y in zip(a, p))


def test_all_reduce_examples():
    f = CommFabric(4, 4)
    assert f.run(lambda c: all_reduce_plain(c.sp_group, Tensor([1.0])).item()) == [4.0] * 4
    f = CommFabric(3, 3)
    plain = f.run(lambda c: all_reduce_plain(c.sp_group, Tensor([c.rank + 0.1])).item())
    aware = f.run(lambda c: all_reduce_grad_aware(c.sp_group, Tensor([c.rank + 0.1])).item())
    assert plain == aware


def test_all_reduce_sp1_backward_is_pass_through():
    f = CommFabric(1, 1)

    def prog(c):
        w = Tensor([2.0], requires_grad=True)
        backward(all_reduce_grad_aware(c.sp_group, w * 3.0).sum())
        return w.grad[0]

    assert f.run(prog) == [3.0]


def test_all_reduce_bytes():
    f = CommFabric(4, 4)
    f.run(lambda c: all_reduce_array(c.sp_group, np.zeros(8)))
    assert f.bytes_sent(0, "all_reduce") == 2 * 64 * 3 // 4


def test_all_reduce_shape_mismatch():
    f = CommFabric(2, 2)
    with pytest.raises(CollectiveError, match="shape mismatch"):
        f.run(lambda c: all_reduce_array(c.sp_group, np.zeros(2 + c.rank)))


def test_report_fresh_fabric_is_zero_and_ordered():
    f = CommFabric(2, 2)
    rows = report(f)
    assert [(s.rank, s.primitive) for s in rows] == [(r, p) for r in range(2) for p in PRIMITIVES]
    assert all(s.calls == 0 and s.bytes == 0 for s in rows)


def test_stats_csv_columns(tmp_path):
    f = CommFabric(2, 2)
    f.run(lambda c: all_gather(c.sp_group, Tensor(np.zeros(16)), 0))
    path = tmp_path / "stats.csv"
    write_stats_csv(path, "ulysses", report(f))
    lines = path.read_text().splitlines()
    assert lines[0] == "engine,rank,primitive,calls,bytes"
    assert "ulysses,0,all_gather,1,128" in lines


def test_mismatched_collectives_are_detected():
    f = CommFabric(2, 2)

    def prog(c):
        if c.rank == 0:
            return all_reduce_array(c.sp_group, np.zeros(1))
        return all_gather(c.sp_group, Tensor(np.zeros(1)), 0)

    with pytest.raises(CollectiveError):
        f.run(prog)


def test_deadlock_is_detected_in_lockstep():
    f = CommFabric(2, 2)

    def prog(c):
        if c.rank == 0:
            all_reduce_array(c.sp_group, np.zeros(1))
        return c.rank

    with pytest.raises(CollectiveError, match="deadlock"):
        f.run(prog)


def test_rank_error_propagates():
    f = CommFabric(2, 2)

    def prog(c):
        if c.rank == 1:
            raise ValueError("boom")
        return all_reduce_array(c.sp_group, np.zeros(1))

    for sched in SCHEDS:
        with pytest.raises(ValueError, match="boom"):
            f.run(prog, scheduler=sched)


def test_collective_outside_run_errors():
    f = CommFabric(2, 2)
    with pytest.raises(CollectiveError):
        all_reduce_array(f.context(0).sp_group, np.zeros(1))


def _program(c):
    rng = np.random.default_rng(c.rank)
    x = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
    y = all_to_all(c.sp_group, x, 2, 1)
    z = ring_shift(c.sp_group, y * y)
    s = all_reduce_grad_aware(c.sp_group, z.sum())
    backward(s)
    return z.data, s.item(), x.grad


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_any_interleaving_matches_round_robin(order_seed):
    ref_f = CommFabric(4, 4)
    ref = ref_f.run(_program)
    f = CommFabric(4, 4)
    got = f.run(_program, order_seed=order_seed)
    for a, b in zip(ref, got):
        assert np.array_equal(a[0], b[0]) and a[1] == b[1] and np.array_equal(a[2], b[2])
    assert ref_f.counters == f.counters


def test_threads_match_lockstep():
    a_f, b_f = CommFabric(4, 4), CommFabric(4, 4)
    a = a_f.run(_program, scheduler="lockstep")
    b = b_f.run(_program, scheduler="threads")
    for x, y in zip(a, b):
        assert np.array_equal(x[0], y[0]) and x[1] == y[1] and np.array_equal(x[2], y[2])
    assert a_f.counters == b_f.counters


def test_unknown_scheduler():
    with pytest.raises(ConfigError):
        CommFabric(1, 1).run(lambda c: 0, scheduler="mpi")
