import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqpar.accounting import engine_bytes, table_asymptotic, ulysses_bytes
from seqpar.attention import padded_head_count
from seqpar.verification import measure_bytes


def test_ulysses_worked_example():
    # L=64, d=32 (4 heads of 8), sp=4, float64
    per_rank, _, _ = measure_bytes("ulysses", 64, 4, 8, 4)
    expected = 8 * 3 * (64 * 32 // 4) * 8 // 4
    assert expected == 24576
    assert per_rank == [expected] * 4
    assert ulysses_bytes(1, 64, 4, 8, 4) == expected


@pytest.mark.parametrize("engine,hs,dim,sp,kw", [
    ("ulysses", 4, 8, 2, {}), ("ulysses", 4, 8, 4, {}),
    ("dummy_head", 6, 8, 4, {}), ("dummy_head", 14, 4, 4, {}),
    ("xtuner", 6, 8, 4, {}), ("xtuner", 14, 8, 8, {}),
    ("ring_zigzag", 4, 8, 2, {}), ("ring_zigzag", 6, 8, 4, {}),
    ("usp", 4, 8, 4, {"ulysses_degree": 2, "ring_degree": 2}),
    ("usp", 6, 8, 4, {"ulysses_degree": 4, "ring_degree": 1}),
])
def test_measured_equals_closed_form(engine, hs, dim, sp, kw):
    per_rank, _, cfg = measure_bytes(engine, 64, hs, dim, sp, **kw)
    want = engine_bytes(engine, 1, 64, hs, dim, sp, 8, cfg.ulysses_degree, cfg.ring_degree, cfg.insp)
    assert per_rank == [want] * sp


def test_dummy_head_scales_ulysses():
    dummy, _, _ = measure_bytes("dummy_head", 64, 6, 8, 4)
    assert dummy[0] * 6 == ulysses_bytes(1, 64, 6, 8, 4) * 8
    uly8, _, _ = measure_bytes("ulysses", 64, 8, 8, 4)
    assert dummy == uly8


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([64, 128, 256]), st.sampled_from([(4, 8), (6, 8), (14, 4), (2, 8)]),
       st.sampled_from([2, 4, 8]))
def test_comm_ordering(seq_len, heads, sp):
    hs, dim = heads
    d = hs * dim
    uly = engine_bytes("ulysses", 1, seq_len, hs, dim, sp)
    ring = engine_bytes("ring_zigzag", 1, seq_len, hs, dim, sp)
    dummy = engine_bytes("dummy_head", 1, seq_len, hs, dim, sp)
    assert ring > uly
    assert dummy * hs == uly * padded_head_count(hs, sp)
    norm = uly / (seq_len * d * 8)
    assert 8 * (sp - 1) / sp ** 2 <= norm <= 8 / sp
    usp = [engine_bytes("usp", 1, seq_len, hs, dim, sp, ulysses_degree=sp // r, ring_degree=r)
           for r in (1, 2, 4, 8) if sp % r == 0]
    assert usp[-1] == ring
    if hs % sp == 0:
        # without dummy-head padding the inner/outer trade-off is strictly monotone
        assert usp == sorted(usp) and len(set(usp)) == len(usp)
        assert usp[0] == uly


def test_xtuner_exceeds_dummy_head_when_insp_above_one():
    x, _, cfg = measure_bytes("xtuner", 64, 14, 8, 8)
    d, _, _ = measure_bytes("dummy_head", 64, 14, 8, 8)
    assert cfg.insp == 4
    assert x[0] > d[0]


def test_asymptotic_constants():
    unit = 1 * 256 * 32 * 8
    assert table_asymptotic("ulysses", 1, 256, 4, 8, 4) == 2 * unit
    assert table_asymptotic("ring_zigzag", 1, 256, 4, 8, 4) == 4 * unit
    assert table_asymptotic("usp", 1, 256, 4, 8, 4, ring_degree=2) == 4 * unit
    assert table_asymptotic("oracle", 1, 256, 4, 8, 4) == 0.0
