"""Closed-form per-rank byte counts for one attention forward + backward.

These mirror the send-side model in :mod:`seqpar.comm` and are what the
measured counters are asserted against.  ``d`` is ``hs * dim``; key/value
heads are assumed already repeated to ``hs``.
"""
from __future__ import annotations

from fractions import Fraction

from .attention import padded_head_count, select_insp


def _local(bs, seq_len, hs, dim, sp, itemsize):
    return bs * (seq_len // sp) * hs * dim * itemsize


def _a2a(nbytes, n):
    # each of the n - 1 outgoing slices is nbytes / n
    return nbytes // n * (n - 1)


def ulysses_bytes(bs, seq_len, hs, dim, sp, itemsize=8) -> int:
    """q, k, v and output all-to-alls forward, their inverses backward."""
    return 8 * _a2a(_local(bs, seq_len, hs, dim, sp, itemsize), sp)


def dummy_head_bytes(bs, seq_len, hs, dim, sp, itemsize=8) -> int:
    return ulysses_bytes(bs, seq_len, padded_head_count(hs, sp), dim, sp, itemsize)


def xtuner_bytes(bs, seq_len, hs, dim, sp, insp=None, itemsize=8) -> int:
    """Ulysses all-to-alls plus an inner all-gather of q, k, v forward and the
    matching reduce-scatter backward."""
    insp = insp or select_insp(hs, dim, sp)
    local = _local(bs, seq_len, hs, dim, sp, itemsize)
    if insp == 1:
        return 8 * _a2a(local, sp)
    return 8 * _a2a(local, sp) + 3 * local * (insp - 1) + 3 * local * (insp - 1)


def ring_bytes(bs, seq_len, hs, dim, sp, itemsize=8) -> int:
    """k, v forward over sp - 1 hops; k, v, dk, dv backward over sp - 1 hops and a
    final dk, dv hop home: (6 sp - 4) chunks."""
    if sp == 1:
        return 0
    return (6 * sp - 4) * _local(bs, seq_len, hs, dim, sp, itemsize)


def usp_bytes(bs, seq_len, hs, dim, ulysses_degree, ring_degree, itemsize=8) -> int:
    u, r = ulysses_degree, ring_degree
    sp = u * r
    hs_eff = padded_head_count(hs, u)
    local = _local(bs, seq_len, hs_eff, dim, sp, itemsize)
    inner = 8 * _a2a(local, u) if u > 1 else 0
    outer = (6 * r - 4) * local if r > 1 else 0
    return inner + outer


def engine_bytes(engine, bs, seq_len, hs, dim, sp, itemsize=8, ulysses_degree=None, ring_degree=None,
                 insp=None) -> int:
    if engine == "oracle":
        return 0
    if engine == "ulysses":
        return ulysses_bytes(bs, seq_len, hs, dim, sp, itemsize)
    if engine == "dummy_head":
        return dummy_head_bytes(bs, seq_len, hs, dim, sp, itemsize)
    if engine == "xtuner":
        return xtuner_bytes(bs, seq_len, hs, dim, sp, insp, itemsize)
    if engine == "ring_zigzag":
        return ring_bytes(bs, seq_len, hs, dim, sp, itemsize)
    if engine == "usp":
        return usp_bytes(bs, seq_len, hs, dim, ulysses_degree, ring_degree, itemsize)
    raise ValueError(f"unknown engine {engine!r}")


def table_asymptotic(engine, bs, seq_len, hs, dim, sp, itemsize=8, ring_degree=None, insp=None) -> float:
    """Leading-order communication volume per rank, in bytes.

    Ulysses 8/N, ring 4, USP (8 + 4 r)/N, Xtuner 8/N + 3/insp, dummy head
    8/N * hs_new/hs, each times bs * L * d * itemsize.
    """
    unit = Fraction(bs * seq_len * hs * dim * itemsize)
    if engine == "oracle":
        return 0.0
    if engine == "ulysses":
        c = Fraction(8, sp)
    elif engine == "ring_zigzag":
        c = Fraction(4)
    elif engine == "usp":
        c = Fraction(8 + 4 * ring_degree, sp)
    elif engine == "xtuner":
        c = Fraction(8, sp) + Fraction(3, insp or select_insp(hs, dim, sp))
    elif engine == "dummy_head":
        c = Fraction(8, sp) * Fraction(padded_head_count(hs, sp), hs)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return float(c * unit)
