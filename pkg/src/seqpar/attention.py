"""Sequence-parallel attention engines and the single-device reference.

All engines take per-rank shards laid out as [bs, seq/sp, heads, dim] together
with the :class:`~seqpar.partition.ShardLayout` that produced them.  Causal
masking always compares *global* positions, so non-contiguous (zigzag) shards
need no special casing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import comm
from .comm import GroupHandle, all_gather, all_to_all, gather_object, ring_exchange
from .partition import ShardLayout
from .tensor import Tensor, custom_op, getitem, matmul, pad_axis, reshape, softmax, swapaxes, take, transpose

ENGINES = ("oracle", "ulysses", "dummy_head", "xtuner", "ring_zigzag", "usp")


class AttentionError(ValueError):
    pass


class HeadDivisibilityError(AttentionError):
    pass


@dataclass
class AttentionConfig:
    hs: int
    kv_hs: Optional[int] = None
    dim: int = 8
    causal: bool = True
    engine: str = "oracle"
    sp: int = 1
    ulysses_degree: Optional[int] = None
    ring_degree: Optional[int] = None
    insp: Optional[int] = None
    dummy_fallback: bool = True

    def __post_init__(self):
        if self.kv_hs is None:
            self.kv_hs = self.hs
        if self.engine not in ENGINES:
            raise AttentionError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if min(self.hs, self.kv_hs, self.dim, self.sp) < 1:
            raise AttentionError("head counts, dim and sp must be >= 1")
        if self.hs % self.kv_hs:
            raise AttentionError(f"hs={self.hs} is not a multiple of kv_hs={self.kv_hs}")
        if self.dim % 2:
            raise AttentionError(f"head dim must be even for RoPE, got {self.dim}")
        if self.engine == "oracle" and self.sp != 1:
            raise AttentionError("the oracle engine runs on a single device (sp=1)")
        if self.engine == "usp":
            u, r = self.ulysses_degree, self.ring_degree
            if u is None and r is None:
                u = default_ulysses_degree(self.hs, self.sp)
            if u is None:
                u = self.sp // r if r and self.sp % r == 0 else 0
            if r is None:
                r = self.sp // u if u and self.sp % u == 0 else 0
            if u * r != self.sp:
                raise AttentionError(f"ulysses degree {u} x ring degree {r} != sp={self.sp}")
            self.ulysses_degree, self.ring_degree = u, r
        if self.engine == "xtuner" and self.insp is None:
            self.insp = select_insp(self.hs, self.dim, self.sp)


def default_ulysses_degree(hs: int, sp: int) -> int:
    """Largest divisor of sp that also divides hs, but keep a ring of >= 2 when sp > 2."""
    cands = [u for u in range(1, sp + 1) if sp % u == 0 and hs % u == 0]
    if sp > 2:
        cands = [u for u in cands if u < sp] or cands
    return max(cands)


def select_insp(hs: int, dim: int, sp: int) -> int:
    """Smallest inner degree with (hs*insp) % sp == 0, dim % insp == 0 and insp | sp."""
    for insp in range(1, sp + 1):
        if (hs * insp) % sp == 0 and dim % insp == 0 and sp % insp == 0:
            return insp
    raise AttentionError(f"no feasible insp for hs={hs}, dim={dim}, sp={sp}")


def padded_head_count(hs: int, sp: int) -> int:
    rem = hs % sp
    return hs if rem == 0 else hs + sp - rem


def allowed_pairs(q_pos, k_pos, causal: bool = True, segments=None) -> np.ndarray:
    """Boolean [Lq, Lk] visibility by global position (and packing segment)."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    if causal:
        ok = q_pos[:, None] >= k_pos[None, :]
    else:
        ok = np.ones((len(q_pos), len(k_pos)), dtype=bool)
    if segments is not None:
        seg = np.asarray(segments)
        ok &= seg[q_pos][:, None] == seg[k_pos][None, :]
    return ok


def attention_flops(bs: int, heads: int, lq: int, lk: int, dim: int) -> int:
    """Multiply-add count (x2) of the score and value products."""
    return 4 * bs * heads * lq * lk * dim


def _count(h: Optional[GroupHandle], q_shape, lk: int):
    if h is not None:
        bs, lq, heads, dim = q_shape
        h.fabric.add_flops(h.rank, attention_flops(bs, heads, lq, lk, dim))


def repeat_kv(x: Tensor, hs: int) -> Tensor:
    kvh = x.shape[2]
    if kvh == hs:
        return x
    return take(x, np.repeat(np.arange(kvh), hs // kvh), axis=2)


# -- reference -----------------------------------------------------------


def oracle_attention(q: Tensor, k: Tensor, v: Tensor, q_pos, k_pos, causal: bool = True,
                     segments=None) -> Tensor:
    """softmax(q k^T / sqrt(dim) + mask) v over [bs, L, heads, dim] inputs."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    if len(q_pos) < q.shape[1] or len(k_pos) < k.shape[1]:
        raise AttentionError(
            f"position arrays ({len(q_pos)}, {len(k_pos)}) shorter than sequences ({q.shape[1]}, {k.shape[1]})"
        )
    hs = q.shape[2]
    k, v = repeat_kv(k, hs), repeat_kv(v, hs)
    scale = 1.0 / math.sqrt(q.shape[-1])
    ok = allowed_pairs(q_pos[: q.shape[1]], k_pos[: k.shape[1]], causal, segments)
    mask = np.where(ok, 0.0, -np.inf)
    qt = swapaxes(q, 1, 2)
    kt = transpose(k, (0, 2, 3, 1))
    vt = swapaxes(v, 1, 2)
    p = softmax(matmul(qt, kt) * scale, mask)
    return swapaxes(matmul(p, vt), 1, 2)


# -- blockwise pieces ----------------------------------------------------


@dataclass
class BlockPiece:
    """Unnormalised output and per-row (max, normaliser) of a partial attention."""

    num: np.ndarray  # [bs, h, Lq, d]
    m: np.ndarray  # [bs, h, Lq, 1], -inf where no key is visible
    l: np.ndarray  # [bs, h, Lq, 1]


def empty_piece(bs: int, heads: int, lq: int, dim: int, dtype=np.float64) -> BlockPiece:
    return BlockPiece(
        np.zeros((bs, heads, lq, dim), dtype),
        np.full((bs, heads, lq, 1), -np.inf, dtype),
        np.zeros((bs, heads, lq, 1), dtype),
    )


def _scores(qt, kt, scale, ok):
    s = (qt @ np.swapaxes(kt, -1, -2)) * scale
    return np.where(ok, s, -np.inf)


def block_attention_piece(q, k, v, q_pos, k_pos, causal: bool = True, segments=None) -> BlockPiece:
    """Attention of a query block against one key/value block ([bs, L, h, d] arrays)."""
    q, k, v = (np.asarray(a.data if isinstance(a, Tensor) else a) for a in (q, k, v))
    scale = 1.0 / math.sqrt(q.shape[-1])
    qt, kt, vt = (a.transpose(0, 2, 1, 3) for a in (q, k, v))
    s = _scores(qt, kt, scale, allowed_pairs(q_pos, k_pos, causal, segments))
    m = s.max(axis=-1, keepdims=True)
    p = np.exp(s - np.where(np.isfinite(m), m, 0.0))
    return BlockPiece(p @ vt, m, p.sum(axis=-1, keepdims=True))


def combine_pieces(a: BlockPiece, b: BlockPiece) -> BlockPiece:
    if a.num.shape != b.num.shape:
        raise AttentionError(f"cannot combine pieces of shapes {a.num.shape} and {b.num.shape}")
    m = np.maximum(a.m, b.m)
    safe = np.where(np.isfinite(m), m, 0.0)
    sa = np.where(np.isfinite(a.m), np.exp(a.m - safe), 0.0)
    sb = np.where(np.isfinite(b.m), np.exp(b.m - safe), 0.0)
    return BlockPiece(a.num * sa + b.num * sb, m, a.l * sa + b.l * sb)


def finalize_piece(piece: BlockPiece):
    """Return the normalised output [bs, Lq, h, d] and log-sum-exp [bs, h, Lq, 1]."""
    live = piece.l > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(live, piece.num / np.where(live, piece.l, 1.0), 0.0)
        lse = np.where(live, piece.m + np.log(np.where(live, piece.l, 1.0)), np.inf)
    return out.transpose(0, 2, 1, 3), lse


# -- ring ----------------------------------------------------------------


def _ring_core(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, q_pos, causal=True, segments=None) -> Tensor:
    n = h.size
    q_pos = np.asarray(q_pos)
    if n == 1:
        _count(h, q.shape, k.shape[1])
        return oracle_attention(q, k, v, q_pos, q_pos, causal, segments)
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])

    piece = None
    kc, vc, kpos = kd, vd, q_pos
    for step in range(n):
        if step:
            (kc, vc), kpos = ring_exchange(h, (kc, vc), kpos)
        blk = block_attention_piece(qd, kc, vc, q_pos, kpos, causal, segments)
        piece = blk if piece is None else combine_pieces(piece, blk)
        _count(h, qd.shape, kc.shape[1])
    out, lse = finalize_piece(piece)

    def bw(g):
        do = g.transpose(0, 2, 1, 3)
        delta = (do * out.transpose(0, 2, 1, 3)).sum(axis=-1, keepdims=True)
        qt = qd.transpose(0, 2, 1, 3)
        dq = np.zeros_like(qt)
        kc, vc, kpos = kd, vd, q_pos
        dk = np.zeros_like(kd.transpose(0, 2, 1, 3))
        dv = np.zeros_like(dk)
        for step in range(n):
            if step:
                # the dK/dV accumulators travel with the chunk they belong to
                (kc, vc, dk, dv), kpos = ring_exchange(h, (kc, vc, dk, dv), kpos)
            kt, vt = kc.transpose(0, 2, 1, 3), vc.transpose(0, 2, 1, 3)
            s = _scores(qt, kt, scale, allowed_pairs(q_pos, kpos, causal, segments))
            p = np.exp(s - lse)
            dv = dv + np.swapaxes(p, -1, -2) @ do
            ds = p * (do @ np.swapaxes(vt, -1, -2) - delta)
            dq += (ds @ kt) * scale
            dk = dk + (np.swapaxes(ds, -1, -2) @ qt) * scale
        # one last hop returns each accumulator to its owner
        (dk, dv), _ = ring_exchange(h, (dk, dv))
        back = (0, 2, 1, 3)
        return dq.transpose(back), dk.transpose(back), dv.transpose(back)

    return custom_op(out, (q, k, v), bw, "ring_attention", collective=True)


def _positions(h: GroupHandle, layout: ShardLayout) -> np.ndarray:
    if layout.sp != h.size:
        raise AttentionError(f"layout is for sp={layout.sp} but the group has {h.size} ranks")
    return layout.owned(h.index)


def ring_attention_zigzag(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, layout: ShardLayout,
                          causal: bool = True, segments=None) -> Tensor:
    if layout.mode != "zigzag" and h.size > 1:
        raise AttentionError(f"ring attention needs the zigzag layout for load balance, got {layout.mode}")
    return _ring_core(h, q, k, v, _positions(h, layout), causal, segments)


# -- ulysses family ------------------------------------------------------


def _ulysses_core(h: GroupHandle, q, k, v, q_pos, causal, segments) -> Tensor:
    n = h.size
    for name, t in (("query", q), ("key/value", k)):
        if t.shape[2] % n:
            raise HeadDivisibilityError(
                f"{name} head count {t.shape[2]} is not divisible by sequence parallel size {n}"
            )
    pos = np.concatenate(gather_object(h, np.asarray(q_pos))) if n > 1 else np.asarray(q_pos)
    qg, kg, vg = (all_to_all(h, t, 2, 1) for t in (q, k, v))
    _count(h, qg.shape, kg.shape[1])
    o = oracle_attention(qg, kg, vg, pos, pos, causal, segments)
    return all_to_all(h, o, 1, 2)


def ulysses_attention(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, layout: ShardLayout,
                      causal: bool = True, segments=None) -> Tensor:
    return _ulysses_core(h, q, k, v, _positions(h, layout), causal, segments)


def pad_heads(x: Tensor, sp: int) -> Tensor:
    return pad_axis(x, 2, padded_head_count(x.shape[2], sp) - x.shape[2])


def unpad_heads(p: Tensor, hs: int) -> Tensor:
    if p.shape[2] == hs:
        return p
    return getitem(p, (slice(None), slice(None), slice(0, hs)))


def dummy_head_ulysses(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, layout: ShardLayout,
                       causal: bool = True, segments=None) -> Tensor:
    hs = q.shape[2]
    n = h.size
    o = _ulysses_core(h, pad_heads(q, n), pad_heads(k, n), pad_heads(v, n),
                      _positions(h, layout), causal, segments)
    return unpad_heads(o, hs)


def xtuner_ulysses(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, layout: ShardLayout,
                   causal: bool = True, segments=None, insp: Optional[int] = None) -> Tensor:
    """Virtual-head Ulysses: split each head's dim into ``insp`` virtual heads so the
    head count divides sp, then all-gather inside groups of ``insp`` ranks to
    rebuild full-dim heads.  Every inner rank computes the same heads and keeps
    only its own virtual slice of the output."""
    n = h.size
    bs, ll, hs, dim = q.shape
    insp = insp or select_insp(hs, dim, n)
    if (hs * insp) % n or dim % insp or n % insp:
        raise AttentionError(f"infeasible insp={insp} for hs={hs}, dim={dim}, sp={n}")
    if insp == 1:
        return _ulysses_core(h, q, k, v, _positions(h, layout), causal, segments)
    m = hs * insp // n
    pos = np.concatenate(gather_object(h, _positions(h, layout)))
    j = h.index % insp
    inner = h.subgroup(range(h.index - j, h.index - j + insp))

    def to_heads(t):
        t = all_to_all(h, reshape(t, (bs, ll, hs * insp, dim // insp)), 2, 1)
        t = all_gather(inner, t, dim=2)
        return reshape(t, (bs, ll * n, m, dim))

    qg, kg, vg = to_heads(q), to_heads(k), to_heads(v)
    _count(h, qg.shape, kg.shape[1])
    o = oracle_attention(qg, kg, vg, pos, pos, causal, segments)
    o = reshape(o, (bs, ll * n, insp * m, dim // insp))
    o = getitem(o, (slice(None), slice(None), slice(j * m, (j + 1) * m)))
    o = all_to_all(h, o, 1, 2)
    return reshape(o, (bs, ll, hs, dim))


def usp_attention(h: GroupHandle, q: Tensor, k: Tensor, v: Tensor, layout: ShardLayout,
                  ulysses_degree: int, ring_degree: int, causal: bool = True, segments=None,
                  dummy_fallback: bool = True) -> Tensor:
    """Two-level attention: Ulysses inside groups of ``ulysses_degree`` consecutive
    ranks, ring attention across the ``ring_degree`` groups."""
    n = h.size
    u, r = ulysses_degree, ring_degree
    if u * r != n:
        raise AttentionError(f"ulysses degree {u} x ring degree {r} != sp={n}")
    if r > 1 and layout.mode != "zigzag":
        raise AttentionError("usp with a ring degree > 1 needs the zigzag layout")
    hs = q.shape[2]
    if hs % u and not dummy_fallback:
        raise HeadDivisibilityError(f"head count {hs} is not divisible by ulysses degree {u}")
    i = h.index
    a, b = i % u, i // u
    q_pos = _positions(h, layout)
    uh = h.subgroup([b * u + t for t in range(u)])
    rh = h.subgroup([t * u + a for t in range(r)])
    if u > 1:
        q, k, v = (pad_heads(t, u) for t in (q, k, v))
        pos = np.concatenate(gather_object(uh, q_pos))
        q, k, v = (all_to_all(uh, t, 2, 1) for t in (q, k, v))
    else:
        pos = q_pos
    o = _ring_core(rh, q, k, v, pos, causal, segments)
    if u > 1:
        o = unpad_heads(all_to_all(uh, o, 1, 2), hs)
    return o


# -- dispatch ------------------------------------------------------------


def sequence_parallel_attention(cfg: AttentionConfig, h: GroupHandle, q: Tensor, k: Tensor, v: Tensor,
                                layout: ShardLayout, segments=None) -> Tensor:
    """Run ``cfg.engine`` on this rank's shards.  Grouped key/value heads are
    repeated to the query head count first."""
    hs = q.shape[2]
    k, v = repeat_kv(k, hs), repeat_kv(v, hs)
    kind = cfg.engine
    if kind == "oracle":
        if h.size != 1:
            raise AttentionError("the oracle engine runs on a single device (sp=1)")
        pos = layout.owned(0)
        _count(h, q.shape, k.shape[1])
        return oracle_attention(q, k, v, pos, pos, cfg.causal, segments)
    if kind == "ulysses":
        return ulysses_attention(h, q, k, v, layout, cfg.causal, segments)
    if kind == "dummy_head":
        return dummy_head_ulysses(h, q, k, v, layout, cfg.causal, segments)
    if kind == "xtuner":
        return xtuner_ulysses(h, q, k, v, layout, cfg.causal, segments, insp=cfg.insp)
    if kind == "ring_zigzag":
        return ring_attention_zigzag(h, q, k, v, layout, cfg.causal, segments)
    if kind == "usp":
        return usp_attention(h, q, k, v, layout, cfg.ulysses_degree, cfg.ring_degree,
                             cfg.causal, segments, cfg.dummy_fallback)
    raise AttentionError(f"unknown engine {kind!r}")


def preferred_layout(engine: str) -> str:
    return "zigzag" if engine in ("ring_zigzag", "usp") else "naive"
