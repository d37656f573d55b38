"""Reusable checks: engine parity, model parity, the all-reduce toy, byte counts."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .accounting import engine_bytes, table_asymptotic, ulysses_bytes
from .attention import (AttentionConfig, attention_flops, oracle_attention, padded_head_count, preferred_layout,
                        sequence_parallel_attention)
from .comm import CommFabric, all_reduce_grad_aware, all_reduce_plain, report
from .model import ModelConfig, TinyDecoder
from .partition import ShardLayout, causal_pairs, gather, make_position_ids, shard
from .tensor import Tensor, backward, numerical_grad
from .training import Trainer, TrainerConfig


@dataclass
class EngineParity:
    out: float
    dq: float
    dk: float
    dv: float
    fabric: CommFabric

    @property
    def grad(self) -> float:
        return max(self.dq, self.dk, self.dv)


def attention_inputs(seq_len: int, hs: int, dim: int, kv_hs: Optional[int] = None, bs: int = 1, seed: int = 0):
    rng = np.random.default_rng(seed)
    kv_hs = kv_hs or hs
    q = rng.normal(size=(bs, seq_len, hs, dim))
    k = rng.normal(size=(bs, seq_len, kv_hs, dim))
    v = rng.normal(size=(bs, seq_len, kv_hs, dim))
    cot = rng.normal(size=(bs, seq_len, hs, dim))
    return q, k, v, cot


def oracle_reference(q, k, v, cot, causal=True, segments=None):
    tq, tk, tv = (Tensor(a, requires_grad=True) for a in (q, k, v))
    pos = np.arange(q.shape[1])
    o = oracle_attention(tq, tk, tv, pos, pos, causal, segments)
    backward((o * Tensor(cot)).sum())
    return o.data, tq.grad, tk.grad, tv.grad


def run_engine(cfg: AttentionConfig, q, k, v, cot, layout: Optional[ShardLayout] = None, segments=None,
               scheduler: str = "lockstep", order_seed=None):
    """Shard, run ``cfg.engine`` forward and backward on ``cfg.sp`` ranks, gather.

    Returns ((out, dq, dk, dv) in global order, fabric)."""
    sp = cfg.sp
    layout = layout or ShardLayout.build(preferred_layout(cfg.engine), sp, q.shape[1])
    fabric = CommFabric(sp, sp)

    def program(ctx):
        r = ctx.sp_rank
        ts = [Tensor(shard(a, layout, r, axis=1), requires_grad=True) for a in (q, k, v)]
        out = sequence_parallel_attention(cfg, ctx.sp_group, *ts, layout, segments)
        backward((out * Tensor(shard(cot, layout, r, axis=1))).sum())
        return out.data, ts[0].grad, ts[1].grad, ts[2].grad

    res = fabric.run(program, scheduler=scheduler, order_seed=order_seed)
    got = tuple(gather([res[r][i] for r in range(sp)], layout, axis=1) for i in range(4))
    return got, fabric


def engine_parity(engine: str, seq_len: int, hs: int, dim: int, sp: int, kv_hs: Optional[int] = None,
                  causal: bool = True, segments=None, scheduler: str = "lockstep", seed: int = 0,
                  **engine_kw) -> EngineParity:
    q, k, v, cot = attention_inputs(seq_len, hs, dim, kv_hs, seed=seed)
    ref = oracle_reference(q, k, v, cot, causal, segments)
    cfg = AttentionConfig(hs=hs, kv_hs=kv_hs, dim=dim, causal=causal, engine=engine, sp=sp, **engine_kw)
    got, fabric = run_engine(cfg, q, k, v, cot, segments=segments, scheduler=scheduler)
    diffs = [float(np.max(np.abs(a - b))) for a, b in zip(got, ref)]
    return EngineParity(*diffs, fabric)


# -- model level ---------------------------------------------------------


def model_logits(model: TinyDecoder, tokens, engine: str = "oracle", sp: int = 1, layout: Optional[str] = None,
                 scheduler: str = "lockstep", local_positions: bool = False, **engine_kw) -> np.ndarray:
    """Gathered logits [1, L, vocab] of one sequence under ``engine``."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    lay = ShardLayout.build(layout or preferred_layout(engine), sp, len(tokens))
    attn = AttentionConfig(hs=cfg.hs, kv_hs=cfg.kv_hs, dim=cfg.head_dim, engine=engine, sp=sp, **engine_kw)
    fabric = CommFabric(sp, sp)

    def program(ctx):
        r = ctx.sp_rank
        pos = None if local_positions else make_position_ids(lay, r)
        return model.forward(shard(tokens, lay, r)[None], pos, ctx.sp_group, lay, attn,
                             unsafe_local_positions=local_positions).data

    return gather(fabric.run(program, scheduler=scheduler), lay, axis=1)


def step_gradients(model_cfg: ModelConfig, samples: Sequence, trainer_cfg: TrainerConfig):
    """(loss, synchronized gradients) of one lr=0 step over ``samples``."""
    tr = Trainer(model_cfg, replace(trainer_cfg, lr=0.0))
    rep = tr.train_step(samples)
    return rep, tr.synced_gradients()


def max_grad_gap(a: dict, b: dict, scale: float = 1.0) -> float:
    return max(float(np.max(np.abs(a[k] - scale * b[k]))) for k in a)


def finite_difference_check(model_cfg: ModelConfig, sample, trainer_cfg: TrainerConfig, n_params: int = 10,
                            seed: int = 0, h: float = 1e-5) -> list:
    """Compare synchronized analytic gradients with central differences of the
    single-device loss at ``n_params`` random parameter entries.

    Returns (name, index, analytic, numeric, rel_err) tuples."""
    _, grads = step_gradients(model_cfg, [sample], replace(trainer_cfg, grad_accum=1))
    base = TinyDecoder(model_cfg).state_dict()
    single = replace(trainer_cfg, engine="oracle", sp=1, layout="naive", ulysses_degree=None, ring_degree=None,
                     insp=None, grad_accum=1, lr=0.0)
    rng = np.random.default_rng(seed)
    names = sorted(base)
    out = []
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(base[name].size))
        idx = np.unravel_index(flat, base[name].shape)
        arr = base[name].copy()

        def loss_at():
            tr = Trainer(model_cfg, single)
            tr.model.params[name].data = arr.copy()
            return tr.train_step([sample]).loss

        num = numerical_grad(loss_at, arr, h, [flat])[flat]
        ana = float(grads[name][idx])
        denom = max(abs(ana), abs(num), 1e-12)
        out.append((name, tuple(int(i) for i in idx), ana, float(num), abs(ana - num) / denom))
    return out


# -- the all-reduce toy --------------------------------------------------


def toy_gradients(sp: int = 2, grad_aware: bool = True, scheduler: str = "lockstep") -> list:
    """d loss / d w0 per rank for loss = 2 * all_reduce(w0 * x_r) - 1, x_r = r + 2."""
    fabric = CommFabric(sp, sp)

    def program(ctx):
        w0 = Tensor(np.ones(1), requires_grad=True)
        x = Tensor(np.ones(1) * (ctx.sp_rank + 2))
        y = w0 * x
        y = all_reduce_grad_aware(ctx.sp_group, y) if grad_aware else all_reduce_plain(ctx.sp_group, y)
        backward((y * 2.0 - 1.0).sum())
        return float(w0.grad[0])

    return fabric.run(program, scheduler=scheduler)


def toy_local_gradient(sp: int = 2) -> float:
    """Same toy on one device with x = sum of all x_r."""
    w0 = Tensor(np.ones(1), requires_grad=True)
    x = Tensor(np.ones(1) * sum(r + 2 for r in range(sp)))
    backward((w0 * x * 2.0 - 1.0).sum())
    return float(w0.grad[0])


# -- communication -------------------------------------------------------


def measure_bytes(engine: str, seq_len: int, hs: int, dim: int, sp: int, bs: int = 1, **engine_kw):
    """Per-rank bytes of one forward + backward, the fabric, and the config used."""
    cfg = AttentionConfig(hs=hs, dim=dim, engine=engine, sp=sp, **engine_kw)
    q, k, v, cot = attention_inputs(seq_len, hs, dim, bs=bs)
    _, fabric = run_engine(cfg, q, k, v, cot)
    per_rank = [fabric.bytes_sent(r) for r in range(sp)]
    return per_rank, fabric, cfg


def analytic_bytes(cfg: AttentionConfig, seq_len: int, bs: int = 1, itemsize: int = 8) -> int:
    return engine_bytes(cfg.engine, bs, seq_len, cfg.hs, cfg.dim, cfg.sp, itemsize,
                        cfg.ulysses_degree, cfg.ring_degree, cfg.insp)


def asymptotic_bytes(cfg: AttentionConfig, seq_len: int, bs: int = 1, itemsize: int = 8) -> float:
    return table_asymptotic(cfg.engine, bs, seq_len, cfg.hs, cfg.dim, cfg.sp, itemsize, cfg.ring_degree,
                            cfg.insp)


def ulysses_formula(seq_len: int, hs: int, dim: int, sp: int, bs: int = 1, itemsize: int = 8) -> int:
    return ulysses_bytes(bs, seq_len, hs, dim, sp, itemsize)


# -- balance -------------------------------------------------------------


def balance_rows(seq_len: int, sp: int, mode: str, hs: int = 1, dim: int = 1, bs: int = 1) -> list:
    """(rank, causal pairs, masked flops) for each rank of a layout."""
    layout = ShardLayout.build(mode, sp, seq_len)
    pairs = causal_pairs(layout)
    # each allowed pair costs one score and one value product per head
    return [(r, p, attention_flops(bs, hs, 1, 1, dim) * p) for r, p in enumerate(pairs)]


__all__ = [
    "EngineParity", "attention_inputs", "oracle_reference", "run_engine", "engine_parity", "model_logits",
    "step_gradients", "max_grad_gap", "finite_difference_check", "toy_gradients", "toy_local_gradient",
    "measure_bytes", "analytic_bytes", "asymptotic_bytes", "ulysses_formula", "balance_rows", "report",
    "padded_head_count",
]
