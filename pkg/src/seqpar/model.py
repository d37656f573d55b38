"""A tiny pre-norm decoder-only transformer with rotary positions."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .attention import AttentionConfig, sequence_parallel_attention
from .comm import GroupHandle
from .partition import ShardLayout
from .tensor import Tensor, matmul, reshape, rms_norm, rope_apply, silu, take


class PositionIdError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab: int = 64
    layers: int = 2
    hidden: int = 48
    hs: int = 6
    kv_hs: int = 6
    head_dim: int = 8
    mlp_ratio: int = 2
    norm_eps: float = 1e-6
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 0 or min(self.vocab, self.hidden, self.hs, self.kv_hs, self.head_dim, self.mlp_ratio) < 1:
            raise ValueError(f"model extents must be >= 1: {self}")
        if self.hidden != self.hs * self.head_dim:
            raise ValueError(f"hidden={self.hidden} must equal hs*head_dim={self.hs * self.head_dim}")
        if self.hs % self.kv_hs:
            raise ValueError(f"hs={self.hs} must be a multiple of kv_hs={self.kv_hs}")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for RoPE")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> list:
    """Parameter names and shapes in initialisation order."""
    h, d = cfg.hidden, cfg.head_dim
    shapes = [("embed", (cfg.vocab, h))]
    for i in range(cfg.layers):
        shapes += [
            (f"l{i}.attn_norm", (h,)),
            (f"l{i}.wq", (h, cfg.hs * d)),
            (f"l{i}.wk", (h, cfg.kv_hs * d)),
            (f"l{i}.wv", (h, cfg.kv_hs * d)),
            (f"l{i}.wo", (cfg.hs * d, h)),
            (f"l{i}.mlp_norm", (h,)),
            (f"l{i}.w_up", (h, cfg.mlp_ratio * h)),
            (f"l{i}.w_down", (cfg.mlp_ratio * h, h)),
        ]
    shapes += [("final_norm", (h,)), ("lm_head", (h, cfg.vocab))]
    return shapes


def init_params(cfg: ModelConfig) -> dict:
    # drawn in a fixed global order so every rank (and every sp) gets the same weights
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("norm"):
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


class TinyDecoder:
    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, requires_grad: bool = True):
        self.cfg = cfg
        arrays = init_params(cfg) if params is None else params
        self.params = {k: Tensor(np.array(v, copy=True), requires_grad=requires_grad) for k, v in arrays.items()}

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def clone(self, requires_grad: bool = True) -> "TinyDecoder":
        return TinyDecoder(self.cfg, self.state_dict(), requires_grad)

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, tokens, position_ids, h: GroupHandle, layout: ShardLayout, attn: AttentionConfig,
                segments=None, unsafe_local_positions: bool = False) -> Tensor:
        """Logits [bs, L_local, vocab] for this rank's tokens.

        ``position_ids`` must be the global ids of the local tokens.  Omitting
        them under sequence parallelism is an error unless
        ``unsafe_local_positions`` is set, which reproduces the bug of RoPE
        seeing a local 0-based range.
        """
        cfg = self.cfg
        tokens = np.atleast_2d(np.asarray(tokens))
        bs, ll = tokens.shape
        if position_ids is None:
            if h.size > 1 and not unsafe_local_positions:
                raise PositionIdError(
                    "position_ids are required under sequence parallelism; the local default "
                    "range would re-encode every shard from 0"
                )
            position_ids = np.arange(ll)
        position_ids = np.asarray(position_ids)
        p = self.params
        x = take(p["embed"], tokens, axis=0)
        for i in range(cfg.layers):
            hn = rms_norm(x, p[f"l{i}.attn_norm"], cfg.norm_eps)
            q = reshape(matmul(hn, p[f"l{i}.wq"]), (bs, ll, cfg.hs, cfg.head_dim))
            k = reshape(matmul(hn, p[f"l{i}.wk"]), (bs, ll, cfg.kv_hs, cfg.head_dim))
            v = reshape(matmul(hn, p[f"l{i}.wv"]), (bs, ll, cfg.kv_hs, cfg.head_dim))
            q = rope_apply(q, position_ids)
            k = rope_apply(k, position_ids)
            o = sequence_parallel_attention(attn, h, q, k, v, layout, segments)
            x = x + matmul(reshape(o, (bs, ll, cfg.hs * cfg.head_dim)), p[f"l{i}.wo"])
            hn = rms_norm(x, p[f"l{i}.mlp_norm"], cfg.norm_eps)
            x = x + matmul(silu(matmul(hn, p[f"l{i}.w_up"])), p[f"l{i}.w_down"])
        x = rms_norm(x, p["final_norm"], cfg.norm_eps)
        return matmul(x, p["lm_head"])

    __call__ = forward
