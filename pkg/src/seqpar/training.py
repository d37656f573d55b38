"""SFT and DPO training loops with one model replica per sequence-parallel rank."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionConfig, preferred_layout
from .comm import CommFabric, ConfigError, GroupHandle, RankContext, all_reduce_array
from .losses import (ShardedLossParts, dpo_loss_sharded, reduced_dpo_sums, sequence_logprob,
                     sft_loss_sharded)
from .model import ModelConfig, TinyDecoder
from .partition import (IGNORE_INDEX, LAYOUTS, ShardLayout, TrainBatch, make_position_ids, pad_batch,
                        replicate_packing_mask, shard)
from .tensor import backward, global_norm

TASKS = ("sft", "dpo")
REDUCTIONS = ("grad_aware", "plain")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainerConfig:
    task: str = "sft"
    engine: str = "oracle"
    sp: int = 1
    layout: Optional[str] = None
    lr: float = 0.5
    epochs: int = 8
    grad_accum: int = 8
    beta: float = 0.1
    seed: int = 0
    reduction: str = "grad_aware"
    sft_normalization: str = "global_mean"
    scheduler: str = "lockstep"
    cutoff_len: Optional[int] = 64
    pad_to_cutoff: bool = True
    ulysses_degree: Optional[int] = None
    ring_degree: Optional[int] = None
    insp: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")
        if self.grad_accum < 1:
            raise ConfigError(f"grad_accum must be >= 1, got {self.grad_accum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.layout is None:
            self.layout = preferred_layout(self.engine)
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    step: int
    loss: float
    grad_norm: float
    param_delta: float
    dpo_sums: list = field(default_factory=list)


# -- datasets ------------------------------------------------------------


def make_sft_dataset(n: int = 30, vocab: int = 64, seed: int = 0, min_len: int = 12,
                     max_len: int = 40) -> list:
    """Random prompt/response sequences; only response tokens are supervised."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = rng.integers(1, vocab, size=length)
        prompt = int(rng.integers(2, length // 2 + 1))
        labels = tokens.copy()
        labels[:prompt] = IGNORE_INDEX
        out.append(TrainBatch.from_record({"tokens": tokens.tolist(), "labels": labels.tolist()}))
    return out


def make_dpo_dataset(n: int = 30, vocab: int = 64, seed: int = 0, prompt_len=(4, 12),
                     answer_len=(6, 20)) -> list:
    """(chosen, rejected) pairs sharing a prompt, with differently sampled answers."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prompt = rng.integers(1, vocab, size=int(rng.integers(*prompt_len)))
        pair = []
        for _ in range(2):
            ans = rng.integers(1, vocab, size=int(rng.integers(*answer_len)))
            tokens = np.concatenate([prompt, ans])
            labels = tokens.copy()
            labels[: len(prompt)] = IGNORE_INDEX
            pair.append(TrainBatch.from_record({"tokens": tokens.tolist(), "labels": labels.tolist()}))
        out.append(tuple(pair))
    return out


# -- trainer -------------------------------------------------------------


class Trainer:
    """Holds one policy replica (and, for DPO, a frozen reference) per rank."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainerConfig):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.attn = AttentionConfig(
            hs=model_cfg.hs, kv_hs=model_cfg.kv_hs, dim=model_cfg.head_dim, engine=cfg.engine, sp=cfg.sp,
            ulysses_degree=cfg.ulysses_degree, ring_degree=cfg.ring_degree, insp=cfg.insp,
        )
        self.fabric = CommFabric(cfg.sp, cfg.sp)
        base = TinyDecoder(model_cfg)
        self.replicas = [base.clone() for _ in range(cfg.sp)]
        self.references = [base.clone(requires_grad=False) for _ in range(cfg.sp)] if cfg.task == "dpo" else None
        self.step_index = 0

    @property
    def model(self) -> TinyDecoder:
        return self.replicas[0]

    def _prepare(self, batch: TrainBatch):
        padded = pad_batch(batch, self.cfg.sp, cutoff_len=self.cfg.cutoff_len, to_cutoff=self.cfg.pad_to_cutoff)
        layout = ShardLayout.build(self.cfg.layout, self.cfg.sp, len(padded))
        return padded, layout

    def _logits(self, model: TinyDecoder, h: GroupHandle, padded: TrainBatch, layout: ShardLayout):
        r = h.index
        segments = replicate_packing_mask(padded.segment_ids, h) if padded.segment_ids is not None else None
        tokens = shard(padded.tokens, layout, r)[None]
        pos = make_position_ids(layout, r)
        labels = shard(padded.labels, layout, r)[None]
        return model.forward(tokens, pos, h, layout, self.attn, segments), labels

    def _micro_loss(self, h: GroupHandle, rank: int, sample):
        cfg = self.cfg
        model = self.replicas[rank]
        grad_aware = cfg.reduction == "grad_aware"
        if cfg.task == "sft":
            padded, layout = self._prepare(sample)
            logits, labels = self._logits(model, h, padded, layout)
            parts = ShardedLossParts.sft(logits, labels)
            return sft_loss_sharded(h, parts, cfg.sft_normalization, grad_aware), None
        ref = self.references[rank]
        sums = {}
        for name, batch in zip(("chosen", "rejected"), sample):
            padded, layout = self._prepare(batch)
            logits, labels = self._logits(model, h, padded, layout)
            sums["policy_" + name] = sequence_logprob(logits, labels)
            ref_logits, _ = self._logits(ref, h, padded, layout)
            sums["ref_" + name] = sequence_logprob(ref_logits, labels)
        parts = ShardedLossParts(**sums)
        return dpo_loss_sharded(h, parts, cfg.beta, grad_aware), reduced_dpo_sums(h, parts)

    def _rank_step(self, ctx: RankContext, samples: Sequence):
        h = ctx.sp_group
        model = self.replicas[ctx.rank]
        model.zero_grad()
        losses, sums = [], []
        for sample in samples:
            loss, dpo = self._micro_loss(h, ctx.rank, sample)
            backward(loss)
            losses.append(loss.item())
            if dpo is not None:
                sums.append(dpo)
        names = [k for k, _ in model.named_parameters()]
        grads = [model.params[k].grad if model.params[k].grad is not None else np.zeros_like(model.params[k].data)
                 for k in names]
        flat = np.concatenate([g.ravel() for g in grads])
        # average over the SP group, then over micro-batches
        flat = all_reduce_array(h, flat) / h.size / len(samples)
        offset = 0
        synced = {}
        for k in names:
            p = model.params[k]
            synced[k] = flat[offset: offset + p.data.size].reshape(p.data.shape)
            offset += p.data.size
        loss = math.fsum(losses) / len(losses)
        if not math.isfinite(loss):
            raise TrainingDiverged(self.step_index, loss)
        delta = 0.0
        for k in names:
            p = model.params[k]
            p.grad = synced[k]
            if self.cfg.lr:
                step = self.cfg.lr * synced[k]
                p.data = p.data - step
                delta += float(np.sum(step * step))
        return loss, global_norm(synced.values()), math.sqrt(delta), sums

    def train_step(self, samples: Sequence) -> StepReport:
        """One optimizer step over ``samples`` (the micro-batches of one accumulation window)."""
        if not samples:
            raise ValueError("train_step needs at least one sample")
        results = self.fabric.run(lambda ctx: self._rank_step(ctx, samples), scheduler=self.cfg.scheduler)
        loss, gnorm, delta, sums = results[0]
        for r, res in enumerate(results[1:], 1):
            if res[0] != loss or res[1] != gnorm:
                raise RuntimeError(f"rank {r} disagrees with rank 0 on loss or grad norm")
        report = StepReport(self.step_index, loss, gnorm, delta, sums)
        self.step_index += 1
        return report

    def synced_gradients(self) -> dict:
        """Synchronized gradients left on rank 0's replica by the last step."""
        return {k: p.grad for k, p in self.model.named_parameters()}


def run_training(trainer: Trainer, dataset: Sequence) -> list:
    """Train for ``trainer.cfg.epochs`` passes over ``dataset`` in a fixed order."""
    if not dataset:
        raise ValueError("empty dataset")
    k = trainer.cfg.grad_accum
    reports = []
    for _ in range(trainer.cfg.epochs):
        for i in range(0, len(dataset), k):
            reports.append(trainer.train_step(dataset[i: i + k]))
    return reports


def write_curve_csv(path, reports: Sequence[StepReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "grad_norm"])
        for rep in reports:
            w.writerow([rep.step, repr(rep.loss), repr(rep.grad_norm)])
