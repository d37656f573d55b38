"""Batch padding and sequence sharding across a sequence-parallel group."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .comm import GroupHandle, broadcast_array

IGNORE_INDEX = -100
LAYOUTS = ("naive", "zigzag")


class PartitionError(ValueError):
    pass


@dataclass
class TrainBatch:
    """One sequence with per-position fields of equal length.

    ``labels`` are next-token targets aligned with ``tokens`` (already shifted);
    unsupervised positions hold ``IGNORE_INDEX``.
    """

    tokens: np.ndarray
    labels: np.ndarray
    position_ids: Optional[np.ndarray] = None
    segment_ids: Optional[np.ndarray] = None
    image_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.tokens)
        if self.position_ids is None:
            self.position_ids = np.arange(n, dtype=np.int64)
        for name in ("position_ids", "segment_ids", "image_map"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                setattr(self, name, v)
                if len(v) != n:
                    raise PartitionError(f"{name} has length {len(v)}, tokens have {n}")
        if len(self.labels) != n:
            raise PartitionError(f"labels have length {len(self.labels)}, tokens have {n}")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_record(cls, rec: dict) -> "TrainBatch":
        """Build from a JSON record whose ``labels`` align with ``tokens``
        (unshifted, as written by annotators); targets are shifted here."""
        tokens = np.asarray(rec["tokens"], dtype=np.int64)
        labels = np.asarray(rec.get("labels", rec["tokens"]), dtype=np.int64)
        return cls(
            tokens,
            shift_labels(labels),
            segment_ids=rec.get("segment_ids"),
            image_map=rec.get("image_map"),
        )


def shift_labels(labels: np.ndarray) -> np.ndarray:
    """Next-token targets: position i predicts label i+1; the last position is ignored."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, IGNORE_INDEX)
    out[:-1] = labels[1:]
    return out


def load_jsonl(path) -> list:
    """Read batch records.  SFT lines hold ``tokens``/``labels`` (plus optional
    ``segment_ids``/``image_map``); DPO lines hold ``chosen`` and ``rejected``
    objects of that same shape.  Returns TrainBatch or (chosen, rejected) pairs."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "chosen" in rec:
            out.append((TrainBatch.from_record(rec["chosen"]), TrainBatch.from_record(rec["rejected"])))
        else:
            out.append(TrainBatch.from_record(rec))
    return out


def padded_length(length: int, sp: int, cutoff_len: Optional[int] = None, to_cutoff: bool = False) -> int:
    """Smallest multiple of 8*sp covering ``length``; with ``to_cutoff`` the
    multiple of 8*sp nearest above ``cutoff_len`` instead."""
    if sp < 1:
        raise PartitionError(f"sp must be >= 1, got {sp}")
    m = 8 * sp
    if cutoff_len is not None and cutoff_len < length:
        raise PartitionError(f"cutoff_len {cutoff_len} is shorter than the sequence ({length})")
    if to_cutoff:
        if cutoff_len is None:
            raise PartitionError("to_cutoff padding needs cutoff_len")
        return -(-cutoff_len // m) * m
    return -(-length // m) * m


def pad_batch(batch: TrainBatch, sp: int, pad_token: int = 0, cutoff_len: Optional[int] = None,
              to_cutoff: bool = False) -> TrainBatch:
    n = len(batch)
    target = padded_length(n, sp, cutoff_len, to_cutoff)
    extra = target - n
    if extra == 0:
        return batch

    def ext(a, fill):
        return None if a is None else np.concatenate([a, np.full(extra, fill, dtype=np.int64)])

    last_seg = batch.segment_ids[-1] if batch.segment_ids is not None and n else 0
    return TrainBatch(
        tokens=ext(batch.tokens, pad_token),
        labels=ext(batch.labels, IGNORE_INDEX),
        position_ids=np.concatenate([batch.position_ids, np.arange(n, target, dtype=np.int64)]),
        segment_ids=ext(batch.segment_ids, last_seg),
        image_map=ext(batch.image_map, -1),
    )


@dataclass(frozen=True)
class ShardLayout:
    mode: str
    sp: int
    global_len: int
    indices: tuple = field(repr=False)

    @classmethod
    def build(cls, mode: str, sp: int, global_len: int) -> "ShardLayout":
        if mode not in LAYOUTS:
            raise PartitionError(f"unknown layout {mode!r}; expected one of {LAYOUTS}")
        if sp < 1:
            raise PartitionError(f"sp must be >= 1, got {sp}")
        if mode == "naive":
            if global_len % sp:
                raise PartitionError(f"length {global_len} not divisible by sp={sp}")
            step = global_len // sp
            idx = tuple(tuple(range(r * step, (r + 1) * step)) for r in range(sp))
        else:
            if global_len % (2 * sp):
                raise PartitionError(f"zigzag needs length divisible by 2*sp={2 * sp}, got {global_len}")
            c = global_len // (2 * sp)
            idx = tuple(
                tuple(range(r * c, (r + 1) * c)) + tuple(range((2 * sp - 1 - r) * c, (2 * sp - r) * c))
                for r in range(sp)
            )
        return cls(mode, sp, global_len, idx)

    def owned(self, rank: int) -> np.ndarray:
        return np.asarray(self.indices[rank], dtype=np.int64)

    @property
    def local_len(self) -> int:
        return self.global_len // self.sp


def shard(seq, layout: ShardLayout, rank: int, axis: int = -1) -> np.ndarray:
    seq = np.asarray(seq)
    if seq.shape[axis] != layout.global_len:
        raise PartitionError(f"sequence length {seq.shape[axis]} != layout length {layout.global_len}")
    return np.take(seq, layout.owned(rank), axis=axis)


def gather(shards: Sequence, layout: ShardLayout, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`shard`; ``shards`` must hold one entry per rank, in rank order."""
    if len(shards) != layout.sp:
        raise PartitionError(f"expected {layout.sp} shards, got {len(shards)}")
    shards = [np.asarray(s) for s in shards]
    for r, s in enumerate(shards):
        if s.shape[axis] != layout.local_len:
            raise PartitionError(f"shard {r} has length {s.shape[axis]}, expected {layout.local_len}")
    cat = np.concatenate(shards, axis=axis)
    order = np.concatenate([layout.owned(r) for r in range(layout.sp)])
    out = np.empty_like(cat)
    ax = axis % cat.ndim
    dst = [slice(None)] * cat.ndim
    dst[ax] = order
    out[tuple(dst)] = cat
    return out


def gather_tagged(tagged: Sequence[tuple], layout: ShardLayout, axis: int = -1) -> np.ndarray:
    """Gather from (rank, shard) pairs; missing or duplicate ranks are an error."""
    ranks = [r for r, _ in tagged]
    if sorted(ranks) != list(range(layout.sp)):
        raise PartitionError(f"shards must cover ranks 0..{layout.sp - 1} exactly once, got {ranks}")
    if ranks != sorted(ranks):
        raise PartitionError(f"shards out of rank order: {ranks}")
    return gather([s for _, s in tagged], layout, axis)


def make_position_ids(layout: ShardLayout, rank: int) -> np.ndarray:
    """Global RoPE positions of the tokens owned by ``rank``."""
    return layout.owned(rank)


def split_position_map(image_map, layout: ShardLayout, rank: int) -> np.ndarray:
    return shard(np.asarray(image_map, dtype=np.int64), layout, rank)


def replicate_packing_mask(mask: Optional[np.ndarray], group: GroupHandle) -> np.ndarray:
    """Copy the full-length packing mask from group member 0 to every member."""
    return broadcast_array(group, None if mask is None else np.asarray(mask, dtype=np.int64))


def shard_batch(batch: TrainBatch, layout: ShardLayout, rank: int) -> TrainBatch:
    """Shard every per-position field.  The packing mask is dropped here: it is
    never split, see :func:`replicate_packing_mask`."""
    return replace(
        batch,
        tokens=shard(batch.tokens, layout, rank),
        labels=shard(batch.labels, layout, rank),
        position_ids=shard(batch.position_ids, layout, rank),
        segment_ids=None,
        image_map=None if batch.image_map is None else split_position_map(batch.image_map, layout, rank),
    )


def causal_pairs(layout: ShardLayout) -> list:
    """Per-rank count of allowed causal (query, key) pairs, sum of (i + 1)."""
    return [int(np.sum(layout.owned(r) + 1)) for r in range(layout.sp)]
