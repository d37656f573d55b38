"""Sharded SFT and DPO losses.

Each rank only sees its own tokens, so the loss is assembled from per-rank
partial sums.  Policy terms go through the gradient-aware all-reduce; counts
and reference-model terms (which carry no gradient) through the plain one.
For DPO the reduction happens *before* the sigmoid: the loss of summed
log-ratios is not the sum of per-shard losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .comm import GroupHandle, all_reduce_grad_aware, all_reduce_plain
from .partition import IGNORE_INDEX
from .tensor import Tensor, exact_sum, getitem, log_softmax_lastdim, softplus


class LossError(ValueError):
    pass


def sequence_logprob(logits: Tensor, labels) -> Tensor:
    """Sum over supervised positions of log softmax(logits)[label].

    ``labels`` are next-token targets aligned with ``logits`` rows;
    ``IGNORE_INDEX`` positions are skipped.  Returns an exact-summed scalar
    (0 when nothing is supervised).
    """
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise LossError(f"logits {logits.shape} do not align with labels {labels.shape}")
    sel = np.nonzero(labels != IGNORE_INDEX)
    logp = log_softmax_lastdim(logits)
    picked = getitem(logp, sel + (labels[sel],))
    return exact_sum(picked)


def supervised_count(labels) -> int:
    return int(np.count_nonzero(np.asarray(labels) != IGNORE_INDEX))


def _neg_exact(t: Tensor) -> Tensor:
    out = -t
    out.exact = None if t.exact is None else -t.exact
    return out


@dataclass
class ShardedLossParts:
    """One rank's partial sums.  For SFT ``nll`` and ``count``; for DPO the four
    log-prob sums (reference ones detached)."""

    nll: Optional[Tensor] = None
    count: int = 0
    policy_chosen: Optional[Tensor] = None
    policy_rejected: Optional[Tensor] = None
    ref_chosen: Optional[Tensor] = None
    ref_rejected: Optional[Tensor] = None

    @classmethod
    def sft(cls, logits: Tensor, labels) -> "ShardedLossParts":
        return cls(nll=_neg_exact(sequence_logprob(logits, labels)), count=supervised_count(labels))

    def __post_init__(self):
        if self.count < 0:
            raise LossError("supervised count must be non-negative")


def _reducer(grad_aware: bool):
    return all_reduce_grad_aware if grad_aware else all_reduce_plain


def sft_loss_sharded(h: GroupHandle, parts: ShardedLossParts, normalization: str = "global_mean",
                     grad_aware: bool = True) -> Tensor:
    """Token-mean NLL over the whole sequence, identical on every rank.

    ``normalization="rank_mean"`` instead averages each rank's own token mean
    (kept for comparison; it is not equivalent to the unsharded loss).
    ``grad_aware=False`` reduces the NLL with the plain all-reduce, which
    leaves every rank with only its own share of the gradient.
    """
    reduce = _reducer(grad_aware)
    if normalization == "global_mean":
        total = reduce(h, parts.nll)
        count = all_reduce_plain(h, Tensor(float(parts.count))).item()
        if count == 0:
            raise LossError("no supervised tokens")
        return total / count
    if normalization == "rank_mean":
        local = parts.nll / max(parts.count, 1)
        return reduce(h, local) / h.size
    raise LossError(f"unknown normalization {normalization!r}")


def _check_beta(beta: float):
    if not beta > 0:
        raise LossError(f"beta must be positive, got {beta}")


def dpo_from_sums(pc, pr, rc, rr, beta: float) -> Tensor:
    """-log sigmoid(beta * ((pc - rc) - (pr - rr))) computed as softplus(-x)."""
    _check_beta(beta)
    return softplus(-(((pc - rc) - (pr - rr)) * beta))


def dpo_loss_sharded(h: GroupHandle, parts: ShardedLossParts, beta: float, grad_aware: bool = True) -> Tensor:
    _check_beta(beta)
    reduce = _reducer(grad_aware)
    pc = reduce(h, parts.policy_chosen)
    pr = reduce(h, parts.policy_rejected)
    rc = all_reduce_plain(h, parts.ref_chosen.detach())
    rr = all_reduce_plain(h, parts.ref_rejected.detach())
    return dpo_from_sums(pc, pr, rc, rr, beta)


def reduced_dpo_sums(h: GroupHandle, parts: ShardedLossParts) -> tuple:
    """The four all-reduced log-prob sums as floats (no gradient)."""
    return tuple(
        all_reduce_plain(h, t.detach()).item()
        for t in (parts.policy_chosen, parts.policy_rejected, parts.ref_chosen, parts.ref_rejected)
    )


def wrong_order_dpo(h: GroupHandle, parts: ShardedLossParts, beta: float) -> Tensor:
    """Negative control: per-rank DPO loss on local partial sums, then summed."""
    local = dpo_from_sums(parts.policy_chosen, parts.policy_rejected,
                          parts.ref_chosen.detach(), parts.ref_rejected.detach(), beta)
    return all_reduce_grad_aware(h, local)
