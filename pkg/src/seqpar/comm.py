"""Simulated process groups, rendezvous collectives and byte accounting.

A :class:`CommFabric` owns ``world_size`` virtual ranks split into
sequence-parallel groups of ``sp`` consecutive ranks.  ``fabric.run(fn)``
executes ``fn(ctx)`` once per rank under one of two schedulers:

``lockstep``
    single OS thread; every rank is a greenlet and the hub resumes ranks in
    round-robin order, switching away whenever a rank blocks in a collective.
``threads``
    one thread per rank; collectives rendezvous on a shared condition variable.

Collective outputs are computed once, from inputs ordered by group index, so
results do not depend on arrival order.  Byte counters use a send-side model:

=================  =========================================
all_to_all         local_bytes * (n - 1) / n
all_gather         local_bytes * (n - 1)
reduce_scatter     shard_bytes * (n - 1)   (backward of all_gather)
p2p                payload bytes per ring shift
all_reduce         2 * local_bytes * (n - 1) / n
broadcast          payload_bytes * (n - 1) / n
=================  =========================================
"""
from __future__ import annotations

import csv
import random
import threading
from contextlib import nullcontext
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Optional, Sequence

import numpy as np
from greenlet import greenlet

from .tensor import Tensor, custom_op

PRIMITIVES = ("all_to_all", "all_gather", "reduce_scatter", "p2p", "all_reduce", "broadcast")
SCHEDULERS = ("lockstep", "threads")


class ConfigError(ValueError):
    pass


class CollectiveError(RuntimeError):
    pass


class RankAborted(RuntimeError):
    """Raised in ranks still waiting when another rank failed."""


@dataclass(frozen=True)
class CommStats:
    rank: int
    primitive: str
    calls: int
    bytes: int


# -- schedulers ----------------------------------------------------------


class _LockstepScheduler:
    def __init__(self, order_seed: Optional[int] = None):
        self.lock = nullcontext()
        self.progress = 0
        self.aborted = False
        self.hub = None
        self._rng = random.Random(order_seed) if order_seed is not None else None

    def notify(self):
        self.progress += 1

    def wait_for(self, pred):
        while not pred():
            if self.aborted:
                raise RankAborted("another rank failed")
            self.hub.switch()

    def run(self, tasks: Sequence[Callable[[], Any]]):
        self.hub = greenlet.getcurrent()
        glets = [greenlet(t, parent=self.hub) for t in tasks]
        results: list = [None] * len(tasks)
        errors: dict[int, BaseException] = {}
        while any(not g.dead for g in glets):
            before = self.progress
            order = list(range(len(glets)))
            if self._rng is not None:
                self._rng.shuffle(order)
            for r in order:
                g = glets[r]
                if g.dead:
                    continue
                try:
                    res = g.switch()
                except BaseException as e:  # noqa: BLE001 - forwarded to caller
                    errors[r] = e
                    self.aborted = True
                    self.progress += 1
                    continue
                if g.dead:
                    results[r] = res
                    self.progress += 1
            if self.progress == before and not self.aborted:
                self.aborted = True
                errors.setdefault(-1, CollectiveError("collective deadlock: no rank can make progress"))
        return results, errors


class _ThreadScheduler:
    def __init__(self, timeout: float = 300.0):
        self.lock = threading.Condition(threading.RLock())
        self.aborted = False
        self.timeout = timeout

    def notify(self):
        self.lock.notify_all()

    def wait_for(self, pred):
        ok = self.lock.wait_for(lambda: pred() or self.aborted, timeout=self.timeout)
        if not pred():
            if self.aborted:
                raise RankAborted("another rank failed")
            if not ok:
                raise CollectiveError("collective timed out")

    def run(self, tasks):
        results: list = [None] * len(tasks)
        errors: dict[int, BaseException] = {}

        def body(r):
            try:
                results[r] = tasks[r]()
            except BaseException as e:  # noqa: BLE001
                errors[r] = e
                with self.lock:
                    self.aborted = True
                    self.lock.notify_all()

        threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(len(tasks))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results, errors


# -- groups --------------------------------------------------------------


class _Slot:
    __slots__ = ("kind", "inputs", "outputs", "error", "done", "taken")

    def __init__(self, kind):
        self.kind = kind
        self.inputs = {}
        self.outputs = None
        self.error = None
        self.done = False
        self.taken = 0


class CommGroup:
    def __init__(self, fabric: "CommFabric", ranks: tuple):
        self.fabric = fabric
        self.ranks = ranks
        self.size = len(ranks)
        self._index = {r: i for i, r in enumerate(ranks)}
        self._calls = [0] * self.size
        self._slots: dict[int, _Slot] = {}

    def index(self, rank: int) -> int:
        return self._index[rank]

    def exchange(self, rank: int, kind: str, payload, combine):
        """Rendezvous: every member contributes ``payload``; ``combine`` maps the
        rank-ordered list of payloads to a list of per-member outputs."""
        i = self._index[rank]
        if self.size == 1:
            return combine([payload])[0]
        sched = self.fabric._sched
        if sched is None:
            raise CollectiveError(f"{kind} on a group of {self.size} ranks outside fabric.run")
        with sched.lock:
            k = self._calls[i]
            self._calls[i] += 1
            slot = self._slots.get(k)
            if slot is None:
                slot = self._slots[k] = _Slot(kind)
            elif slot.kind != kind:
                raise CollectiveError(
                    f"rank {rank} entered {kind} while group {self.ranks} is in {slot.kind}"
                )
            slot.inputs[i] = payload
            if len(slot.inputs) == self.size:
                try:
                    slot.outputs = combine([slot.inputs[j] for j in range(self.size)])
                except Exception as e:  # noqa: BLE001 - delivered to every member
                    slot.error = e
                slot.done = True
                sched.notify()
            else:
                sched.wait_for(lambda: slot.done)
            slot.taken += 1
            if slot.taken == self.size:
                del self._slots[k]
            if slot.error is not None:
                raise slot.error
            return slot.outputs[i]


class GroupHandle:
    """A rank's view of a group: collectives take this as their first argument."""

    def __init__(self, group: CommGroup, rank: int):
        self.group = group
        self.rank = rank

    @property
    def fabric(self) -> "CommFabric":
        return self.group.fabric

    @property
    def size(self) -> int:
        return self.group.size

    @property
    def index(self) -> int:
        return self.group.index(self.rank)

    @property
    def ranks(self) -> tuple:
        return self.group.ranks

    def subgroup(self, local_indices: Sequence[int]) -> "GroupHandle":
        ranks = tuple(self.group.ranks[i] for i in local_indices)
        if self.rank not in ranks:
            raise ConfigError(f"rank {self.rank} not in subgroup {ranks}")
        return GroupHandle(self.fabric.group(ranks), self.rank)

    def __repr__(self):
        return f"GroupHandle(rank={self.rank}, ranks={self.ranks})"


class RankContext:
    def __init__(self, fabric: "CommFabric", rank: int):
        self.fabric = fabric
        self.rank = rank
        self.sp_group = GroupHandle(fabric.group(fabric.group_of(rank)), rank)

    @property
    def sp_rank(self) -> int:
        return self.sp_group.index


class CommFabric:
    def __init__(self, world_size: int, sp: int):
        if world_size < 1 or sp < 1:
            raise ConfigError(f"world size and sp must be >= 1 (got N={world_size}, sp={sp})")
        if world_size % sp:
            raise ConfigError(f"world size {world_size} is not divisible by sp={sp}")
        self.world_size = world_size
        self.sp = sp
        self.groups = [tuple(range(g * sp, (g + 1) * sp)) for g in range(world_size // sp)]
        self._groups: dict[tuple, CommGroup] = {}
        self._group_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._sched = None
        self.reset()

    def reset(self) -> None:
        self.counters = {(r, p): [0, 0] for r in range(self.world_size) for p in PRIMITIVES}
        self.flops = [0] * self.world_size

    def group_of(self, rank: int) -> tuple:
        return self.groups[rank // self.sp]

    def group(self, ranks: Sequence[int]) -> CommGroup:
        ranks = tuple(ranks)
        with self._group_lock:
            g = self._groups.get(ranks)
            if g is None:
                g = self._groups[ranks] = CommGroup(self, ranks)
            return g

    def context(self, rank: int) -> RankContext:
        return RankContext(self, rank)

    def account(self, ranks: Sequence[int], primitive: str, nbytes: Sequence[int] | int) -> None:
        if isinstance(nbytes, int):
            nbytes = [nbytes] * len(ranks)
        with self._stats_lock:
            for r, b in zip(ranks, nbytes):
                c = self.counters[(r, primitive)]
                c[0] += 1
                c[1] += int(b)

    def add_flops(self, rank: int, n: int) -> None:
        with self._stats_lock:
            self.flops[rank] += int(n)

    def bytes_sent(self, rank: int, primitive: Optional[str] = None) -> int:
        prims = PRIMITIVES if primitive is None else (primitive,)
        return sum(self.counters[(rank, p)][1] for p in prims)

    def run(self, fn: Callable[[RankContext], Any], scheduler: str = "lockstep",
            order_seed: Optional[int] = None) -> list:
        """Run ``fn`` on every rank; returns per-rank results indexed by rank."""
        if scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {scheduler!r}; expected one of {SCHEDULERS}")
        if self._sched is not None:
            raise CollectiveError("fabric.run is not re-entrant")
        sched = _LockstepScheduler(order_seed) if scheduler == "lockstep" else _ThreadScheduler()
        tasks = [(lambda r=r: fn(self.context(r))) for r in range(self.world_size)]
        self._sched = sched
        try:
            results, errors = sched.run(tasks)
        finally:
            self._sched = None
            self._groups = {}
        if errors:
            real = {r: e for r, e in errors.items() if not isinstance(e, RankAborted)}
            raise (real or errors)[min(real or errors)]
        return results


def init_groups(world_size: int, sp: int) -> CommFabric:
    return CommFabric(world_size, sp)


# -- array-level primitives ----------------------------------------------


def _a2a(h: GroupHandle, arr: np.ndarray, scatter_dim: int, gather_dim: int) -> np.ndarray:
    n = h.size
    if arr.shape[scatter_dim] % n:
        raise CollectiveError(
            f"all_to_all: extent {arr.shape[scatter_dim]} of dim {scatter_dim} "
            f"is not divisible by group size {n}"
        )
    pieces = np.split(arr, n, axis=scatter_dim)
    fabric, ranks = h.fabric, h.ranks

    def combine(inputs):
        fabric.account(ranks, "all_to_all", [p[0].nbytes * (n - 1) for p in inputs])
        return [np.concatenate([inputs[s][d] for s in range(n)], axis=gather_dim) for d in range(n)]

    return h.group.exchange(h.rank, "all_to_all", pieces, combine)


def _tree_sum(arrays: list) -> np.ndarray:
    # fixed pairwise order; exact scaling for identical inputs when n is a power of two
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def _allreduce_arrays(h: GroupHandle, arr: np.ndarray, exact: Optional[Fraction] = None):
    n = h.size
    fabric, ranks = h.fabric, h.ranks

    def combine(inputs):
        shapes = {a.shape for a, _ in inputs}
        if len(shapes) != 1:
            raise CollectiveError(f"all_reduce shape mismatch across ranks: {sorted(shapes)}")
        fabric.account(ranks, "all_reduce", [2 * a.nbytes * (n - 1) // n for a, _ in inputs])
        if all(e is not None for _, e in inputs):
            total = sum((e for _, e in inputs), Fraction(0))
            out = np.asarray(float(total), dtype=inputs[0][0].dtype).reshape(inputs[0][0].shape)
            return [(out.copy(), total) for _ in range(n)]
        out = _tree_sum([a for a, _ in inputs])
        return [(out.copy(), None) for _ in range(n)]

    return h.group.exchange(h.rank, "all_reduce", (arr, exact), combine)


def _allgather_arrays(h: GroupHandle, arr: np.ndarray, dim: int) -> np.ndarray:
    n = h.size
    fabric, ranks = h.fabric, h.ranks

    def combine(inputs):
        ref = list(inputs[0].shape)
        ref[dim] = None
        for a in inputs:
            s = list(a.shape)
            s[dim] = None
            if s != ref:
                raise CollectiveError(
                    f"all_gather: non-gather extents differ: {[x.shape for x in inputs]}"
                )
        fabric.account(ranks, "all_gather", [a.nbytes * (n - 1) for a in inputs])
        out = np.concatenate(inputs, axis=dim)
        return [out.copy() for _ in range(n)]

    return h.group.exchange(h.rank, "all_gather", arr, combine)


def _reduce_scatter_arrays(h: GroupHandle, arr: np.ndarray, dim: int, extents: Sequence[int]):
    n = h.size
    fabric, ranks = h.fabric, h.ranks
    bounds = np.cumsum([0] + list(extents))

    def combine(inputs):
        outs = []
        for d in range(n):
            sl = (slice(None),) * (dim % arr.ndim) + (slice(bounds[d], bounds[d + 1]),)
            outs.append(_tree_sum([a[sl] for a in inputs]))
        fabric.account(ranks, "reduce_scatter", [o.nbytes * (n - 1) for o in outs])
        return outs

    return h.group.exchange(h.rank, "reduce_scatter", arr, combine)


def ring_exchange(h: GroupHandle, arrays: Sequence[np.ndarray], meta: Any = None, step: int = 1):
    """Point-to-point ring shift: member i receives from member (i - step) mod n.

    Float ``arrays`` are byte-counted as one p2p call; ``meta`` (integer position
    bookkeeping) travels along uncounted.
    """
    n = h.size
    fabric, ranks = h.fabric, h.ranks

    def combine(inputs):
        shapes = {tuple(a.shape for a in arrs) for arrs, _ in inputs}
        if len(shapes) != 1:
            raise CollectiveError(f"ring shift payload shape mismatch: {sorted(shapes)}")
        if n > 1:
            fabric.account(ranks, "p2p", [sum(a.nbytes for a in arrs) for arrs, _ in inputs])
        return [inputs[(d - step) % n] for d in range(n)]

    if n == 1:
        fabric.account(ranks, "p2p", 0)
        return tuple(arrays), meta
    arrs, m = h.group.exchange(h.rank, "p2p", (tuple(arrays), meta), combine)
    return tuple(a.copy() for a in arrs), m


def gather_object(h: GroupHandle, obj: Any) -> list:
    """Uncounted metadata all-gather (position ids, shapes)."""
    return h.group.exchange(h.rank, "meta", obj, lambda inputs: [list(inputs)] * len(inputs))


def broadcast_array(h: GroupHandle, arr: Optional[np.ndarray], root: int = 0) -> np.ndarray:
    n = h.size
    fabric, ranks = h.fabric, h.ranks

    def combine(inputs):
        src = inputs[root]
        fabric.account(ranks, "broadcast", src.nbytes * (n - 1) // n)
        return [src.copy() for _ in range(n)]

    return h.group.exchange(h.rank, "broadcast", arr, combine)


# -- differentiable collectives ------------------------------------------


def all_to_all(h: GroupHandle, x: Tensor, scatter_dim: int, gather_dim: int) -> Tensor:
    """sp-way all-to-all: member r receives the r-th ``scatter_dim`` slice of every
    member, concatenated along ``gather_dim`` in rank order."""
    scatter_dim %= x.ndim
    gather_dim %= x.ndim
    out = _a2a(h, x.data, scatter_dim, gather_dim)
    return custom_op(
        out, (x,), lambda g: (_a2a(h, g, gather_dim, scatter_dim),), "all_to_all", collective=True
    )


def all_gather(h: GroupHandle, x: Tensor, dim: int) -> Tensor:
    dim %= x.ndim
    extents = [e for e in gather_object(h, x.shape[dim])]
    out = _allgather_arrays(h, x.data, dim)
    return custom_op(
        out,
        (x,),
        lambda g: (_reduce_scatter_arrays(h, g, dim, extents),),
        "all_gather",
        collective=True,
    )


def ring_shift(h: GroupHandle, x: Tensor) -> Tensor:
    """Member r receives member (r - 1)'s payload; backward shifts the other way."""
    (out,), _ = ring_exchange(h, (x.data,))
    return custom_op(
        out, (x,), lambda g: (ring_exchange(h, (g,), step=-1)[0][0],), "ring_shift", collective=True
    )


def all_reduce_plain(h: GroupHandle, x: Tensor) -> Tensor:
    """Forward sum over the group; backward passes the local gradient through
    unchanged (the missing backward all-reduce is intentional)."""
    out, exact = _allreduce_arrays(h, x.data, x.exact)
    res = custom_op(out, (x,), lambda g: (g,), "all_reduce_plain")
    res.exact = exact
    return res


def all_reduce_grad_aware(h: GroupHandle, x: Tensor) -> Tensor:
    """Forward sum over the group; backward also sums the upstream gradients."""
    out, exact = _allreduce_arrays(h, x.data, x.exact)
    res = custom_op(
        out, (x,), lambda g: (_allreduce_arrays(h, g)[0],), "all_reduce_grad_aware", collective=True
    )
    res.exact = exact
    return res


def all_reduce_array(h: GroupHandle, arr: np.ndarray) -> np.ndarray:
    return _allreduce_arrays(h, np.asarray(arr))[0]


# -- reporting -----------------------------------------------------------


def report(fabric: CommFabric) -> list[CommStats]:
    return [
        CommStats(r, p, *fabric.counters[(r, p)])
        for r in range(fabric.world_size)
        for p in PRIMITIVES
    ]


def write_stats_csv(path, engine: str, stats: Sequence[CommStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["engine", "rank", "primitive", "calls", "bytes"])
        for s in stats:
            w.writerow([engine, s.rank, s.primitive, s.calls, s.bytes])
