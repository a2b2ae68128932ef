"""Collective communication over virtual processors.

All functions run on the calling VP's thread and take byte-level message
specs: ``sends[j]`` / ``recvs[i]`` are ``(context_offset, length)`` pairs
indexed by global VP id.  Typed wrappers live in :mod:`embsp.api`.
"""
from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blockio import Category, DiskRegion
from .sched import ProtocolError
from .vmem import Range

log = logging.getLogger(__name__)

# network frame header: src rho, dst rho, payload length
FRAME = struct.Struct("<IIQ")


class CollectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ReduceOp:
    """Commutative, associative element-wise operator."""

    name: str
    combine: Callable[[np.ndarray, np.ndarray], np.ndarray]
    identity: Callable[[np.dtype], object]


def _min_identity(dt):
    dt = np.dtype(dt)
    return np.inf if dt.kind == "f" else np.iinfo(dt).max


def _max_identity(dt):
    dt = np.dtype(dt)
    return -np.inf if dt.kind == "f" else np.iinfo(dt).min


SUM = ReduceOp("sum", np.add, lambda dt: 0)
MIN = ReduceOp("min", np.minimum, _min_identity)
MAX = ReduceOp("max", np.maximum, _max_identity)


# ------------------------------------------------------------ spec checks

def check_spec(rt, sends: Sequence[Range], recvs: Sequence[Range]) -> None:
    cfg = rt.cfg
    if len(sends) != cfg.v or len(recvs) != cfg.v:
        raise CollectiveError(f"alltoallv needs {cfg.v} send and recv entries, "
                              f"got {len(sends)} and {len(recvs)}")
    total = 0
    for what, spec in (("send", sends), ("recv", recvs)):
        for j, (off, n) in enumerate(spec):
            if n < 0 or (n and (off < 0 or off + n > cfg.mu)):
                raise CollectiveError(f"{what} region {j} = ({off}, {n}) outside [0, {cfg.mu})")
    total = sum(n for _, n in sends)
    if total > cfg.mu:
        raise CollectiveError(f"send total {total} exceeds mu={cfg.mu}")


# --------------------------------------------------------- boundary cache

class _Entry:
    __slots__ = ("buf", "seeded", "frags")

    def __init__(self, B: int):
        self.buf = bytearray(B)
        self.seeded = False
        self.frags: List[Tuple[int, int]] = []


class BoundaryCache:
    """Partially covered destination blocks, keyed by (receiver t, block)."""

    NLOCKS = 64

    def __init__(self, rt, st):
        self.rt = rt
        self.st = st
        self.B = rt.cfg.B
        self.entries: Dict[int, Dict[int, _Entry]] = {}
        self._lock = threading.Lock()
        self._stripes = [threading.Lock() for _ in range(self.NLOCKS)]
        self.blocks = 0

    def _get(self, t: int, blk: int) -> Tuple[_Entry, bool]:
        with self._lock:
            d = self.entries.setdefault(t, {})
            e = d.get(blk)
            if e is not None:
                return e, False
            e = d[blk] = _Entry(self.B)
            self.blocks += 1
        self.rt.reserve(self.st, self.B, "boundary block cache")
        return e, True

    @staticmethod
    def boundary_blocks(off: int, n: int, B: int) -> List[int]:
        """Blocks only partially covered by [off, off+n)."""
        if n <= 0:
            return []
        end = off + n
        first, last = off // B, (end - 1) // B
        out = []
        if off % B or (first == last and end % B):
            out.append(first)
        if end % B and last != first:
            out.append(last)
        return out

    def seed(self, t: int, recvs: Sequence[Range], mem: memoryview) -> None:
        """Copy the receiver's own bytes of its partial recv blocks."""
        B = self.B
        for off, n in recvs:
            for blk in self.boundary_blocks(off, n, B):
                e, new = self._get(t, blk)
                if new:
                    e.buf[:] = mem[blk * B:(blk + 1) * B]
                    e.seeded = True

    def merge(self, t: int, blk: int, lo: int, data: memoryview) -> None:
        e, _ = self._get(t, blk)
        with self._stripes[hash((t, blk)) % self.NLOCKS]:
            e.buf[lo:lo + len(data)] = data
            if not e.seeded:
                e.frags.append((lo, len(data)))

    def flush(self, t: int, q) -> int:
        """Write t's cached blocks home; returns bytes written."""
        vm = self.rt.vmem
        B = self.B
        with self._lock:
            mine = self.entries.pop(t, {})
        written = 0
        for blk in sorted(mine):
            e = mine[blk]
            if not e.seeded:
                # complete the block from the context image on disk
                img = bytearray(B)
                vm.read_aligned(q, t, blk * B, img, Category.BOUNDARY_FLUSH, charge=0)
                vm.driver.wait_all(q)
                for lo, n in e.frags:
                    img[lo:lo + n] = e.buf[lo:lo + n]
                e.buf = img
            vm.write_aligned(q, t, blk * B, e.buf, Category.BOUNDARY_FLUSH)
            written += B
        return written


# -------------------------------------------------------------- delivery

def deliver_direct(rt, q, cache: Optional[BoundaryCache], src: memoryview, tdst: int,
                   doff: int) -> None:
    """Write a message into local VP tdst's context at ``doff``.

    The block-aligned interior goes straight to disk; the partial blocks at
    either end are merged into the boundary cache for a single flush.
    """
    n = len(src)
    if n == 0:
        return
    vm = rt.vmem
    if vm.mapped:
        vm.memory(tdst)[doff:doff + n] = src
        rt.counters.charge_logical(Category.DELIVERY_WRITE, n)
        return
    B = rt.cfg.B
    end = doff + n
    a0 = -(-doff // B) * B
    a1 = end // B * B
    if a0 < a1:
        vm.write_aligned(q, tdst, a0, src[a0 - doff:a1 - doff], Category.DELIVERY_WRITE, charge=n)
    else:
        rt.counters.charge_logical(Category.DELIVERY_WRITE, n)
    if a0 <= a1:
        if doff < a0:
            cache.merge(tdst, doff // B, doff % B, src[:a0 - doff])
        if a1 < end:
            cache.merge(tdst, a1 // B, 0, src[a1 - doff:])
    else:
        cache.merge(tdst, doff // B, doff % B, src)


def _expect_len(table, tdst: int, src_rho: int, n: int, dst_rho: int) -> int:
    off, want = table[tdst][src_rho]
    if want != n:
        raise ProtocolError(f"alltoallv length mismatch: VP {src_rho} sends {n} bytes to "
                            f"VP {dst_rho}, which expects {want}")
    return off


# -------------------------------------------------------------- alltoallv

def alltoallv(rt, t: int, sends: Sequence[Range], recvs: Sequence[Range],
              label: str = "Alltoallv", kind: str = "alltoallv") -> None:
    """Direct-delivery alltoallv in three internal supersteps."""
    cfg = rt.cfg
    check_spec(rt, sends, recvs)
    st = rt.begin(t, kind)
    v, P, k, nloc = cfg.v, cfg.P, cfg.k, cfg.nlocal
    rho = rt.rho(t)
    vm = rt.vmem
    q = rt.queue(t)
    rt.mark(t, f"{label} Start")
    table = st.setdefault("table", lambda: [None] * nloc)
    ready = st.setdefault("ready", lambda: [False] * nloc)
    cache = st.setdefault("cache", lambda: BoundaryCache(rt, st))

    # internal superstep 1: publish offsets, deliver to threads that are ready
    mem = vm.memory(t)
    if not vm.mapped:
        cache.seed(t, recvs, mem)
    vm.swap_out(t, q, skip=recvs, reason="alltoallv")
    rt.driver.wait_all(q)
    table[t] = [tuple(r) for r in recvs]
    ready[t] = True
    rt.sched.round_sync(t, (st.seq, "publish", t // k))
    deferred = []
    ndirect = 0
    for j in range(v):
        if j % P != cfg.rank:
            continue
        tj = j // P
        so, sl = sends[j]
        if ready[tj]:
            doff = _expect_len(table, tj, rho, sl, j)
            deliver_direct(rt, q, cache, mem[so:so + sl], tj, doff)
            ndirect += 1
        else:
            deferred.append(j)
    rt.counters.count_msgs(direct=ndirect)
    rt.internal_barrier(t, 1)

    # internal superstep 2: remaining local messages, then the network
    if label == "Alltoall":
        rt.mark(t, "Comm Start")
        rt.mark(t, "Deliver Start")
    else:
        rt.mark(t, "Comm Start")
    for j in deferred:
        tj = j // P
        so, sl = sends[j]
        doff = _expect_len(table, tj, rho, sl, j)
        msg = vm.read_from_context(q, t, so, sl, Category.DELIVERY_READ, charge=sl)
        deliver_direct(rt, q, cache, msg, tj, doff)
    rt.counters.count_msgs(indirect=len(deferred))
    if P > 1:
        _par_comm(rt, t, st, sends, table, cache, q)
    rt.mark(t, "Deliver Finish" if label == "Alltoall" else "Comm Finish")
    rt.internal_barrier(t, 2)

    # internal superstep 3: flush boundary blocks
    if not vm.mapped:
        cache.flush(t, q)
    rt.driver.wait_all(q)
    rt.end_call(t, st)
    rt.end_superstep(t, reason="alltoallv")
    rt.mark(t, f"{label} End")


def _par_comm(rt, t, st, sends, table, cache, q) -> None:
    """Chunked network exchange for the current round (P > 1)."""
    cfg = rt.cfg
    P, k, nloc, alpha = cfg.P, cfg.k, cfg.nlocal, cfg.alpha
    rho = rt.rho(t)
    vm = rt.vmem
    r = t // k
    nmem = min(k, nloc - r * k)
    me = t - r * k
    for c in range(0, nloc, alpha):
        outbox: List[List[bytes]] = [[] for _ in range(P)]
        assembled = 0
        for rr in range(P):
            if rr == cfg.rank:
                continue
            for tj in range(c, min(c + alpha, nloc)):
                j = tj * P + rr
                so, sl = sends[j]
                payload = vm.read_from_context(q, t, so, sl, Category.NET_STAGE_READ, charge=sl)
                outbox[rr].append(FRAME.pack(rho, j, sl) + bytes(payload))
                assembled += sl
        rt.reserve(st, assembled, "network assembly")

        def exchange(contrib, c=c):
            members = sorted(contrib)
            payloads = [b"".join(b"".join(contrib[m][0][rr]) for m in members) for rr in range(P)]
            got = rt.net.alltoall(payloads)
            freed = sum(contrib[m][1] for m in members)
            rt.shared.release(freed)
            with st.lock:
                st.reserved -= freed
            frames = []
            for rr, blob in enumerate(got):
                if rr == cfg.rank:
                    continue
                mv = memoryview(blob)
                pos = 0
                while pos < len(mv):
                    src, dst, n = FRAME.unpack_from(mv, pos)
                    pos += FRAME.size
                    frames.append((src, dst, mv[pos:pos + n]))
                    pos += n
            return frames

        frames = rt.sched.round_sync(t, (st.seq, "net", r, c), (outbox, assembled), exchange)
        nrecv = 0
        for idx in range(me, len(frames), nmem):
            src, dst, payload = frames[idx]
            if dst % P != cfg.rank:
                raise ProtocolError(f"frame for VP {dst} arrived at rank {cfg.rank}")
            tdst = dst // P
            doff = _expect_len(table, tdst, src, len(payload), dst)
            deliver_direct(rt, q, cache, payload, tdst, doff)
            nrecv += 1
        rt.counters.count_msgs(remote=nrecv)


# ------------------------------------------------------ indirect baseline

def alltoallv_indirect(rt, t: int, sends: Sequence[Range], recvs: Sequence[Range]) -> None:
    """Baseline: stage every message in a dedicated v x v area on disk."""
    cfg = rt.cfg
    drv = rt.driver
    if drv.indirect_disk is None:
        raise CollectiveError("indirect area not reserved (set indirect_omega)")
    if cfg.P != 1:
        raise CollectiveError("the indirect baseline runs with P=1 only")
    check_spec(rt, sends, recvs)
    st = rt.begin(t, "alltoallv_indirect")
    v = cfg.v
    rho = rt.rho(t)
    vm = rt.vmem
    q = rt.queue(t)
    omega = cfg.indirect_omega
    slot = cfg.ceil_block(omega)
    lens = st.setdefault("lens", lambda: [[0] * v for _ in range(v)])
    rt.mark(t, "Alltoallv Start")

    mem = vm.memory(t)
    for j in range(v):
        so, sl = sends[j]
        if sl > omega:
            raise CollectiveError(f"message {rho}->{j} of {sl} bytes exceeds omega={omega}")
        lens[j][rho] = sl
        if sl == 0:
            continue
        padded = cfg.ceil_block(sl)
        buf = bytearray(padded)
        buf[:sl] = mem[so:so + sl]
        drv.write_region(q, DiskRegion(drv.indirect_disk, (j * v + rho) * slot, padded), buf,
                         Category.DELIVERY_WRITE, charge=sl)
    vm.swap_out(t, q, reason="indirect")
    rt.internal_barrier(t, 1)

    vm.swap_in(t, q, Category.SWAP_IN, reason="indirect")
    mem = vm.memory(t)
    for i in range(v):
        ro, rl = recvs[i]
        if lens[rho][i] != rl:
            raise ProtocolError(f"alltoallv length mismatch: VP {i} sent {lens[rho][i]} bytes "
                                f"to VP {rho}, which expects {rl}")
        if rl == 0:
            continue
        padded = cfg.ceil_block(rl)
        buf = bytearray(padded)
        drv.read_into(q, DiskRegion(drv.indirect_disk, (rho * v + i) * slot, padded), buf,
                      Category.DELIVERY_READ, charge=rl).wait()
        drv.wait_all(q)
        mem[ro:ro + rl] = buf[:rl]
    vm.swap_out(t, q, reason="indirect")
    rt.end_call(t, st)
    rt.end_superstep(t, reason="indirect")
    rt.mark(t, "Alltoallv End")


# ------------------------------------------------------------------ bcast

def bcast(rt, t: int, root: int, off: int, n: int) -> None:
    """Broadcast ``n`` bytes at the root's ``off`` to the same offset everywhere."""
    cfg = rt.cfg
    st = rt.begin(t, "bcast")
    rho = rt.rho(t)
    vm = rt.vmem
    q = rt.queue(t)
    sched = rt.sched
    rt.mark(t, "Bcast Start")
    if n < 0 or off < 0 or off + n > cfg.mu:
        raise CollectiveError(f"bcast region ({off}, {n}) outside [0, {cfg.mu})")
    buf = st.setdefault("buf", lambda: _reserve_bytes(rt, st, n, "bcast buffer"))
    root_rank = rt.rank_of(root)
    t_root = rt.local_t(root)

    def copy_out():
        vm.write_into_context(q, t, off, memoryview(buf)[:n], Category.DELIVERY_WRITE)

    if rho == root:
        buf[:n] = vm.memory(t)[off:off + n]
        sched.em_signal_threads(sched.rooted, t, take_lock=True)
        if cfg.P > 1:
            rt.net.bcast(root_rank, bytes(buf[:n]))
    elif cfg.rank == root_rank:
        rt.mark(t, "RootWait Start")
        sched.em_wait_for_root(sched.rooted, t, t_root,
                               lambda: vm.swap_out(t, q, reason="wait_for_root"))
        rt.mark(t, "RootWait End")
        copy_out()
    else:
        if sched.em_first_thread(sched.initial, t):
            got = rt.net.bcast(root_rank, None)
            if len(got) != n:
                raise ProtocolError(f"bcast length mismatch: root sent {len(got)}, VP {rho} expects {n}")
            buf[:n] = got
            sched.em_signal_threads(sched.initial, t, take_lock=False)
        copy_out()
    rt.driver.wait_all(q)
    rt.end_call(t, st)
    rt.mark(t, "Finish Step 1")
    rt.end_superstep(t, reason="bcast")
    rt.mark(t, "Start Step 2")
    rt.mark(t, "Bcast End")


def _reserve_bytes(rt, st, n: int, what: str) -> bytearray:
    rt.reserve(st, n, what)
    return bytearray(n)


# ----------------------------------------------------------------- gather

def gather(rt, t: int, root: int, soff: int, n: int, roff: int) -> None:
    """Every VP's ``n`` bytes at ``soff`` land at the root's ``roff`` in rho order."""
    cfg = rt.cfg
    v, P = cfg.v, cfg.P
    st = rt.begin(t, "gather")
    rho = rt.rho(t)
    vm = rt.vmem
    q = rt.queue(t)
    sched = rt.sched
    rt.mark(t, "Gather Start")
    if soff < 0 or soff + n > cfg.mu:
        raise CollectiveError(f"gather send region ({soff}, {n}) outside [0, {cfg.mu})")
    if rho == root and (roff < 0 or roff + v * n > cfg.mu):
        raise CollectiveError(f"gather recv region ({roff}, {v * n}) outside [0, {cfg.mu})")
    root_rank = rt.rank_of(root)
    here = cfg.rank == root_rank
    buf = None
    if here:
        buf = st.setdefault("buf", lambda: _reserve_bytes(rt, st, v * n, "gather buffer"))
    mem = vm.memory(t)

    if P > 1:
        mine = bytes(mem[soff:soff + n])

        def net_round():
            got = rt.net.gather(root_rank, mine)
            if got is not None:
                for rr, part in enumerate(got):
                    if len(part) != n:
                        raise ProtocolError(f"gather length mismatch from rank {rr}")
                    src = t * P + rr
                    buf[src * n:(src + 1) * n] = part

        sched.turnstile(t, (st.seq, "gather"), net_round)
    elif rho != root:
        buf[rho * n:(rho + 1) * n] = mem[soff:soff + n]
    if here:
        if rho == root:
            if P == 1:
                buf[rho * n:(rho + 1) * n] = mem[soff:soff + n]
            swapped = [False]
            if not sched.em_all_threads_finished(sched.final, t, swapped):
                sched.em_wait_threads(sched.final, t, swapped,
                                      lambda: vm.swap_out(t, q, reason="wait_threads"))
            vm.write_into_context(q, t, roff, memoryview(buf)[:v * n], Category.DELIVERY_WRITE)
        else:
            sched.em_thread_finished(sched.final, t)
    rt.driver.wait_all(q)
    rt.end_call(t, st)
    rt.mark(t, "Finish Step 1")
    rt.end_superstep(t, reason="gather")
    rt.mark(t, "Start Step 2")
    rt.mark(t, "Gather End")


# ----------------------------------------------------------------- reduce

def reduce(rt, t: int, root: int, soff: int, roff: int, count: int, dtype, op: ReduceOp) -> None:
    """Element-wise reduction of ``count`` values of ``dtype`` to the root."""
    cfg = rt.cfg
    P, k = cfg.P, cfg.k
    dt = np.dtype(dtype)
    nbytes = count * dt.itemsize
    st = rt.begin(t, "reduce")
    rho = rt.rho(t)
    vm = rt.vmem
    q = rt.queue(t)
    rt.mark(t, "Reduce Start")
    if soff < 0 or soff + nbytes > cfg.mu:
        raise CollectiveError(f"reduce send region ({soff}, {nbytes}) outside [0, {cfg.mu})")
    if rho == root and (roff < 0 or roff + nbytes > cfg.mu):
        raise CollectiveError(f"reduce recv region ({roff}, {nbytes}) outside [0, {cfg.mu})")

    def make_slots():
        rt.reserve(st, k * nbytes, "reduce slots")
        return np.full((k, count), op.identity(dt), dtype=dt)

    slots = st.setdefault("slots", make_slots)
    if slots.dtype != dt or slots.shape[1] != count:
        raise ProtocolError(f"reduce spec mismatch at VP {rho}: {count} x {dt} vs "
                            f"{slots.shape[1]} x {slots.dtype}")
    mem = vm.memory(t)
    vals = np.frombuffer(mem, dtype=dt, count=count, offset=soff).copy()
    vm.swap_out(t, q, reason="reduce")
    p = t % k
    slots[p] = op.combine(slots[p], vals)
    rt.internal_barrier(t, 1)

    root_rank = rt.rank_of(root)
    if rho == root or (cfg.rank != root_rank and t == 0):
        acc = slots[0].copy()
        for i in range(1, k):
            acc = op.combine(acc, slots[i])
        if P > 1:
            acc = rt.net.reduce(root_rank, acc, op.combine)
        if rho == root:
            vm.write_into_context(q, t, roff, np.ascontiguousarray(acc, dtype=dt).tobytes(),
                                  Category.DELIVERY_WRITE)
    rt.driver.wait_all(q)
    rt.end_call(t, st)
    rt.end_superstep(t, reason="reduce")
    rt.mark(t, "Reduce End")


# ------------------------------------------------------ derived collectives

def _zeros(v: int) -> List[Range]:
    return [(0, 0)] * v


def alltoall(rt, t: int, soff: int, n: int, roff: int) -> None:
    v = rt.cfg.v
    sends = [(soff + j * n, n) for j in range(v)]
    recvs = [(roff + i * n, n) for i in range(v)]
    alltoallv(rt, t, sends, recvs, label="Alltoall", kind="alltoall")


def gatherv(rt, t: int, root: int, soff: int, n: int, roff: int,
            counts: Optional[Sequence[int]], displs: Optional[Sequence[int]]) -> None:
    """Variable-size gather expressed as an alltoallv with one live column."""
    v = rt.cfg.v
    rho = rt.rho(t)
    sends = _zeros(v)
    sends[root] = (soff, n)
    recvs = _zeros(v)
    if rho == root:
        if counts is None or displs is None:
            raise CollectiveError("gatherv root needs counts and displacements")
        recvs = [(roff + d, c) for c, d in zip(counts, displs)]
    alltoallv(rt, t, sends, recvs, label="Gatherv", kind="gatherv")


def scatter(rt, t: int, root: int, soff: int, n: int, roff: int) -> None:
    """Root's block j goes to VP j: an alltoallv with one live row."""
    v = rt.cfg.v
    rho = rt.rho(t)
    sends = [(soff + j * n, n) for j in range(v)] if rho == root else _zeros(v)
    recvs = _zeros(v)
    recvs[root] = (roff, n)
    alltoallv(rt, t, sends, recvs, label="Scatter", kind="scatter")


def allgather(rt, t: int, soff: int, n: int, roff: int) -> None:
    gather(rt, t, 0, soff, n, roff)
    bcast(rt, t, 0, roff, rt.cfg.v * n)


def allgatherv(rt, t: int, soff: int, n: int, roff: int, counts: Sequence[int],
               displs: Sequence[int]) -> None:
    gatherv(rt, t, 0, soff, n, roff, counts, displs)
    span = max((d + c for c, d in zip(counts, displs)), default=0)
    bcast(rt, t, 0, roff, span)


def allreduce(rt, t: int, soff: int, roff: int, count: int, dtype, op: ReduceOp) -> None:
    reduce(rt, t, 0, soff, roff, count, dtype, op)
    bcast(rt, t, 0, roff, count * np.dtype(dtype).itemsize)


def barrier(rt, t: int) -> None:
    st = rt.begin(t, "barrier")
    rt.end_call(t, st)
    rt.end_superstep(t, reason="barrier")
