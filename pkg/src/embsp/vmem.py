"""Memory partitions, the per-VP first-fit allocator and the swap engine."""
from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .blockio import Category, DiskRegion, Driver, IoCounters, RequestQueue
from .config import DriverKind, Layout, SimConfig

log = logging.getLogger(__name__)

Range = Tuple[int, int]  # (offset, length)


class OutOfMemory(MemoryError):
    pass


class AllocError(ValueError):
    pass


@dataclass
class AllocRecord:
    offset: int
    size: int
    free: bool

    @property
    def end(self) -> int:
        return self.offset + self.size


class AllocTable:
    """First-fit allocator over a mu-byte range.

    Records tile [0, mu) in offset order; adjacent free records are always
    merged.  A sorted list with bisection plays the role of the ordered map.
    """

    def __init__(self, mu: int):
        self.mu = mu
        self.records: List[AllocRecord] = [AllocRecord(0, mu, True)] if mu else []
        self._offsets: List[int] = [0] if mu else []
        self.in_use = 0
        self.high_water = 0

    def _index(self, offset: int) -> int:
        i = bisect.bisect_left(self._offsets, offset)
        if i == len(self._offsets) or self._offsets[i] != offset:
            raise AllocError(f"no allocation starts at offset {offset}")
        return i

    def largest_free(self) -> int:
        return max((r.size for r in self.records if r.free), default=0)

    def alloc(self, size: int) -> int:
        if size <= 0:
            raise AllocError(f"allocation size must be positive (got {size})")
        for i, rec in enumerate(self.records):
            if rec.free and rec.size >= size:
                if rec.size > size:
                    rest = AllocRecord(rec.offset + size, rec.size - size, True)
                    self.records.insert(i + 1, rest)
                    self._offsets.insert(i + 1, rest.offset)
                    rec.size = size
                rec.free = False
                self.in_use += size
                self.high_water = max(self.high_water, self.in_use)
                return rec.offset
        raise OutOfMemory(f"cannot allocate {size} bytes; largest free chunk is "
                          f"{self.largest_free()} of mu={self.mu}")

    def free(self, offset: int) -> None:
        i = self._index(offset)
        rec = self.records[i]
        if rec.free:
            raise AllocError(f"double free at offset {offset}")
        rec.free = True
        self.in_use -= rec.size
        # merge with successor, then predecessor
        if i + 1 < len(self.records) and self.records[i + 1].free:
            rec.size += self.records[i + 1].size
            del self.records[i + 1]
            del self._offsets[i + 1]
        if i > 0 and self.records[i - 1].free:
            self.records[i - 1].size += rec.size
            del self.records[i]
            del self._offsets[i]

    def size_of(self, offset: int) -> int:
        rec = self.records[self._index(offset)]
        if rec.free:
            raise AllocError(f"offset {offset} is not allocated")
        return rec.size

    def try_grow(self, offset: int, size: int) -> bool:
        """Grow or shrink the allocation at ``offset`` in place if possible."""
        i = self._index(offset)
        rec = self.records[i]
        if rec.free:
            raise AllocError(f"offset {offset} is not allocated")
        if size <= 0:
            raise AllocError(f"allocation size must be positive (got {size})")
        if size == rec.size:
            return True
        nxt = self.records[i + 1] if i + 1 < len(self.records) else None
        if size < rec.size:
            spare = rec.size - size
            rec.size = size
            self.in_use -= spare
            if nxt is not None and nxt.free:
                nxt.offset -= spare
                nxt.size += spare
                self._offsets[i + 1] = nxt.offset
            else:
                new = AllocRecord(rec.end, spare, True)
                self.records.insert(i + 1, new)
                self._offsets.insert(i + 1, new.offset)
            return True
        need = size - rec.size
        if nxt is None or not nxt.free or nxt.size < need:
            return False
        rec.size = size
        self.in_use += need
        self.high_water = max(self.high_water, self.in_use)
        if nxt.size == need:
            del self.records[i + 1]
            del self._offsets[i + 1]
        else:
            nxt.offset += need
            nxt.size -= need
            self._offsets[i + 1] = nxt.offset
        return True

    def allocated(self) -> List[Range]:
        return [(r.offset, r.size) for r in self.records if not r.free]

    def check(self) -> None:
        """Assert the tiling invariant."""
        pos = 0
        prev_free = False
        for r in self.records:
            assert r.offset == pos and r.size > 0, (r, pos)
            assert not (prev_free and r.free), "adjacent free records"
            prev_free = r.free
            pos = r.end
        assert pos == self.mu, (pos, self.mu)
        assert self._offsets == [r.offset for r in self.records]


# ------------------------------------------------------------ range helpers

def merge_ranges(ranges: Iterable[Range]) -> List[Range]:
    out: List[List[int]] = []
    for off, n in sorted((o, n) for o, n in ranges if n > 0):
        if out and off <= out[-1][0] + out[-1][1]:
            out[-1][1] = max(out[-1][1], off + n - out[-1][0])
        else:
            out.append([off, n])
    return [(o, n) for o, n in out]


def subtract_ranges(ranges: Sequence[Range], cut: Sequence[Range]) -> List[Range]:
    """Set difference of two range lists (both arbitrary)."""
    cut = merge_ranges(cut)
    out: List[Range] = []
    for off, n in merge_ranges(ranges):
        lo, hi = off, off + n
        for co, cn in cut:
            ce = co + cn
            if ce <= lo or co >= hi:
                continue
            if co > lo:
                out.append((lo, co - lo))
            lo = max(lo, ce)
            if lo >= hi:
                break
        if lo < hi:
            out.append((lo, hi - lo))
    return out


def total(ranges: Iterable[Range]) -> int:
    return sum(n for _, n in ranges)


def widen(ranges: Iterable[Range], B: int) -> List[Range]:
    """Round each range outward to block boundaries, then merge."""
    out = []
    for off, n in ranges:
        if n <= 0:
            continue
        lo = off // B * B
        hi = -(-(off + n) // B) * B
        out.append((lo, hi - lo))
    return merge_ranges(out)


# --------------------------------------------------------------- context

class VpContext:
    """Bookkeeping for one virtual processor's mu-byte memory."""

    def __init__(self, rho: int, t: int, mu: int):
        self.rho = rho
        self.t = t
        self.alloc = AllocTable(mu)
        self.resident = False
        self.loaded = False  # has ever been admitted

    def __repr__(self):
        return f"<VpContext rho={self.rho} t={self.t} resident={self.resident}>"


class Vmem:
    """The k partitions of one rank plus the contexts of its v/P VPs."""

    def __init__(self, cfg: SimConfig, driver: Driver, counters: IoCounters):
        self.cfg = cfg
        self.driver = driver
        self.counters = counters
        self.B = cfg.B
        self.mu = cfg.mu
        self.mapped = cfg.driver is DriverKind.MEMORY_MAPPED
        self.contexts = [VpContext(t * cfg.P + cfg.rank, t, cfg.mu) for t in range(cfg.nlocal)]
        if self.mapped:
            self.partitions: List[Optional[bytearray]] = [None] * cfg.k
        else:
            self.partitions = [bytearray(cfg.mu) for _ in range(cfg.k)]
        self.residents: List[Optional[int]] = [None] * cfg.k

    # ---------------------------------------------------------- addressing
    def pieces(self, t: int, off: int, n: int) -> List[Tuple[DiskRegion, int]]:
        """Disk regions backing context bytes [off, off+n) of local VP t.

        Returns (region, context_offset) pairs; striped ranges are split per
        block and coalesced when consecutive blocks are contiguous on disk.
        """
        if n <= 0:
            return []
        if off < 0 or off + n > self.mu:
            raise IndexError(f"context range [{off}, {off + n}) outside [0, {self.mu})")
        cfg = self.cfg
        if cfg.layout is Layout.WHOLE:
            return [(DiskRegion(t % cfg.D, (t // cfg.D) * self.mu + off, n), off)]
        B, D = self.B, cfg.D
        bpc = cfg.blocks_per_context
        out: List[Tuple[DiskRegion, int]] = []
        pos, end = off, off + n
        while pos < end:
            j = pos // B
            g = t * bpc + j
            stop = min(end, (j + 1) * B)
            disk, doff = g % D, (g // D) * B + (pos - j * B)
            if out:
                last, loff = out[-1]
                if last.disk == disk and last.offset + last.len == doff:
                    out[-1] = (DiskRegion(disk, last.offset, last.len + stop - pos), loff)
                    pos = stop
                    continue
            out.append((DiskRegion(disk, doff, stop - pos), pos))
            pos = stop
        return out

    def memory(self, t: int) -> memoryview:
        """The mu bytes VP t addresses while it runs."""
        if self.mapped:
            (reg, _), = self.pieces(t, 0, self.mu)
            return self.driver.view(reg.disk, reg.offset, reg.len)
        return memoryview(self.partitions[t % self.cfg.k])

    def partition_view(self, t: int) -> memoryview:
        """Scratch RAM of t's partition (the mapping itself under mmap)."""
        return self.memory(t)

    # ------------------------------------------------------------- raw I/O
    def write_aligned(self, q: Optional[RequestQueue], t: int, off: int, data,
                      cat: Category, charge: Optional[int] = None) -> None:
        """Write block-aligned context bytes. ``charge`` defaults to len(data)."""
        mv = memoryview(data).cast("B")
        n = mv.nbytes
        first = True
        for reg, coff in self.pieces(t, off, n):
            c = None
            if charge is not None:
                c = charge if first else 0
            self.driver.write_region(q, reg, mv[coff - off:coff - off + reg.len], cat, c)
            first = False

    def read_aligned(self, q: Optional[RequestQueue], t: int, off: int, out,
                     cat: Category, charge: Optional[int] = None) -> None:
        mv = memoryview(out).cast("B")
        n = mv.nbytes
        first = True
        for reg, coff in self.pieces(t, off, n):
            c = None
            if charge is not None:
                c = charge if first else 0
            self.driver.read_into(q, reg, mv[coff - off:coff - off + reg.len], cat, c)
            first = False

    def write_ranges(self, q, t: int, src: memoryview, ranges: Sequence[Range],
                     cat: Category) -> int:
        """Write ``src[o:o+n]`` for each block-aligned range; returns bytes."""
        n_total = 0
        for off, n in ranges:
            self.write_aligned(q, t, off, src[off:off + n], cat, charge=0)
            n_total += n
        return n_total

    # ------------------------------------------------------------ swapping
    def swap_in(self, t: int, q: Optional[RequestQueue], cat: Category = Category.SWAP_IN,
                reason: str = "swap") -> int:
        """Bring VP t into its partition. Caller holds the partition."""
        ctx = self.contexts[t]
        p = t % self.cfg.k
        if self.residents[p] not in (None, t):
            other = self.residents[p]
            raise RuntimeError(f"partition {p} still holds VP t={other}")
        self.residents[p] = t
        if ctx.resident:
            return 0
        ctx.resident = True
        if self.mapped:
            ctx.loaded = True
            return 0
        mem = self.memory(t)
        if not ctx.loaded:
            # fresh contexts are all zero; no need to read them
            ctx.loaded = True
            mem[:] = bytes(self.mu)
            return 0
        if self.cfg.strict_accounting:
            ranges = [(0, self.mu)]
            charge = self.mu
        else:
            alloc = ctx.alloc.allocated()
            ranges = widen(alloc, self.B)
            charge = total(alloc)
        first = True
        for off, n in ranges:
            self.read_aligned(q, t, off, mem[off:off + n], cat, charge=charge if first else 0)
            first = False
        if not ranges:
            # nothing allocated: still record the (empty) charge
            pass
        self.driver.wait_all(q)
        if charge:
            self.counters.event(t, cat, charge, reason)
        return charge

    def swap_out(self, t: int, q: Optional[RequestQueue], skip: Sequence[Range] = (),
                 reason: str = "swap", release: bool = True) -> int:
        """Write VP t's context home, except ``skip``.

        Strict accounting charges mu minus the skipped bytes; fine accounting
        charges the allocated bytes outside ``skip``.  Physically, every block
        touching a byte that must be saved is written.
        """
        ctx = self.contexts[t]
        if not ctx.resident:
            return 0
        p = t % self.cfg.k
        ctx.resident = False
        if release:
            self.residents[p] = None
        if self.mapped:
            return 0
        skip = merge_ranges((o, n) for o, n in skip if n > 0)
        if self.cfg.strict_accounting:
            keep = subtract_ranges([(0, self.mu)], skip)
            charge = self.mu - total(skip)
        else:
            keep = subtract_ranges(ctx.alloc.allocated(), skip)
            charge = total(keep)
        mem = self.memory(t)
        first = True
        for off, n in widen(keep, self.B):
            self.write_aligned(q, t, off, mem[off:off + n], Category.SWAP_OUT,
                               charge=charge if first else 0)
            first = False
        if charge:
            self.counters.event(t, Category.SWAP_OUT, charge, reason)
        return charge

    def drop(self, t: int) -> None:
        """Forget residency without writing (end of program)."""
        ctx = self.contexts[t]
        ctx.resident = False
        p = t % self.cfg.k
        if self.residents[p] == t:
            self.residents[p] = None

    # ---------------------------------------------- writes into contexts
    def write_into_context(self, q: Optional[RequestQueue], t: int, off: int, data,
                           cat: Category) -> None:
        """Store bytes at context offset ``off`` of VP t wherever it lives.

        Resident (or mapped) contexts get a memory copy.  Swapped-out
        contexts get a block-aligned read-modify-write on disk.  The logical
        charge is the data length either way.
        """
        mv = memoryview(data).cast("B")
        n = mv.nbytes
        if off < 0 or off + n > self.mu:
            raise IndexError(f"context range [{off}, {off + n}) outside [0, {self.mu})")
        if n == 0:
            return
        ctx = self.contexts[t]
        if self.mapped or ctx.resident:
            self.memory(t)[off:off + n] = mv
            self.counters.charge_logical(cat, n)
            return
        B = self.B
        lo = off // B * B
        hi = -(-(off + n) // B) * B
        if lo == off and hi == off + n:
            self.write_aligned(q, t, off, mv, cat)
            return
        buf = bytearray(hi - lo)
        # boundary blocks must keep their other bytes
        if lo != off:
            self.read_aligned(q, t, lo, memoryview(buf)[:B], Category.DELIVERY_READ, charge=0)
        if hi != off + n and (hi - B > lo or lo == off):
            self.read_aligned(q, t, hi - B, memoryview(buf)[hi - B - lo:], Category.DELIVERY_READ,
                              charge=0)
        self.driver.wait_all(q)
        buf[off - lo:off - lo + n] = mv
        self.write_aligned(q, t, lo, buf, cat, charge=n)

    def read_from_context(self, q: Optional[RequestQueue], t: int, off: int, n: int,
                          cat: Category, charge: Optional[int] = None) -> memoryview:
        """Bytes [off, off+n) of VP t, read from disk unless resident/mapped."""
        ctx = self.contexts[t]
        if self.mapped or ctx.resident:
            if charge:
                self.counters.charge_logical(cat, charge)
            return self.memory(t)[off:off + n]
        if n == 0:
            return memoryview(b"")
        B = self.B
        lo = off // B * B
        hi = -(-(off + n) // B) * B
        buf = bytearray(hi - lo)
        self.read_aligned(q, t, lo, buf, cat, charge=n if charge is None else charge)
        self.driver.wait_all(q)
        return memoryview(buf)[off - lo:off - lo + n]

    def backing_bytes(self) -> int:
        return sum(self.driver.file_sizes()[:self.cfg.D])
