"""Block I/O drivers and byte accounting.

Four drivers share one interface: explicit synchronous (``os.pwrite`` /
``os.preadv``), asynchronous queued (a small worker pool servicing one
request queue per partition), memory-mapped, and in-memory.  Every request
is attributed to a counter category.  Counters record *logical* bytes, the
amount the runtime asked for; physical bytes are tracked as a shadow.
"""
from __future__ import annotations

import logging
import mmap
import os
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from .config import DriverKind, Layout, SimConfig

log = logging.getLogger(__name__)


class Category(str, Enum):
    SWAP_IN = "swap_in"
    SWAP_OUT = "swap_out"
    # swap-in when a VP resumes user code after a virtual superstep
    RESUME_IN = "resume_in"
    DELIVERY_WRITE = "delivery_write"
    DELIVERY_READ = "delivery_read"
    BOUNDARY_FLUSH = "boundary_flush"
    # sender-side reads of remote-bound messages (P > 1)
    NET_STAGE_READ = "net_stage_read"


class IoError(OSError):
    pass


class AlignmentError(IoError):
    pass


@dataclass(frozen=True)
class DiskRegion:
    disk: int
    offset: int
    len: int


@dataclass
class SwapEvent:
    t: int
    category: str
    nbytes: int
    reason: str


class IoCounters:
    """Thread-safe per-category byte counters plus op and message counts."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes: Dict[Category, int] = {c: 0 for c in Category}
        self.read_ops = 0
        self.write_ops = 0
        self.direct_msgs = 0
        self.indirect_msgs = 0
        self.remote_msgs = 0
        self.logical_total = 0
        self.phys_read = 0
        self.phys_write = 0
        self.events: List[SwapEvent] = []

    def charge(self, cat: Category, nbytes: int, write: bool, phys: int) -> None:
        with self._lock:
            self.bytes[cat] += nbytes
            self.logical_total += nbytes
            if write:
                self.write_ops += 1
                self.phys_write += phys
            else:
                self.read_ops += 1
                self.phys_read += phys

    def charge_logical(self, cat: Category, nbytes: int) -> None:
        """Charge bytes that moved by memory copy (resident peer, mmap)."""
        with self._lock:
            self.bytes[cat] += nbytes
            self.logical_total += nbytes

    def count_msgs(self, direct=0, indirect=0, remote=0) -> None:
        with self._lock:
            self.direct_msgs += direct
            self.indirect_msgs += indirect
            self.remote_msgs += remote

    def event(self, t: int, cat: Category, nbytes: int, reason: str) -> None:
        with self._lock:
            self.events.append(SwapEvent(t, cat.value, nbytes, reason))

    # convenience views
    @property
    def swap_in_bytes(self) -> int:
        return self.bytes[Category.SWAP_IN] + self.bytes[Category.RESUME_IN]

    @property
    def swap_out_bytes(self) -> int:
        return self.bytes[Category.SWAP_OUT]

    @property
    def delivery_write_bytes(self) -> int:
        return self.bytes[Category.DELIVERY_WRITE]

    @property
    def delivery_read_bytes(self) -> int:
        return self.bytes[Category.DELIVERY_READ]

    @property
    def boundary_flush_bytes(self) -> int:
        return self.bytes[Category.BOUNDARY_FLUSH]

    def total(self, exclude: Sequence[Category] = ()) -> int:
        with self._lock:
            return sum(n for c, n in self.bytes.items() if c not in exclude)

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            snap = {c.value: n for c, n in self.bytes.items()}
            snap.update(read_ops=self.read_ops, write_ops=self.write_ops,
                        direct_msgs=self.direct_msgs, indirect_msgs=self.indirect_msgs,
                        remote_msgs=self.remote_msgs, phys_read=self.phys_read,
                        phys_write=self.phys_write)
            return snap


class Token:
    """Completion handle. Sync requests are born complete."""

    __slots__ = ("future", "what")

    def __init__(self, future: Optional[Future] = None, what: str = ""):
        self.future = future
        self.what = what

    @property
    def done(self) -> bool:
        return self.future is None or self.future.done()

    def wait(self) -> None:
        if self.future is not None:
            try:
                self.future.result()
            except Exception as exc:
                raise IoError(f"I/O request failed ({self.what}): {exc}") from exc


class RequestQueue:
    """Per-partition queue of in-flight requests."""

    def __init__(self, owner: int, depth: int):
        self.owner = owner
        self.depth = depth
        self._lock = threading.Lock()
        self.pending: Deque[Token] = deque()

    def add(self, tok: Token) -> None:
        # bound the queue depth by waiting for the oldest request
        while True:
            with self._lock:
                if len(self.pending) < self.depth:
                    self.pending.append(tok)
                    return
                oldest = self.pending.popleft()
            oldest.wait()

    def drain(self) -> None:
        while True:
            with self._lock:
                if not self.pending:
                    return
                tok = self.pending.popleft()
            tok.wait()


# ------------------------------------------------------------ file layout

def context_file_sizes(cfg: SimConfig) -> List[int]:
    """Bytes of each of the D backing files of one rank."""
    n, D = cfg.nlocal, cfg.D
    if cfg.layout is Layout.WHOLE:
        return [((n - d + D - 1) // D) * cfg.mu if d < n else 0 for d in range(D)]
    nblocks = n * cfg.blocks_per_context
    return [((nblocks - d + D - 1) // D) * cfg.B if d < nblocks else 0 for d in range(D)]


def indirect_area_size(cfg: SimConfig) -> int:
    if not cfg.indirect_omega:
        return 0
    return cfg.v * cfg.v * cfg.ceil_block(cfg.indirect_omega)


# ---------------------------------------------------------------- drivers

class Driver:
    """Common front end: alignment checks, accounting and queue handling.

    Files 0..D-1 hold contexts; file D, when present, is the indirect area.
    """

    kind: DriverKind

    def __init__(self, cfg: SimConfig, counters: IoCounters, disk_paths: Sequence[str]):
        self.cfg = cfg
        self.B = cfg.B
        self.counters = counters
        self.sizes = context_file_sizes(cfg)
        extra = indirect_area_size(cfg)
        if extra:
            self.sizes.append(extra)
        self.indirect_disk = cfg.D if extra else None
        self.paths = self._paths(disk_paths)
        self.queues = [RequestQueue(i, cfg.async_depth) for i in range(cfg.k)]
        self._open()

    def _paths(self, disk_paths: Sequence[str]) -> List[Optional[str]]:
        if not disk_paths:
            return [None] * len(self.sizes)
        r = self.cfg.rank
        out = [os.path.join(disk_paths[d], f"ctx.{r}.{d}") for d in range(self.cfg.D)]
        if self.indirect_disk is not None:
            out.append(os.path.join(disk_paths[0], f"indirect.{r}"))
        return out

    # subclass hooks
    def _open(self) -> None:
        raise NotImplementedError

    def _write(self, disk: int, offset: int, data) -> None:
        raise NotImplementedError

    def _read_into(self, disk: int, offset: int, out: memoryview) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # public interface
    def queue(self, i: int) -> RequestQueue:
        return self.queues[i]

    def _check(self, region: DiskRegion, n: int) -> None:
        if n != region.len:
            raise IoError(f"data length {n} != region length {region.len}")
        if region.len < 0 or region.offset < 0:
            raise IoError(f"negative region {region}")
        if self.kind.explicit and (region.offset % self.B or region.len % self.B):
            raise AlignmentError(f"region {region} not aligned to B={self.B}")
        if region.offset + region.len > self.sizes[region.disk]:
            raise IoError(f"region {region} beyond end of file {region.disk} "
                          f"({self.sizes[region.disk]} bytes)")

    def write_region(self, q: Optional[RequestQueue], region: DiskRegion, data,
                     category: Category, charge: Optional[int] = None) -> Token:
        mv = memoryview(data).cast("B")
        self._check(region, mv.nbytes)
        self.counters.charge(category, mv.nbytes if charge is None else charge, True, mv.nbytes)
        return self._submit_write(q, region, mv)

    def read_into(self, q: Optional[RequestQueue], region: DiskRegion, out,
                  category: Category, charge: Optional[int] = None) -> Token:
        mv = memoryview(out).cast("B")
        self._check(region, mv.nbytes)
        self.counters.charge(category, mv.nbytes if charge is None else charge, False, mv.nbytes)
        return self._submit_read(q, region, mv)

    def read_region(self, q: Optional[RequestQueue], region: DiskRegion,
                    category: Category, charge: Optional[int] = None) -> bytes:
        buf = bytearray(region.len)
        self.read_into(q, region, buf, category, charge).wait()
        return bytes(buf)

    def _submit_write(self, q, region, mv) -> Token:
        self._write(region.disk, region.offset, mv)
        return Token()

    def _submit_read(self, q, region, mv) -> Token:
        self._read_into(region.disk, region.offset, mv)
        return Token()

    def wait_all(self, q: Optional[RequestQueue]) -> None:
        if q is not None:
            q.drain()

    def wait_everything(self) -> None:
        for q in self.queues:
            q.drain()

    def file_sizes(self) -> List[int]:
        """Actual sizes of the backing stores (file-size probe for files)."""
        return list(self.sizes)

    def view(self, disk: int, offset: int, length: int) -> memoryview:
        raise IoError(f"{self.kind.value} driver does not map files")


def _preallocate(fd: int, size: int) -> None:
    if size == 0:
        return
    try:
        os.posix_fallocate(fd, 0, size)
        return
    except (OSError, AttributeError) as exc:
        log.debug("posix_fallocate failed (%s); zero-filling", exc)
    chunk = b"\0" * (1 << 20)
    off = 0
    while off < size:
        n = min(len(chunk), size - off)
        os.pwrite(fd, chunk[:n], off)
        off += n


class UnixDriver(Driver):
    """Explicit synchronous positional I/O on preallocated files."""

    kind = DriverKind.EXPLICIT_SYNC

    def _open(self) -> None:
        self.fds: List[int] = []
        for path, size in zip(self.paths, self.sizes):
            if path is None:
                raise IoError("file-backed driver needs disk paths")
            fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            try:
                _preallocate(fd, size)
            except OSError:
                os.close(fd)
                raise
            self.fds.append(fd)

    def _write(self, disk, offset, data) -> None:
        fd = self.fds[disk]
        done = 0
        n = data.nbytes
        while done < n:
            w = os.pwrite(fd, data[done:], offset + done)
            if w <= 0:
                raise IoError(f"short write on file {disk} at {offset + done}")
            done += w

    def _read_into(self, disk, offset, out) -> None:
        fd = self.fds[disk]
        done = 0
        n = out.nbytes
        while done < n:
            r = os.preadv(fd, [out[done:]], offset + done)
            if r <= 0:
                raise IoError(f"short read on file {disk} at {offset + done}")
            done += r

    def close(self) -> None:
        for fd in getattr(self, "fds", []):
            try:
                os.close(fd)
            except OSError:
                pass
        self.fds = []

    def file_sizes(self) -> List[int]:
        return [os.fstat(fd).st_size for fd in self.fds]


class AsyncDriver(UnixDriver):
    """Queued requests serviced by a small pool of I/O threads.

    Each request queue has its own worker, so requests of one queue
    complete in submission order while different queues overlap.  Writes
    copy their payload at submission so the caller may reuse its buffer
    immediately; reads land in the caller's buffer, which must not be
    touched until the queue is waited on.
    """

    kind = DriverKind.ASYNC_QUEUED

    def _open(self) -> None:
        super()._open()
        self.pools = [ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"embsp-io{i}")
                      for i in range(len(self.queues))]

    def _submit_write(self, q, region, mv) -> Token:
        if q is None:
            return super()._submit_write(q, region, mv)
        payload = bytes(mv)
        fut = self.pools[q.owner].submit(self._write, region.disk, region.offset, memoryview(payload))
        tok = Token(fut, f"write {region}")
        q.add(tok)
        return tok

    def _submit_read(self, q, region, mv) -> Token:
        if q is None:
            return super()._submit_read(q, region, mv)
        fut = self.pools[q.owner].submit(self._read_into, region.disk, region.offset, mv)
        tok = Token(fut, f"read {region}")
        q.add(tok)
        return tok

    def close(self) -> None:
        if hasattr(self, "pools"):
            self.wait_everything()
            for pool in self.pools:
                pool.shutdown(wait=True)
        super().close()


class MemDriver(Driver):
    """Disks are byte arrays in RAM; same alignment contract as unix."""

    kind = DriverKind.IN_MEMORY

    def _open(self) -> None:
        self.store = [bytearray(size) for size in self.sizes]

    def _write(self, disk, offset, data) -> None:
        self.store[disk][offset:offset + data.nbytes] = data

    def _read_into(self, disk, offset, out) -> None:
        out[:] = memoryview(self.store[disk])[offset:offset + out.nbytes]

    def close(self) -> None:
        self.store = []


class MmapDriver(UnixDriver):
    """Each backing file is mapped once; reads and writes are memory copies."""

    kind = DriverKind.MEMORY_MAPPED

    def _open(self) -> None:
        super()._open()
        self.maps: List[Optional[mmap.mmap]] = []
        self.views: List[Optional[memoryview]] = []
        for fd, size in zip(self.fds, self.sizes):
            if size:
                m = mmap.mmap(fd, size)
                self.maps.append(m)
                self.views.append(memoryview(m))
            else:
                self.maps.append(None)
                self.views.append(None)

    def view(self, disk, offset, length) -> memoryview:
        return self.views[disk][offset:offset + length]

    def _write(self, disk, offset, data) -> None:
        self.views[disk][offset:offset + data.nbytes] = data

    def _read_into(self, disk, offset, out) -> None:
        out[:] = self.views[disk][offset:offset + out.nbytes]

    def close(self) -> None:
        for i, m in enumerate(getattr(self, "maps", [])):
            if m is None:
                continue
            try:
                m.flush()
            except (ValueError, OSError):
                pass
            vw = self.views[i]
            try:
                vw.release()
                m.close()
            except BufferError:
                # user arrays still reference the mapping; the OS reclaims it
                log.debug("mapping %d still referenced at close", i)
        self.maps, self.views = [], []
        super().close()


_DRIVERS = {
    DriverKind.EXPLICIT_SYNC: UnixDriver,
    DriverKind.ASYNC_QUEUED: AsyncDriver,
    DriverKind.MEMORY_MAPPED: MmapDriver,
    DriverKind.IN_MEMORY: MemDriver,
}


def open_driver(cfg: SimConfig, counters: Optional[IoCounters] = None,
                disk_paths: Optional[Sequence[str]] = None) -> Driver:
    """Create (and preallocate) the backing store for one rank.

    ``disk_paths`` overrides ``cfg.disk_paths``; the in-memory driver ignores
    both and creates no files.
    """
    counters = counters or IoCounters()
    paths = list(disk_paths if disk_paths is not None else cfg.disk_paths)
    if cfg.driver is DriverKind.IN_MEMORY:
        paths = []
    else:
        for pth in paths:
            if not os.path.isdir(pth) or not os.access(pth, os.W_OK):
                raise IoError(f"disk path {pth!r} is not a writable directory")
    return _DRIVERS[cfg.driver](cfg, counters, paths)
