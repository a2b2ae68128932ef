"""MPI-style facade seen by a virtual processor.

A program receives a :class:`Comm` bound to one VP.  Memory comes from the
VP's own context through ``malloc``/``realloc``/``free``; pointers are byte
offsets into the context, and :meth:`Comm.array` exposes them as numpy
views.  Collective arguments follow MPI: pointer, count, datatype.
"""
from __future__ import annotations

import logging
import time
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from . import collect
from .collect import ReduceOp
from .vmem import AllocError

log = logging.getLogger(__name__)

INT32 = np.dtype(np.int32)
UINT32 = np.dtype(np.uint32)
INT64 = np.dtype(np.int64)
UINT64 = np.dtype(np.uint64)
FLOAT64 = np.dtype(np.float64)
BYTE = np.dtype(np.uint8)
DTYPES = (INT32, UINT32, INT64, UINT64, FLOAT64, BYTE)

SUM = collect.SUM
MIN = collect.MIN
MAX = collect.MAX
_OPS: Dict[str, ReduceOp] = {"sum": SUM, "min": MIN, "max": MAX}

# Names a ported program might call that this runtime deliberately lacks.
UNSUPPORTED = ("comm_split", "comm_dup", "send", "recv", "isend", "irecv", "sendrecv",
               "wait", "waitall", "probe", "scan", "reduce_scatter")


class UsageError(RuntimeError):
    """A facade call made out of order (before init, after finalize)."""


class AbortCalled(RuntimeError):
    def __init__(self, rho: int, code: int):
        self.code = code
        super().__init__(f"VP {rho} called abort({code})")


def register_op(name: str, combine: Callable[[np.ndarray, np.ndarray], np.ndarray],
                identity: Callable[[np.dtype], object]) -> ReduceOp:
    """Register a user reduction; it must be commutative and associative."""
    op = ReduceOp(name, combine, identity)
    _OPS[name] = op
    return op


def get_op(op) -> ReduceOp:
    if isinstance(op, ReduceOp):
        return op
    try:
        return _OPS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}; known: {sorted(_OPS)}") from None


def _dtype(dt) -> np.dtype:
    d = np.dtype(dt)
    if d not in DTYPES:
        raise TypeError(f"unsupported datatype {d}; use one of {[str(x) for x in DTYPES]}")
    return d


class Comm:
    """World communicator as seen by one virtual processor."""

    def __init__(self, rt, t: int):
        self._rt = rt
        self._t = t
        self._rho = rt.rho(t)
        self._ctx = rt.vmem.contexts[t]
        self._state = "new"
        self._t0 = 0.0

    def __getattr__(self, name):
        if name in UNSUPPORTED:
            def missing(*_a, **_k):
                raise NotImplementedError(f"{name} is not implemented by this runtime")
            return missing
        raise AttributeError(name)

    def __repr__(self):
        return f"<Comm rho={self._rho} of {self._rt.cfg.v}>"

    # ---------------------------------------------------------- lifecycle
    def _live(self, what: str) -> None:
        if self._state != "live":
            raise UsageError(f"{what} called {'before init' if self._state == 'new' else 'after finalize'}")

    def init(self) -> None:
        if self._state != "new":
            raise UsageError("init called twice")
        self._state = "live"
        self._t0 = time.perf_counter()
        self.mark("Init")

    def finalize(self) -> None:
        self._live("finalize")
        self.mark("Finalize")
        self._state = "done"

    def abort(self, code: int = 1) -> None:
        raise AbortCalled(self._rho, code)

    def _leave(self) -> None:
        if self._state == "live":
            log.debug("VP %d returned without finalize", self._rho)

    # ----------------------------------------------------------- queries
    def comm_rank(self) -> int:
        return self._rho

    def comm_size(self) -> int:
        return self._rt.cfg.v

    def wtime(self) -> float:
        return time.perf_counter() - self._t0

    def mark(self, label: str) -> None:
        self._rt.mark(self._t, label)

    @property
    def runtime(self):
        return self._rt

    # ------------------------------------------------------------ memory
    def malloc(self, size: int) -> int:
        self._live("malloc")
        return self._ctx.alloc.alloc(int(size))

    def free(self, ptr: int) -> None:
        self._live("free")
        self._ctx.alloc.free(ptr)

    def realloc(self, ptr: Optional[int], size: int) -> int:
        """Resize in place when possible, otherwise move (prefix preserved)."""
        self._live("realloc")
        if ptr is None:
            return self.malloc(size)
        table = self._ctx.alloc
        old = table.size_of(ptr)
        if table.try_grow(ptr, int(size)):
            return ptr
        new = table.alloc(int(size))
        mem = self._rt.vmem.memory(self._t)
        mem[new:new + old] = mem[ptr:ptr + old]
        table.free(ptr)
        return new

    def allocated(self) -> int:
        return self._ctx.alloc.in_use

    def array(self, ptr: int, dtype, count: Optional[int] = None) -> np.ndarray:
        """numpy view of ``count`` elements at ``ptr`` (default: the whole allocation)."""
        d = np.dtype(dtype)
        if count is None:
            count = self._ctx.alloc.size_of(ptr) // d.itemsize
        if ptr < 0 or ptr + count * d.itemsize > self._rt.cfg.mu:
            raise IndexError(f"array [{ptr}, {ptr + count * d.itemsize}) outside the context")
        return np.frombuffer(self._rt.vmem.memory(self._t), dtype=d, count=count, offset=ptr)

    def alloc_array(self, dtype, count: int) -> tuple:
        """malloc + array in one call; returns (ptr, view)."""
        d = np.dtype(dtype)
        ptr = self.malloc(max(1, count * d.itemsize))
        return ptr, self.array(ptr, d, count)

    # ------------------------------------------------------- collectives
    def barrier(self) -> None:
        self._live("barrier")
        collect.barrier(self._rt, self._t)

    def bcast(self, ptr: int, count: int, dtype, root: int) -> None:
        self._live("bcast")
        d = _dtype(dtype)
        collect.bcast(self._rt, self._t, root, ptr, count * d.itemsize)

    def gather(self, sptr: int, count: int, dtype, rptr: int, root: int) -> None:
        self._live("gather")
        d = _dtype(dtype)
        collect.gather(self._rt, self._t, root, sptr, count * d.itemsize, rptr)

    def gatherv(self, sptr: int, count: int, dtype, rptr: int, rcounts: Optional[Sequence[int]],
                displs: Optional[Sequence[int]], root: int) -> None:
        self._live("gatherv")
        w = _dtype(dtype).itemsize
        counts = None if rcounts is None else [c * w for c in rcounts]
        disp = None if displs is None else [x * w for x in displs]
        collect.gatherv(self._rt, self._t, root, sptr, count * w, rptr, counts, disp)

    def scatter(self, sptr: int, count: int, dtype, rptr: int, root: int) -> None:
        self._live("scatter")
        d = _dtype(dtype)
        collect.scatter(self._rt, self._t, root, sptr, count * d.itemsize, rptr)

    def allgather(self, sptr: int, count: int, dtype, rptr: int) -> None:
        self._live("allgather")
        d = _dtype(dtype)
        collect.allgather(self._rt, self._t, sptr, count * d.itemsize, rptr)

    def allgatherv(self, sptr: int, count: int, dtype, rptr: int, rcounts: Sequence[int],
                   displs: Sequence[int]) -> None:
        self._live("allgatherv")
        w = _dtype(dtype).itemsize
        collect.allgatherv(self._rt, self._t, sptr, count * w, rptr,
                           [c * w for c in rcounts], [x * w for x in displs])

    def alltoall(self, sptr: int, count: int, dtype, rptr: int) -> None:
        self._live("alltoall")
        d = _dtype(dtype)
        collect.alltoall(self._rt, self._t, sptr, count * d.itemsize, rptr)

    def alltoallv(self, sptr: int, scounts: Sequence[int], sdispls: Sequence[int], dtype,
                  rptr: int, rcounts: Sequence[int], rdispls: Sequence[int]) -> None:
        self._live("alltoallv")
        w = _dtype(dtype).itemsize
        sends = [(sptr + int(d) * w, int(c) * w) for c, d in zip(scounts, sdispls)]
        recvs = [(rptr + int(d) * w, int(c) * w) for c, d in zip(rcounts, rdispls)]
        collect.alltoallv(self._rt, self._t, sends, recvs)

    def alltoallv_bytes(self, sends, recvs, indirect: bool = False) -> None:
        """Byte-level alltoallv on explicit (offset, length) lists."""
        self._live("alltoallv")
        if indirect:
            collect.alltoallv_indirect(self._rt, self._t, sends, recvs)
        else:
            collect.alltoallv(self._rt, self._t, sends, recvs)

    def reduce(self, sptr: int, rptr: int, count: int, dtype, op, root: int) -> None:
        self._live("reduce")
        collect.reduce(self._rt, self._t, root, sptr, rptr, count, _dtype(dtype), get_op(op))

    def allreduce(self, sptr: int, rptr: int, count: int, dtype, op) -> None:
        self._live("allreduce")
        collect.allreduce(self._rt, self._t, sptr, rptr, count, _dtype(dtype), get_op(op))


def run(cfg, program: Callable, *args, transport=None, **kwargs):
    """Open a runtime for ``cfg``, run ``program`` on every local VP, close.

    Returns ``(results, runtime)``; the runtime is closed but its counters,
    scheduler log and benchmark recorder stay readable.
    """
    from .runtime import Runtime

    rt = Runtime(cfg, transport=transport)
    try:
        results = rt.run(program, *args, **kwargs)
    finally:
        rt.close()
    return results, rt


__all__ = ["Comm", "UsageError", "AbortCalled", "register_op", "get_op", "run", "SUM", "MIN",
           "MAX", "INT32", "UINT32", "INT64", "UINT64", "FLOAT64", "BYTE", "AllocError"]
