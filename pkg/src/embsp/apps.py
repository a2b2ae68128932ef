"""End-to-end programs: PSRS sort, prefix sum, an alltoall benchmark, a collectives demo.

Each ``*_program`` is a per-VP function taking a :class:`~embsp.api.Comm`.
The ``run_*`` helpers build a runtime, run the program and return the
per-VP outputs together with the runtime (for counters and markers).
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .api import Comm, run
from .config import SimConfig

log = logging.getLogger(__name__)

KEY = np.dtype(np.uint32)      # element type (epsilon = 4 bytes)
COUNT = np.dtype(np.int64)     # count type (pi = 8 bytes)


class BudgetError(ValueError):
    """The per-VP memory budget cannot hold the application's working set."""


# ------------------------------------------------------------------ input

def _mix(seed: int) -> tuple:
    rng = np.random.default_rng([seed, 0x5EED])
    a = int(rng.integers(1, 2 ** 31)) * 2 + 1  # odd => bijective mod 2^32
    c = int(rng.integers(0, 2 ** 32))
    return a, c


def psrs_input(n: int, v: int, rho: int, seed: int, distinct: bool = False) -> np.ndarray:
    """VP rho's n/v keys.

    Random mode draws 32-bit keys (duplicates possible) from a per-VP
    stream.  Distinct mode maps global indices through an odd affine
    bijection of 2^32, so all n keys are different.
    """
    m = n // v
    if distinct:
        a, c = _mix(seed)
        idx = np.arange(rho * m, (rho + 1) * m, dtype=np.uint64)
        return ((idx * np.uint64(a) + np.uint64(c)) & np.uint64(0xFFFFFFFF)).astype(KEY)
    rng = np.random.default_rng([seed, rho])
    return rng.integers(0, 2 ** 32, size=m, dtype=np.uint64).astype(KEY)


def psrs_memory(n: int, v: int) -> int:
    """Bytes one VP needs: data, twice-sized receive area, counts and samples."""
    m = n // v
    e, p = KEY.itemsize, COUNT.itemsize
    samples = v * e + v * v * e + v * e   # own samples, gathered samples (root), splitters
    return 2 * m * e + m * e // 4 + 2 * v * p + samples


def psrs_mu(n: int, v: int, B: int) -> int:
    """Smallest block multiple satisfying :func:`psrs_memory`."""
    need = psrs_memory(n, v)
    return -(-need // B) * B


@dataclass
class PsrsResult:
    rho: int
    data: np.ndarray
    max_message: int      # largest outgoing bucket, in bytes
    received: int         # elements received


# ------------------------------------------------------------------- PSRS

def psrs_program(comm: Comm, n: int, seed: int, distinct: bool = False,
                 data: Optional[Sequence[int]] = None) -> PsrsResult:
    comm.init()
    v = comm.comm_size()
    rho = comm.comm_rank()
    if n % v:
        raise ValueError(f"n={n} is not divisible by v={v}")
    m = n // v
    mu = comm.runtime.cfg.mu
    if psrs_memory(n, v) > mu:
        raise BudgetError(f"PSRS needs {psrs_memory(n, v)} bytes per VP, mu={mu}")
    e = KEY.itemsize

    d_ptr, d = comm.alloc_array(KEY, m)
    if data is not None:
        d[:] = np.asarray(data, dtype=KEY)[rho * m:(rho + 1) * m]
    else:
        d[:] = psrs_input(n, v, rho, seed, distinct)
    comm.mark("Benchmark Start")
    d.sort()

    # v regular samples
    s_ptr, s = comm.alloc_array(KEY, v)
    s[:] = d[(np.arange(v) * m) // v] if m else 0
    g_ptr, _ = comm.alloc_array(KEY, v * v)
    comm.gather(s_ptr, v, KEY, g_ptr, 0)

    sp_ptr, sp = comm.alloc_array(KEY, max(v - 1, 1))
    if rho == 0:
        allsamp = np.sort(comm.array(g_ptr, KEY, v * v))
        sp[:v - 1] = allsamp[v * np.arange(1, v)]
    comm.bcast(sp_ptr, v - 1, KEY, 0)
    comm.free(g_ptr)
    comm.free(s_ptr)

    # bucket j holds keys in (sp[j-1], sp[j]]; ties go to the lower bucket
    d = comm.array(d_ptr, KEY, m)
    sp = comm.array(sp_ptr, KEY, v - 1)
    bounds = np.concatenate(([0], np.searchsorted(d, sp, side="right"), [m])).astype(COUNT)
    sc_ptr, sc = comm.alloc_array(COUNT, v)
    sc[:] = np.diff(bounds)
    rc_ptr, _ = comm.alloc_array(COUNT, v)
    comm.alltoall(sc_ptr, 1, COUNT, rc_ptr)

    sc = comm.array(sc_ptr, COUNT, v).copy()
    rc = comm.array(rc_ptr, COUNT, v).copy()
    total = int(rc.sum())
    r_ptr = comm.malloc(max(1, total * e))
    sdispl = np.concatenate(([0], np.cumsum(sc)[:-1]))
    rdispl = np.concatenate(([0], np.cumsum(rc)[:-1]))
    comm.alltoallv(d_ptr, sc, sdispl, KEY, r_ptr, rc, rdispl)

    # received runs are each sorted; a stable sort merges them in place
    r = comm.array(r_ptr, KEY, total)
    r.sort(kind="stable")
    comm.mark("Benchmark Finish")
    out = PsrsResult(rho, r.copy(), int(sc.max()) * e if v else 0, total)
    comm.finalize()
    return out


def check_sorted(parts: Sequence[np.ndarray]) -> bool:
    """Each part sorted, and part i's max <= part i+1's min."""
    last = None
    for p in parts:
        if len(p) == 0:
            continue
        if np.any(p[1:] < p[:-1]):
            return False
        if last is not None and p[0] < last:
            return False
        last = p[-1]
    return True


def psrs_oracle(n: int, v: int, seed: int, distinct: bool = False) -> np.ndarray:
    return np.sort(np.concatenate([psrs_input(n, v, r, seed, distinct) for r in range(v)]))


# -------------------------------------------------------------- prefix sum

def psum_input(n: int, v: int, rho: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, rho, 1])
    return rng.integers(0, 1000, size=n // v, dtype=np.int64)


def prefix_sum_program(comm: Comm, n: int, seed: int,
                       data: Optional[Sequence[int]] = None) -> np.ndarray:
    """Inclusive prefix sum of a block-distributed int64 array."""
    comm.init()
    v = comm.comm_size()
    rho = comm.comm_rank()
    if n % v:
        raise ValueError(f"n={n} is not divisible by v={v}")
    m = n // v
    x_ptr, x = comm.alloc_array(np.int64, m)
    if data is not None:
        x[:] = np.asarray(data, dtype=np.int64)[rho * m:(rho + 1) * m]
    else:
        x[:] = psum_input(n, v, rho, seed)
    comm.mark("Benchmark Start")
    np.cumsum(x, out=x)
    t_ptr, t = comm.alloc_array(np.int64, 1)
    t[0] = x[-1] if m else 0
    all_ptr, _ = comm.alloc_array(np.int64, v)
    comm.allgather(t_ptr, 1, np.int64, all_ptr)
    totals = comm.array(all_ptr, np.int64, v)
    x = comm.array(x_ptr, np.int64, m)
    x += totals[:rho].sum()
    comm.mark("Benchmark Finish")
    out = x.copy()
    comm.finalize()
    return out


def psum_oracle(n: int, v: int, seed: int) -> np.ndarray:
    return np.cumsum(np.concatenate([psum_input(n, v, r, seed) for r in range(v)]))


# ----------------------------------------------------- alltoall benchmark

def bench_value(src: int, dst: int, i: np.ndarray) -> np.ndarray:
    return ((src * 0x9E3779B1 + dst * 0x85EBCA77 + i * 0x27D4EB2F) & 0xFFFFFFFF).astype(KEY)


def alltoall_program(comm: Comm, n: int, indirect: bool = False) -> Dict[str, object]:
    """One alltoallv with n/v^2 keys per pair; returns a check and timing.

    ``indirect`` routes the exchange through the staging-area baseline.
    """
    comm.init()
    v = comm.comm_size()
    rho = comm.comm_rank()
    if n % (v * v):
        raise ValueError(f"n={n} is not divisible by v^2={v * v}")
    c = n // (v * v)
    idx = np.arange(c, dtype=np.int64)
    s_ptr, s = comm.alloc_array(KEY, c * v)
    for j in range(v):
        s[j * c:(j + 1) * c] = bench_value(rho, j, idx)
    r_ptr, _ = comm.alloc_array(KEY, c * v)
    counts = [c] * v
    displs = [j * c for j in range(v)]
    comm.mark("Benchmark Start")
    t0 = comm.wtime()
    if indirect:
        w = c * KEY.itemsize
        comm.alltoallv_bytes([(s_ptr + j * w, w) for j in range(v)],
                             [(r_ptr + i * w, w) for i in range(v)], indirect=True)
    else:
        comm.alltoallv(s_ptr, counts, displs, KEY, r_ptr, counts, displs)
    secs = comm.wtime() - t0
    comm.mark("Benchmark Finish")
    r = comm.array(r_ptr, KEY, c * v)
    ok = all(np.array_equal(r[i * c:(i + 1) * c], bench_value(i, rho, idx)) for i in range(v))
    digest = hashlib.sha256(r.tobytes()).hexdigest()
    comm.finalize()
    return {"ok": ok, "seconds": secs, "digest": digest}


# ------------------------------------------------------ collectives demo

def collectives_program(comm: Comm, n: int, seed: int) -> Dict[str, str]:
    """Every supported collective once; returns a digest per result buffer."""
    comm.init()
    v = comm.comm_size()
    rho = comm.comm_rank()
    w = max(1, n // v)
    rng = np.random.default_rng([seed, rho, 2])
    out: Dict[str, str] = {}

    def dig(name, ptr, dt, cnt):
        out[name] = hashlib.sha256(comm.array(ptr, dt, cnt).tobytes()).hexdigest()[:16]

    a_ptr, a = comm.alloc_array(np.int64, w * v)
    b_ptr, b = comm.alloc_array(np.int64, w * v)
    a[:] = rng.integers(-1000, 1000, size=w * v)
    b[:] = 0

    comm.bcast(a_ptr, w, np.int64, v - 1)
    dig("bcast", a_ptr, np.int64, w)
    comm.gather(a_ptr, w, np.int64, b_ptr, v // 2)
    if rho == v // 2:
        dig("gather", b_ptr, np.int64, w * v)
    a = comm.array(a_ptr, np.int64, w * v)
    a[:] = rng.integers(-1000, 1000, size=w * v)
    comm.reduce(a_ptr, b_ptr, w, np.int64, "sum", 1 % v)
    if rho == 1 % v:
        dig("reduce_sum", b_ptr, np.int64, w)
    comm.allreduce(a_ptr, b_ptr, w, np.int64, "max")
    dig("allreduce_max", b_ptr, np.int64, w)
    comm.allreduce(a_ptr, b_ptr, w, np.int64, "min")
    dig("allreduce_min", b_ptr, np.int64, w)
    comm.allgather(a_ptr, 1, np.int64, b_ptr)
    dig("allgather", b_ptr, np.int64, v)
    comm.alltoall(a_ptr, w, np.int64, b_ptr)
    dig("alltoall", b_ptr, np.int64, w * v)
    comm.scatter(a_ptr, w, np.int64, b_ptr, 0)
    dig("scatter", b_ptr, np.int64, w)
    counts = [1 + (i % w) for i in range(v)]
    displs = list(np.concatenate(([0], np.cumsum(counts)[:-1])))
    comm.gatherv(a_ptr, counts[rho], np.int64, b_ptr, counts, displs, 0)
    if rho == 0:
        dig("gatherv", b_ptr, np.int64, sum(counts))
    comm.allgatherv(a_ptr, counts[rho], np.int64, b_ptr, counts, displs)
    dig("allgatherv", b_ptr, np.int64, sum(counts))
    comm.barrier()
    comm.finalize()
    return out


# ---------------------------------------------------------------- helpers

def run_psrs(cfg: SimConfig, n: int, seed: int = 1, distinct: bool = False, transport=None):
    return run(cfg, psrs_program, n, seed, distinct, transport=transport)


def run_prefix_sum(cfg: SimConfig, n: int, seed: int = 1, data=None, transport=None):
    return run(cfg, prefix_sum_program, n, seed, data, transport=transport)


def run_alltoall(cfg: SimConfig, n: int, indirect: bool = False, transport=None):
    return run(cfg, alltoall_program, n, indirect, transport=transport)


def run_collectives(cfg: SimConfig, n: int, seed: int = 1, transport=None):
    return run(cfg, collectives_program, n, seed, transport=transport)


APPS = ("psrs", "psum", "alltoall", "collectives")
