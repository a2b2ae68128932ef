import socket
import threading
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pytest

from embsp.config import SimConfig
from embsp.net import TcpTransport
from embsp.runtime import Runtime

DRIVERS = ["explicit-sync", "async-queued", "memory-mapped", "in-memory"]
MSG_LENS = lambda B: [0, 1, B - 1, B, B + 1, 3 * B + 7]  # noqa: E731


def free_ports(n: int) -> List[int]:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def run_ranks(cfg: SimConfig, program: Callable, *args, **kwargs):
    """Run ``program`` on P in-process ranks joined by real TCP sockets.

    Returns (per-rank results, per-rank runtimes).
    """
    P = cfg.P
    hosts = tuple(f"127.0.0.1:{p}" for p in free_ports(P))
    results: List = [None] * P
    rts: List = [None] * P
    errors: List = []

    def one(r):
        try:
            tr = TcpTransport(r, hosts, connect_timeout=20)
            rt = Runtime(cfg.with_(rank=r, hosts=hosts), transport=tr)
            rts[r] = rt
            try:
                results[r] = rt.run(program, *args, **kwargs)
            finally:
                rt.close()
                tr.close()
        except BaseException as exc:  # surfaced below
            errors.append(exc)

    ths = [threading.Thread(target=one, args=(r,)) for r in range(P)]
    for th in ths:
        th.start()
    for th in ths:
        th.join(120)
    if errors:
        raise errors[0]
    return results, rts


def by_rho(results: Sequence[Sequence], P: int) -> List:
    """Flatten per-rank local result lists into global rho order."""
    out = []
    nloc = len(results[0])
    for t in range(nloc):
        for r in range(P):
            out.append(results[r][t])
    return out


def oracle_alltoallv(mems: List[bytearray], sends, recvs) -> List[bytearray]:
    """In-memory reference exchange over whole context images."""
    out = [bytearray(m) for m in mems]
    v = len(mems)
    for i in range(v):
        for j in range(v):
            so, n = sends[i][j]
            ro, rn = recvs[j][i]
            assert n == rn
            out[j][ro:ro + n] = mems[i][so:so + n]
    return out


def random_spec(rng: np.random.Generator, v: int, mu: int, lens: Sequence[int]):
    """Random non-overlapping send and recv regions for every VP.

    Returns (sends, recvs) with sends[i][j] / recvs[j][i] = (offset, length).
    """
    L = rng.choice(lens, size=(v, v))
    sends, recvs = [], []
    for i in range(v):
        half = mu // 2
        sends.append(_place(rng, [int(L[i, j]) for j in range(v)], 0, half))
        recvs.append(_place(rng, [int(L[j, i]) for j in range(v)], half, mu - half))
    return sends, recvs


def _place(rng, sizes: Sequence[int], base: int, span: int) -> List[Tuple[int, int]]:
    need = sum(sizes)
    assert need <= span, (need, span)
    slack = span - need
    gaps = np.sort(rng.integers(0, slack + 1, size=len(sizes)))
    order = rng.permutation(len(sizes))
    out: List[Tuple[int, int]] = [None] * len(sizes)  # type: ignore[list-item]
    pos = base
    prev_gap = 0
    for idx, g in zip(order, gaps):
        pos += int(g) - prev_gap
        prev_gap = int(g)
        out[idx] = (pos, sizes[idx])
        pos += sizes[idx]
    return out


def exchange_program(comm, images, sends, recvs, indirect=False):
    """Load this VP's context image, alltoallv, return the context bytes."""
    comm.init()
    rho = comm.comm_rank()
    mu = comm.runtime.cfg.mu
    ptr = comm.malloc(mu)
    assert ptr == 0
    comm.array(0, np.uint8, mu)[:] = np.frombuffer(bytes(images[rho]), dtype=np.uint8)
    comm.alltoallv_bytes(sends[rho], recvs[rho], indirect=indirect)
    out = bytes(comm.array(0, np.uint8, mu))
    comm.finalize()
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
