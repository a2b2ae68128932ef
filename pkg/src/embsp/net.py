"""Transport among the P real processors.

Loopback serves P=1.  The TCP transport keeps one persistent connection per
peer pair and exchanges length-prefixed frames: an 8-byte little-endian
length, then a one-byte operation tag, then the payload.  Collectives are
called by one thread per rank at a time; the transport is not thread-safe.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import Counter
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

OP_BARRIER = 1
OP_BCAST = 2
OP_GATHER = 3
OP_ALLTOALL = 4
OP_REDUCE = 5
OP_HELLO = 6
_OP_NAMES = {OP_BARRIER: "barrier", OP_BCAST: "bcast", OP_GATHER: "gather",
             OP_ALLTOALL: "alltoall", OP_REDUCE: "reduce"}

_LEN = struct.Struct("<Q")


class NetError(RuntimeError):
    pass


def tree_rounds(P: int) -> int:
    """⌈lg P⌉, the depth of a binomial reduction tree."""
    return (P - 1).bit_length()


class Transport:
    """Interface plus op counting shared by both transports."""

    kind = "abstract"

    def __init__(self, rank: int, P: int):
        self.rank = rank
        self.P = P
        self.ops: Counter = Counter()
        self.reduce_rounds = 0  # tree rounds performed in the last reduce (at root)
        self.reduce_rounds_total = 0
        self.bytes_sent = 0

    def _count(self, op: int) -> None:
        self.ops[_OP_NAMES[op]] += 1

    def barrier(self) -> None:
        raise NotImplementedError

    def bcast(self, root: int, data: Optional[bytes]) -> bytes:
        raise NotImplementedError

    def gather(self, root: int, data: bytes) -> Optional[List[bytes]]:
        raise NotImplementedError

    def alltoall(self, payloads: Sequence[bytes]) -> List[bytes]:
        raise NotImplementedError

    def reduce(self, root: int, arr: np.ndarray,
               combine: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Optional[np.ndarray]:
        raise NotImplementedError

    def close(self) -> None:
        pass


class Loopback(Transport):
    """P=1: every collective is a local identity."""

    kind = "loopback"

    def __init__(self):
        super().__init__(0, 1)

    def barrier(self) -> None:
        self._count(OP_BARRIER)

    def bcast(self, root, data):
        self._count(OP_BCAST)
        return bytes(data)

    def gather(self, root, data):
        self._count(OP_GATHER)
        return [bytes(data)]

    def alltoall(self, payloads):
        self._count(OP_ALLTOALL)
        if len(payloads) != 1:
            raise NetError(f"alltoall expects 1 payload, got {len(payloads)}")
        return [bytes(payloads[0])]

    def reduce(self, root, arr, combine):
        self._count(OP_REDUCE)
        self.reduce_rounds = 0
        return arr.copy()


def _parse_host(spec: str):
    host, _, port = spec.rpartition(":")
    if not host or not port:
        raise NetError(f"bad host spec {spec!r}; expected HOST:PORT")
    return host, int(port)


class TcpTransport(Transport):
    kind = "tcp"

    def __init__(self, rank: int, hosts: Sequence[str], connect_timeout: float = 30.0):
        super().__init__(rank, len(hosts))
        self.hosts = list(hosts)
        self.socks: Dict[int, socket.socket] = {}
        self._connect(connect_timeout)

    # --------------------------------------------------------- set-up
    def _connect(self, timeout: float) -> None:
        host, port = _parse_host(self.hosts[self.rank])
        lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lsock.bind((host, port))
        lsock.listen(self.P)
        deadline = time.monotonic() + timeout
        try:
            for peer in range(self.rank):
                self.socks[peer] = self._dial(peer, deadline)
            lsock.settimeout(max(0.1, deadline - time.monotonic()))
            for _ in range(self.rank + 1, self.P):
                conn, _addr = lsock.accept()
                conn.settimeout(None)
                op, payload = self._recv_frame(conn)
                if op != OP_HELLO:
                    raise NetError(f"expected hello, got op {op}")
                peer, = struct.unpack("<I", payload)
                self._tune(conn)
                self.socks[peer] = conn
        except socket.timeout:
            self.close()
            raise NetError(f"rank {self.rank}: peers did not connect within {timeout}s") from None
        finally:
            lsock.close()
        log.debug("rank %d connected to %d peers", self.rank, len(self.socks))

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        addr = _parse_host(self.hosts[peer])
        while True:
            try:
                s = socket.create_connection(addr, timeout=5.0)
                s.settimeout(None)
                self._tune(s)
                self._send_frame(s, OP_HELLO, struct.pack("<I", self.rank))
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise NetError(f"rank {self.rank}: cannot reach rank {peer} at {addr}")
                time.sleep(0.05)

    @staticmethod
    def _tune(s: socket.socket) -> None:
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    # --------------------------------------------------------- framing
    def _send_frame(self, s: socket.socket, op: int, payload) -> None:
        payload = memoryview(payload).cast("B")
        s.sendall(_LEN.pack(payload.nbytes + 1) + bytes([op]))
        if payload.nbytes:
            s.sendall(payload)
        self.bytes_sent += payload.nbytes

    @staticmethod
    def _recv_exact(s: socket.socket, n: int) -> bytearray:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            r = s.recv_into(view[got:], n - got)
            if r == 0:
                raise NetError("peer disconnected")
            got += r
        return buf

    def _recv_frame(self, s: socket.socket):
        n, = _LEN.unpack(self._recv_exact(s, 8))
        if n < 1:
            raise NetError("empty frame")
        body = self._recv_exact(s, n)
        return body[0], bytes(body[1:])

    def _recv(self, peer: int, op: int) -> bytes:
        got, payload = self._recv_frame(self.socks[peer])
        if got != op:
            raise NetError(f"rank {self.rank}: expected {_OP_NAMES.get(op, op)} from {peer}, "
                           f"got {_OP_NAMES.get(got, got)}")
        return payload

    def _send(self, peer: int, op: int, payload) -> None:
        self._send_frame(self.socks[peer], op, payload)

    # ------------------------------------------------------ collectives
    def barrier(self) -> None:
        self._count(OP_BARRIER)
        if self.rank == 0:
            for p in range(1, self.P):
                self._recv(p, OP_BARRIER)
            for p in range(1, self.P):
                self._send(p, OP_BARRIER, b"")
        else:
            self._send(0, OP_BARRIER, b"")
            self._recv(0, OP_BARRIER)

    def bcast(self, root: int, data: Optional[bytes]) -> bytes:
        self._count(OP_BCAST)
        if self.rank == root:
            for p in range(self.P):
                if p != root:
                    self._send(p, OP_BCAST, data)
            return bytes(data)
        return self._recv(root, OP_BCAST)

    def gather(self, root: int, data: bytes) -> Optional[List[bytes]]:
        self._count(OP_GATHER)
        if self.rank != root:
            self._send(root, OP_GATHER, data)
            return None
        out = []
        for p in range(self.P):
            out.append(bytes(data) if p == root else self._recv(p, OP_GATHER))
        lens = {len(x) for x in out}
        if len(lens) > 1:
            raise NetError(f"gather length mismatch across ranks: {[len(x) for x in out]}")
        return out

    def alltoall(self, payloads: Sequence[bytes]) -> List[bytes]:
        self._count(OP_ALLTOALL)
        if len(payloads) != self.P:
            raise NetError(f"alltoall expects {self.P} payloads, got {len(payloads)}")
        errors: List[BaseException] = []

        def send_to(p):
            try:
                self._send(p, OP_ALLTOALL, payloads[p])
            except BaseException as exc:  # surfaced below
                errors.append(exc)

        senders = [threading.Thread(target=send_to, args=(p,), daemon=True)
                   for p in range(self.P) if p != self.rank]
        for th in senders:
            th.start()
        out: List[bytes] = []
        try:
            for p in range(self.P):
                out.append(bytes(payloads[p]) if p == self.rank else self._recv(p, OP_ALLTOALL))
        finally:
            for th in senders:
                th.join()
        if errors:
            raise NetError(f"alltoall send failed: {errors[0]}") from errors[0]
        return out

    def reduce(self, root, arr, combine):
        """Binomial tree rooted at ``root``; ⌈lg P⌉ rounds."""
        self._count(OP_REDUCE)
        vrank = (self.rank - root) % self.P
        acc = np.array(arr, copy=True)
        mask = 1
        rounds = 0
        while mask < self.P:
            rounds += 1
            if vrank & mask:
                self._send((vrank - mask + root) % self.P, OP_REDUCE, acc.tobytes())
                break
            partner = vrank | mask
            if partner < self.P:
                got = np.frombuffer(self._recv((partner + root) % self.P, OP_REDUCE),
                                    dtype=acc.dtype)
                if got.shape != acc.shape:
                    raise NetError(f"reduce length mismatch: {got.shape} vs {acc.shape}")
                acc = combine(acc, got)
            mask <<= 1
        if self.rank == root:
            self.reduce_rounds = rounds
            self.reduce_rounds_total += rounds
            return acc
        return None

    def close(self) -> None:
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        self.socks = {}


def open_transport(rank: int, hosts: Sequence[str], timeout: float = 30.0) -> Transport:
    if len(hosts) <= 1:
        return Loopback()
    return TcpTransport(rank, hosts, timeout)
