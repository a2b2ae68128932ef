"""One real processor's runtime: driver, partitions, scheduler and VP threads."""
from __future__ import annotations

import logging
import os
import shutil
import sys
import tempfile
import threading
import time
from typing import Any, Callable, Dict, List, Optional

from .bench import BenchRecorder
from .blockio import Category, IoCounters, open_driver
from .config import DriverKind, SimConfig, validate
from .net import Transport, open_transport
from .sched import Aborted, DeadlockError, ProtocolError, Scheduler, VpIdentity
from .vmem import Vmem

log = logging.getLogger(__name__)

_PKG_DIR = os.path.dirname(os.path.abspath(__file__))


class BufferOverflow(RuntimeError):
    """The shared buffer (sigma bytes) is too small for a collective."""


class VpFailure(RuntimeError):
    def __init__(self, rho: Optional[int], exc: BaseException):
        self.rho = rho
        self.exc = exc
        who = f"VP rho={rho}" if rho is not None else "runtime"
        super().__init__(f"{who} failed: {type(exc).__name__}: {exc}")


class SharedBuffer:
    """Accounting for the per-rank shared buffer of sigma bytes."""

    def __init__(self, sigma: int):
        self.sigma = sigma
        self._lock = threading.Lock()
        self.used = 0
        self.high_water = 0

    def reserve(self, n: int, what: str = "") -> None:
        if n <= 0:
            return
        with self._lock:
            if self.used + n > self.sigma:
                raise BufferOverflow(
                    f"shared buffer overflow{' (' + what + ')' if what else ''}: "
                    f"need {self.used + n} bytes, sigma={self.sigma}")
            self.used += n
            self.high_water = max(self.high_water, self.used)

    def release(self, n: int) -> None:
        if n <= 0:
            return
        with self._lock:
            self.used -= n

    def reset_high_water(self) -> None:
        with self._lock:
            self.high_water = self.used


class CallState:
    """Shared per-rank state of one collective call."""

    def __init__(self, seq: int, kind: str, site: str, rho: int):
        self.seq = seq
        self.kind = kind
        self.site = site
        self.rho = rho
        self.lock = threading.RLock()
        self.data: Dict[str, Any] = {}
        self.reserved = 0
        self.done = 0

    def setdefault(self, key: str, factory: Callable[[], Any]) -> Any:
        with self.lock:
            if key not in self.data:
                self.data[key] = factory()
            return self.data[key]


def call_site() -> str:
    """file:line of the innermost frame outside this package."""
    f = sys._getframe(1)
    while f is not None:
        fn = os.path.abspath(f.f_code.co_filename)
        if not fn.startswith(_PKG_DIR + os.sep):
            return f"{os.path.basename(fn)}:{f.f_lineno}"
        f = f.f_back
    return "<runtime>"


class Runtime:
    """Hosts the v/P virtual processors of one rank.

    >>> rt = Runtime(SimConfig(v=4, k=2, mu=8192, B=512, driver="in-memory"))
    >>> rt.run(lambda comm: comm.comm_rank())
    [0, 1, 2, 3]
    """

    def __init__(self, cfg: SimConfig, transport: Optional[Transport] = None):
        self.cfg = validate(cfg)
        self.counters = IoCounters()
        self._tmpdirs: List[str] = []
        paths = list(cfg.disk_paths)
        if not paths and cfg.driver is not DriverKind.IN_MEMORY:
            base = tempfile.mkdtemp(prefix="embsp-")
            self._tmpdirs.append(base)
            for d in range(cfg.D):
                os.makedirs(os.path.join(base, f"disk{d}"))
            paths = [os.path.join(base, f"disk{d}") for d in range(cfg.D)]
        self.disk_paths = paths
        self.driver = open_driver(cfg, self.counters, paths)
        self.vmem = Vmem(cfg, self.driver, self.counters)
        self.net = transport if transport is not None else open_transport(cfg.rank, cfg.hosts)
        self._own_net = transport is None
        net_barrier = self.net.barrier if cfg.P > 1 else None
        self.sched = Scheduler(cfg.nlocal, cfg.k, net_barrier, cfg.stay_resident)
        self.shared = SharedBuffer(cfg.sigma)
        self.bench = BenchRecorder(cfg.nlocal, enabled=cfg.bench)
        self._calls: Dict[int, CallState] = {}
        self._call_seq = [0] * cfg.nlocal
        self._calls_lock = threading.Lock()
        self.t0 = time.perf_counter()
        self.elapsed = 0.0
        self.closed = False

    # ----------------------------------------------------------- identity
    def rho(self, t: int) -> int:
        return t * self.cfg.P + self.cfg.rank

    def identity(self, t: int) -> VpIdentity:
        return VpIdentity.of(t, self.cfg.rank, self.cfg.P)

    def rank_of(self, rho: int) -> int:
        return rho % self.cfg.P

    def local_t(self, rho: int) -> int:
        return rho // self.cfg.P

    def queue(self, t: int):
        return self.driver.queue(t % self.cfg.k)

    def mark(self, t: int, label: str) -> None:
        self.bench.mark(t, label)

    # ------------------------------------------------------------ calls
    def begin(self, t: int, kind: str) -> CallState:
        """Register t's next collective; detect kind mismatches."""
        site = call_site()
        seq = self._call_seq[t]
        self._call_seq[t] += 1
        rho = self.rho(t)
        with self._calls_lock:
            st = self._calls.get(seq)
            if st is None:
                st = self._calls[seq] = CallState(seq, kind, site, rho)
            elif st.kind != kind:
                raise ProtocolError(
                    f"collective mismatch at call #{seq}: VP {st.rho} called {st.kind} at "
                    f"{st.site}, VP {rho} called {kind} at {site}")
        return st

    def reserve(self, st: CallState, n: int, what: str) -> None:
        self.shared.reserve(n, what)
        with st.lock:
            st.reserved += n

    def end_call(self, t: int, st: CallState) -> None:
        with self._calls_lock:
            st.done += 1
            if st.done == self.cfg.nlocal - len(self.sched.finished):
                self._calls.pop(st.seq, None)
                self.shared.release(st.reserved)
                st.reserved = 0

    # ------------------------------------------------------- supersteps
    def end_superstep(self, t: int, reason: str = "barrier") -> None:
        """Close the virtual superstep: swap out, barrier, swap back in."""
        q = self.queue(t)
        keep = False
        if self.cfg.stay_resident:
            with self.sched.cv:
                keep = self.sched.arrived == self.cfg.nlocal - len(self.sched.finished) - 1
        if not keep:
            self.vmem.swap_out(t, q, reason=reason)
        self.driver.wait_all(q)
        self.sched.barrier(t, virtual=True)
        self.vmem.swap_in(t, q, Category.RESUME_IN, reason="resume")

    def internal_barrier(self, t: int, step: Optional[int] = None) -> None:
        """Barrier between internal supersteps; no swapping."""
        if step is not None:
            self.mark(t, f"Finish Step {step}")
        self.driver.wait_all(self.queue(t))
        self.sched.barrier(t, virtual=False)
        if step is not None:
            self.mark(t, f"Start Step {step + 1}")

    # --------------------------------------------------------------- run
    def run(self, program: Callable, *args, **kwargs) -> List[Any]:
        """Run ``program(comm, *args, **kwargs)`` on every local VP.

        Returns the per-VP return values in local id order.
        """
        from .api import Comm

        n = self.cfg.nlocal
        results: List[Any] = [None] * n
        errors: Dict[int, BaseException] = {}

        def vp_main(t: int) -> None:
            comm = Comm(self, t)
            try:
                self.sched.acquire(t, fresh=True)
                self.vmem.swap_in(t, self.queue(t))
                results[t] = program(comm, *args, **kwargs)
                comm._leave()
            except BaseException as exc:
                errors[t] = exc
                self.sched.abort(exc, self.rho(t))
            finally:
                self.vmem.drop(t)
                self.sched.finish(t)

        t0 = time.perf_counter()
        self.bench.start()
        threads = [threading.Thread(target=vp_main, args=(t,), name=f"vp{self.rho(t)}", daemon=True)
                   for t in range(n)]
        for th in threads:
            th.start()
        closed_net = False
        for th in threads:
            while th.is_alive():
                th.join(0.05)
                if self.sched.failed is not None and not closed_net and self.cfg.P > 1:
                    # unblock peers and any local thread stuck in the network
                    closed_net = True
                    self.net.close()
        self.driver.wait_everything()
        self.elapsed = time.perf_counter() - t0
        failure = self.sched.failed
        if failure is not None or errors:
            primary = failure
            rho = self.sched.failed_rho
            if isinstance(primary, (Aborted, type(None))) or primary is None:
                for t, e in sorted(errors.items()):
                    if not isinstance(e, Aborted):
                        primary, rho = e, self.rho(t)
                        break
            if isinstance(primary, DeadlockError):
                rho = None
            raise VpFailure(rho, primary) from primary
        return results

    # ------------------------------------------------------------ close
    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.driver.close()
        finally:
            if self._own_net:
                self.net.close()
            for d in self._tmpdirs:
                shutil.rmtree(d, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
