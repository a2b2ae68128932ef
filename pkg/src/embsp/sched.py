"""Deterministic round scheduler, barriers and composite-signal primitives.

All local VP threads of a rank share one condition variable.  A thread that
cannot proceed parks with a predicate; when every thread is parked and no
predicate holds, the scheduler admits the next round of k threads (or
declares a deadlock if none is left).  Admission is therefore a function of
the program alone, not of OS thread timing.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

log = logging.getLogger(__name__)


class Aborted(RuntimeError):
    """Raised in every waiting thread once some VP has failed."""


class DeadlockError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    """Collectives were called inconsistently across VPs."""


@dataclass(frozen=True)
class VpIdentity:
    rho: int
    t: int
    rank: int

    @classmethod
    def of(cls, t: int, rank: int, P: int) -> "VpIdentity":
        return cls(t * P + rank, t, rank)

    def partition(self, k: int) -> int:
        return self.t % k


@dataclass
class CompositeSignal:
    """Lock + wakeup + counter + flag, realized on the scheduler's condition."""

    name: str
    count: int = 0
    flag: bool = False
    holder: Optional[int] = None   # thread holding the signal lock
    gen: int = 0                   # bumped by every broadcast


@dataclass
class _SyncPoint:
    arrived: int = 0
    left: int = 0
    done: bool = False
    result: Any = None
    contrib: Dict[int, Any] = field(default_factory=dict)


class Scheduler:
    """Round gate, partitions, barriers and signals for one rank.

    ``net_barrier`` (optional) is called by the last local arriver of every
    virtual-superstep barrier.
    """

    def __init__(self, nlocal: int, k: int, net_barrier: Optional[Callable[[], None]] = None,
                 stay_resident: bool = False):
        self.nlocal = nlocal
        self.k = k
        self.nrounds = -(-nlocal // k)
        self.cv = threading.Condition()
        self.net_barrier = net_barrier
        self.stay_resident = stay_resident
        self.epoch = 0
        self.admitted_round = 0
        self.holder: List[Optional[int]] = [None] * k
        self.want: List[Dict[int, bool]] = [dict() for _ in range(k)]  # t -> fresh
        self.active = nlocal
        self.parked: Dict[int, Callable[[], bool]] = {}
        self.arrived = 0
        self.finished = set()
        self.failed: Optional[BaseException] = None
        self.failed_rho: Optional[int] = None
        self.syncs: Dict[Any, _SyncPoint] = {}
        self.turn: Dict[Any, int] = {}
        self.admissions: List[Tuple[int, int, Tuple[int, ...]]] = []
        self.rooted = CompositeSignal("rooted")
        self.initial = CompositeSignal("initial")
        self.final = CompositeSignal("final")
        self._record_admission()

    # ------------------------------------------------------------- core
    def _record_admission(self):
        r = self.admitted_round
        members = tuple(range(r * self.k, min(self.nlocal, (r + 1) * self.k)))
        self.admissions.append((self.epoch, r, members))

    def _wait(self, t: int, pred: Callable[[], bool]) -> None:
        """Park thread t until ``pred`` holds. Called with the cv held."""
        while True:
            if self.failed is not None:
                raise Aborted(f"run aborted: VP rho={self.failed_rho} failed") from self.failed
            if pred():
                return
            self.active -= 1
            self.parked[t] = pred
            try:
                self._maybe_advance()
                # advancing may have satisfied our own predicate
                if self.failed is None and not pred():
                    self.cv.wait()
            finally:
                self.parked.pop(t, None)
                self.active += 1

    def _maybe_advance(self) -> None:
        if self.active > 0:
            return
        if self.failed is not None:
            # keep the original failure; parked threads wake and abort
            self.cv.notify_all()
            return
        if any(p() for p in self.parked.values()):
            self.cv.notify_all()
            return
        if self.admitted_round + 1 < self.nrounds:
            self.admitted_round += 1
            self._record_admission()
            self.cv.notify_all()
            return
        if not self.parked:
            return
        self.failed = DeadlockError(
            "no VP can make progress (mismatched collectives or early exit?); parked: "
            + ", ".join(f"t={t}" for t in sorted(self.parked)))
        self.failed_rho = None
        self.cv.notify_all()

    def abort(self, exc: BaseException, rho: Optional[int] = None) -> None:
        with self.cv:
            if self.failed is None:
                self.failed = exc
                self.failed_rho = rho
            self.cv.notify_all()

    # ------------------------------------------------------- partitions
    def _eligible(self, p: int, t: int) -> bool:
        if self.holder[p] is not None:
            return False
        ok = [u for u, fresh in self.want[p].items()
              if not fresh or u // self.k <= self.admitted_round]
        return bool(ok) and min(ok) == t

    def acquire(self, t: int, fresh: bool) -> None:
        """Lock t's partition. Fresh acquisitions wait for t's round."""
        p = t % self.k
        with self.cv:
            if self.holder[p] == t:
                return
            self.want[p][t] = fresh
            try:
                self._wait(t, lambda: self._eligible(p, t))
            finally:
                self.want[p].pop(t, None)
            self.holder[p] = t
            self.cv.notify_all()

    def release(self, t: int) -> None:
        p = t % self.k
        with self.cv:
            if self.holder[p] == t:
                self.holder[p] = None
                self.cv.notify_all()

    def holds(self, t: int) -> bool:
        return self.holder[t % self.k] == t

    def finish(self, t: int) -> None:
        """Thread t has left the program for good."""
        with self.cv:
            p = t % self.k
            if self.holder[p] == t:
                self.holder[p] = None
            self.finished.add(t)
            self.active -= 1
            self.cv.notify_all()
            self._maybe_advance()

    def held_partitions(self) -> int:
        return sum(h is not None for h in self.holder)

    # ----------------------------------------------------------- barriers
    def barrier(self, t: int, virtual: bool = True, before_release: Optional[Callable[[], None]] = None) -> bool:
        """Superstep barrier for all local VPs.

        Releases t's partition (unless it is the last arriver and
        stay_resident is on), waits for all local VPs and, for virtual
        supersteps, the network barrier; then re-acquires the partition in
        round order.  Returns True if the partition was kept throughout.
        """
        keep = False
        with self.cv:
            self.arrived += 1
            last = self.arrived == self.nlocal - len(self.finished)
            keep = last and self.stay_resident
            if not keep:
                p = t % self.k
                if self.holder[p] == t:
                    self.holder[p] = None
            if last:
                if virtual and self.net_barrier is not None:
                    self.net_barrier()
                self.arrived = 0
                self.epoch += 1
                self.admitted_round = 0
                self._record_admission()
                self.cv.notify_all()
            else:
                e = self.epoch
                self.cv.notify_all()
                self._wait(t, lambda: self.epoch != e)
        if not keep:
            self.acquire(t, fresh=True)
        return keep

    def round_sync(self, t: int, key: Any, contrib: Any = None,
                   action: Optional[Callable[[Dict[int, Any]], Any]] = None) -> Any:
        """Synchronize with the other members of t's round.

        The last arriver runs ``action`` on the members' contributions; every
        member receives its result.
        """
        r = t // self.k
        members = min(self.k, self.nlocal - r * self.k)
        with self.cv:
            sp = self.syncs.setdefault(key, _SyncPoint())
            sp.arrived += 1
            sp.contrib[t] = contrib
            if sp.arrived == members:
                sp.result = action(sp.contrib) if action is not None else None
                sp.done = True
                self.cv.notify_all()
            else:
                self._wait(t, lambda: sp.done)
            sp.left += 1
            if sp.left == members:
                del self.syncs[key]
            return sp.result

    def turnstile(self, t: int, key: Any, fn: Callable[[], Any]) -> Any:
        """Run ``fn`` for local threads strictly in increasing t order."""
        with self.cv:
            self._wait(t, lambda: self.turn.get(key, 0) == t)
        try:
            return fn()
        finally:
            with self.cv:
                self.turn[key] = t + 1
                if t + 1 >= self.nlocal:
                    del self.turn[key]
                self.cv.notify_all()

    # ---------------------------------------------------- signal helpers
    def _s_lock(self, s: CompositeSignal, t: int) -> None:
        self._wait(t, lambda: s.holder is None)
        s.holder = t

    def _s_unlock(self, s: CompositeSignal, t: int) -> None:
        assert s.holder == t, (s.name, s.holder, t)
        s.holder = None
        self.cv.notify_all()

    def _s_wait(self, s: CompositeSignal, t: int, pred: Callable[[], bool]) -> None:
        """s.wait(): drop the signal lock, wait for ``pred``, retake it."""
        self._s_unlock(s, t)
        self._wait(t, lambda: pred() and s.holder is None)
        s.holder = t

    def _release_partition_locked(self, t: int) -> None:
        p = t % self.k
        if self.holder[p] == t:
            self.holder[p] = None
            self.cv.notify_all()

    def _reacquire_partition_locked(self, t: int) -> None:
        p = t % self.k
        self.want[p][t] = False
        try:
            self._wait(t, lambda: self._eligible(p, t))
        finally:
            self.want[p].pop(t, None)
        self.holder[p] = t

    # ------------------------------------------------------ primitives
    def em_signal_threads(self, s: CompositeSignal, t: int, take_lock: bool) -> None:
        with self.cv:
            if take_lock:
                self._s_lock(s, t)
            s.count = (s.count + 1) % self.nlocal
            s.flag = True
            s.gen += 1
            self._s_unlock(s, t)

    def em_wait_for_root(self, s: CompositeSignal, t: int, r: int,
                         swap_out: Callable[[], None]) -> bool:
        """Wait for the root's signal; yield the partition only if shared."""
        assert t != r
        result = False
        with self.cv:
            self._s_lock(s, t)
            if not s.flag:
                shared = t % self.k == r % self.k
                if shared:
                    result = True
                    self._s_unlock(s, t)
                    # I/O outside the condition
                    self.cv.release()
                    try:
                        swap_out()
                    finally:
                        self.cv.acquire()
                    self._s_lock(s, t)
                    if not s.flag:
                        self._release_partition_locked(t)
                        self._s_wait(s, t, lambda: s.flag)
                    else:
                        self._release_partition_locked(t)
                    self._s_unlock(s, t)
                    self._reacquire_partition_locked(t)
                    self._s_lock(s, t)
                else:
                    self._s_wait(s, t, lambda: s.flag)
            s.count += 1
            if s.count == self.nlocal:
                s.count = 0
                s.flag = False
            self._s_unlock(s, t)
        return result

    def em_first_thread(self, s: CompositeSignal, t: int) -> bool:
        """True for the first caller, which keeps the signal lock."""
        with self.cv:
            self._s_lock(s, t)
            if s.count == 0:
                s.flag = False
                return True
            s.count = (s.count + 1) % self.nlocal
            if not s.flag:
                self._s_wait(s, t, lambda: s.flag)
            if s.count == 0:
                s.flag = False
            self._s_unlock(s, t)
            return False

    def em_all_threads_finished(self, s: CompositeSignal, t: int, swapped: List[bool]) -> bool:
        """True if every other local thread has already finished.

        Otherwise counts the caller as arrived and returns False with the
        signal lock retained; the caller must then call em_wait_threads.
        """
        with self.cv:
            self._s_lock(s, t)
            if s.count == self.nlocal - 1:
                s.count = 0
                s.flag = False
                s.gen += 1
                self._s_unlock(s, t)
                return True
            s.count += 1
            s.wait_gen = s.gen  # type: ignore[attr-defined]
            return False

    def em_thread_finished(self, s: CompositeSignal, t: int) -> None:
        """A non-root thread is done; the last arrival wakes the waiter."""
        with self.cv:
            self._s_lock(s, t)
            s.count += 1
            if s.count == self.nlocal:
                s.flag = True
                s.gen += 1
            self._s_unlock(s, t)

    def em_wait_threads(self, s: CompositeSignal, t: int, swapped: List[bool],
                        swap_out: Callable[[], None]) -> None:
        """Swap out (once), yield the partition and wait for the others."""
        with self.cv:
            assert s.holder == t
            g0 = getattr(s, "wait_gen", s.gen)
            if not swapped[0]:
                self.cv.release()
                try:
                    swap_out()
                finally:
                    self.cv.acquire()
                swapped[0] = True
            self._release_partition_locked(t)
            self._s_wait(s, t, lambda: s.gen != g0 or s.flag)
            self._s_unlock(s, t)
            self._reacquire_partition_locked(t)
            self._s_lock(s, t)
            s.flag = False
            s.count = 0
            self._s_unlock(s, t)
