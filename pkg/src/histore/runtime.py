"""Execution runtimes for actor code.

All protocol code (servers, clients, control plane) is written as plain
generators that delegate blocking work with ``yield from``.  Two runtimes
drive those generators:

* :class:`SimRuntime` runs them as simpy processes on a virtual clock.  Event
  order is fully deterministic for a given seed.
* :class:`ThreadRuntime` runs each generator to completion on a real thread.
  Its blocking primitives block the OS thread and never yield, so a
  generator driven there must never suspend.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import random
import threading
import time

import simpy

from histore.errors import NodeDown

log = logging.getLogger(__name__)


class WaitTimeout(TimeoutError):
    pass


# ---------------------------------------------------------------------------
# simulation runtime
# ---------------------------------------------------------------------------


class SimTask:
    def __init__(self, rt: "SimRuntime", gen, name: str | None, record: bool = True):
        self.rt = rt
        self.name = name
        self.record = record
        self.done = False
        self.result = None
        self.error: BaseException | None = None
        self._proc = rt.env.process(self._run(gen))

    def _run(self, gen):
        try:
            self.result = yield from gen
        except NodeDown as exc:
            self.error = exc
        except Exception as exc:  # kept for join(); never fails the simpy loop
            self.error = exc
            if self.record:
                self.rt.task_failures.append((self.name, exc))
            log.debug("task %s failed: %r", self.name, exc)
        self.done = True

    def join(self, timeout: float | None = None):
        if not self.done:
            if timeout is None:
                yield self._proc
            else:
                yield self._proc | self.rt.env.timeout(timeout)
                if not self.done:
                    raise WaitTimeout(self.name)
        if self.error is not None:
            raise self.error
        return self.result


class SimSignal:
    """One-shot event carrying a value."""

    def __init__(self, env: simpy.Environment):
        self._env = env
        self._ev = env.event()
        self.value = None

    @property
    def is_set(self) -> bool:
        return self._ev.triggered

    def set(self, value=None) -> None:
        if not self._ev.triggered:
            self.value = value
            self._ev.succeed(value)

    def wait(self, timeout: float | None = None):
        if not self._ev.triggered:
            if timeout is None:
                yield self._ev
            else:
                yield self._ev | self._env.timeout(timeout)
                if not self._ev.triggered:
                    raise WaitTimeout()
        return self.value


class SimNotifier:
    """Reusable wake-up condition; ``wait`` returns False on timeout."""

    def __init__(self, env: simpy.Environment):
        self._env = env
        self._ev = env.event()

    def notify(self) -> None:
        ev, self._ev = self._ev, self._env.event()
        ev.succeed()

    def wait(self, timeout: float | None = None):
        ev = self._ev
        if timeout is None:
            yield ev
            return True
        yield ev | self._env.timeout(timeout)
        return ev.triggered


class SimPool:
    """Counting semaphore (an RPC thread pool, a worker, a mutex)."""

    def __init__(self, env: simpy.Environment, capacity: int):
        self._res = simpy.Resource(env, capacity=capacity)

    def acquire(self):
        req = self._res.request()
        yield req
        return req

    def release(self, token) -> None:
        self._res.release(token)

    @property
    def busy(self) -> int:
        return self._res.count


class SimRuntime:
    kind = "sim"

    def __init__(self, seed: int = 0):
        self.env = simpy.Environment()
        self.rng = random.Random(seed)
        self.seed = seed
        self._stamps = itertools.count(1)
        self.task_failures: list[tuple[str | None, BaseException]] = []

    def now(self) -> float:
        return self.env.now

    def stamp(self) -> int:
        return next(self._stamps)

    def sleep(self, dt: float):
        if dt > 0:
            yield self.env.timeout(dt)

    # simulated CPU time is just elapsed virtual time
    compute = sleep

    def spawn(self, gen, name: str | None = None) -> SimTask:
        return SimTask(self, gen, name)

    def signal(self) -> SimSignal:
        return SimSignal(self.env)

    def notifier(self) -> SimNotifier:
        return SimNotifier(self.env)

    def pool(self, capacity: int) -> SimPool:
        return SimPool(self.env, capacity)

    def lock(self):
        # the simulation is single threaded; sections without yields are atomic
        return contextlib.nullcontext()

    def wait_all(self, tasks, timeout: float | None = None):
        """Join every task; returns list of (ok, result-or-exception)."""
        out = []
        deadline = None if timeout is None else self.now() + timeout
        for t in tasks:
            try:
                left = None if deadline is None else max(0.0, deadline - self.now())
                out.append((True, (yield from t.join(left))))
            except Exception as exc:
                out.append((False, exc))
        return out

    def run(self, gen, until: float | None = None):
        """Drive ``gen`` to completion and return its result."""
        # the caller sees this task's error directly, so it is not a stray failure
        task = SimTask(self, gen, "main", record=False)
        self.env.run(until=task._proc)
        if task.error is not None:
            raise task.error
        return task.result

    def run_for(self, dt: float) -> None:
        self.env.run(until=self.env.now + dt)


# ---------------------------------------------------------------------------
# thread runtime
# ---------------------------------------------------------------------------


def drive(gen):
    """Run a generator that must not suspend; return its value."""
    try:
        item = next(gen)
    except StopIteration as stop:
        return stop.value
    gen.close()
    raise RuntimeError(f"generator suspended on {item!r} under the thread runtime")


class ThreadTask:
    def __init__(self, gen, name: str | None, failures: list):
        self.name = name
        self.done = False
        self.result = None
        self.error: BaseException | None = None
        self._failures = failures
        self._thread = threading.Thread(target=self._run, args=(gen,), name=name, daemon=True)
        self._thread.start()

    def _run(self, gen):
        try:
            self.result = drive(gen)
        except NodeDown as exc:
            self.error = exc
        except Exception as exc:
            self.error = exc
            self._failures.append((self.name, exc))
            log.debug("thread task %s failed: %r", self.name, exc)
        self.done = True

    def join(self, timeout: float | None = None):
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise WaitTimeout(self.name)
        if self.error is not None:
            raise self.error
        return self.result
        yield  # pragma: no cover


class ThreadSignal:
    def __init__(self):
        self._ev = threading.Event()
        self.value = None

    @property
    def is_set(self) -> bool:
        return self._ev.is_set()

    def set(self, value=None) -> None:
        if not self._ev.is_set():
            self.value = value
            self._ev.set()

    def wait(self, timeout: float | None = None):
        if not self._ev.wait(timeout):
            raise WaitTimeout()
        return self.value
        yield  # pragma: no cover


class ThreadNotifier:
    def __init__(self):
        self._cond = threading.Condition()
        self._gen = 0

    def notify(self) -> None:
        with self._cond:
            self._gen += 1
            self._cond.notify_all()

    def wait(self, timeout: float | None = None):
        with self._cond:
            start = self._gen
            self._cond.wait_for(lambda: self._gen != start, timeout)
            return self._gen != start
        yield  # pragma: no cover


class ThreadPool:
    def __init__(self, capacity: int):
        self._sem = threading.Semaphore(capacity)
        self._capacity = capacity
        self._busy = 0

    def acquire(self):
        self._sem.acquire()
        self._busy += 1
        return None
        yield  # pragma: no cover

    def release(self, token) -> None:
        self._busy -= 1
        self._sem.release()

    @property
    def busy(self) -> int:
        return self._busy


class ThreadRuntime:
    kind = "thread"

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)
        self.seed = seed
        self._t0 = time.monotonic()
        self._stamps = itertools.count(1)
        self._stamp_lock = threading.Lock()
        self.task_failures: list = []

    def now(self) -> float:
        return time.monotonic() - self._t0

    def stamp(self) -> int:
        with self._stamp_lock:
            return next(self._stamps)

    def sleep(self, dt: float):
        if dt > 0:
            time.sleep(dt)
        return
        yield  # pragma: no cover

    def compute(self, dt: float):
        # real CPU time is spent by the real code
        return
        yield  # pragma: no cover

    def spawn(self, gen, name: str | None = None) -> ThreadTask:
        return ThreadTask(gen, name, self.task_failures)

    def signal(self) -> ThreadSignal:
        return ThreadSignal()

    def notifier(self) -> ThreadNotifier:
        return ThreadNotifier()

    def pool(self, capacity: int) -> ThreadPool:
        return ThreadPool(capacity)

    def lock(self):
        return threading.RLock()

    def wait_all(self, tasks, timeout: float | None = None):
        out = []
        deadline = None if timeout is None else self.now() + timeout
        for t in tasks:
            try:
                left = None if deadline is None else max(0.0, deadline - self.now())
                out.append((True, drive(t.join(left))))
            except Exception as exc:
                out.append((False, exc))
        return out
        yield  # pragma: no cover

    def run(self, gen, until: float | None = None):
        return drive(gen)
