"""Linearizability checking for key-value histories.

Histories are recorded with strictly increasing stamps taken just before an
operation starts and just after it returns, so stamp order is consistent
with real time.  A write that failed or never returned may or may not have
taken effect; a read that failed is dropped.

:func:`check_history` splits the history per key and runs a
Wing-Gong/Lowe style search with memoisation on (linearized set, value).
A scan is decomposed into one read per key of the universe that its answer
covers.  :func:`brute_force` checks whole histories (scans atomic) by
enumeration and is only usable for a handful of operations; tests use it as
the oracle for the fast checker.
"""

from __future__ import annotations

import itertools
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

INF = float("inf")

PUT, DELETE, GET, SCAN = "put", "delete", "get", "scan"
WRITES = (PUT, DELETE)


@dataclass
class Op:
    id: int
    client: int
    kind: str
    key: bytes
    value: bytes | None = None  # written value (put) or scan count
    call: int = 0
    ret: float = INF
    result: object = None
    ok: bool = False

    @property
    def pending(self) -> bool:
        return not self.ok


class History:
    def __init__(self, stamp, initial: dict | None = None):
        self._stamp = stamp
        self.ops: list[Op] = []
        self.initial = dict(initial or {})

    def begin(self, client: int, kind: str, key: bytes, value=None) -> Op:
        op = Op(len(self.ops), client, kind, key, value, call=self._stamp())
        self.ops.append(op)
        return op

    def end(self, op: Op, result=None) -> None:
        op.ret = self._stamp()
        op.result = result
        op.ok = True

    def fail(self, op: Op) -> None:
        op.ret = INF
        op.ok = False


@dataclass
class CheckResult:
    ok: bool
    key: bytes | None = None
    ops_checked: int = 0
    keys_checked: int = 0
    detail: str = ""
    explored: int = 0
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# per-key search
# ---------------------------------------------------------------------------

_W, _R = 0, 1


def _check_register(events, init):
    """events: list of (call, ret, type, value); ret=INF for pending writes.

    Returns (ok, states explored).
    """
    events = sorted(events, key=lambda e: e[0])
    n = len(events)
    if n == 0:
        return True, 0
    calls = [e[0] for e in events]
    rets = [e[1] for e in events]
    kinds = [e[2] for e in events]
    vals = [e[3] for e in events]
    required = 0
    for i in range(n):
        if rets[i] != INF:
            required |= 1 << i
    seen = set()
    stack = [(0, init)]
    explored = 0
    while stack:
        done, value = stack.pop()
        if done & required == required:
            return True, explored
        if (done, value) in seen:
            continue
        seen.add((done, value))
        explored += 1
        # earliest return among completed, not yet linearized ops
        min_ret = INF
        first = None
        for i in range(n):
            if not (done >> i) & 1:
                if first is None:
                    first = i
                if rets[i] < min_ret:
                    min_ret = rets[i]
        # a precedes b only if a.ret < b.call, so ops called at min_ret are still candidates
        hi = bisect_right(calls, min_ret) if min_ret != INF else n
        moves = []
        for i in range(first, hi):
            if (done >> i) & 1:
                continue
            if kinds[i] == _W:
                moves.append((done | (1 << i), vals[i]))
            elif vals[i] == value:
                # a minimal read that fits the current value can always go first
                moves = [(done | (1 << i), value)]
                break
        stack.extend(moves)
    return False, explored


def _scan_reads(op: Op, universe: list):
    """Per-key reads implied by a completed scan."""
    lo = op.key
    count = op.value
    got = op.result or []
    seen = {k: v for k, v in got}
    last = got[-1][0] if got else None
    complete = len(got) < count
    start = bisect_left(universe, lo)
    for k in universe[start:]:
        if not complete and k > last:
            break
        yield k, seen.get(k)


def check_history(history: History | list, initial: dict | None = None,
                  universe=None) -> CheckResult:
    if isinstance(history, History):
        ops = history.ops
        initial = history.initial if initial is None else initial
    else:
        ops = history
    initial = initial or {}
    keys = set(initial)
    for op in ops:
        if op.kind in WRITES or op.kind == GET:
            keys.add(op.key)
    if universe is not None:
        keys |= set(universe)
    universe = sorted(keys)
    per_key: dict[bytes, list] = {}
    n_checked = 0
    for op in ops:
        if op.kind == PUT:
            per_key.setdefault(op.key, []).append((op.call, op.ret if op.ok else INF, _W, op.value))
        elif op.kind == DELETE:
            per_key.setdefault(op.key, []).append((op.call, op.ret if op.ok else INF, _W, None))
        elif op.kind == GET:
            if op.ok:
                per_key.setdefault(op.key, []).append((op.call, op.ret, _R, op.result))
        elif op.kind == SCAN:
            if op.ok:
                for k, v in _scan_reads(op, universe):
                    per_key.setdefault(k, []).append((op.call, op.ret, _R, v))
                for k, _ in op.result or []:
                    if k not in keys:
                        return CheckResult(False, k, detail=f"scan returned unknown key {k!r}")
        else:
            raise ValueError(f"unknown op kind {op.kind!r}")
        n_checked += 1
    explored = 0
    for key in sorted(per_key):
        ok, ex = _check_register(per_key[key], initial.get(key))
        explored += ex
        if not ok:
            return CheckResult(False, key, n_checked, len(per_key),
                               f"no linearization for key {key!r}", explored)
    return CheckResult(True, None, n_checked, len(per_key), "", explored)


# ---------------------------------------------------------------------------
# brute force oracle
# ---------------------------------------------------------------------------


def _apply(state: dict, op: Op) -> bool:
    """Apply ``op`` to ``state``; return False if a read disagrees."""
    if op.kind == PUT:
        state[op.key] = op.value
    elif op.kind == DELETE:
        state.pop(op.key, None)
    elif op.kind == GET:
        return state.get(op.key) == op.result
    elif op.kind == SCAN:
        want = [(k, state[k]) for k in sorted(state) if k >= op.key][:op.value]
        return want == list(op.result or [])
    return True


def brute_force(ops: list, initial: dict | None = None, limit: int = 9) -> bool:
    """Whole-history linearizability by enumeration (scans atomic)."""
    completed = [o for o in ops if o.ok]
    pending_writes = [o for o in ops if not o.ok and o.kind in WRITES]
    if len(completed) + len(pending_writes) > limit:
        raise ValueError("history too large for brute force")
    for r in range(len(pending_writes) + 1):
        for extra in itertools.combinations(pending_writes, r):
            chosen = completed + list(extra)
            for perm in itertools.permutations(chosen):
                # real-time order: if a returned before b was called, a precedes b
                pos = {o.id: i for i, o in enumerate(perm)}
                if any(a.ret < b.call and pos[a.id] > pos[b.id]
                       for a in chosen for b in chosen if a is not b):
                    continue
                state = dict(initial or {})
                if all(_apply(state, o) for o in perm):
                    return True
    return False
