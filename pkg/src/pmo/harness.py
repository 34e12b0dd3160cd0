"""Crash-injection harness.

A workload script runs once on a logging :class:`PersistenceModel`.  Then,
for every prefix of the event log and every subset of the lines that were
flushed but not yet fenced, the harness materializes the crash image, mounts
it, recovers every PMO and compares each primary against a logical oracle:
the snapshots taken at creation and at every completed psync.

Script format, one step per line (``#`` starts a comment)::

    create A 4 k1          # name, pages, key; append "ro" to withhold the write key
    attach A w k1          # r or w; optional pid as 4th argument
    write A 2 0xA5         # fill a 64-byte line of page 2 with the pattern byte;
                           # optional in-page offset and length follow
    psync A
    detach A
    destroy A k1
    crashpoints all        # or "none"
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, PmoError, ScriptError
from .layout import (COUNT_LINE, ENTRY_SIZE, HEADER_FIELDS, METADATA_OFFSET, SLOT_DESTROYING,
                     SLOT_LIVE, STATE_D, STATE_NAMES, format_device)
from .pmem import EventKind, PersistenceModel, survivor_subsets
from .store import PmoSystem

SCRIPT_PID = 1000
DEFAULT_DATA_PAGES = 32
DEFAULT_MAX_PMOS = 8

STANDARD_SCRIPT = """\
create A 4 k1
attach A w k1
write A 0 0x11
write A 2 0x22
psync A
write A 1 0x33
write A 2 0x44
write A 3 0x55
psync A
detach A
crashpoints all
"""

_ARITY = {"create": (3, 4), "attach": (3, 4), "write": (3, 5), "psync": (1, 1),
          "detach": (1, 1), "destroy": (2, 2), "crashpoints": (1, 1)}


@dataclass(frozen=True)
class Step:
    op: str
    args: tuple
    lineno: int = field(default=0, compare=False)

    def __str__(self):
        return " ".join((self.op, *self.args))


@dataclass
class WorkloadScript:
    steps: list
    seed: int = 0
    crashpoints: str = "all"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "WorkloadScript":
        steps, crashpoints = [], "all"
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            op, *args = line.split()
            op = op.lower()
            if op not in _ARITY:
                raise ScriptError(f"unknown step {op!r}", lineno)
            lo, hi = _ARITY[op]
            if not lo <= len(args) <= hi:
                raise ScriptError(f"{op} takes {lo}..{hi} arguments, got {len(args)}", lineno)
            if op == "crashpoints":
                if args[0] not in ("all", "none"):
                    raise ScriptError("crashpoints must be 'all' or 'none'", lineno)
                crashpoints = args[0]
                continue
            try:
                if op == "create":
                    int(args[1])
                    if len(args) == 4 and args[3] != "ro":
                        raise ValueError(args[3])
                elif op == "attach":
                    if args[1] not in ("r", "w", "rw"):
                        raise ValueError(args[1])
                    if len(args) == 4:
                        int(args[3])
                elif op == "write":
                    int(args[1])
                    if not 0 <= int(args[2], 0) <= 0xFF:
                        raise ValueError(args[2])
                    for a in args[3:]:
                        int(a, 0)
            except ValueError as exc:
                raise ScriptError(f"bad argument {exc} in {op}", lineno) from None
            steps.append(Step(op, tuple(args), lineno))
        return cls(steps, seed, crashpoints)

    def dumps(self) -> str:
        return "".join(f"{s}\n" for s in self.steps) + f"crashpoints {self.crashpoints}\n"

    def without(self, index: int) -> "WorkloadScript":
        return replace(self, steps=self.steps[:index] + self.steps[index + 1:])


@dataclass(frozen=True)
class CrashSchedule:
    crash_seq: int
    survivors: frozenset

    def __str__(self):
        lines = ",".join(f"{x:#x}" for x in sorted(self.survivors)) or "-"
        return f"seq {self.crash_seq} survivors {lines}"


@dataclass
class Verdict:
    schedule: CrashSchedule
    pmo: str
    observed: str
    matched: int | None
    detail: str = ""

    @property
    def violation(self) -> bool:
        return self.matched is None

    def __str__(self):
        what = f"boundary {self.matched}" if self.matched is not None else f"VIOLATION {self.detail}"
        return f"verdict {self.schedule} pmo {self.pmo} observed {self.observed} {what}"


class LogicalOracle:
    """Committed snapshots per PMO, plus the event windows in which they change."""

    def __init__(self):
        self.committed: dict[str, list[bytes]] = {}
        self.current: dict[str, bytearray] = {}
        # name -> list of (kind, start_seq, end_seq)
        self.timeline: dict[str, list[tuple[str, int, int]]] = {}

    def created(self, name, size, start, end):
        self.committed[name] = [bytes(size)]
        self.current[name] = bytearray(size)
        self.timeline[name] = [("create", start, end)]

    def wrote(self, name, offset, data):
        self.current[name][offset:offset + len(data)] = data

    def psynced(self, name, start, end):
        self.committed[name].append(bytes(self.current[name]))
        self.timeline[name].append(("psync", start, end))

    def detached(self, name):
        self.current[name] = bytearray(self.committed[name][-1])

    def destroyed(self, name, start, end):
        self.timeline[name].append(("destroy", start, end))

    def allowed(self, name, k) -> set:
        """Boundary indices a crash after ``k`` events may expose; ``None`` means absent."""
        done = 0
        allowed = {None}
        for kind, start, end in self.timeline[name]:
            if k <= start:
                break
            in_flight = k < end
            if kind == "create":
                allowed = {None, 0} if in_flight else {0}
            elif kind == "psync":
                allowed = {done, done + 1} if in_flight else {done + 1}
                if not in_flight:
                    done += 1
            elif kind == "destroy":
                allowed = {done, None} if in_flight else {None}
        return allowed


@dataclass
class Trace:
    script: WorkloadScript
    model: PersistenceModel
    system: PmoSystem
    oracle: LogicalOracle
    slots: dict


@dataclass
class HarnessResult:
    verdicts: list
    schedules: int
    crash_points: int
    distinct_images: int
    sampled: bool
    trace: Trace

    @property
    def violations(self) -> list:
        return [v for v in self.verdicts if v.violation]

    @property
    def passed(self) -> bool:
        return not self.violations

    def histogram(self) -> Counter:
        return Counter((v.pmo, v.matched) for v in self.verdicts if not v.violation)

    def distinct_states(self, pmo: str) -> set:
        return {v.observed for v in self.verdicts if v.pmo == pmo and v.observed != "absent"}


def _digest(data) -> str:
    return hashlib.blake2b(bytes(data), digest_size=8).hexdigest()


def new_device(data_pages: int = DEFAULT_DATA_PAGES, max_pmos: int = DEFAULT_MAX_PMOS,
               name: str = "crashtest") -> PersistenceModel:
    """A formatted simulated device whose event log starts after formatting."""
    from .layout import metadata_region_size
    size = 4096 + metadata_region_size(max_pmos) + data_pages * 4096
    dev = PersistenceModel(size=size)
    format_device(dev, name, max_pmos)
    dev.reset_log()
    return dev


def execute(script: WorkloadScript, mutations=(), dev: PersistenceModel | None = None) -> Trace:
    """Run the script once, recording events and the logical oracle."""
    dev = new_device() if dev is None else dev
    system = PmoSystem.open(dev, pid=SCRIPT_PID, mutations=mutations)
    dev.reset_log()  # crash points start after the mount
    oracle = LogicalOracle()
    handles, slots = {}, {}
    for step in script.steps:
        a = step.args
        start = dev.seq
        try:
            if step.op == "create":
                e = system.pcreate(a[0], int(a[1]) * 4096, a[2], writable=len(a) < 4)
                slots[a[0]] = e.slot
                oracle.created(a[0], e.size, start, dev.seq)
            elif step.op == "attach":
                if a[0] in handles:
                    raise ScriptError(f"{a[0]} is already attached", step.lineno)
                pid = int(a[3]) if len(a) == 4 else SCRIPT_PID
                handles[a[0]] = system.attach(a[0], a[1], a[2], pid=pid)
            elif step.op == "write":
                h = handles.get(a[0])
                if h is None:
                    raise ScriptError(f"write to {a[0]} before attach", step.lineno)
                off = int(a[3], 0) if len(a) > 3 else 0
                length = int(a[4], 0) if len(a) > 4 else 64
                data = bytes([int(a[2], 0)]) * length
                h.write(int(a[1]) * 4096 + off, data)
                oracle.wrote(a[0], int(a[1]) * 4096 + off, data)
            elif step.op == "psync":
                h = handles.get(a[0])
                if h is None:
                    raise ScriptError(f"psync of {a[0]} before attach", step.lineno)
                system.psync(h)
                if h.permission.value == "w":
                    oracle.psynced(a[0], start, dev.seq)
            elif step.op == "detach":
                h = handles.pop(a[0], None)
                if h is None:
                    raise ScriptError(f"detach of {a[0]} before attach", step.lineno)
                system.detach(h)
                oracle.detached(a[0])
            elif step.op == "destroy":
                system.pdestroy(a[0], a[1])
                oracle.destroyed(a[0], start, dev.seq)
        except PmoError as exc:
            if isinstance(exc, ScriptError):
                raise
            raise ScriptError(f"step '{step}' failed: {exc}", step.lineno) from exc
    return Trace(script, dev, system, oracle, slots)


@dataclass
class Outcome:
    observed: dict
    problems: list


def recover_image(image, max_pmos: int | None = None) -> tuple[PersistenceModel, PmoSystem, list]:
    """Mount a crash image on a fresh logging model and recover every PMO."""
    dev = PersistenceModel(image=image)
    system = PmoSystem.open(dev, pid=SCRIPT_PID + 1)
    reports = system.recover_all()
    return dev, system, reports


def _entry_problems(image: np.ndarray, max_pmos: int) -> list:
    problems = []
    base = METADATA_OFFSET + COUNT_LINE
    for slot in range(max_pmos):
        ctl = image[base + slot * ENTRY_SIZE: base + slot * ENTRY_SIZE + 2]
        state, status = int(ctl[0]), int(ctl[1])
        if status in (SLOT_LIVE, SLOT_DESTROYING) and state not in STATE_NAMES:
            problems.append(f"slot {slot} has invalid state byte {state:#x}")
    return problems


def _observe(image: np.ndarray, names, max_pmos: int) -> Outcome:
    problems = _entry_problems(image, max_pmos)
    try:
        dev, system, _ = recover_image(image)
    except PmoError as exc:
        return Outcome({n: "error" for n in names}, problems + [f"recovery failed: {exc}"])
    observed = {}
    for name in names:
        e = system.vol.lookup_entry(name)
        observed[name] = None if e is None else system.read_primary(name)
    for e in system.vol.live_entries():
        if e.state != STATE_D or e.shadow_offset or e.attached_pid:
            problems.append(f"{e.name} not cleanly detached after recovery")
    ext = sorted(system.vol.live_extents())
    for (o1, n1, w1), (o2, _, w2) in zip(ext, ext[1:]):
        if o1 + n1 > o2:
            problems.append(f"extents of {w1} and {w2} overlap")
    return Outcome(observed, problems)


def _crash_points(trace: Trace):
    if trace.script.crashpoints == "none":
        return [trace.model.seq]
    return range(trace.model.seq + 1)


def run_exhaustive(script, budget: int = 4096, *, seed: int | None = None,
                   allow_sampling: bool = False, mutations=(), stop_at_first: bool = False,
                   trace: Trace | None = None) -> HarnessResult:
    """Crash after every event under every survivor subset; judge every PMO."""
    if isinstance(script, str):
        script = WorkloadScript.parse(script)
    seed = script.seed if seed is None else seed
    trace = trace or execute(script, mutations)
    oracle, model = trace.oracle, trace.model
    max_pmos = trace.system.vol.max_pmos
    names = list(oracle.committed)
    digests = {n: [_digest(s) for s in snaps] for n, snaps in oracle.committed.items()}
    points = set(_crash_points(trace))
    cache: dict[str, Outcome] = {}
    verdicts, schedules, sampled = [], 0, False
    for k, state in model.iter_states():
        if k not in points:
            continue
        lines = state.crash_lines(distinct_only=True)
        if len(lines) >= 63 or (1 << len(lines)) > budget:
            if not allow_sampling:
                raise ConfigError(f"crash point {k} has {len(lines)} pending lines; "
                                  f"2^{len(lines)} subsets exceed budget {budget}")
            sampled = True
        for subset in survivor_subsets(lines, budget, seed + k):
            schedules += 1
            image = state.crash_image(subset, k).media_snapshot
            key = _digest(image)
            out = cache.get(key)
            if out is None:
                out = cache[key] = _observe(image, names, max_pmos)
            sched = CrashSchedule(k, subset)
            for p in out.problems:
                verdicts.append(Verdict(sched, "*", "-", None, p))
            for name in names:
                allowed = oracle.allowed(name, k)
                obs = out.observed[name]
                if obs is None:
                    matched = -1 if None in allowed else None
                    verdicts.append(Verdict(sched, name, "absent", matched,
                                            "" if matched is not None else "PMO missing"))
                    continue
                d = _digest(obs) if obs != "error" else "error"
                hit = [i for i in sorted(x for x in allowed if x is not None) if digests[name][i] == d]
                if hit:
                    verdicts.append(Verdict(sched, name, d, hit[-1]))
                else:
                    known = [i for i, x in enumerate(digests[name]) if x == d]
                    detail = (f"expected boundary in {sorted(allowed, key=str)}, "
                              f"got {'boundary %d' % known[0] if known else 'a blend'}")
                    verdicts.append(Verdict(sched, name, d, None, detail))
            if stop_at_first and any(v.violation for v in verdicts):
                return HarnessResult(verdicts, schedules, len(points), len(cache), sampled, trace)
    return HarnessResult(verdicts, schedules, len(points), len(cache), sampled, trace)


def _masked(image) -> bytes:
    raw = bytearray(bytes(image))
    off = HEADER_FIELDS["boot_id"]
    raw[off:off + 8] = bytes(8)
    return bytes(raw)


@dataclass
class IdempotenceResult:
    images: int
    schedules: int
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def run_recovery_idempotence(script, budget: int = 4096, *, seed: int | None = None,
                             allow_sampling: bool = False, mutations=()) -> IdempotenceResult:
    """Crash recovery itself at every event and check re-recovery converges.

    For every distinct crash image of the script, the uninterrupted recovery is
    the reference; every crash image of that recovery run is recovered again and
    must equal the reference byte for byte (boot id aside).
    """
    if isinstance(script, str):
        script = WorkloadScript.parse(script)
    seed = script.seed if seed is None else seed
    trace = execute(script, mutations)
    images = {}
    for k, state in trace.model.iter_states():
        lines = state.crash_lines(distinct_only=True)
        if (1 << min(len(lines), 63)) > budget and not allow_sampling:
            raise ConfigError(f"crash point {k}: pending set too large for budget {budget}")
        for subset in survivor_subsets(lines, budget, seed + k):
            img = state.crash_image(subset, k).media_snapshot
            images.setdefault(_digest(img), img)
    final_cache: dict[str, bytes] = {}

    def final_of(img) -> bytes:
        key = _digest(img)
        if key not in final_cache:
            dev, _, _ = recover_image(img)
            final_cache[key] = _masked(dev.media)
        return final_cache[key]

    failures, schedules = [], 0
    for key, img in images.items():
        dev, _, _ = recover_image(img)
        reference = _masked(dev.media)
        for k, state in dev.iter_states():
            lines = state.crash_lines(distinct_only=True)
            for subset in survivor_subsets(lines, budget, seed + k):
                schedules += 1
                again = final_of(state.crash_image(subset, k).media_snapshot)
                if again != reference:
                    failures.append((key, CrashSchedule(k, subset)))
    return IdempotenceResult(len(images), schedules, failures)


def state_walks(trace: Trace) -> list[list[str]]:
    """For each psync: the state before it, then every state word written during it."""
    walks = []
    for rec in trace.system.stats.psync_log:
        addr = METADATA_OFFSET + COUNT_LINE + rec.slot * ENTRY_SIZE
        before = trace.model.replica()
        for ev in trace.model.event_log[:rec.start_seq]:
            before.apply_event(ev)
        walk = [STATE_NAMES.get(int(before.media[addr]), "?")]
        for ev in trace.model.event_log[rec.start_seq:rec.end_seq]:
            if ev.kind is EventKind.UNCACHED and ev.addr == addr:
                walk.append(STATE_NAMES.get(ev.data[0], "?"))
        walks.append(walk)
    return walks


@dataclass
class Minimized:
    script: WorkloadScript
    verdict: Verdict


def minimize(verdict: Verdict, script, *, mutations=(), budget: int = 4096) -> Minimized:
    """Greedy delta debugging: drop steps, then survivor lines, while a violation persists."""
    if isinstance(script, str):
        script = WorkloadScript.parse(script)
    if not verdict.violation:
        raise ConfigError("minimize needs a violating verdict")

    def first_violation(s):
        try:
            res = run_exhaustive(s, budget, allow_sampling=True, mutations=mutations,
                                 stop_at_first=True)
        except ScriptError:
            return None
        bad = res.violations
        return (bad[0], res.trace) if bad else None

    current, found = script, (verdict, None)
    changed = True
    while changed:
        changed = False
        for i in range(len(current.steps)):
            cand = current.without(i)
            hit = first_violation(cand)
            if hit is not None:
                current, found, changed = cand, hit, True
                break
    best = found[0]
    trace = found[1] or execute(current, mutations)
    names = list(trace.oracle.committed)
    state = trace.model.state_at(best.schedule.crash_seq)
    survivors = set(best.schedule.survivors)
    for line in sorted(survivors):
        trial = survivors - {line}
        img = state.crash_image(trial, best.schedule.crash_seq).media_snapshot
        out = _observe(img, names, trace.system.vol.max_pmos)
        sched = CrashSchedule(best.schedule.crash_seq, frozenset(trial))
        allowed = trace.oracle.allowed(best.pmo, sched.crash_seq) if best.pmo in names else set()
        obs = out.observed.get(best.pmo)
        digests = [_digest(s) for s in trace.oracle.committed.get(best.pmo, [])]
        ok = (obs is None and None in allowed) or (
            obs not in (None, "error") and any(digests[i] == _digest(obs)
                                               for i in allowed if i is not None))
        if not ok or out.problems:
            survivors = trial
            best = Verdict(sched, best.pmo, _digest(obs) if isinstance(obs, bytes) else str(obs),
                           None, best.detail)
    return Minimized(current, best)
