"""Deterministic discrete-event simulator of asynchronous block iterations.

Each of the ``p`` processes owns one block, keeps a private copy of the
global vector (its own block plus the last interface values delivered by its
in-neighbors) and updates at its own pace.  Links are unidirectional and
ordered ``(sender, receiver)``; envelopes on a link carry consecutive
sequence numbers.  Time is an abstract integer tick.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import ContractViolation, check_finite

COMPUTATION = "computation"
MARKER = "snapshot_marker"
CONFIRM = "snapshot_confirm"
REDUCTION = "reduction_fragment"
KINDS = (COMPUTATION, MARKER, CONFIRM, REDUCTION)
SNAPSHOT_KINDS = (MARKER, CONFIRM)

FIFO = "fifo"
BOUNDED = "bounded"


class ConfigError(ValueError):
    pass


class ProtocolViolation(RuntimeError):
    pass


@dataclass(slots=True)
class Envelope:
    kind: str
    src: int
    dst: int
    seq: int
    payload: Any = None
    sent_at_version: int = 0
    nbytes: int = 0
    sent_at: int = 0
    deliver_at: int = 0

    @property
    def link(self) -> tuple[int, int]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class DeliveryModel:
    """Per-link ordering guarantees and latency laws.

    ``mode="fifo"`` delivers in emission order.  ``mode="bounded"`` with
    ``degree=m`` lets an envelope be overtaken by at most ``m`` later ones:
    sequence ``s`` is delivered only after every sequence ``<= s - m - 1``
    on the same link.  ``cross_kind_rule`` keeps a computation envelope
    behind any earlier empty snapshot envelope on its link.  Latencies are
    uniform integers in the given inclusive ranges; ``control_latency``
    applies to everything except computation envelopes.
    """

    mode: str = FIFO
    degree: int = 0
    latency: tuple[int, int] = (1, 8)
    control_latency: tuple[int, int] = (1, 3)
    cross_kind_rule: bool = True

    def __post_init__(self):
        if self.mode not in (FIFO, BOUNDED):
            raise ConfigError(f"unknown delivery mode {self.mode!r}")
        if self.degree < 0:
            raise ConfigError(f"out-of-order degree must be >= 0, got {self.degree}")
        for name in ("latency", "control_latency"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))

    @classmethod
    def fifo(cls, **kw) -> "DeliveryModel":
        return cls(mode=FIFO, degree=0, **kw)

    @classmethod
    def bounded(cls, m: int, **kw) -> "DeliveryModel":
        return cls(mode=BOUNDED, degree=m, **kw)

    @property
    def window(self) -> int:
        return 0 if self.mode == FIFO else self.degree

    @property
    def is_fifo(self) -> bool:
        return self.window == 0

    def admissible(self, order, kinds=None) -> bool:
        """Whether delivering the sequence numbers in ``order`` respects this model.

        ``kinds`` optionally maps seq -> envelope kind for the cross-kind rule.
        """
        delivered = set()
        w = self.window
        for s in order:
            if any(t not in delivered for t in range(s - w)):
                return False
            if kinds is not None and self.cross_kind_rule and kinds[s] == COMPUTATION:
                if any(kinds[t] in SNAPSHOT_KINDS and t not in delivered for t in range(s)):
                    return False
            delivered.add(s)
        return True

    def latency_for(self, kind: str) -> tuple[int, int]:
        return self.latency if kind == COMPUTATION else self.control_latency


@dataclass(slots=True)
class LinkState:
    next_seq: int = 0
    prefix_max: list = field(default_factory=list)
    last_snapshot_at: int = -1

    def schedule(self, model: DeliveryModel, kind: str, arrival: int) -> int:
        s = self.next_seq
        t = arrival
        gate = s - model.window - 1
        if gate >= 0:
            t = max(t, self.prefix_max[gate])
        if model.cross_kind_rule and kind == COMPUTATION:
            t = max(t, self.last_snapshot_at)
        if kind in SNAPSHOT_KINDS:
            self.last_snapshot_at = max(self.last_snapshot_at, t)
        self.prefix_max.append(t if s == 0 else max(t, self.prefix_max[-1]))
        self.next_seq += 1
        return t


class Scheduler:
    """Event queue keyed by ``(tick, insertion counter)``.

    Ties resolve in insertion order, which keeps envelopes emitted earlier on
    a link ahead of later ones scheduled for the same tick.
    """

    def __init__(self):
        self._heap = []
        self._counter = 0

    def push(self, tick: int, kind: str, data) -> None:
        heapq.heappush(self._heap, (tick, self._counter, kind, data))
        self._counter += 1

    def pop(self):
        tick, _, kind, data = heapq.heappop(self._heap)
        return tick, kind, data

    def __len__(self):
        return len(self._heap)


@dataclass
class ProcessState:
    """One simulated process.

    ``view`` is the process-local global vector: its own block is current,
    other entries hold the last delivered interface values (or ``x0``).
    """

    id: int
    view: np.ndarray
    block: slice
    k: int = 0
    dep_stamps: dict = field(default_factory=dict)
    active: bool = True
    displacements: list = field(default_factory=list)
    history: list | None = None

    @property
    def local_block(self) -> np.ndarray:
        return self.view[self.block]


def step_process(state: ProcessState, problem, spec, before_commit=None):
    """Apply ``f_i`` to the process's view and commit the new block.

    ``before_commit(r_i)`` runs after the local residual of the current view
    is known and before the block changes.  Returns the local residual and
    the computation sends as ``(dst, payload)`` pairs.
    """
    i = state.id
    old = state.local_block
    new = problem.apply_block(i, state.view)
    check_finite(new, f"update of block {i}")
    if spec.local_fn is None:
        r = spec.block_value(old - new)
    else:
        r = spec.block_value(spec.residual_vector(problem, i, state.view))
    if before_commit is not None:
        before_commit(r)
    if not state.active:
        return r, []
    state.displacements.append(float(np.max(np.abs(new - old))) if new.size else 0.0)
    state.view[state.block] = new
    state.k += 1
    if state.history is not None:
        state.history.append(new.copy())
    sends = [(dst, state.view[problem.interfaces[(i, dst)]].copy())
             for dst in problem.out_neighbors(i)]
    return r, sends


# --- protocol actions ------------------------------------------------------

@dataclass(frozen=True)
class Send:
    dst: int
    kind: str
    payload: Any = None
    nbytes: int = 0


@dataclass(frozen=True)
class Record:
    """A process finished its part of a snapshot (god-view notification)."""

    record: Any


@dataclass(frozen=True)
class Contribution:
    """A process contributed to a reduction round (god-view notification)."""

    key: Any
    value: float
    k: int
    block: np.ndarray
    dep_stamps: dict


@dataclass(frozen=True)
class Decision:
    """The reduction root decided a round (god-view notification)."""

    key: Any
    value: float
    flag: bool
    terminate: bool


@dataclass(frozen=True)
class Stop:
    value: float


@dataclass(frozen=True)
class Note:
    text: str


class ProcessContext:
    """Read-only window a protocol handler gets on its own process."""

    def __init__(self, sim: "Simulation", i: int):
        self._sim = sim
        self._state = sim.procs[i]
        self.i = i
        self.p = sim.problem.p
        self.in_neighbors = sim.problem.in_neighbors(i)
        self.out_neighbors = sim.problem.out_neighbors(i)

    @property
    def k(self) -> int:
        return self._state.k

    @property
    def tick(self) -> int:
        return self._sim.now

    @property
    def spec(self):
        return self._sim.spec

    def block(self) -> np.ndarray:
        return self._state.local_block.copy()

    def dep_values(self, j: int) -> np.ndarray:
        return self._state.view[self._sim.problem.interfaces[(j, self.i)]].copy()

    def dep_stamp(self, j: int) -> int:
        return self._state.dep_stamps.get(j, 0)

    def interface_of(self, block: np.ndarray, dst: int) -> np.ndarray:
        """Part of ``block`` (own block values) that ``dst`` reads."""
        idx = self._sim.problem.interfaces[(self.i, dst)] - self._state.block.start
        return block[idx].copy()

    def reconstruct(self, own: np.ndarray, deps: dict) -> np.ndarray:
        """Global vector from an own block and per-neighbor interface values.

        Entries nobody recorded stay at the process's current view; ``f_i``
        never reads them.
        """
        x = self._state.view.copy()
        x[self._state.block] = own
        for j, vals in deps.items():
            x[self._sim.problem.interfaces[(j, self.i)]] = vals
        return x

    def local_value(self, x: np.ndarray) -> float:
        spec = self._sim.spec
        return spec.block_value(spec.residual_vector(self._sim.problem, self.i, x))


# --- event log -------------------------------------------------------------

UPDATE = "update"
DROP = "drop"


class EventLog:
    """Records ``(tick, event_kind, link, seq, k_sender, k_receiver)``."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.rows: list[tuple] = []

    def add(self, tick, kind, link, seq, k_sender, k_receiver):
        if self.enabled:
            self.rows.append((tick, kind, link, seq, k_sender, k_receiver))

    def to_lines(self) -> str:
        return "".join(json.dumps([t, kd, list(l), s, ks, kr]) + "\n"
                       for t, kd, l, s, ks, kr in self.rows)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_lines())

    @staticmethod
    def read(path) -> "EventLog":
        log = EventLog()
        with open(path) as fh:
            for line in fh:
                t, kd, l, s, ks, kr = json.loads(line)
                log.rows.append((t, kd, tuple(l), s, ks, kr))
        return log

    def __len__(self):
        return len(self.rows)


def validate_log(log: EventLog, model: DeliveryModel, p: int | None = None,
                 fairness: int | None = None) -> list[str]:
    """Post-hoc check of delivery and progress invariants; returns problems found.

    Checks per-link admissibility of every delivery (drops included, as they
    consume the envelope), monotone iteration counters, and, when
    ``fairness`` is given, that no process went more than ``fairness``
    events without updating while active.
    """
    problems = []
    delivered: dict = {}
    kinds: dict = {}
    k_seen: dict = {}
    since: dict = {}
    stopped = set()
    w = model.window
    for n, (tick, kind, link, seq, ks, kr) in enumerate(log.rows):
        if kind == UPDATE:
            i = link[0]
            if kr != ks + 1 or k_seen.get(i, 0) != ks:
                problems.append(f"event {n}: process {i} counter {ks}->{kr} after {k_seen.get(i, 0)}")
            k_seen[i] = kr
            since[i] = 0
        elif kind == "stop":
            stopped.add(link[0])
            continue
        else:
            real_kind = kind[len(DROP) + 1:] if kind.startswith(DROP) else kind
            got = delivered.setdefault(link, set())
            kd = kinds.setdefault(link, {})
            kd[seq] = real_kind
            missing = [s for s in range(seq - w) if s not in got]
            if missing:
                problems.append(f"event {n}: link {link} seq {seq} delivered before {missing[:3]}")
            got.add(seq)
            if not kind.startswith(DROP) and ks > k_seen.get(link[0], 0):
                problems.append(f"event {n}: stamp {ks} from {link[0]} exceeds its counter")
        if fairness is not None and p is not None:
            for i in range(p):
                if i in stopped:
                    continue
                since[i] = since.get(i, 0) + (0 if kind == UPDATE and link[0] == i else 1)
                if since[i] > fairness:
                    problems.append(f"event {n}: process {i} idle for {since[i]} events")
                    since[i] = 0
    if model.cross_kind_rule:
        order: dict = {}
        for tick, kind, link, seq, ks, kr in log.rows:
            if kind not in (UPDATE, "stop"):
                order.setdefault(link, []).append(seq)
        for link, seqs in order.items():
            kd = kinds[link]
            pending_snap = sorted(s for s, k in kd.items() if k in SNAPSHOT_KINDS)
            pos = {s: n for n, s in enumerate(seqs)}
            for s in seqs:
                if kd[s] != COMPUTATION:
                    continue
                for t in pending_snap:
                    if t < s and pos[t] > pos[s]:
                        problems.append(f"link {link}: computation seq {s} overtook snapshot seq {t}")
    return problems


# --- simulation ------------------------------------------------------------

class Simulation:
    """Binds a problem, a residual spec, a protocol and a delivery model.

    Use :meth:`run_async` or :meth:`run_sync` for free runs; the ``update``,
    ``deliver_link``, ``trigger`` and ``flush`` methods drive scripted
    executions (``scripted=True``), where envelopes wait in per-link queues
    until explicitly delivered.
    """

    def __init__(self, problem, spec, protocol, delivery: DeliveryModel, *, seed=0,
                 x0=None, compute_time=(1, 3), fairness=None, log_events=True,
                 scripted=False, keep_history=False, keep_iterates=False, observer=None):
        self.problem = problem
        self.spec = spec
        self.protocol = protocol
        self.delivery = delivery
        self.rng = np.random.default_rng(seed)
        self.scripted = scripted
        self.keep_iterates = keep_iterates
        self.observer = observer
        self.now = 0
        self.events = 0
        self.log = EventLog(log_events)
        self.trace: list[tuple] = []
        self.stats = {k: [0, 0] for k in KINDS}
        self.interface_bytes = {k: 0 for k in KINDS}
        p, n = problem.p, problem.n
        x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
        if x0.shape != (n,):
            raise ContractViolation(f"x0 has shape {x0.shape}, expected ({n},)")
        self.x0 = x0
        self.procs = [ProcessState(i, x0.copy(), problem.block_slice(i),
                                   dep_stamps={j: 0 for j in problem.in_neighbors(i)},
                                   history=[x0[problem.block_slice(i)].copy()] if keep_history else None)
                      for i in range(p)]
        if isinstance(compute_time[0], (int, np.integer)):
            compute_time = [tuple(compute_time)] * p
        if len(compute_time) != p:
            raise ConfigError(f"compute_time needs {p} ranges, got {len(compute_time)}")
        self.compute_time = [(int(a), int(b)) for a, b in compute_time]
        self.fairness = 16 * p if fairness is None else int(fairness)
        if self.fairness < 2 * p:
            raise ConfigError(f"fairness bound must be >= 2p = {2 * p}, got {self.fairness}")
        self.links: dict = {}
        self.pending: dict = {}
        self.scheduler = Scheduler()
        self.stop_values: dict = {}
        self.stopped_at: dict = {}
        self._tokens = [0] * p
        self._since = [0] * p
        self.ctx = [ProcessContext(self, i) for i in range(p)]
        self.protocol.attach(problem, spec, delivery)

    # -- messaging --

    def send(self, src, dst, kind, payload=None, nbytes=0):
        link = self.links.setdefault((src, dst), LinkState())
        seq = link.next_seq
        env = Envelope(kind, src, dst, seq, payload, self.procs[src].k, nbytes, self.now)
        st = self.stats[kind]
        st[0] += 1
        st[1] += nbytes
        if kind != REDUCTION and (src, dst) in self.problem.interfaces:
            self.interface_bytes[kind] += 8 * len(self.problem.interfaces[(src, dst)])
        if self.scripted:
            link.next_seq += 1
            self.pending.setdefault((src, dst), []).append(env)
            return env
        lo, hi = self.delivery.latency_for(kind)
        arrival = self.now + int(self.rng.integers(lo, hi + 1))
        env.deliver_at = link.schedule(self.delivery, kind, arrival)
        self.scheduler.push(env.deliver_at, "deliver", env)
        return env

    def _apply(self, i, actions):
        for a in actions:
            if isinstance(a, Send):
                self.send(i, a.dst, a.kind, a.payload, a.nbytes)
            elif isinstance(a, Stop):
                self._stop(i, a.value)
            else:
                if self.observer is not None:
                    self.observer.notify(self, i, a)
            self.trace.append((self.now, i, _describe(a)))

    def _stop(self, i, value):
        st = self.procs[i]
        if st.active:
            st.active = False
            self.stop_values[i] = value
            self.stopped_at[i] = self.now
            self.log.add(self.now, "stop", (i, i), -1, st.k, st.k)

    # -- process actions --

    def update(self, i):
        st = self.procs[i]
        if not st.active:
            return
        k_before = st.k

        def hook(r):
            self._apply(i, self.protocol.on_iteration(i, self.ctx[i], r))

        _, sends = step_process(st, self.problem, self.spec, hook)
        if st.k == k_before:
            return
        self.log.add(self.now, UPDATE, (i, i), -1, k_before, st.k)
        for dst, payload in sends:
            self.send(i, dst, COMPUTATION, payload, 8 * payload.size)
        self.events += 1

    def deliver(self, env: Envelope):
        st = self.procs[env.dst]
        self.events += 1
        if not st.active:
            self.log.add(self.now, f"{DROP}:{env.kind}", env.link, env.seq, env.sent_at_version, st.k)
            return
        self.log.add(self.now, env.kind, env.link, env.seq, env.sent_at_version, st.k)
        if env.kind == COMPUTATION:
            # an overtaken payload is older than what the view holds; drop it
            if env.sent_at_version > st.dep_stamps.get(env.src, 0):
                st.view[self.problem.interfaces[env.link]] = env.payload
                st.dep_stamps[env.src] = env.sent_at_version
        else:
            self._apply(env.dst, self.protocol.on_message(env.dst, self.ctx[env.dst], env))

    def trigger(self, i):
        """Force the local-convergence trigger of process ``i`` (scripted runs)."""
        self._apply(i, self.protocol.on_trigger(i, self.ctx[i]))

    def deliver_link(self, src, dst, count=1):
        """Deliver the next ``count`` envelopes waiting on a link, in sequence order."""
        queue = self.pending.get((src, dst), [])
        for _ in range(count):
            if not queue:
                raise ContractViolation(f"no envelope waiting on link {(src, dst)}")
            self.now += 1
            self.deliver(queue.pop(0))

    def flush(self, limit=100000):
        """Deliver every waiting envelope, oldest emission first, until quiet."""
        for _ in range(limit):
            heads = [(q[0].sent_at, q[0].src, q[0].dst, q[0].seq) for q in self.pending.values() if q]
            if not heads:
                return
            _, src, dst, _ = min(heads)
            self.deliver_link(src, dst)
        raise ContractViolation("flush did not quiesce")

    def scripted_update(self, procs):
        """One global step in which exactly ``procs`` update (others update implicitly)."""
        self.now += 1
        for i in procs:
            self.update(i)

    # -- free runs --

    def _schedule_update(self, i, tick):
        self._tokens[i] += 1
        self.scheduler.push(tick, "update", (i, self._tokens[i]))

    def _compute_delay(self, i):
        lo, hi = self.compute_time[i]
        return int(self.rng.integers(lo, hi + 1))

    def all_stopped(self) -> bool:
        return not any(st.active for st in self.procs)

    def run_async(self, max_events: int) -> str:
        """Event loop; returns ``"terminated"``, ``"timeout"`` or ``"quiescent"``.

        A process that has waited ``fairness - p + 1`` events without
        updating is updated at once, so no process ever goes more than
        ``fairness`` logged events between two updates.
        """
        p = self.problem.p
        force_at = max(1, self.fairness - p + 1)
        for i in range(p):
            self._schedule_update(i, self._compute_delay(i))
        while True:
            if self.all_stopped():
                return "terminated"
            if self.events >= max_events:
                return "timeout"
            if not len(self.scheduler):
                return "quiescent"
            tick, kind, data = self.scheduler.pop()
            self.now = tick
            if kind == "update":
                i, token = data
                if token != self._tokens[i] or not self.procs[i].active:
                    continue
                self._timed_update(i)
            else:
                self.deliver(data)
                self._count_event(-1)
            for j in range(p):
                if self.procs[j].active and self._since[j] >= force_at:
                    self._timed_update(j)

    def _timed_update(self, i):
        k = self.procs[i].k
        self.update(i)
        if self.procs[i].k != k:
            self._count_event(i)
        if self.procs[i].active:
            self._schedule_update(i, self.now + self._compute_delay(i))

    def _count_event(self, served):
        for j in range(self.problem.p):
            self._since[j] = 0 if j == served else self._since[j] + 1

    def run_sync(self, max_sweeps: int, decide) -> str:
        """Lockstep iteration ``x^{k+1} = f(x^k)``.

        ``decide(local_values)`` gets the ``p`` local residuals of ``x^k``
        and returns ``(global_value, terminate)``.
        """
        x = self.x0.copy()
        p = self.problem.p
        self.iterates = [x.copy()]
        for sweep in range(max_sweeps):
            self.now = sweep + 1
            new_blocks, local = [], []
            for i in range(p):
                new = self.problem.apply_block(i, x)
                check_finite(new, f"update of block {i}")
                if self.spec.local_fn is None:
                    local.append(self.spec.block_value(x[self.problem.block_slice(i)] - new))
                else:
                    local.append(self.spec.block_value(self.spec.residual_vector(self.problem, i, x)))
                new_blocks.append(new)
            x = np.concatenate(new_blocks)
            for i, st in enumerate(self.procs):
                st.view = x
                st.block = self.problem.block_slice(i)
                self.log.add(self.now, UPDATE, (i, i), -1, st.k, st.k + 1)
                st.k += 1
            self.events += p
            if self.keep_iterates:
                self.iterates.append(x.copy())
            value, terminate = decide(local)
            self.sync_value = value
            if terminate:
                for i in range(p):
                    self._stop(i, value)
                return "terminated"
        return "timeout"

    def delivered_blocks(self) -> np.ndarray:
        """Concatenation of every process's current own block."""
        return np.concatenate([st.local_block for st in self.procs])


def _describe(action) -> str:
    if isinstance(action, Send):
        return f"send {action.kind} -> {action.dst}"
    if isinstance(action, Record):
        r = action.record
        return f"record epoch {r.epoch} {r.status}"
    if isinstance(action, Contribution):
        return f"contribute {action.key} {action.value:.6e}"
    if isinstance(action, Decision):
        return f"decide {action.key} {action.value:.6e} flag={action.flag} terminate={action.terminate}"
    if isinstance(action, Stop):
        return f"stop {action.value:.6e}"
    return getattr(action, "text", repr(action))
