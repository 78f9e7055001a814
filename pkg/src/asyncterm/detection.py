"""Termination detection for asynchronous iterations.

Four protocols share one handler contract (``on_iteration``, ``on_message``,
``on_trigger``), each keeping one slot per process:

``exs``
    Exact snapshot for FIFO links: record on local convergence or on the
    first marker, empty markers, record the last delivered dependency when a
    marker arrives.
``sbs``
    Snapshot whose messages carry the sender's interface data; consistent
    under any delivery order.
``nfais``
    Approximate snapshot for bounded out-of-order links: record after ``m``
    successive locally converged iterations, then confirm or discard after
    ``m`` more.
``pfait``
    No snapshot at all: successive non-blocking reductions of the residual
    each process sees on its current view.

Global values travel through a binomial reduction tree rooted at process 0;
the root decides and broadcasts the verdict back down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, ResidualSpec
from .engine import (
    CONFIRM, MARKER, REDUCTION, ConfigError, Contribution, Decision, ProtocolViolation,
    Record, Send, Stop,
)

PROTOCOLS = ("exs", "sbs", "nfais", "pfait")

OPEN, COMPLETE, CONFIRMED, DISCARDED = "open", "complete", "confirmed", "discarded"


@dataclass
class DetectionConfig:
    """Detection parameters.

    ``eps`` is the local and global threshold the protocol compares against;
    ``eps_target`` the precision the final answer must satisfy.  For NFAIS
    with ``auto_threshold`` the threshold becomes ``eps_target / (1 + c)``.
    ``c`` is a number or ``"estimate"`` (resolved by the oracle before a run).
    """

    protocol: str = "pfait"
    eps: float = 1e-6
    eps_target: float | None = None
    m: int = 2
    c: float | str = 0.0
    auto_threshold: bool = False
    reduction_period: int = 1
    skip_unconverged: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.eps_target is None:
            self.eps_target = self.eps
        if self.protocol == "nfais" and self.m < 1:
            raise ConfigError(f"nfais needs m >= 1, got m={self.m}")
        if self.reduction_period < 1:
            raise ConfigError(f"reduction_period must be >= 1, got {self.reduction_period}")
        if self.c != "estimate" and not float(self.c) >= 0:
            raise ConfigError(f"c must be nonnegative or 'estimate', got {self.c}")
        if not self.auto_threshold and self.eps > self.eps_target:
            raise ConfigError(f"eps={self.eps} exceeds eps_target={self.eps_target}")

    @property
    def c_value(self) -> float:
        if self.c == "estimate":
            raise ConfigError("c is still 'estimate'; resolve it with the oracle first")
        return float(self.c)

    @property
    def threshold(self) -> float:
        """Threshold used for local convergence and for the global test."""
        if self.protocol == "nfais" and self.auto_threshold:
            return self.eps_target / (1.0 + self.c_value)
        return self.eps


def check_validated_termination(r_approx: float, config: DetectionConfig) -> bool:
    """``r~ < eps_target / (1 + c)``, which guarantees ``r(x_bar) < eps_target``."""
    return r_approx < config.eps_target / (1.0 + config.c_value)


@dataclass
class SnapshotRecord:
    owner: int
    epoch: int = 0
    own: np.ndarray | None = None
    own_k: int = -1
    deps: dict = field(default_factory=dict)
    dep_stamps: dict = field(default_factory=dict)
    status: str = OPEN
    local_value: float | None = None
    in_neighbors: tuple = ()

    @property
    def complete(self) -> bool:
        return self.own is not None and all(j in self.deps for j in self.in_neighbors)


def reconstruct(problem, record: SnapshotRecord) -> np.ndarray:
    """Global vector seen by the record's owner; entries its map never reads are zero."""
    x = np.zeros(problem.n)
    x[problem.block_slice(record.owner)] = record.own
    for j, vals in record.deps.items():
        x[problem.interfaces[(j, record.owner)]] = vals
    return x


def approximate_residual(records, spec: ResidualSpec, problem) -> float:
    """``sigma(r_1(x_bar^(1)), ..., r_p(x_bar^(p)))``, each on its owner's reconstruction."""
    values = []
    for rec in records:
        if not rec.complete or rec.status in (OPEN, DISCARDED):
            raise ContractViolation(f"record of process {rec.owner} is {rec.status}")
        x = reconstruct(problem, rec)
        values.append(spec.block_value(spec.residual_vector(problem, rec.owner, x)))
    folded = 0.0
    for v in values:
        folded = spec.combine(folded, v)
    return spec.finalize(folded)


# --- reduction tree -------------------------------------------------------

def tree_parent(i: int) -> int | None:
    return None if i == 0 else i & (i - 1)


def tree_children(i: int, p: int) -> list[int]:
    low = i & -i if i else 1 << max(p - 1, 0).bit_length()
    out, bit = [], 1
    while bit < low and i + bit < p:
        out.append(i + bit)
        bit <<= 1
    return out


@dataclass
class ReductionRound:
    key: int
    contributions: dict = field(default_factory=dict)
    combined: float | None = None
    in_flight: bool = True


class TreeReducer:
    """One process's share of a non-blocking allreduce over the binomial tree."""

    def __init__(self, i: int, p: int, spec: ResidualSpec, decide):
        self.i = i
        self.parent = tree_parent(i)
        self.children = tree_children(i, p)
        self.spec = spec
        self.decide = decide
        self.partial: dict = {}

    def contribute(self, key, value, flag):
        return self._add(key, value, flag, own=True)

    def on_fragment(self, payload):
        if payload[0] == "up":
            _, key, value, flag = payload
            return self._add(key, value, flag, own=False)
        _, key, value, flag, terminate = payload
        sends = [Send(c, REDUCTION, payload, 16) for c in self.children]
        return sends, (key, value, flag, terminate)

    def _add(self, key, value, flag, own):
        entry = self.partial.setdefault(key, [0, 0.0, True, False])
        if own:
            if entry[3]:
                raise ProtocolViolation(f"process {self.i} contributed twice to round {key}")
            entry[3] = True
        entry[0] += 1
        entry[1] = self.spec.combine(entry[1], value)
        entry[2] = entry[2] and flag
        if entry[0] < len(self.children) + 1 or not entry[3]:
            return [], None
        del self.partial[key]
        if self.parent is not None:
            return [Send(self.parent, REDUCTION, ("up", key, entry[1], entry[2]), 16)], None
        final = self.spec.finalize(entry[1])
        terminate = self.decide(final, entry[2])
        down = ("down", key, final, entry[2], terminate)
        return [Send(c, REDUCTION, down, 16) for c in self.children], (key, final, entry[2], terminate)


# --- protocols ------------------------------------------------------------

class Protocol:
    name = ""

    def __init__(self, config: DetectionConfig):
        self.config = config

    def attach(self, problem, spec, delivery):
        self.problem = problem
        self.spec = spec
        p = problem.p
        self.reducers = [TreeReducer(i, p, spec, self.decide) for i in range(p)]
        self.slots = [self.new_slot(i) for i in range(p)]

    @property
    def threshold(self) -> float:
        return self.config.threshold

    def new_slot(self, i):
        raise NotImplementedError

    def below(self, r: float) -> bool:
        return self.spec.local_norm(r) < self.threshold

    def decide(self, value: float, flag: bool) -> bool:
        return flag and value < self.threshold

    def on_iteration(self, i, ctx, r):
        return []

    def on_trigger(self, i, ctx):
        return []

    def on_message(self, i, ctx, env):
        if env.kind == REDUCTION:
            sends, result = self.reducers[i].on_fragment(env.payload)
            return sends + (self._result(i, ctx, result) if result else [])
        return self.on_snapshot_message(i, ctx, env)

    def on_snapshot_message(self, i, ctx, env):
        raise ProtocolViolation(f"{self.name} does not expect {env.kind} envelopes")

    def contribute(self, i, ctx, key, value, flag):
        sends, result = self.reducers[i].contribute(key, value, flag)
        return sends + (self._result(i, ctx, result) if result else [])

    def _result(self, i, ctx, result):
        key, value, flag, terminate = result
        actions = []
        if self.reducers[i].parent is None:
            actions.append(Decision(key, value, flag, terminate))
        if terminate:
            actions.append(Stop(value))
        else:
            actions.extend(self.on_failed_round(i, ctx, key, flag))
        return actions

    def on_failed_round(self, i, ctx, key, flag):
        return []


@dataclass
class _SnapSlot:
    epoch: int = 0
    record: SnapshotRecord | None = None
    contributed: bool = False
    deps: dict = field(default_factory=dict)       # epoch -> {j: (values, stamp)}
    confirms: dict = field(default_factory=dict)   # epoch -> {j: flag}
    persist: int = 0
    supplementary: int = 0
    still_converged: bool = True
    confirm_sent: bool = False


class _SnapshotProtocol(Protocol):
    """Epoch bookkeeping shared by the three snapshot protocols."""

    payload_markers = False
    first_marker_trigger = False

    def new_slot(self, i):
        return _SnapSlot()

    def _record_own(self, i, ctx, slot):
        own = ctx.block()
        slot.record = SnapshotRecord(i, slot.epoch, own, ctx.k, in_neighbors=tuple(ctx.in_neighbors))
        actions = []
        for dst in ctx.out_neighbors:
            if self.payload_markers:
                vals = ctx.interface_of(own, dst)
                actions.append(Send(dst, MARKER, (slot.epoch, vals), 8 * vals.size))
            else:
                actions.append(Send(dst, MARKER, slot.epoch, 0))
        return actions

    def _advance(self, slot, epoch):
        for d in (slot.deps, slot.confirms):
            for e in [e for e in d if e < epoch]:
                del d[e]
        slot.epoch = epoch
        slot.record = None
        slot.contributed = False
        slot.persist = 0
        slot.supplementary = 0
        slot.still_converged = True
        slot.confirm_sent = False

    def ready_to_contribute(self, slot, ctx) -> bool:
        deps = slot.deps.get(slot.epoch, {})
        return all(j in deps for j in ctx.in_neighbors)

    def _try_complete(self, i, ctx, slot):
        if slot.record is None or slot.contributed or not self.ready_to_contribute(slot, ctx):
            return []
        rec = slot.record
        for j, (vals, stamp) in slot.deps.get(slot.epoch, {}).items():
            rec.deps[j] = vals
            rec.dep_stamps[j] = stamp
        flag = self.local_flag(slot, ctx)
        x = ctx.reconstruct(rec.own, rec.deps)
        rec.local_value = ctx.local_value(x)
        rec.status = self.final_status(flag)
        slot.contributed = True
        return [Record(rec)] + self.contribute(i, ctx, slot.epoch, rec.local_value, flag)

    def local_flag(self, slot, ctx) -> bool:
        return True

    def final_status(self, flag) -> str:
        return COMPLETE

    def on_snapshot_message(self, i, ctx, env):
        slot = self.slots[i]
        if env.kind != MARKER:
            return super().on_snapshot_message(i, ctx, env)
        if self.payload_markers:
            epoch, vals = env.payload
            stamp = env.sent_at_version
        else:
            epoch = env.payload
            vals, stamp = ctx.dep_values(env.src), ctx.dep_stamp(env.src)
        actions = []
        if epoch < slot.epoch:
            raise ProtocolViolation(f"process {i}: marker of finished epoch {epoch} from {env.src}")
        if epoch > slot.epoch:
            if epoch != slot.epoch + 1 or not slot.contributed:
                raise ProtocolViolation(
                    f"process {i}: marker of epoch {epoch} while epoch {slot.epoch} is open")
            if self.first_marker_trigger:
                self._advance(slot, epoch)
        if self.first_marker_trigger and slot.record is None:
            actions += self._record_own(i, ctx, slot)
        got = slot.deps.setdefault(epoch, {})
        if env.src in got:
            raise ProtocolViolation(f"process {i}: second marker of epoch {epoch} from {env.src}")
        got[env.src] = (vals, stamp)
        if epoch == slot.epoch:
            actions += self._try_complete(i, ctx, slot)
        return actions

    def on_iteration(self, i, ctx, r):
        slot = self.slots[i]
        if slot.contributed or slot.record is not None or not self.below(r):
            return []
        return self._record_own(i, ctx, slot) + self._try_complete(i, ctx, slot)

    def on_trigger(self, i, ctx):
        slot = self.slots[i]
        if slot.contributed or slot.record is not None:
            return []
        return self._record_own(i, ctx, slot) + self._try_complete(i, ctx, slot)

    def on_failed_round(self, i, ctx, key, flag):
        slot = self.slots[i]
        if slot.epoch == key:
            self._advance(slot, key + 1)
            # markers of the new epoch may already be here
            return self._try_complete(i, ctx, slot)
        return []


class ExactSnapshot(_SnapshotProtocol):
    name = "exs"
    first_marker_trigger = True

    def attach(self, problem, spec, delivery):
        if not delivery.is_fifo:
            raise ConfigError("exs needs FIFO links; use sbs or nfais for out-of-order delivery")
        super().attach(problem, spec, delivery)


class PayloadSnapshot(_SnapshotProtocol):
    name = "sbs"
    payload_markers = True


class ApproximateSnapshot(_SnapshotProtocol):
    """Record after ``m`` converged iterations; confirm or discard after ``m`` more."""

    name = "nfais"

    def decide(self, value, flag):
        return flag and check_validated_termination(value, self.config)

    def on_iteration(self, i, ctx, r):
        slot = self.slots[i]
        m = self.config.m
        if slot.contributed:
            return []
        converged = self.below(r)
        if slot.record is None:
            slot.persist = slot.persist + 1 if converged else 0
            if slot.persist < m:
                return []
            return self._record_own(i, ctx, slot) + self._try_complete(i, ctx, slot)
        if slot.confirm_sent:
            return []
        slot.supplementary += 1
        slot.still_converged = slot.still_converged and converged
        if slot.supplementary < m:
            return []
        return self._send_confirm(i, ctx, slot)

    def on_trigger(self, i, ctx):
        slot = self.slots[i]
        if slot.contributed or slot.record is not None:
            return []
        slot.persist = self.config.m
        return self._record_own(i, ctx, slot) + self._try_complete(i, ctx, slot)

    def _send_confirm(self, i, ctx, slot):
        slot.confirm_sent = True
        actions = [Send(dst, CONFIRM, (slot.epoch, slot.still_converged), 0)
                   for dst in ctx.out_neighbors]
        return actions + self._try_complete(i, ctx, slot)

    def ready_to_contribute(self, slot, ctx):
        if not slot.confirm_sent or not super().ready_to_contribute(slot, ctx):
            return False
        got = slot.confirms.get(slot.epoch, {})
        return all(j in got for j in ctx.in_neighbors)

    def local_flag(self, slot, ctx):
        got = slot.confirms.get(slot.epoch, {})
        return slot.still_converged and all(got[j] for j in ctx.in_neighbors)

    def final_status(self, flag):
        return CONFIRMED if flag else DISCARDED

    def on_snapshot_message(self, i, ctx, env):
        if env.kind != CONFIRM:
            return super().on_snapshot_message(i, ctx, env)
        slot = self.slots[i]
        epoch, flag = env.payload
        if epoch < slot.epoch:
            raise ProtocolViolation(f"process {i}: confirm of finished epoch {epoch}")
        got = slot.confirms.setdefault(epoch, {})
        if env.src in got:
            raise ProtocolViolation(f"process {i}: second confirm of epoch {epoch} from {env.src}")
        got[env.src] = flag
        return self._try_complete(i, ctx, slot) if epoch == slot.epoch else []


@dataclass
class _RoundSlot:
    round: int = 0
    contributed: bool = False
    since: int = 0


class ReductionOnly(Protocol):
    """Successive non-blocking reductions of current local residuals."""

    name = "pfait"

    def new_slot(self, i):
        return _RoundSlot()

    def on_iteration(self, i, ctx, r):
        slot = self.slots[i]
        slot.since += 1
        if slot.contributed or slot.since < self.config.reduction_period:
            return []
        if self.config.skip_unconverged and not self.below(r):
            return []
        slot.contributed = True
        stamps = {j: ctx.dep_stamp(j) for j in ctx.in_neighbors}
        note = Contribution(slot.round, r, ctx.k, ctx.block(), stamps)
        return [note] + self.contribute(i, ctx, slot.round, r, True)

    def on_failed_round(self, i, ctx, key, flag):
        slot = self.slots[i]
        slot.round = key + 1
        slot.contributed = False
        slot.since = 0
        return []


_CLASSES = {"exs": ExactSnapshot, "sbs": PayloadSnapshot, "nfais": ApproximateSnapshot,
            "pfait": ReductionOnly}


def make_protocol(config: DetectionConfig) -> Protocol:
    return _CLASSES[config.protocol](config)
