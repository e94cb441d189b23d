"""The timeslot execution engine.

An execution runs a roster of processors for a fixed number of slots.
Within every slot, in ascending processor-id order, each processor:

1. receives — messages the timing rule delivers this slot, plus the
   permitter's responses to its previous slot's requests;
2. broadcasts — a finite message set, each message either already held
   or covered by a permitter grant, with embedded-pair authenticity and
   block-parent discipline enforced (violations abort the run);
3. requests — a budget-checked request list, answered by the permitter
   immediately but handed back at the start of the next slot;
4. transitions — protocol state updates inside the strategy object.

Broadcast messages reach the sender's own state immediately; every other
processor receives them at the slot the timing rule picks, each message
at most once per receiver.  The genesis block is in every state from the
start.  After each slot the configured confirmation rule is evaluated on
every processor's state and change-points are recorded.

The transcript is the engine's complete, deterministic record: re-running
a config with the same seed yields byte-identical serialized transcripts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .blocktree import BlockIndex, BlockSetView
from .errors import ConfigError, ExecutionFault, SettingMismatchError
from .messages import Message, PublicKey, genesis_block
from .network import SynchronySchedule, TimingRule, build_timing_rule
from .permitter import (PermitResponse, StakePermitter, WorkPermitter,
                        enforce_request_budget)
from .protocols import ConfirmationRule, StepContext, Strategy
from .resource_pool import ResourcePool

TRANSCRIPT_FORMAT = 1


@dataclass
class ProcessorSpec:
    """Roster entry: identity, owned key groups, and the strategy factory."""

    id: str
    keys: tuple[PublicKey, ...]
    strategy: object  # zero-argument callable returning a Strategy
    adversary: bool = False
    describe: dict = field(default_factory=dict)

    @property
    def groups(self) -> set[str]:
        return {k.owner for k in self.keys}


@dataclass
class ExecutionConfig:
    """A fully resolved execution instance."""

    duration: int
    delta: int
    epsilon: float
    timed: bool
    schedule: SynchronySchedule
    timing: object  # TimingRule or a config dict for build_timing_rule
    pool: ResourcePool
    permitter: object  # WorkPermitter | StakePermitter
    confirmation: ConfirmationRule
    processors: list[ProcessorSpec]
    seed: int
    label: str = "run"

    def validate(self) -> None:
        if self.duration < 1:
            raise ConfigError("duration must be at least one slot")
        if self.delta < 1:
            raise ConfigError("the delay bound must be at least one slot")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie strictly between 0 and 1")
        if self.schedule.duration != self.duration:
            raise ConfigError("schedule duration differs from the execution's")
        if not self.processors:
            raise ConfigError("the roster is empty")
        ids = [p.id for p in self.processors]
        if len(set(ids)) != len(ids):
            raise ConfigError("processor ids must be unique")
        groups_seen: dict[str, str] = {}
        for p in self.processors:
            if not p.id:
                raise ConfigError("processor ids must be nonempty")
            for g in p.groups:
                if g in groups_seen and groups_seen[g] != p.id:
                    raise ConfigError(
                        f"key group {g!r} is claimed by both {groups_seen[g]!r} "
                        f"and {p.id!r}"
                    )
                groups_seen[g] = p.id
        setting = self.permitter.setting
        if setting.timed != self.timed:
            raise SettingMismatchError(
                f"execution is {'timed' if self.timed else 'untimed'} but the "
                f"permitter is {'timed' if setting.timed else 'untimed'}"
            )
        if isinstance(self.permitter, StakePermitter):
            self.permitter.check_pool(self.pool)
        owned = {g for p in self.processors for g in p.groups}
        for key in self.pool.declared_keys():
            if key.owner not in owned:
                raise ConfigError(
                    f"pool assigns balance to key group {key.owner!r} owned by "
                    f"no processor"
                )


@dataclass
class Transcript:
    """Deterministic record of one execution."""

    label: str
    seed: int
    header: dict
    genesis: Message
    index: BlockIndex
    store: dict[str, Message]
    broadcasts: list[tuple[int, str, str]] = field(default_factory=list)
    deliveries: list[tuple[int, str, str]] = field(default_factory=list)
    grants: list[dict] = field(default_factory=list)
    confirmations: list[tuple[int, str, str | None, int]] = field(default_factory=list)
    duration: int = 0
    roster_ids: tuple[str, ...] = ()
    adversary_ids: tuple[str, ...] = ()

    # -- queries ------------------------------------------------------------

    def ledger_ids(self, up_to_slot: int | None = None) -> list[str]:
        """Ids of all messages broadcast by the given slot (genesis included)."""
        cut = self.duration if up_to_slot is None else up_to_slot
        out = [self.genesis.id]
        seen = {self.genesis.id}
        for slot, _sender, mid in self.broadcasts:
            if slot <= cut and mid not in seen:
                seen.add(mid)
                out.append(mid)
        return out

    def message(self, msg_id: str) -> Message:
        return self.store[msg_id]

    def broadcast_slot(self, msg_id: str) -> int | None:
        for slot, _sender, mid in self.broadcasts:
            if mid == msg_id:
                return slot
        return None

    def confirmed_series(self, proc: str) -> list[tuple[str | None, int]]:
        """Per-slot (confirmed tip, confirmed length), slots 1..duration."""
        out: list[tuple[str | None, int]] = []
        current: tuple[str | None, int] = (None, 0)
        points = [(s, tip, ln) for s, p, tip, ln in self.confirmations if p == proc]
        pi = 0
        for slot in range(1, self.duration + 1):
            while pi < len(points) and points[pi][0] == slot:
                current = (points[pi][1], points[pi][2])
                pi += 1
            out.append(current)
        return out

    def delivery_map(self) -> dict[tuple[str, str], int]:
        """(receiver, msg_id) -> slot of first receipt, self-holds included."""
        held: dict[tuple[str, str], int] = {}
        for slot, sender, mid in self.broadcasts:
            held.setdefault((sender, mid), slot)
        for slot, receiver, mid in self.deliveries:
            held.setdefault((receiver, mid), slot)
        return held

    # -- serialization --------------------------------------------------------

    def to_lines(self) -> list[str]:
        def enc(obj) -> str:
            return json.dumps(obj, sort_keys=True, separators=(",", ":"))

        lines = [enc({"type": "header", "format": TRANSCRIPT_FORMAT,
                      "label": self.label, "seed": self.seed,
                      "duration": self.duration,
                      "roster": list(self.roster_ids),
                      "adversaries": list(self.adversary_ids),
                      "config": self.header})]
        events: list[tuple[int, int, int, dict]] = []
        for n, (slot, proc, mid) in enumerate(self.deliveries):
            events.append((slot, 0, n, {"type": "delivery", "slot": slot,
                                        "proc": proc, "msg_id": mid}))
        for n, (slot, proc, mid) in enumerate(self.broadcasts):
            events.append((slot, 1, n, {"type": "broadcast", "slot": slot,
                                        "proc": proc,
                                        "msg": self.store[mid].to_json()}))
        for n, g in enumerate(self.grants):
            events.append((g["slot"], 2, n, {"type": "grant", **g}))
        for n, (slot, proc, tip, ln) in enumerate(self.confirmations):
            events.append((slot, 3, n, {"type": "confirm", "slot": slot,
                                        "proc": proc, "tip": tip, "len": ln}))
        events.sort(key=lambda e: (e[0], e[1], e[2]))
        lines.extend(enc(e[3]) for e in events)
        lines.append(enc({"type": "end", "broadcasts": len(self.broadcasts)}))
        return lines

    def to_bytes(self) -> bytes:
        return ("\n".join(self.to_lines()) + "\n").encode()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_lines(cls, lines) -> "Transcript":
        header = None
        broadcasts, deliveries, grants, confirmations = [], [], [], []
        messages: list[tuple[int, str, Message]] = []
        for line in lines:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec["type"]
            if kind == "header":
                header = rec
            elif kind == "broadcast":
                msg = Message.from_json(rec["msg"])
                messages.append((rec["slot"], rec["proc"], msg))
                broadcasts.append((rec["slot"], rec["proc"], msg.id))
            elif kind == "delivery":
                deliveries.append((rec["slot"], rec["proc"], rec["msg_id"]))
            elif kind == "grant":
                grants.append({k: v for k, v in rec.items() if k != "type"})
            elif kind == "confirm":
                confirmations.append((rec["slot"], rec["proc"], rec["tip"], rec["len"]))
        if header is None:
            raise ValueError("transcript has no header record")
        timed = bool(header["config"]["timed"])
        genesis = genesis_block(timed)
        index = BlockIndex(genesis)
        store = {genesis.id: genesis}
        for _slot, _proc, msg in messages:
            store[msg.id] = msg
            if msg.is_block:
                index.add(msg)
        return cls(
            label=header["label"], seed=header["seed"], header=header["config"],
            genesis=genesis, index=index, store=store, broadcasts=broadcasts,
            deliveries=deliveries, grants=grants, confirmations=confirmations,
            duration=header["duration"], roster_ids=tuple(header["roster"]),
            adversary_ids=tuple(header["adversaries"]),
        )

    @classmethod
    def load(cls, path) -> "Transcript":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_lines(fh)


class _ProcessorRuntime:
    """Engine-side mutable state for one processor."""

    def __init__(self, spec: ProcessorSpec, view: BlockSetView, strategy: Strategy,
                 tracker):
        self.spec = spec
        self.view = view
        self.strategy = strategy
        self.tracker = tracker
        self.pending: list[PermitResponse] = []
        self.granted_ids: set[str] = set()
        self.leader_grants: list = []
        self.held: set[str] = set()  # msg ids held or already queued for delivery
        self.last_confirmed: tuple[str | None, int] | None = None


def validate_broadcast(runtime: _ProcessorRuntime, msg: Message, slot: int) -> None:
    """Enforce the broadcast rules; raises ExecutionFault on violation."""
    pid = runtime.spec.id
    if msg.signer is None:
        raise ExecutionFault(pid, slot, "broadcast message lacks a signer")
    own = msg.signer.owner in runtime.spec.groups
    if not own and not runtime.view.has_pair(msg.pair()):
        raise ExecutionFault(
            pid, slot, f"message signed by unowned key {msg.signer.label()} "
            f"was never received")
    for key, digest in msg.embedded:
        if key.owner in runtime.spec.groups:
            continue
        if not runtime.view.has_pair((key, digest)):
            raise ExecutionFault(
                pid, slot, f"embedded pair under {key.label()} was never "
                f"signed or received")
    permitted = (
        msg.id in runtime.view.messages
        or msg.id in runtime.granted_ids
        or any(lg.covers(msg) for lg in runtime.leader_grants)
    )
    if not permitted:
        raise ExecutionFault(pid, slot, f"message {msg.id[:12]} is not permitted")
    if msg.is_block and msg.parent not in runtime.view.messages:
        raise ExecutionFault(
            pid, slot, f"block parent {str(msg.parent)[:12]} not in message state")


def run_execution(config: ExecutionConfig) -> Transcript:
    """Run one execution to completion and return its transcript."""
    config.validate()
    genesis = genesis_block(config.timed)
    index = BlockIndex(genesis)
    store: dict[str, Message] = {genesis.id: genesis}

    if isinstance(config.timing, TimingRule):
        rule = config.timing
    else:
        rule = build_timing_rule(
            dict(config.timing), schedule=config.schedule, delta=config.delta,
            seed=config.seed, roster_ids=[p.id for p in config.processors])

    roster = sorted(config.processors, key=lambda p: p.id)
    runtimes: dict[str, _ProcessorRuntime] = {}
    for spec in roster:
        view = BlockSetView.fresh(index, genesis)
        strategy = spec.strategy()
        if not isinstance(strategy, Strategy):
            raise ConfigError(f"strategy factory for {spec.id!r} returned "
                              f"{type(strategy).__name__}")
        tracker = config.confirmation.make_tracker(view)
        rt = _ProcessorRuntime(spec, view, strategy, tracker)
        rt.held.add(genesis.id)
        runtimes[spec.id] = rt

    transcript = Transcript(
        label=config.label, seed=config.seed,
        header=_describe_config(config, rule), genesis=genesis, index=index,
        store=store, duration=config.duration,
        roster_ids=tuple(p.id for p in roster),
        adversary_ids=tuple(p.id for p in roster if p.adversary),
    )

    queue: dict[int, list[tuple[str, str]]] = {}
    budget_setting = config.permitter.setting

    for slot in range(1, config.duration + 1):
        contexts: dict[str, StepContext] = {}

        # -- receive phase ------------------------------------------------
        for spec in roster:
            rt = runtimes[spec.id]
            delivered: list[Message] = []
            for receiver, mid in queue.get(slot, ()):  # queued in order
                if receiver != spec.id:
                    continue
                msg = store[mid]
                transcript.deliveries.append((slot, spec.id, mid))
                delivered.append(msg)
                for activated in rt.view.add(msg):
                    rt.tracker.on_block(store[activated])
            responses = tuple(rt.pending)
            rt.pending = []
            for resp in responses:
                rt.granted_ids.update(m.id for m in resp.granted)
                if resp.leader is not None:
                    rt.leader_grants.append(resp.leader)
            ctx = StepContext(
                slot=slot, processor_id=spec.id, keys=spec.keys, view=rt.view,
                responses=responses, delivered=tuple(delivered),
                duration=config.duration, delta=config.delta,
                epsilon=config.epsilon, timed=config.timed,
            )
            contexts[spec.id] = ctx
            rt.strategy.on_receive(ctx)
        queue.pop(slot, None)

        # -- broadcast + request phase --------------------------------------
        for spec in roster:
            rt = runtimes[spec.id]
            ctx = contexts[spec.id]

            for msg in rt.strategy.plan_broadcasts(ctx):
                validate_broadcast(rt, msg, slot)
                store.setdefault(msg.id, msg)
                transcript.broadcasts.append((slot, spec.id, msg.id))
                for activated in rt.view.add(msg):
                    rt.tracker.on_block(store[activated])
                rt.held.add(msg.id)
                for other in roster:
                    if other.id == spec.id:
                        continue
                    ort = runtimes[other.id]
                    if msg.id in ort.held:
                        continue
                    due = rule.delivery_slot(spec.id, other.id, msg.id, slot)
                    if due is None or due > config.duration:
                        continue
                    queue.setdefault(due, []).append((other.id, msg.id))
                    ort.held.add(msg.id)

            requests = rt.strategy.plan_requests(ctx)
            problems = enforce_request_budget(requests, budget_setting)
            if problems:
                raise ExecutionFault(spec.id, slot, problems[0])
            for req in requests:
                if req.key.owner not in spec.groups:
                    raise ExecutionFault(
                        spec.id, slot,
                        f"request under unowned key {req.key.label()}")
                resp = config.permitter.respond(req, config.pool, slot, config.seed)
                if resp.empty:
                    continue
                rt.pending.append(resp)
                transcript.grants.append({
                    "slot": slot, "proc": spec.id, "key": req.key.to_json(),
                    "granted": sorted(m.id for m in resp.granted),
                    "leader_slot": resp.target_slot if resp.leader else None,
                    "m_digest": req.m_digest,
                    "candidate": req.candidate.id if req.candidate else None,
                })

        # -- record confirmations -------------------------------------------
        for spec in roster:
            rt = runtimes[spec.id]
            current = rt.tracker.current()
            if current != rt.last_confirmed:
                rt.last_confirmed = current
                transcript.confirmations.append(
                    (slot, spec.id, current[0], current[1]))

    return transcript


def _describe_config(config: ExecutionConfig, rule: TimingRule) -> dict:
    pool_desc = config.pool.describe()
    perm = config.permitter
    perm_desc = {"family": type(perm).__name__, "rate": str(perm.rate)}
    if isinstance(perm, WorkPermitter) and perm.reference_scale is not None:
        perm_desc["reference_scale"] = str(perm.reference_scale)
    if isinstance(perm, StakePermitter):
        perm_desc["lookahead"] = perm.lookahead
    return {
        "duration": config.duration,
        "delta": config.delta,
        "epsilon": config.epsilon,
        "timed": config.timed,
        "schedule": config.schedule.to_json(),
        "timing": rule.describe(),
        "pool": pool_desc,
        "permitter": perm_desc,
        "confirmation": config.confirmation.describe(),
        "processors": [
            {"id": p.id, "keys": [k.label() for k in p.keys],
             "adversary": p.adversary, **({"strategy": p.describe}
                                          if p.describe else {})}
            for p in sorted(config.processors, key=lambda p: p.id)
        ],
    }
