"""Adversarial strategies and derived-instance builders.

The strategies here stay inside the execution model: every broadcast is
covered by a grant or by prior receipt, every request respects the
budget, and all hidden state is plain protocol state.  What makes them
adversarial is *withholding* — building private chains and releasing
them at the worst moment.

``PrivateForkStrategy`` is the classic double-spend: fork the public
chain at its tip, mine privately, wait until the public side confirms a
victim block, then release a strictly longer fork.

``SimulationAttackerStrategy`` never looks at the public chain at all.
It hosts a complete private execution of a designated honest roster —
same processor ids, same keys, same message-delay randomness — and
forwards that inner execution's permit requests to the real permitter
under its own keys.  Because grant draws and delays depend only on keys,
slots, message-set digests and message ids, the inner execution unfolds
exactly as a real all-honest run of that roster would, and the real
grant sequence matches it one for one.  At the release slot the whole
inner ledger is broadcast at once.

``build_isolated_observer_instance`` extends a finished run's config
with silent observer processors that receive nothing except a chosen
slice of the original ledger, delivered at a chosen slot — the shape
used to show that two conflicting message sets can both be handed to
someone as "the ledger".
"""

from __future__ import annotations

from dataclasses import replace

from .blocktree import BlockIndex, BlockSetView
from .engine import ExecutionConfig, ProcessorSpec
from .errors import ConfigError
from .messages import Message, make_block
from .network import (CustomTableRule, SynchronySchedule, TimingRule,
                      build_timing_rule)
from .permitter import PermitRequest, PermitResponse
from .protocols import ObserverStrategy, StepContext, Strategy

# ---------------------------------------------------------------------------
# private-fork double spend
# ---------------------------------------------------------------------------


class PrivateForkStrategy(Strategy):
    """Withhold a fork until the public side confirms a victim block.

    Rounds: fork at the current public tip, request work for blocks on
    the private fork only (the presented message set omits the public
    blocks that outrun it, so the fork tip is the longest chain of the
    presented set), and release once

    * the public chain has grown ``confirm_k + 1`` past the fork base —
      honest depth-``confirm_k`` confirmation has then locked in a
      post-fork block — and
    * the private fork is ``depth_margin`` longer than the public chain,
      so release flips every honest longest-chain tip.

    A round that falls ``abandon_margin`` behind restarts at the new
    public tip.  Withheld blocks of abandoned rounds are never sent.
    """

    name = "private_fork"

    def __init__(self, confirm_k: int, depth_margin: int = 1,
                 abandon_margin: int | None = 2):
        if confirm_k < 0:
            raise ConfigError("confirmation depth cannot be negative")
        if depth_margin < 1:
            raise ConfigError("release margin must be at least 1")
        if abandon_margin is not None and abandon_margin < 1:
            raise ConfigError("abandon margin must be at least 1 (or None)")
        self.confirm_k = int(confirm_k)
        self.depth_margin = int(depth_margin)
        self.abandon_margin = None if abandon_margin is None else int(abandon_margin)
        self._fork: BlockSetView | None = None
        self._base_len = 1
        self._unreleased: list[Message] = []
        self._reset_next = False
        self.rounds = 0
        self.releases = 0

    def _reset(self, ctx: StepContext) -> None:
        view = ctx.view
        genesis = view.messages[view.index.genesis_id]
        fork = BlockSetView.fresh(view.index, genesis)
        for bid in view.index.ancestry(view.longest_tip)[1:]:
            fork.add(view.messages[bid])
        self._fork = fork
        self._base_len = fork.longest_length
        self._unreleased = []
        self.rounds += 1

    def on_receive(self, ctx: StepContext) -> None:
        if self._fork is None:
            self._reset(ctx)
        for resp in ctx.responses:
            for msg in resp.granted:
                if msg.parent in self._fork.active:
                    self._fork.add(msg)
                    self._unreleased.append(msg)
                # grants answering a round that was since abandoned are stale

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        if self._reset_next:
            self._reset_next = False
            self._reset(ctx)
        pub = ctx.view.longest_length
        priv = self._fork.longest_length
        if (self._unreleased
                and priv >= pub + self.depth_margin
                and pub >= self._base_len + self.confirm_k + 1):
            out = list(self._unreleased)
            self._unreleased = []
            self._reset_next = True
            self.releases += 1
            return out
        if (self.abandon_margin is not None
                and pub - priv >= self.abandon_margin):
            self._reset(ctx)
        return []

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        tip = self._fork.longest_tip
        return [
            PermitRequest(key=key, view=self._fork,
                          candidate=make_block(key, parent=tip))
            for key in ctx.keys
        ]


class StakeWithholdStrategy(Strategy):
    """Timed-lane withholding: hoard leaderships on a private fork.

    Requests leadership for every upcoming slot like the honest strategy,
    but extends a *private* fork (rooted at the public tip as of the
    current round) with each won slot, timestamping blocks with their
    leadership slots.  Every ``period`` slots the whole fork is released
    and a new round starts at the fresh public tip.  Against a density
    confirmation rule a dominated staker's fork carries too few blocks
    per window to forge a witness, so releases should never move anyone's
    confirmed chain — which is exactly what runs using this strategy
    measure.
    """

    name = "stake_withhold"

    def __init__(self, period: int, lookahead: int = 8):
        if period < 1:
            raise ConfigError("release period must be at least one slot")
        self.period = int(period)
        self.lookahead = max(int(lookahead), 1)
        self._queried: set[tuple[object, int]] = set()
        self._leaderships: dict[int, list] = {}
        self._fork: BlockSetView | None = None
        self._withheld: list[Message] = []

    def _refork(self, ctx: StepContext) -> None:
        view = ctx.view
        genesis = view.messages[view.index.genesis_id]
        fork = BlockSetView.fresh(view.index, genesis)
        for bid in view.index.ancestry(view.longest_tip)[1:]:
            fork.add(view.messages[bid])
        self._fork = fork
        self._withheld = []

    def on_receive(self, ctx: StepContext) -> None:
        if self._fork is None:
            self._refork(ctx)
        for resp in ctx.responses:
            if resp.leader is not None:
                self._leaderships.setdefault(resp.leader.slot, []).append(
                    resp.leader.key)

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        keys = self._leaderships.pop(ctx.slot, None)
        if keys:
            block = make_block(min(keys), parent=self._fork.longest_tip,
                               timestamp=ctx.slot)
            self._fork.add(block)
            self._withheld.append(block)
        if ctx.slot % self.period == 0 or ctx.slot == ctx.duration:
            out = list(self._withheld)
            self._refork(ctx)
            return out
        return []

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        requests = []
        hi = min(ctx.slot + self.lookahead, ctx.duration)
        for key in ctx.keys:
            for target in range(ctx.slot + 1, hi + 1):
                if (key, target) in self._queried:
                    continue
                self._queried.add((key, target))
                requests.append(
                    PermitRequest(key=key, view=self._fork, target_slot=target))
        return requests


# ---------------------------------------------------------------------------
# full-simulation withholding
# ---------------------------------------------------------------------------


class _InnerProcessor:
    __slots__ = ("id", "keys", "strategy", "view", "pending")

    def __init__(self, pid, keys, strategy, view):
        self.id = pid
        self.keys = keys
        self.strategy = strategy
        self.view = view
        self.pending: list[PermitResponse] = []


class SimulationAttackerStrategy(Strategy):
    """Privately run an honest roster, then dump its ledger on the world.

    ``inner_processors`` name the simulated roster; the attacker must own
    every key group they use.  ``inner_timing`` delivers the simulation's
    internal messages; give it the same policy and seed as the execution
    this simulation should mirror and the private run reproduces that
    execution exactly.  Public messages are ignored until release.

    ``release`` is either a fixed slot or ``"adaptive"``: release at the
    first slot where the inner chain is long enough to flip every honest
    tip (``margin`` blocks ahead of the public chain) *and* both sides
    have depth-``confirm_k`` confirmed a post-genesis block, so release
    forces a confirmed-chain reorganization.
    """

    name = "simulation_release"

    def __init__(self, inner_processors: list[ProcessorSpec],
                 inner_timing: TimingRule, confirm_k: int,
                 release: int | str = "adaptive", margin: int = 1):
        if isinstance(release, str) and release != "adaptive":
            raise ConfigError(f"unknown release policy {release!r}")
        if not isinstance(release, str) and int(release) < 1:
            raise ConfigError("fixed release slot must be at least 1")
        if not inner_processors:
            raise ConfigError("the simulated roster is empty")
        if confirm_k < 0:
            raise ConfigError("confirmation depth cannot be negative")
        self.confirm_k = int(confirm_k)
        self.margin = int(margin)
        self.release = release
        self._rule = inner_timing
        self._specs = sorted(inner_processors, key=lambda s: s.id)
        ids = [s.id for s in self._specs]
        if len(set(ids)) != len(ids):
            raise ConfigError("simulated processor ids must be unique")
        self._inner: dict[str, _InnerProcessor] | None = None
        self._queue: dict[int, list[tuple[str, str]]] = {}
        self._store: dict[str, Message] = {}
        self._held: dict[str, set[str]] = {}
        self._order: list[Message] = []  # inner broadcasts, causal order
        self._key_home: dict[str, str] = {}
        self._requests: list[PermitRequest] = []
        self._released = False
        self.released_at: int | None = None

    # -- inner machinery ----------------------------------------------------

    def _build(self, ctx: StepContext) -> None:
        genesis = ctx.view.messages[ctx.view.index.genesis_id]
        index = BlockIndex(genesis)  # private tree, merged on release
        self._store[genesis.id] = genesis
        self._inner = {}
        for spec in self._specs:
            view = BlockSetView.fresh(index, genesis)
            self._inner[spec.id] = _InnerProcessor(
                spec.id, spec.keys, spec.strategy(), view)
            self._held[spec.id] = {genesis.id}
            for key in spec.keys:
                home = self._key_home.get(key.owner)
                if home is not None and home != spec.id:
                    raise ConfigError(
                        f"key group {key.owner!r} is split across simulated "
                        f"processors {home!r} and {spec.id!r}")
                self._key_home[key.owner] = spec.id

    def _advance_inner(self, ctx: StepContext) -> None:
        """Run one inner slot, mirroring the engine's phase order."""
        slot = ctx.slot
        due = self._queue.pop(slot, [])
        ctxs: dict[str, StepContext] = {}
        for ip in self._inner.values():
            delivered = [self._store[mid] for rcv, mid in due if rcv == ip.id]
            for msg in delivered:
                ip.view.add(msg)
            responses = tuple(ip.pending)
            ip.pending = []
            ictx = StepContext(
                slot=slot, processor_id=ip.id, keys=ip.keys, view=ip.view,
                responses=responses, delivered=tuple(delivered),
                duration=ctx.duration, delta=ctx.delta, epsilon=ctx.epsilon,
                timed=ctx.timed,
            )
            ctxs[ip.id] = ictx
            ip.strategy.on_receive(ictx)
        requests: list[PermitRequest] = []
        for ip in self._inner.values():
            ictx = ctxs[ip.id]
            for msg in ip.strategy.plan_broadcasts(ictx):
                self._store.setdefault(msg.id, msg)
                self._order.append(msg)
                ip.view.add(msg)
                self._held[ip.id].add(msg.id)
                for other in self._inner.values():
                    if other.id == ip.id or msg.id in self._held[other.id]:
                        continue
                    due_slot = self._rule.delivery_slot(
                        ip.id, other.id, msg.id, slot)
                    if due_slot is None or due_slot > ctx.duration:
                        continue
                    self._queue.setdefault(due_slot, []).append(
                        (other.id, msg.id))
                    self._held[other.id].add(msg.id)
            requests.extend(ip.strategy.plan_requests(ictx))
        self._requests = requests

    # -- strategy hooks -------------------------------------------------------

    def on_receive(self, ctx: StepContext) -> None:
        if self._inner is None:
            self._build(ctx)
        if self._released:
            self._requests = []
            return
        for resp in ctx.responses:
            home = self._key_home.get(resp.key.owner)
            if home is not None:
                self._inner[home].pending.append(resp)
        self._advance_inner(ctx)

    def _should_release(self, ctx: StepContext) -> bool:
        if self.release != "adaptive":
            return ctx.slot >= int(self.release)
        inner_len = max(ip.view.longest_length for ip in self._inner.values())
        public_len = ctx.view.longest_length
        return (inner_len >= max(public_len + self.margin, self.confirm_k + 2)
                and public_len >= self.confirm_k + 2)

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        if self._released or not self._order:
            return []
        if self._should_release(ctx):
            self._released = True
            self.released_at = ctx.slot
            return list(self._order)
        return []

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        if self._released:
            return []
        return list(self._requests)


# ---------------------------------------------------------------------------
# isolated observers over a finished run
# ---------------------------------------------------------------------------


def build_isolated_observer_instance(base_config: ExecutionConfig,
                                     base_transcript,
                                     arms: list[tuple[str, list[str], int]],
                                     ) -> ExecutionConfig:
    """Extend a run with observers that each see one chosen ledger slice.

    ``arms`` lists (observer id, message ids, delivery slot).  The new
    config keeps the original roster, seed and timing *realization* —
    grant draws and delays are functions of keys, slots and message
    content, never of the roster — so the original execution replays
    verbatim while each observer receives exactly its slice, all at once,
    at its delivery slot.  The whole run is marked asynchronous: handing
    an isolated processor a bare slice is only admissible when no
    synchrony window ever applies.
    """
    duration = base_config.duration
    schedule = SynchronySchedule.fully_asynchronous(duration)
    if isinstance(base_config.timing, TimingRule):
        base_rule = base_config.timing
    else:
        base_rule = build_timing_rule(
            dict(base_config.timing), schedule=schedule,
            delta=base_config.delta, seed=base_config.seed,
            roster_ids=[p.id for p in base_config.processors])

    known = set(base_transcript.store)
    taken = {p.id for p in base_config.processors}
    entries: dict[tuple[str, str], int | None] = {}
    observers: list[ProcessorSpec] = []
    for obs_id, msg_ids, deliver_slot in arms:
        if obs_id in taken:
            raise ConfigError(f"observer id {obs_id!r} already in the roster")
        taken.add(obs_id)
        if not 1 <= deliver_slot <= duration:
            raise ConfigError(f"delivery slot {deliver_slot} outside the run")
        observers.append(ProcessorSpec(obs_id, (), ObserverStrategy))
        for mid in msg_ids:
            if mid not in known:
                raise ConfigError(f"message {mid!r} is not in the base ledger")
            sent = base_transcript.broadcast_slot(mid)
            if sent is not None and sent >= deliver_slot:
                raise ConfigError(
                    f"message {mid!r} is broadcast at slot {sent}, too late "
                    f"to reach an observer at slot {deliver_slot}")
            if sent is not None:
                entries[(obs_id, mid)] = deliver_slot

    rule = CustomTableRule(base_rule, entries,
                           {o.id for o in observers}, duration)
    return replace(
        base_config,
        schedule=schedule,
        timing=rule,
        processors=[*base_config.processors, *observers],
        label=f"{base_config.label}+observers",
    )
