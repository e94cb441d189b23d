"""Reference protocols and confirmation rules.

A protocol is a deterministic state machine driven once per slot through
three hooks mirroring the slot order: ``on_receive`` (messages and
permitter responses arrive), ``plan_broadcasts``, ``plan_requests``.
All randomness lives in the permitter and the timing rule, never in a
protocol, which is what makes paired executions comparable.

Two honest families ship here:

* the work-style longest-chain protocol (untimed, single budget): each
  slot every key submits one candidate block extending the longest chain
  tip; granted candidates are broadcast immediately;
* the stake-style longest-chain protocol (timed, multi budget): each key
  asks for leadership of upcoming slots inside a lookahead window; a key
  that holds leadership for the current slot broadcasts one block,
  timestamped with the slot, extending the longest chain tip.

Confirmation rules turn a message set into a confirmed chain:

* depth confirmation: the longest chain minus its last ``k`` blocks
  (genesis is always confirmed);
* density certificates: a chain prefix of length ``i`` is confirmed when
  enough distinct timestamped blocks hang off its leaf inside the i-th
  window of a fixed slot grid.  The witness count threshold and window
  length are chosen so that, for a bounded adversary, forging a witness
  or starving an honest one has probability below the target across the
  whole grid (two-sided tail bound, union over windows).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .blocktree import BlockIndex, BlockSetView, complete_in, longest_chain_tip
from .errors import ConfigError
from .messages import Message, PublicKey, make_block
from .permitter import PermitRequest, PermitResponse
from .resource_pool import as_fraction

# ---------------------------------------------------------------------------
# protocol step interface
# ---------------------------------------------------------------------------


@dataclass
class StepContext:
    """Everything a protocol may lawfully see at one slot."""

    slot: int
    processor_id: str
    keys: tuple[PublicKey, ...]
    view: BlockSetView
    responses: tuple[PermitResponse, ...]
    delivered: tuple[Message, ...]
    duration: int
    delta: int
    epsilon: float
    timed: bool


class Strategy:
    """Base protocol: receive, broadcast, request — in that order."""

    name = "abstract"

    def on_receive(self, ctx: StepContext) -> None:
        pass

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        return []

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        return []


class ObserverStrategy(Strategy):
    """Receives and confirms, broadcasts and requests nothing."""

    name = "observer"


class HonestWorkStrategy(Strategy):
    """Longest-chain block production under the work permitter."""

    name = "work_honest"

    def __init__(self):
        self._pending: list[Message] = []

    def on_receive(self, ctx: StepContext) -> None:
        for resp in ctx.responses:
            for msg in resp.granted:
                if msg.id not in ctx.view:
                    self._pending.append(msg)

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        out = [m for m in self._pending if m.id not in ctx.view]
        self._pending = []
        return out

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        requests = []
        for key in ctx.keys:
            candidate = make_block(key, parent=ctx.view.longest_tip)
            requests.append(PermitRequest(key=key, view=ctx.view, candidate=candidate))
        return requests


class HonestStakeStrategy(Strategy):
    """Longest-chain block production under the stake permitter.

    Leadership for slot t' must be requested at t'-1 or earlier, so the
    window queried each slot starts one slot ahead.  A processor never
    broadcasts two blocks with the same timestamp: if several of its keys
    hold leadership for one slot, the smallest key label produces.
    """

    name = "stake_honest"

    def __init__(self, lookahead: int = 8):
        self.lookahead = max(int(lookahead), 1)
        self._queried: set[tuple[PublicKey, int]] = set()
        self._leaderships: dict[int, list[PublicKey]] = {}

    def on_receive(self, ctx: StepContext) -> None:
        for resp in ctx.responses:
            if resp.leader is not None:
                self._leaderships.setdefault(resp.leader.slot, []).append(resp.leader.key)

    def plan_broadcasts(self, ctx: StepContext) -> list[Message]:
        keys = self._leaderships.pop(ctx.slot, None)
        if not keys:
            return []
        key = min(keys)
        block = make_block(key, parent=ctx.view.longest_tip, timestamp=ctx.slot)
        return [block]

    def plan_requests(self, ctx: StepContext) -> list[PermitRequest]:
        requests = []
        # the permitter rejects targets past slot + lookahead, so stay inside
        hi = min(ctx.slot + self.lookahead, ctx.duration)
        for key in ctx.keys:
            for target in range(ctx.slot + 1, hi + 1):
                if (key, target) in self._queried:
                    continue
                self._queried.add((key, target))
                requests.append(
                    PermitRequest(key=key, view=ctx.view, target_slot=target)
                )
        return requests


# ---------------------------------------------------------------------------
# attachment
# ---------------------------------------------------------------------------

ATTACH_PREFIX = "attach:"


def attachment_of(msg: Message) -> str | None:
    """The block a message is attached to.

    Blocks attach to themselves.  Payload messages may attach to a block
    by convention through an ``attach:<block_id>`` payload prefix;
    anything else is unattached.
    """
    if msg.is_block:
        return msg.id
    if msg.payload.startswith(ATTACH_PREFIX):
        return msg.payload[len(ATTACH_PREFIX):]
    return None


# ---------------------------------------------------------------------------
# confirmation rules
# ---------------------------------------------------------------------------


class ConfirmationRule:
    """Maps message sets to confirmed chains."""

    name = "abstract"

    def confirm(self, msg_ids, index: BlockIndex) -> tuple[str, ...]:
        """Confirmed chain (genesis first) for an arbitrary message set."""
        raise NotImplementedError

    def make_tracker(self, view: BlockSetView):
        """Incremental per-view tracker used by the engine each slot."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"family": self.name}


class KDeepRule(ConfirmationRule):
    """Longest chain truncated by ``k`` blocks; genesis always stays."""

    name = "k_deep"

    def __init__(self, k: int):
        if k < 0:
            raise ConfigError("confirmation depth cannot be negative")
        self.k = int(k)

    def confirm(self, msg_ids, index: BlockIndex) -> tuple[str, ...]:
        blocks = {m for m in msg_ids if m in index}
        tip = longest_chain_tip(blocks, index)
        if tip is None:
            return ()
        chain = index.ancestry(tip)
        return chain[: max(1, len(chain) - self.k)]

    def make_tracker(self, view: BlockSetView):
        return _KDeepTracker(self.k, view)

    def describe(self) -> dict:
        return {"family": self.name, "k": self.k}


class _KDeepTracker:
    def __init__(self, k: int, view: BlockSetView):
        self.k = k
        self.view = view

    def on_block(self, block: Message) -> None:
        pass  # the view already tracks the longest active tip

    def current(self) -> tuple[str | None, int]:
        tip = self.view.longest_tip
        length = self.view.index.height(tip) + 1
        confirmed_len = max(1, length - self.k)
        return self.view.index.ancestor_at_height(tip, confirmed_len - 1), confirmed_len


@dataclass(frozen=True)
class DensityWitness:
    """Evidence confirming a chain prefix of length ``chain_len``.

    The chain's blocks all predate the window; ``block_count`` distinct
    blocks with timestamps inside the window hang off the chain's leaf.
    """

    interval_index: int
    interval: tuple[int, int]
    leaf: str
    chain_len: int
    block_count: int
    threshold: float


class DensityCertificateRule(ConfirmationRule):
    """Chain confirmation by timestamped block density on a slot grid.

    Grid: window i covers [i * spacing, i * spacing + interval_len].
    A chain prefix of length i (genesis counted) whose blocks are all
    timestamped before the window start is confirmed when at least
    ``threshold`` blocks timestamped inside window i descend from its
    leaf.  The empty set confirms nothing.
    """

    name = "density_certificate"

    def __init__(self, spacing: int, interval_len: int, threshold: float,
                 duration: int):
        if spacing <= interval_len:
            raise ConfigError("grid spacing must exceed the window length")
        if interval_len < 1:
            raise ConfigError("window length must be at least one slot")
        if threshold <= 0:
            raise ConfigError("density threshold must be positive")
        self.spacing = int(spacing)
        self.interval_len = int(interval_len)
        self.threshold = float(threshold)
        self.duration = int(duration)

    # -- grid helpers -------------------------------------------------------

    def window(self, i: int) -> tuple[int, int] | None:
        start = i * self.spacing
        end = start + self.interval_len
        if i < 1 or end > self.duration:
            return None
        return (start, end)

    def max_index(self) -> int:
        i = (self.duration - self.interval_len) // self.spacing
        return max(i, 0)

    def window_of_timestamp(self, ts: int) -> int | None:
        if ts is None or ts < self.spacing:
            return None
        i = ts // self.spacing
        if ts - i * self.spacing > self.interval_len:
            return None
        return i if self.window(i) is not None else None

    # -- confirmation -------------------------------------------------------

    def find_witnesses(self, msg_ids, index: BlockIndex,
                       messages: dict[str, Message] | None = None
                       ) -> list[DensityWitness]:
        """All witnesses present inside the message set."""
        present = {m for m in msg_ids if m in index}
        counts: dict[tuple[int, str], int] = {}
        for b in present:
            ts = index.timestamp(b)
            if ts is None:
                continue
            i = self.window_of_timestamp(ts)
            if i is None or index.height(b) < i - 1:
                continue
            leaf = index.ancestor_at_height(b, i - 1)
            counts[(i, leaf)] = counts.get((i, leaf), 0) + 1
        witnesses = []
        for (i, leaf), count in counts.items():
            if count < self.threshold:
                continue
            if not complete_in(leaf, present, index):
                continue  # the witness chain itself must lie in the set
            if index.max_timestamp_up_to_height(leaf, i - 1) >= i * self.spacing:
                continue  # chain blocks must predate the window
            witnesses.append(DensityWitness(
                interval_index=i, interval=self.window(i), leaf=leaf,
                chain_len=i, block_count=count, threshold=self.threshold,
            ))
        return witnesses

    def confirm(self, msg_ids, index: BlockIndex) -> tuple[str, ...]:
        best: DensityWitness | None = None
        for w in self.find_witnesses(msg_ids, index):
            if (best is None or w.chain_len > best.chain_len
                    or (w.chain_len == best.chain_len and w.leaf < best.leaf)):
                best = w
        if best is None:
            return ()
        return index.ancestry(best.leaf)

    def make_tracker(self, view: BlockSetView):
        return _DensityTracker(self, view)

    def describe(self) -> dict:
        return {"family": self.name, "spacing": self.spacing,
                "interval_len": self.interval_len, "threshold": self.threshold,
                "duration": self.duration}


class _DensityTracker:
    """Incremental witness counting over one growing view."""

    def __init__(self, rule: DensityCertificateRule, view: BlockSetView):
        self.rule = rule
        self.view = view
        self.counts: dict[tuple[int, str], int] = {}
        self.best: tuple[int, str] | None = None

    def on_block(self, block: Message) -> None:
        index = self.view.index
        ts = block.timestamp
        i = self.rule.window_of_timestamp(ts) if ts is not None else None
        if i is None or index.height(block.id) < i - 1:
            return
        leaf = index.ancestor_at_height(block.id, i - 1)
        if index.max_timestamp_up_to_height(leaf, i - 1) >= i * self.rule.spacing:
            return
        key = (i, leaf)
        self.counts[key] = self.counts.get(key, 0) + 1
        if self.counts[key] >= self.rule.threshold:
            if (self.best is None or i > self.best[0]
                    or (i == self.best[0] and leaf < self.best[1])):
                self.best = key

    def current(self) -> tuple[str | None, int]:
        if self.best is None:
            return (None, 0)
        i, leaf = self.best
        return (leaf, i)


def confirm_k_deep(msg_ids, k: int, index: BlockIndex) -> tuple[str, ...]:
    return KDeepRule(k).confirm(msg_ids, index)


def confirm_density_certificate(msg_ids, rule: DensityCertificateRule,
                                index: BlockIndex) -> tuple[str, ...]:
    return rule.confirm(msg_ids, index)


# ---------------------------------------------------------------------------
# density rule arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductionProfile:
    """Per-slot block production shape implied by the leader rate.

    ``rate`` is the per-slot leader rate; key counts bound the number of
    independent per-slot lotteries each side can hold (known here because
    the stake pool is sized).  ``total`` is the scalar pool total for
    constant pools, recorded for reporting.
    """

    rate: float
    honest_keys: int = 1
    adversary_keys: int = 1
    total: Fraction = Fraction(1)

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ConfigError("per-slot leader rate must lie in (0, 1]")
        if self.honest_keys < 1 or self.adversary_keys < 1:
            raise ConfigError("each side needs at least one key")

    def worst_case_shares(self, theta_bound) -> tuple[Fraction, Fraction]:
        th = as_fraction(theta_bound)
        return th / (th + 1), Fraction(1) / (th + 1)

    def per_slot_gap(self, theta_bound) -> float:
        th = float(as_fraction(theta_bound))
        return self.rate * (th - 1) / (2 * (th + 1))

    def expected_honest(self, theta_bound, interval_len: int) -> float:
        h, _ = self.worst_case_shares(theta_bound)
        return self.rate * float(h) * interval_len

    def expected_adversary(self, theta_bound, interval_len: int) -> float:
        _, a = self.worst_case_shares(theta_bound)
        return self.rate * float(a) * interval_len


def density_threshold(theta_bound, eps_prime: float, profile: ProductionProfile,
                      interval_len: int, duration: int) -> float:
    """Block-count threshold separating honest from adversary production.

    The midpoint between the worst-case expected block counts of the two
    sides over the window.  With shares summing to one this is
    ``interval_len * rate / 2``; the domination bound enters through the
    tail gap used in interval_length_r, not through the midpoint.
    """
    th = as_fraction(theta_bound)
    if th <= 1:
        raise ConfigError("domination bound must exceed 1")
    hi = profile.expected_honest(theta_bound, interval_len)
    lo = profile.expected_adversary(theta_bound, interval_len)
    return (hi + lo) / 2


def _tail_budget(eps_prime: float, duration: int, interval_len: int) -> float:
    return eps_prime / (2 * math.ceil(duration / interval_len))


def _two_sided_tail(r: int, gap: float, profile: ProductionProfile) -> float:
    miss = math.exp(-2 * r * gap * gap / profile.honest_keys)
    forge = math.exp(-2 * r * gap * gap / profile.adversary_keys)
    return miss + forge


def interval_length_r(theta_bound, eps_prime: float, profile: ProductionProfile,
                      duration: int) -> int:
    """Smallest window length making the two-sided tail bound hold.

    Per window of length r, the chance the honest side misses the
    threshold plus the chance the adversary reaches it is bounded (per-
    key-per-slot Bernoulli cells, Hoeffding two-sided) by
    exp(-2 r g^2 / K_h) + exp(-2 r g^2 / K_a), with g the per-slot
    expectation gap to the midpoint.  That sum must not exceed the
    per-window share of eps', eps' / (2 * ceil(duration / r)).  Both
    sides are monotone in r, so the smallest admissible r is found by
    doubling then bisecting.  Grows like ln(duration / eps'), shrinks as
    the domination bound grows.
    """
    th = as_fraction(theta_bound)
    if th <= 1:
        raise ConfigError("domination bound must exceed 1")
    if not 0 < eps_prime < 1:
        raise ConfigError("error budget must lie in (0, 1)")
    gap = profile.per_slot_gap(theta_bound)
    if gap <= 0:
        raise ConfigError("per-slot gap must be positive")

    def ok(r: int) -> bool:
        return _two_sided_tail(r, gap, profile) <= _tail_budget(eps_prime, duration, r)

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > 2**40:
            raise ConfigError("no admissible window length below 2^40 slots")
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
