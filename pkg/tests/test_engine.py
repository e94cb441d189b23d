"""Execution loop: determinism, fault handling, transcript shape."""

from fractions import Fraction

import pytest

from permitsim.engine import (ExecutionConfig, ProcessorSpec, Transcript,
                              run_execution)
from permitsim.errors import ConfigError, ExecutionFault, SettingMismatchError
from permitsim.messages import PublicKey, make_block
from permitsim.network import SynchronySchedule
from permitsim.permitter import PermitRequest, StakePermitter, WorkPermitter
from permitsim.protocols import (HonestWorkStrategy, KDeepRule,
                                 ObserverStrategy, Strategy)
from permitsim.resource_pool import SIZED, ConstantBalancePool

from conftest import stake_config, work_config


class TestDeterminism:
    def test_same_config_same_bytes(self):
        a = run_execution(work_config(duration=120, seed=9))
        b = run_execution(work_config(duration=120, seed=9))
        assert a.to_bytes() == b.to_bytes()

    def test_seed_changes_the_run(self):
        a = run_execution(work_config(duration=120, seed=9))
        b = run_execution(work_config(duration=120, seed=10))
        assert a.to_bytes() != b.to_bytes()

    def test_save_load_round_trip(self, tmp_path):
        t = run_execution(work_config(duration=80))
        path = tmp_path / "run.transcript"
        t.save(path)
        back = Transcript.load(path)
        assert back.to_bytes() == t.to_bytes()
        assert back.roster_ids == t.roster_ids
        assert back.duration == t.duration

    def test_stake_lane_is_deterministic_too(self):
        a = run_execution(stake_config(duration=100))
        b = run_execution(stake_config(duration=100))
        assert a.to_bytes() == b.to_bytes()


@pytest.fixture(scope="module")
def transcript():
    return run_execution(work_config(duration=200, seed=3))


class TestTranscriptQueries:
    def test_ledger_starts_at_genesis_in_broadcast_order(self, transcript):
        ledger = transcript.ledger_ids()
        assert ledger[0] == transcript.genesis.id
        slots = [transcript.broadcast_slot(m) for m in ledger[1:]]
        assert slots == sorted(slots)

    def test_ledger_prefix_by_slot(self, transcript):
        full = transcript.ledger_ids()
        half = transcript.ledger_ids(up_to_slot=100)
        assert full[:len(half)] == half
        assert all(transcript.broadcast_slot(m) <= 100 for m in half[1:])

    def test_no_self_delivery(self, transcript):
        sent_by = {mid: proc for _, proc, mid in transcript.broadcasts}
        for _, receiver, mid in transcript.deliveries:
            assert sent_by[mid] != receiver

    def test_uniform_delay_lands_exactly_delta_later(self, transcript):
        sent_at = {mid: slot for slot, _, mid in transcript.broadcasts}
        for slot, _, mid in transcript.deliveries:
            assert slot == sent_at[mid] + 1   # work_config uses delay=1

    def test_confirmations_are_change_points(self, transcript):
        last: dict[str, tuple] = {}
        for slot, proc, tip, length in transcript.confirmations:
            assert last.get(proc) != (tip, length)
            last[proc] = (tip, length)

    def test_confirmed_series_is_per_slot(self, transcript):
        for proc in transcript.roster_ids:
            series = transcript.confirmed_series(proc)
            assert len(series) == transcript.duration
            lengths = [n for _, n in series]
            assert lengths == sorted(lengths)  # honest run never rolls back

    def test_genesis_has_no_broadcast_slot(self, transcript):
        assert transcript.broadcast_slot(transcript.genesis.id) is None

    def test_grants_carry_the_request_shape(self, transcript):
        assert transcript.grants, "a 200-slot run at rate 1/10 grants blocks"
        for g in transcript.grants:
            assert set(g) == {"slot", "proc", "key", "granted", "leader_slot",
                              "m_digest", "candidate"}
            assert g["granted"] and g["leader_slot"] is None
            assert g["candidate"] in g["granted"]

    def test_delivery_map_keeps_first_arrival(self, transcript):
        first: dict[tuple[str, str], int] = {}
        for slot, receiver, mid in transcript.deliveries:
            first.setdefault((receiver, mid), slot)
        dm = transcript.delivery_map()
        for pair, slot in first.items():
            assert dm[pair] == slot


class TestConfigValidation:
    def test_duplicate_processor_ids(self):
        key = PublicKey("p0", 0)
        dup = ProcessorSpec(id="p0", keys=(PublicKey("px", 0),),
                            strategy=HonestWorkStrategy)
        cfg = work_config(extra_specs=(dup,))
        with pytest.raises(ConfigError, match="unique"):
            run_execution(cfg)

    def test_key_group_split_across_processors(self):
        crook = ProcessorSpec(id="crook", keys=(PublicKey("p0", 1),),
                              strategy=HonestWorkStrategy)
        cfg = work_config(extra_specs=(crook,))
        with pytest.raises(ConfigError, match="claimed by both"):
            run_execution(cfg)

    def test_pool_balance_for_unowned_group(self):
        balances = {PublicKey(f"p{i}", 0): Fraction(1) for i in range(3)}
        balances[PublicKey("ghost", 0)] = Fraction(1)
        cfg = work_config(balances=balances)
        cfg.processors = cfg.processors[:3]
        with pytest.raises(ConfigError, match="ghost"):
            run_execution(cfg)

    def test_timed_mismatch(self):
        cfg = work_config()
        cfg.timed = True
        with pytest.raises(SettingMismatchError):
            run_execution(cfg)

    def test_schedule_duration_mismatch(self):
        cfg = work_config(duration=100)
        cfg.schedule = SynchronySchedule.fully_synchronous(99)
        with pytest.raises(ConfigError, match="duration"):
            run_execution(cfg)

    @pytest.mark.parametrize("field,value", [
        ("duration", 0), ("delta", 0), ("epsilon", 0.0), ("epsilon", 1.0),
    ])
    def test_scalar_bounds(self, field, value):
        cfg = work_config()
        setattr(cfg, field, value)
        with pytest.raises(ConfigError):
            run_execution(cfg)

    def test_strategy_factory_must_return_a_strategy(self):
        cfg = work_config()
        cfg.processors[0] = ProcessorSpec(
            id=cfg.processors[0].id, keys=cfg.processors[0].keys,
            strategy=dict)
        with pytest.raises(ConfigError, match="factory"):
            run_execution(cfg)


class _ForgedBlockStrategy(Strategy):
    """Broadcasts a block it was never granted."""

    def plan_broadcasts(self, ctx):
        if ctx.slot == 3:
            forged = make_block(ctx.keys[0], ctx.view.longest_tip,
                                payload="forged")
            return [forged]
        return []


class _UnownedSignerStrategy(Strategy):
    """Signs with a key belonging to somebody else."""

    def plan_broadcasts(self, ctx):
        if ctx.slot == 3:
            other = PublicKey("p1", 0)
            return [make_block(other, ctx.view.longest_tip, payload="x")]
        return []


class _GreedyRequestStrategy(Strategy):
    """Files two single-budget requests for the same key in one slot."""

    def plan_requests(self, ctx):
        cand = make_block(ctx.keys[0], ctx.view.longest_tip, payload="c")
        req = PermitRequest(ctx.keys[0], ctx.view, candidate=cand)
        return [req, req]


class _UnownedKeyRequestStrategy(Strategy):
    def plan_requests(self, ctx):
        foreign = PublicKey("p1", 0)
        cand = make_block(foreign, ctx.view.longest_tip, payload="c")
        return [PermitRequest(foreign, ctx.view, candidate=cand)]


def _single_swap_config(strategy_cls):
    cfg = work_config(duration=10)
    first = cfg.processors[0]
    cfg.processors[0] = ProcessorSpec(id=first.id, keys=first.keys,
                                      strategy=strategy_cls)
    return cfg


class TestFaults:
    def test_unpermitted_block_faults(self):
        with pytest.raises(ExecutionFault) as exc:
            run_execution(_single_swap_config(_ForgedBlockStrategy))
        assert exc.value.slot == 3
        assert "not permitted" in str(exc.value)

    def test_unowned_signer_faults(self):
        with pytest.raises(ExecutionFault, match="unowned key"):
            run_execution(_single_swap_config(_UnownedSignerStrategy))

    def test_single_budget_allows_one_request_per_key(self):
        with pytest.raises(ExecutionFault, match="two requests"):
            run_execution(_single_swap_config(_GreedyRequestStrategy))

    def test_request_under_unowned_key_faults(self):
        with pytest.raises(ExecutionFault, match="unowned key"):
            run_execution(_single_swap_config(_UnownedKeyRequestStrategy))

    def test_fault_names_the_culprit(self):
        cfg = _single_swap_config(_ForgedBlockStrategy)
        with pytest.raises(ExecutionFault) as exc:
            run_execution(cfg)
        assert exc.value.processor == cfg.processors[0].id


class TestObservers:
    def test_keyless_observer_tracks_the_chain(self):
        watcher = ProcessorSpec(id="watch", keys=(), strategy=ObserverStrategy)
        t = run_execution(work_config(duration=150, extra_specs=(watcher,)))
        series = t.confirmed_series("watch")
        assert series[-1][1] > 1
        # the observer only ever listens
        assert all(proc != "watch" for _, proc, _ in t.broadcasts)
        assert all(g["proc"] != "watch" for g in t.grants)

    def test_observer_lags_producers_by_the_delay(self):
        watcher = ProcessorSpec(id="watch", keys=(), strategy=ObserverStrategy)
        t = run_execution(work_config(duration=150, extra_specs=(watcher,)))
        final = {p: t.confirmed_series(p)[-1][1] for p in t.roster_ids}
        assert max(final.values()) - final["watch"] <= 1
