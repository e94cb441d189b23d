"""Shared builders for the test suite."""

from fractions import Fraction

import pytest

from permitsim.blocktree import BlockIndex, BlockSetView
from permitsim.engine import ExecutionConfig, ProcessorSpec
from permitsim.messages import PublicKey, genesis_block, make_block
from permitsim.network import SynchronySchedule
from permitsim.permitter import StakePermitter, WorkPermitter
from permitsim.protocols import (HonestStakeStrategy, HonestWorkStrategy,
                                 KDeepRule)
from permitsim.resource_pool import SIZED, ConstantBalancePool, StakePool


def build_chain(index: BlockIndex, signer: PublicKey, length: int,
                parent: str | None = None, *, timestamp=None, tag=""):
    """Append ``length`` blocks under ``parent`` (default: genesis)."""
    tip = parent if parent is not None else index.genesis_id
    out = []
    for i in range(length):
        ts = timestamp(i) if callable(timestamp) else timestamp
        blk = make_block(signer, tip, timestamp=ts, payload=f"{tag}{i}")
        index.add(blk)
        out.append(blk)
        tip = blk.id
    return out


@pytest.fixture
def genesis():
    return genesis_block(timed=False)


@pytest.fixture
def index(genesis):
    return BlockIndex(genesis)


@pytest.fixture
def view(index, genesis):
    return BlockSetView.fresh(index, genesis)


def work_config(*, duration=300, processors=3, rate=Fraction(1, 10),
                confirm_k=4, delta=2, delay=1, seed=5, label="work-run",
                extra_specs=(), balances=None) -> ExecutionConfig:
    """A small all-honest work-lane configuration."""
    if balances is None:
        balances = {PublicKey(f"p{i}", 0): Fraction(1)
                    for i in range(processors)}
    specs = [ProcessorSpec(id=key.owner, keys=(key,),
                           strategy=HonestWorkStrategy)
             for key in balances]
    specs.extend(extra_specs)
    return ExecutionConfig(
        duration=duration,
        delta=delta,
        epsilon=0.1,
        timed=False,
        schedule=SynchronySchedule.fully_synchronous(duration),
        timing={"policy": "uniform_delay", "delay": delay},
        pool=ConstantBalancePool(balances, mode=SIZED),
        permitter=WorkPermitter(rate),
        confirmation=KDeepRule(confirm_k),
        processors=specs,
        seed=seed,
        label=label,
    )


def stake_config(*, duration=300, stakes=None, rate=Fraction(1, 4),
                 lookahead=6, confirm_k=4, delta=2, delay=1, seed=5,
                 label="stake-run") -> ExecutionConfig:
    """A small all-honest stake-lane configuration."""
    if stakes is None:
        stakes = {PublicKey("s0", 0): 2, PublicKey("s1", 0): 1}
    specs = [ProcessorSpec(id=key.owner, keys=(key,),
                           strategy=lambda la=lookahead: HonestStakeStrategy(
                               lookahead=la))
             for key in stakes]
    return ExecutionConfig(
        duration=duration,
        delta=delta,
        epsilon=0.1,
        timed=True,
        schedule=SynchronySchedule.fully_synchronous(duration),
        timing={"policy": "uniform_delay", "delay": delay},
        pool=StakePool(stakes),
        permitter=StakePermitter(rate, lookahead=lookahead),
        confirmation=KDeepRule(confirm_k),
        processors=specs,
        seed=seed,
        label=label,
    )
