import json

import pytest
import simpy

from anchorsim.anchor import (
    ANCHOR_ACCOUNT,
    NO_TENANTS,
    PUBLIC_COMMIT_TIMEOUT,
    STATE_DIVERGED,
    AnchorConfig,
    AnchorEngine,
    DuplicateTenant,
    LeafStatus,
    Outcome,
    TenantRegistration,
    export_rounds,
    read_committed_anchor,
)
from anchorsim.chain import TRIE_KEY, Chain, ChainConfig, NodeMode, PublicAnchor, StoreTrie
from anchorsim.faults import corrupt_engine_tree
from anchorsim.merkle import EMPTY_ROOT, LeafRecord, deserialize_map
from anchorsim.sim import ChainNode

from conftest import platform_for, write_batches


def public_txs(platform, kind=PublicAnchor):
    return [
        tx for b in platform.public.chain.blocks(1) for tx in b.transactions
        if isinstance(tx.payload, kind) and tx.sender == ANCHOR_ACCOUNT
    ]


def test_first_round_adds_every_tenant(platform3):
    report = platform3.engine.run_once()
    assert report.outcome is Outcome.SUCCESS
    assert {r.status for r in report.per_tenant.values()} == {LeafStatus.ADDED}
    assert report.record.round_id == 1
    assert report.record.previous_root == EMPTY_ROOT


def test_duplicate_registration(platform3):
    node = next(iter(platform3.tenants.values()))
    with pytest.raises(DuplicateTenant):
        platform3.engine.register_tenant(TenantRegistration(node.chain_id, node))


def test_ten_tenants_ten_leaves():
    p = platform_for([f"t{i}" for i in range(10)])
    p.engine.run_once()
    assert len(p.engine.tree) == 10


def test_three_tenants_one_public_tx_three_stores(platform3):
    for name in platform3.tenants:
        write_batches(platform3, name, 2)
    report = platform3.engine.run_once()
    assert report.outcome is Outcome.SUCCESS
    assert len(public_txs(platform3)) == 1
    assert len(report.tenant_store_txs) == 3
    assert report.transactions_sent == 4
    assert len(platform3.engine.tree) == 3
    for node in platform3.tenants.values():
        stored = deserialize_map(node.chain.read_state(TRIE_KEY))
        assert stored.root == report.record.root


def test_unreachable_tenant_keeps_leaf(platform3):
    p = platform3
    names = list(p.tenants)
    p.engine.run_once()
    before = p.engine.tree
    for name in names:
        write_batches(p, name, 1, tag="second")
    p.run(p.env.now + 5)
    stale = p.node(names[1]).chain
    stale.fail_over(NodeMode.UNREACHABLE)
    report = p.engine.run_once()
    assert report.outcome is Outcome.SUCCESS
    assert report.per_tenant[stale.chain_id].status is LeafStatus.TIMED_OUT
    assert p.engine.tree[stale.chain_id] == before[stale.chain_id]
    for name in (names[0], names[2]):
        cid = p.node(name).chain_id
        assert report.per_tenant[cid].status is LeafStatus.UPDATED
        assert p.engine.tree[cid] != before[cid]
    assert stale.chain_id not in report.tenant_store_txs


def test_stale_tenant_receives_tree_after_restore(platform3):
    p = platform3
    stale = p.node("beta").chain
    stale.fail_over(NodeMode.UNREACHABLE)
    report = p.engine.run_once()
    stale.fail_over(NodeMode.RESTORED)
    p.run(p.env.now + 30)
    stored = deserialize_map(stale.read_state(TRIE_KEY))
    assert stored.root == report.record.root


def test_tampered_engine_tree_diverges(platform3):
    platform3.engine.run_once()
    corrupt_engine_tree(platform3.engine)
    report = platform3.engine.run_once()
    assert report.outcome is Outcome.FAILED and report.reason == STATE_DIVERGED
    assert report.transactions_sent == 0


def test_unchanged_tenants_keep_root(platform3):
    # a round's own StoreTrie moves tenant state, so only silent tenants stay identical
    first = platform3.engine.run_once()
    for node in platform3.tenants.values():
        node.chain.fail_over(NodeMode.UNREACHABLE)
    second = platform3.engine.run_once()
    assert second.outcome is Outcome.SUCCESS
    assert second.record.root == first.record.root
    assert second.record.previous_root == second.record.root
    assert {r.status for r in second.per_tenant.values()} == {LeafStatus.TIMED_OUT}


def test_no_tenants_is_failure():
    env = simpy.Environment()
    pub = ChainNode(env, Chain(ChainConfig.with_authorities("pub", inter_block_time=15, produce_empty_blocks=True)))
    report = AnchorEngine(env, pub).run_once()
    assert report.outcome is Outcome.FAILED and report.reason == NO_TENANTS


def test_simultaneous_ticks_start_one_round(platform3):
    engine = platform3.engine
    assert engine.schedule_tick() == 1
    assert engine.schedule_tick() is None
    platform3.run(100)
    outcomes = [r.outcome for r in engine.round_history()]
    assert sorted(o.value for o in outcomes) == ["skipped", "success"]


def test_history_success_skip_success(platform3):
    engine = platform3.engine
    assert engine.latest_anchor() is None
    engine.schedule_tick()
    platform3.run(10)
    engine.schedule_tick()
    platform3.run(200)
    engine.schedule_tick()
    platform3.run(400)
    history = engine.round_history()
    assert [r.outcome for r in history] == [Outcome.SUCCESS, Outcome.SKIPPED, Outcome.SUCCESS]
    assert engine.latest_anchor().round_id == 2


def test_previous_root_chain_is_unbroken():
    p = platform_for(start=True, anchor={"anchor_interval": 60})
    for i in range(5):
        for name in p.tenants:
            write_batches(p, name, 1, tag=f"r{i}")
        p.run(p.env.now + 60)
    public = p.public.chain
    records = []
    r = 1
    while (rec := read_committed_anchor(public, r)) is not None:
        records.append(rec)
        r += 1
    assert len(records) >= 4
    assert records[0].previous_root == EMPTY_ROOT
    for prev, cur in zip(records, records[1:]):
        assert cur.previous_root == prev.root


def test_commit_deadline_rolls_back_then_adopts_late_commit(platform3):
    engine = platform3.engine
    engine.config = AnchorConfig(commit_deadline=5.0)
    report = engine.run_once()
    assert report.outcome is Outcome.FAILED and report.reason == PUBLIC_COMMIT_TIMEOUT
    assert engine.latest_anchor() is None and len(engine.tree) == 0
    platform3.run(platform3.env.now + 60)
    engine.config = AnchorConfig()
    follow = engine.run_once()
    assert follow.outcome is Outcome.SUCCESS
    assert follow.record.round_id == 2
    assert follow.record.previous_root == report.record.root


def test_ten_minute_interval_never_skips():
    p = platform_for(start=True, preset="paper")
    p.run(3600)
    history = p.engine.round_history()
    assert len(history) == 5
    assert all(r.outcome is Outcome.SUCCESS for r in history)
    assert max(r.duration for r in history) < 600


def test_anchor_transactions_use_priority_fee(platform3):
    write_batches(platform3, "alpha", 1)
    platform3.engine.run_once()
    store = [
        tx for b in platform3.node("alpha").chain.blocks(1) for tx in b.transactions
        if isinstance(tx.payload, StoreTrie)
    ]
    assert store and all(tx.gas_price == platform3.engine.config.app_max_gas_price + 1 for tx in store)
    assert all(tx.sender == ANCHOR_ACCOUNT for tx in store)


def test_leaf_matches_tenant_header(platform3):
    write_batches(platform3, "alpha", 1)
    platform3.run(5)
    report = platform3.engine.run_once()
    chain = platform3.node("alpha").chain
    leaf = LeafRecord.decode(platform3.engine.tree[chain.chain_id])
    header = chain.get_block(leaf.block_number).header
    assert (leaf.state_root, leaf.block_hash) == (header.state_root, header.hash)
    assert report.per_tenant[chain.chain_id].leaf == leaf


def test_export_rounds(platform3, tmp_path):
    platform3.engine.run_once()
    path = tmp_path / "rounds.jsonl"
    export_rounds(platform3.engine.round_history(), path)
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert rows[0]["outcome"] == "success" and rows[0]["record"]["round_id"] == 1
