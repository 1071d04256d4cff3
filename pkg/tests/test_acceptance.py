"""Acceptance criteria 1-10; the terminal summary prints one line per criterion."""

import dataclasses
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsim.anchor import ANCHOR_ACCOUNT, LeafStatus, Outcome
from anchorsim.audit import audit_continuously
from anchorsim.bench import ExperimentConfig, run_experiment, summarize
from anchorsim.chain import NodeMode, PublicAnchor
from anchorsim.faults import fabricate_public_root, tamper_stored_tree, tamper_tenant_state
from anchorsim.merkle import (
    LeafRecord,
    MerkleMap,
    deserialize_map,
    map_prove,
    serialize_map,
    verify_proof,
)

from conftest import platform_for, write_batches

pytestmark = pytest.mark.acceptance

# -- shared runs --------------------------------------------------------------


def paper_overload():
    base = ExperimentConfig.for_test(3, scale="paper", seed=0)
    return dataclasses.replace(base, profile=base.profile.truncated(660.0), max_duration=660.0, drain=False)


@pytest.fixture(scope="module")
def paper_run():
    started = time.perf_counter()
    series = run_experiment(paper_overload())
    return series, time.perf_counter() - started


def audited_run(test_id, **kwargs):
    """Run a desk test with a continuous auditor on every tenant."""
    auditors = {}
    holder = {}

    def setup(platform):
        holder["p"] = platform
        for name in platform.tenants:
            auditors[name] = platform.auditor(name)
            audit_continuously(platform.env, auditors[name], 60.0)

    series = run_experiment(ExperimentConfig.for_test(test_id, seed=7, **kwargs), setup=setup)
    p = holder["p"]
    for a in auditors.values():
        a.poll(p.env.now + a.grace)
    return series, auditors, p


@pytest.fixture(scope="module")
def desk_tests():
    return {n: audited_run(n) for n in (1, 2, 3, 4)}


@pytest.fixture(scope="module")
def idle_run():
    return run_experiment(ExperimentConfig(scale="desk", max_duration=600.0, seed=7))


# -- 1, 2: throughput cap at paper parameters ----------------------------------


@pytest.mark.criterion(1, "paper-scale plateau 15.2 tps, 76 txs per block, under 30 s wall")
def test_paper_plateau_and_block_fill(paper_run):
    series, wall = paper_run
    s = summarize(series)
    alpha = series.tenants["alpha"]
    assert s.cap_tps == pytest.approx(15.2)
    assert s.saturated_minutes >= 10
    assert s.plateau_tps == pytest.approx(15.2, rel=0.02)
    per_minute = alpha.included[alpha.saturated] / 60
    assert np.all(np.abs(per_minute - 15.2) <= 0.02 * 15.2)
    blocks = alpha.block_counts
    minute = (blocks[:, 0] // 60).astype(int)
    in_window = np.isin(minute, np.flatnonzero(alpha.saturated))
    assert in_window.sum() >= 120
    assert np.all(blocks[in_window, 1] == 76)
    assert wall < 30.0


@pytest.mark.criterion(2, "paper-scale ID creation 304 IDs/s")
def test_paper_id_rate(paper_run):
    s = summarize(paper_run[0])
    assert s.id_rate == pytest.approx(304.0, rel=0.02)
    assert s.id_rate == pytest.approx(s.plateau_tps * 20)


# -- 3: backlog drain ------------------------------------------------------------


@pytest.mark.criterion(3, "desk Test 3 backlog drains to zero, errors <= 0.01%")
def test_backlog_drains(desk_tests):
    series = desk_tests[3][0]
    s = summarize(series)
    load_end = series.config.profile.end
    assert s.saturated_minutes > 0
    assert series.end_time > load_end
    assert s.final_backlog == 0
    assert s.error_rate <= 1e-4
    assert s.total_included + s.errors == s.total_sent


# -- 4: isolation -----------------------------------------------------------------


@pytest.mark.criterion(4, "Test 4 per-tenant plateau equals solo within 1%, latencies identical")
def test_tenant_isolation(desk_tests):
    multi = desk_tests[4][0]
    assert len(multi.tenants) == 3
    for name, series in multi.tenants.items():
        solo = run_experiment(ExperimentConfig.for_test(3, seed=7, tenants=(name,)))
        solo_plateau = summarize(solo).plateau_tps
        assert summarize(multi).per_tenant_plateau[name] == pytest.approx(solo_plateau, rel=0.01)
        assert np.array_equal(series.latencies, solo.tenants[name].latencies)
        # the shared run lasts until every tenant drains, so it may carry idle trailing minutes
        own = solo.tenants[name].included
        assert np.array_equal(series.included[: len(own)], own)
        assert not series.included[len(own):].any()


# -- 5: anchoring independent of load ----------------------------------------------


@pytest.mark.criterion(5, "anchor round time under overload <= 1.25x idle; negative control delays")
def test_anchor_independent_of_load(desk_tests, idle_run):
    idle_max = idle_run.round_durations.max()
    loaded = desk_tests[3][0]
    assert len(loaded.round_durations) >= 5
    assert loaded.round_durations.max() <= 1.25 * idle_max
    maxima = [desk_tests[n][0].round_durations.max() for n in (1, 2, 3, 4)]
    assert max(maxima) <= 1.25 * min(maxima)

    control = run_experiment(ExperimentConfig.for_test(3, seed=7, overrides={"anchor": {"prioritize": False}}))
    assert control.round_durations.max() > 1.25 * idle_max


# -- 6: constant anchoring cost ----------------------------------------------------


@pytest.mark.criterion(6, "one public transaction per successful round for N = 1, 3, 10")
@pytest.mark.parametrize("n", [1, 3, 10])
def test_one_public_tx_per_round(n):
    p = platform_for([f"t{i}" for i in range(n)], start=True)
    for r in range(4):
        for name in p.tenants:
            write_batches(p, name, 1, tag=f"r{r}")
        p.run(p.env.now + 60)
    p.run(p.env.now + 60)
    history = p.engine.round_history()
    successes = [r for r in history if r.outcome is Outcome.SUCCESS]
    assert len(successes) >= 4
    public = [
        tx for b in p.public.chain.blocks(1) for tx in b.transactions
        if isinstance(tx.payload, PublicAnchor) and tx.sender == ANCHOR_ACCOUNT
    ]
    assert len(public) == len(successes)
    assert sorted(tx.payload.record.round_id for tx in public) == [r.round_id for r in successes]
    for r in successes:
        assert r.transactions_sent - len(r.tenant_store_txs) == 1


# -- 7: lock and skip ------------------------------------------------------------


@pytest.mark.criterion(7, "5 s ticks against 30 s commits: >= 4 consecutive skips, one round at a time")
def test_lock_skips_ticks():
    p = platform_for(start=True, anchor={"anchor_interval": 5})
    p.run(600)
    engine = p.engine
    history = engine.round_history()
    assert engine.max_concurrent_rounds == 1
    started = [i for i, r in enumerate(history) if r.outcome is not Outcome.SKIPPED]
    assert len(started) >= 10
    gaps = [b - a - 1 for a, b in zip(started, started[1:])]
    assert min(gaps) >= 4
    ordered = sorted((r for r in history if r.outcome is not Outcome.SKIPPED), key=lambda r: r.started)
    for prev, cur in zip(ordered, ordered[1:]):
        assert cur.started >= prev.finished


# -- 8: audit soundness -------------------------------------------------------------


def _fresh():
    p = platform_for()
    for r in range(2):
        for name in p.tenants:
            write_batches(p, name, 2, tag=f"c8-{r}")
        p.run(p.env.now + 3)
        p.engine.run_once()
    return p


@pytest.mark.criterion(8, "every fault class fails the audit; honest Tests 1-4 all pass")
@settings(max_examples=25, deadline=None)
@given(
    fault=st.sampled_from(["state", "tree", "root"]),
    tenant=st.sampled_from(["alpha", "beta", "gamma"]),
    pick=st.integers(0, 100),
    byte=st.integers(0, 63),
)
def test_faults_fail_audit(fault, tenant, pick, byte):
    p = _fresh()
    chain = p.node(tenant).chain
    if fault == "state":
        height = LeafRecord.decode(p.engine.tree[chain.chain_id]).block_number
        tamper_tenant_state(chain, height, pick=pick, byte=byte)
    elif fault == "tree":
        tamper_stored_tree(chain, p.engine.latest_anchor().round_id, offset=1 + byte)
    else:
        fabricate_public_root(p.engine, bytes([pick]) * 32)
        for name in p.tenants:
            write_batches(p, name, 1, tag="after")
        p.engine.run_once()
    report = p.auditor(tenant).audit()
    assert report.verdict == "fail"


@pytest.mark.criterion(8, "every fault class fails the audit; honest Tests 1-4 all pass")
def test_honest_runs_all_pass(desk_tests):
    total = 0
    for test_id, (series, auditors, platform) in desk_tests.items():
        latest = platform.engine.latest_anchor().round_id
        for name, auditor in auditors.items():
            rounds = [r.anchor_round for r in auditor.reports]
            assert rounds == list(range(1, latest + 1)), (test_id, name)
            assert all(r.passed for r in auditor.reports), (test_id, name)
            total += len(rounds)
    assert total >= 4 * 8


# -- 9: merkle map properties ---------------------------------------------------------

keys = st.binary(min_size=1, max_size=24)
values = st.binary(max_size=48)
maps = st.dictionaries(keys, values, min_size=1, max_size=30)


@pytest.mark.criterion(9, "Merkle map properties over 1000 randomized cases")
@settings(max_examples=1000, deadline=None)
@given(entries=maps, order_seed=st.randoms(use_true_random=False), data=st.data())
def test_merkle_properties(entries, order_seed, data):
    items = list(entries.items())
    shuffled = items[:]
    order_seed.shuffle(shuffled)
    a, b = MerkleMap(), MerkleMap()
    for k, v in items:
        a = a.insert(k, v)
    for k, v in shuffled:
        b = b.insert(k, v)
    assert a.root == b.root == MerkleMap(entries).root

    key = data.draw(st.sampled_from(sorted(entries)))
    proof = map_prove(a, key)
    assert verify_proof(proof, a.root)

    blob = serialize_map(a)
    again = deserialize_map(blob)
    assert again == a and serialize_map(again) == blob

    # flip one byte in one value: the root must move and the old proof must not verify
    value = entries[key]
    mutated = bytes([value[0] ^ (1 << data.draw(st.integers(0, 7)))]) + value[1:] if value else b"\x00"
    changed = a.insert(key, mutated)
    assert changed.root != a.root
    assert not verify_proof(proof, changed.root)


# -- 10: unreachable tenant ---------------------------------------------------------------


@pytest.mark.criterion(10, "unreachable tenant keeps its leaf, round succeeds, later audit passes")
def test_unreachable_tenant_round():
    p = platform_for()
    p.engine.run_once()
    before = p.engine.tree
    for name in p.tenants:
        write_batches(p, name, 1, tag="c10")
    p.run(p.env.now + 3)
    stale = p.node("beta").chain
    stale.fail_over(NodeMode.UNREACHABLE)
    report = p.engine.run_once()
    assert report.outcome is Outcome.SUCCESS
    assert p.engine.tree[stale.chain_id] == before[stale.chain_id]
    assert report.per_tenant[stale.chain_id].status is LeafStatus.TIMED_OUT
    for name in ("alpha", "gamma"):
        cid = p.node(name).chain_id
        assert report.per_tenant[cid].status is LeafStatus.UPDATED
        assert p.engine.tree[cid] != before[cid]
    stale.fail_over(NodeMode.RESTORED)
    p.run(p.env.now + 30)
    audit = p.auditor("beta").audit()
    assert audit.anchor_round == report.record.round_id
    assert audit.passed, audit.summary()
