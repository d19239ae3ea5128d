"""User/wallet behavior: vault solving, recovery, watchers, honest bookkeeping."""

import pytest

from dotsim import harness
from dotsim.errors import BeforeRelease, NotYetSolved


def deposit_scn(**over):
    scn = {
        "name": "ua", "seed": 2, "ledger": "scriptless", "delta": 10,
        "backend": {"kind": "tee"},
        "participants": ["alice", "bob"],
        "funding": [{"aid": "a1", "owner": "alice", "round": 0, "recovery_time": 40}],
        "script": [], "faults": [], "horizon": 90, "oracle": False,
    }
    scn.update(over)
    return scn


def test_deposit_orders_backup_before_funding():
    rep = harness.run(deposit_scn())
    rt = rep["_runtime"]
    stored = next(e for e in rt.sim.trace_events if e["kind"] == "artifact_stored")
    minted = next(e for e in rt.sim.trace_events if e["kind"] == "ledger_genesis")
    assert (stored["round"], 0) <= (minted["round"], 1)
    assert rt.chain.query("a1") == rt.enclaves["alice"].assets["a1"].pk_a


def test_failed_getpk_means_no_funding():
    scn = deposit_scn(funding=[{"aid": "a1", "owner": "alice", "round": 5,
                                "recovery_time": 3}])  # deadline already past
    rep = harness.run(scn)
    assert rep["ownership"]["a1"]["via"] == "unfunded"
    assert any(f["sid"] == "dep-a1" for f in rep["failed_ops"])


def test_solver_finishes_exactly_at_release():
    rep = harness.run(deposit_scn())
    rt = rep["_runtime"]
    solved = next(e for e in rt.sim.trace_events if e["kind"] == "artifact_solved")
    assert solved["round"] == 40


def test_recover_before_release_and_before_solve():
    scn = deposit_scn(faults=[{"kind": "crash", "target": "tee:alice", "round": 3}],
                      policies={"auto_recover": False})
    rt = harness.build_runtime(scn)
    rt.sim.run_until(20)
    alice = rt.users["alice"]
    with pytest.raises(BeforeRelease):
        alice.recover("a1")
    rt.sim.run_until(40)
    alice.recover("a1")  # release reached, puzzle solved at exactly 40
    rt.sim.run_until(55)
    assert rt.chain.query("a1") == alice.wallet.pk


def test_not_yet_solved_distinct_from_before_release():
    # A timelock-ledger artifact is instantly "solved"; a puzzle one is not.
    scn = deposit_scn(policies={"auto_recover": False},
                      faults=[{"kind": "crash", "target": "tee:alice", "round": 3}])
    rt = harness.build_runtime(scn)
    alice = rt.users["alice"]
    rt.sim.run_until(10)
    entry = alice.vault["a1"][0]
    entry.artifact = entry.artifact  # still solving
    assert entry.solved_tx is None
    with pytest.raises(BeforeRelease):
        alice.recover("a1")


def test_recovery_applied_within_delta_worst_case():
    scn = deposit_scn(faults=[{"kind": "crash", "target": "tee:alice", "round": 3}],
                      policies={"inclusion_delay": {"by_party": {"alice": "max"}}})
    rep = harness.run(scn)
    rt = rep["_runtime"]
    sub = next(e for e in rt.sim.trace_events if e["kind"] == "recovery_submitted")
    inc = next(e for e in rt.sim.trace_events if e["kind"] == "ledger_included"
               and e["detail"]["txid"] == sub["detail"]["txid"])
    assert sub["round"] == 40
    assert inc["detail"]["applied"]
    assert inc["round"] - sub["round"] <= 10
    assert rep["ownership"]["a1"] == {"party": "alice", "via": "chain"}


def test_zero_onchain_on_faultless_pay_and_swap():
    scn = deposit_scn(
        funding=[{"aid": "a1", "owner": "alice", "round": 0, "recovery_time": 80},
                 {"aid": "c1", "owner": "alice", "round": 0, "recovery_time": 95}],
        script=[{"round": 2, "op": "pay", "sid": "p1", "aid": "a1",
                 "from": "alice", "to": "bob"},
                {"round": 5, "op": "swap", "sid": "s1", "initiator": "bob",
                 "responder": "alice", "aid_a": "a1", "aid_b": "c1"}],
        horizon=140)
    rep = harness.run(scn)
    assert not rep["failed_ops"]
    assert rep["onchain_submissions"] == 0
    assert rep["ok"]


def test_crashed_user_stops_solving():
    scn = deposit_scn(faults=[{"kind": "crash", "target": "tee:alice", "round": 3},
                              {"kind": "crash", "target": "alice", "round": 10}])
    rep = harness.run(scn)
    rt = rep["_runtime"]
    entry = rt.users["alice"].vault["a1"][0]
    assert entry.solved_tx is None  # solving halted well before release
    assert not any(e["kind"] == "recovery_submitted" for e in rt.sim.trace_events)
    assert rep["ownership"]["a1"]["via"] == "stuck"


def test_stale_recovery_race_newest_owner_wins():
    # alice pays bob, then dishonestly replays her superseded artifact.
    scn = deposit_scn(
        funding=[{"aid": "a1", "owner": "alice", "round": 0, "recovery_time": 40}],
        script=[{"round": 2, "op": "pay", "sid": "p1", "aid": "a1",
                 "from": "alice", "to": "bob"},
                {"round": 3, "op": "backup", "party": "bob", "aid": "a1"}],
        faults=[{"kind": "crash", "target": "tee:bob", "round": 8}],
        policies={"stale_recovery": ["alice"],
                  "inclusion_delay": {"by_party": {"bob": "max", "alice": 0}}},
        horizon=100)
    rep = harness.run(scn)
    rt = rep["_runtime"]
    subs = [e for e in rt.sim.trace_events if e["kind"] == "recovery_submitted"]
    assert {e["src"] for e in subs} == {"alice", "bob"}
    # bob's artifact releases delta earlier; his transaction applies, alice's is stale
    assert rt.chain.query("a1") == rt.users["bob"].wallet.pk
    rejected = [r for r in rt.chain.tx_log if r.reason == "BadSig"]
    assert rejected


def test_watcher_fires_once():
    scn = {
        "name": "w", "seed": 3, "ledger": "scriptless", "delta": 10,
        "backend": {"kind": "tee"},
        "participants": ["alice", "bob"],
        "funding": [{"aid": "a1", "owner": "alice", "round": 0, "recovery_time": 80},
                    {"aid": "b1", "owner": "bob", "round": 0, "recovery_time": 105}],
        "script": [{"round": 2, "op": "swap", "sid": "s1", "initiator": "alice",
                    "responder": "bob", "aid_a": "a1", "aid_b": "b1"}],
        "faults": [{"kind": "crash", "target": "tee:bob", "round": 4}],
        "horizon": 110, "oracle": False,
    }
    rep = harness.run(scn)
    rt = rep["_runtime"]
    fired = [e for e in rt.sim.trace_events if e["kind"] == "watcher_fired"]
    assert len([e for e in fired if e["detail"]["kind"] == "submit_own"]) == 1
    assert len([e for e in fired if e["detail"]["kind"] == "extract"]) == 1
    assert rep["ok"]


def test_pay_external_receipt_ready_to_broadcast():
    scn = deposit_scn(script=[{"round": 3, "op": "pay_external", "party": "alice",
                               "aid": "a1"}])
    rep = harness.run(scn)
    receipt = next(r for r in rep["receipts"] if r["kind"] == "pay_external")
    assert receipt["ready_to_broadcast"]
    rt = rep["_runtime"]
    entry = rt.users["alice"].vault["a1"][-1]
    assert entry.solved_tx is not None and entry.release == 3


def test_backend_equivalent_deposit_outcome():
    tee = harness.run(deposit_scn(oracle=False))
    dtc = harness.run(deposit_scn(backend={"kind": "dtc", "n": 4, "t": 3},
                                  ledger="timelock", oracle=False))
    for rep in (tee, dtc):
        rt = rep["_runtime"]
        assert "a1" in rt.chain.assets
        assert rt.users["alice"].vault["a1"][0].artifact.release == 40
