"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the
per-criterion lines as they complete).
"""

import contextlib
import itertools
import random
import time

import pytest

from dotsim import harness, ledger as ledger_mod
from dotsim.crypto import pkc
from dotsim.crypto.tlp import ConcreteSolver, IdealSolver, TlpOracle, concrete_pgen
from dotsim.errors import SimError
from dotsim.te_dtc import node_id


@contextlib.contextmanager
def criterion(number, description, budget_seconds):
    start = time.time()
    try:
        yield
    except BaseException:
        print("criterion %d (%s): FAIL" % (number, description))
        raise
    elapsed = time.time() - start
    print("criterion %d (%s): PASS in %.2fs (budget %ds)"
          % (number, description, elapsed, budget_seconds))
    assert elapsed < budget_seconds, "runtime budget exceeded"


def fund(aid, owner, t, rnd=0):
    return {"aid": aid, "owner": owner, "round": rnd, "recovery_time": t}


def tee_pay_scn(seed=1):
    return {
        "name": "acc-pay", "seed": seed, "ledger": "scriptless", "delta": 10,
        "backend": {"kind": "tee"}, "participants": ["alice", "bob"],
        "funding": [fund("a1", "alice", 80)],
        "script": [{"round": 2, "op": "pay", "sid": "p1", "aid": "a1",
                    "from": "alice", "to": "bob"}],
        "horizon": 120, "oracle": False,
    }


def dtc_pay_scn(seed=5):
    return {
        "name": "acc-pay-dtc", "seed": seed, "ledger": "timelock", "delta": 10,
        "backend": {"kind": "dtc", "n": 4, "t": 3}, "participants": ["alice", "bob"],
        "funding": [fund("a1", "alice", 80)],
        "script": [{"round": 6, "op": "pay", "sid": "p1", "aid": "a1",
                    "from": "alice", "to": "bob"}],
        "horizon": 130, "oracle": False,
    }


def tee_swap_scn(seed=3, t_b=105, ledger="scriptless"):
    return {
        "name": "acc-swap", "seed": seed, "ledger": ledger, "delta": 10,
        "backend": {"kind": "tee"}, "participants": ["alice", "bob"],
        "funding": [fund("a1", "alice", 80), fund("b1", "bob", t_b)],
        "script": [{"round": 2, "op": "swap", "sid": "s1", "initiator": "alice",
                    "responder": "bob", "aid_a": "a1", "aid_b": "b1"}],
        "horizon": 130, "oracle": False,
    }


def dtc_swap_scn(seed=6, ledger="timelock", faults=()):
    return {
        "name": "acc-swap-dtc", "seed": seed, "ledger": ledger, "delta": 10,
        "backend": {"kind": "dtc", "n": 4, "t": 3}, "participants": ["alice", "bob"],
        "funding": [fund("a1", "alice", 80), fund("b1", "bob", 110)],
        "script": [{"round": 8, "op": "swap", "sid": "s1", "initiator": "alice",
                    "responder": "bob", "aid_a": "a1", "aid_b": "b1"}],
        "faults": list(faults), "horizon": 150, "oracle": False,
    }


def test_criterion_1_optimistic_payment():
    with criterion(1, "optimistic payment round budget, zero on-chain", 1):
        rep = harness.run(tee_pay_scn())
        pay = next(r for r in rep["receipts"] if r["kind"] == "pay")
        assert pay["rounds"] == 2, pay
        assert rep["onchain_submissions"] == 0
        rep = harness.run(dtc_pay_scn())
        pay = next(r for r in rep["receipts"] if r["kind"] == "pay")
        assert pay["rounds"] <= 3 + 3, pay  # figure budget: 3 + t_reshare
        assert rep["onchain_submissions"] == 0


def test_criterion_2_optimistic_swap():
    with criterion(2, "optimistic swap: <=4 rounds, 0 txs, >=3 messages", 1):
        rep = harness.run(tee_swap_scn())
        swaps = [r for r in rep["receipts"] if r["kind"] == "swap"]
        assert len(swaps) == 2
        assert max(r["rounds"] for r in swaps) <= 4, swaps
        assert rep["onchain_submissions"] == 0
        assert rep["messages_by_sid"]["s1"] >= 3
        assert all(f["pass"] for f in rep["fairness"])


def test_criterion_3_fairness_sweep():
    with criterion(3, "single-crash fairness sweep, both backends", 30):
        tee = dict(tee_swap_scn(), oracle=True)
        reports = harness.sweep_crashes(tee)
        dtc = dict(dtc_swap_scn(
            faults=[{"kind": "byzantine_silent", "target": node_id("bob", 4)}]),
            oracle=True)
        reports += harness.sweep_crashes(dtc)
        assert len(reports) >= 16, len(reports)
        failures = [(r["crash_point"], r["fairness"]) for r in reports if not r["ok"]]
        assert not failures, failures


def test_criterion_4_monotonic_recovery_precedence():
    with criterion(4, "monotonic precedence over randomized pay chains", 10):
        for seed in range(100):
            rng = random.Random(seed)
            parties = ["alice", "bob"]
            script = []
            rnd = 2
            holder = 0
            for k in range(10):
                script.append({"round": rnd, "op": "pay", "sid": "p%d" % k,
                               "aid": "a1", "from": parties[holder],
                               "to": parties[1 - holder]})
                holder = 1 - holder
                rnd += 3
                if rng.random() < 0.4:
                    script.append({"round": rnd, "op": "backup",
                                   "party": parties[holder], "aid": "a1"})
                    rnd += 2
            scn = {
                "name": "mono-%d" % seed, "seed": seed, "ledger": "scriptless",
                "delta": 10, "backend": {"kind": "tee"},
                "participants": parties,
                "funding": [fund("a1", "alice", 300)],
                "script": script,
                "policies": {"stale_recovery": parties},
                "horizon": 340, "oracle": False,
            }
            rep = harness.run(scn)
            rt = rep["_runtime"]
            releases = [e["detail"]["release"] for e in rt.sim.trace_events
                        if e["kind"] == "artifact_stored"
                        and e["detail"]["aid"] == "a1"]
            assert all(a - b >= 10 for a, b in zip(releases, releases[1:])), releases
            # forced race: everyone submits at release; only the newest applies
            applied = [r for r in rt.chain.tx_log if r.applied]
            rejected = [r for r in rt.chain.tx_log if r.processed and not r.applied]
            assert len(applied) == 1
            final_holder = parties[holder]
            assert applied[0].tx.pk_dst == rt.users[final_holder].wallet.pk
            assert len(rejected) == len(rt.chain.tx_log) - 1
            assert all(r.reason == "BadSig" for r in rejected)


def test_criterion_5_double_spend_resistance():
    with criterion(5, "double spends abort; conflicting txs exclusive", 10):
        from dotsim.clock_net import Simulation
        for trial in range(100):
            rng = random.Random(1000 + trial)
            # TE level: a second spend of a spent asset always aborts
            scn = tee_swap_scn(seed=trial)
            second = rng.choice([
                {"round": 4, "op": "pay", "sid": "dup", "aid": "a1",
                 "from": "alice", "to": "bob"},
                {"round": 4, "op": "swap", "sid": "dup", "initiator": "alice",
                 "responder": "bob", "aid_a": "a1", "aid_b": "b1"},
                {"round": 3, "op": "pay", "sid": "dup", "aid": "a1",
                 "from": "alice", "to": "bob"},
            ])
            scn["script"].append(second)
            scn["horizon"] = 140
            rep = harness.run(scn)
            assert any(f["sid"] == "dup" for f in rep["failed_ops"]), trial
            assert not rep["invariant_violations"]
            # ledger level: conflicting pair under a random adversarial schedule
            sim = Simulation(seed=trial)
            chain = ledger_mod.Ledger(sim, ledger_mod.SCRIPTLESS, delta=10)
            sim.add_service(chain)
            owner = pkc.keygen(b"o%d" % trial)
            chain.genesis_mint("x", owner.pk)
            d1, d2 = rng.randrange(0, 11), rng.randrange(0, 11)
            sub1, sub2 = rng.randrange(1, 5), rng.randrange(1, 5)
            tx1 = ledger_mod.make_tx(owner.sk, ledger_mod.SCRIPTLESS, "x",
                                     pkc.keygen(b"d1").pk, None)
            tx2 = ledger_mod.make_tx(owner.sk, ledger_mod.SCRIPTLESS, "x",
                                     pkc.keygen(b"d2").pk, None)
            sim.at_round(sub1, lambda s, tx=tx1, d=d1: chain.submit(tx, delay=d))
            sim.at_round(sub2, lambda s, tx=tx2, d=d2: chain.submit(tx, delay=d))
            sim.run_until(30)
            assert sum(1 for r in chain.tx_log if r.applied) == 1


def test_criterion_6_threshold_boundaries():
    with criterion(6, "threshold boundaries, reshare identity, round bounds", 10):
        from tests.test_dtc import rig, run_keygen, sign_with, reshare_once
        from dotsim.clock_net import FaultSpec
        sim, groups, nodes, drivers = rig()
        pk = run_keygen(sim, drivers["alice"])
        msg = b"boundary"
        for k, subset in enumerate(itertools.combinations([1, 2, 3, 4], 3)):
            sig = sign_with(sim, drivers["alice"], "c", msg, list(subset), sid="a3-%d" % k)
            assert sig is not None and pkc.verify(pk, msg, sig)
        for k, subset in enumerate(itertools.combinations([1, 2, 3, 4], 2)):
            assert sign_with(sim, drivers["alice"], "c", msg, list(subset),
                             sid="a2-%d" % k) is None
        # chain of five reshares preserves the ledger-accepted key
        chain = ledger_mod.Ledger(sim, ledger_mod.SCRIPTLESS, delta=10)
        sim.add_service(chain)
        chain.genesis_mint("x", pk)
        users = ["alice", "bob"]
        for hop in range(5):
            src, dst = users[hop % 2], users[(hop + 1) % 2]
            reshare_once(sim, drivers, "hop%d" % hop, "c", src, dst, pk)
            assert drivers[src].replies("hop%d" % hop, "reshare_ok")
        wallet = pkc.keygen(b"w")
        m = ledger_mod.signing_bytes(ledger_mod.SCRIPTLESS, "x", wallet.pk, None, b"")
        sig = sign_with(sim, drivers["bob"], "c", m, [], sid="after")
        chain.submit(ledger_mod.LedgerTx("x", wallet.pk, None, b"", sig))
        sim.tick()
        assert chain.query("x") == wallet.pk
        # liveness within bounds with f=1; fail closed with f=2
        sim2, groups2, nodes2, drivers2 = rig(seed=77)
        sim2.inject_fault(FaultSpec(kind="crash", target=node_id("alice", 4), round=0))
        drivers2["alice"].keygen("kg", "c")
        sent = sim2.clock
        sim2.run_until(sent + groups2["alice"].cfg.t_keygen + 1)
        assert drivers2["alice"].consistent("kg", "keygen_ok", need=3) is not None
        start = sim2.clock
        drivers2["alice"].sign("sg", "c", b"m", [])
        sim2.run_until(start + groups2["alice"].cfg.t_sign + 2)
        assert drivers2["alice"].consistent("sg", "sign_ok", need=3, field_index=2)
        sim3, groups3, nodes3, drivers3 = rig(seed=78)
        for i in (3, 4):
            sim3.inject_fault(FaultSpec(kind="crash", target=node_id("alice", i), round=0))
        drivers3["alice"].keygen("kg", "c")
        sim3.run_until(10)
        assert drivers3["alice"].consistent("kg", "keygen_ok", need=3) is None
        assert drivers3["alice"].replies("kg", "keygen_fail")


def test_criterion_7_tlp_gating():
    with criterion(7, "puzzle gating exact at every step; concrete matches oracle", 5):
        oracle = TlpOracle(seed=b"acc")
        for gamma in (0, 1, 5, 50):
            puzzle = oracle.pgen(gamma, b"m%d" % gamma)
            solver = IdealSolver(oracle, puzzle)
            for step in range(gamma):
                assert solver.message() is None, (gamma, step)
                solver.step()
            assert solver.message() == b"m%d" % gamma
        p, q = 0xAACE0C7B234A0ABB, 0x8687886112EB1D9F
        steps = 1000
        puzzle = concrete_pgen(p, q, base=7, steps=steps, msg=b"concrete")
        solver = ConcreteSolver(puzzle)
        solver.step(steps)
        assert solver.value == pow(7, pow(2, steps), p * q)
        assert solver.message() == b"concrete"


def _oracle_corpus():
    corpus = []
    for seed in (0, 1, 2):
        for ledger in ("scriptless", "timelock"):
            corpus.append(dict(tee_pay_scn(seed=seed), ledger=ledger, oracle=True))
            corpus.append(dict(tee_swap_scn(seed=seed, ledger=ledger), oracle=True))
    for ledger in ("scriptless", "timelock"):
        corpus.append(dict(dtc_pay_scn(), ledger=ledger, oracle=True))
        corpus.append(dict(dtc_swap_scn(ledger=ledger), oracle=True))
    # single faults: enclave crashes at every swap round, both sides
    for side in ("alice", "bob"):
        for rnd in (2, 3, 4, 5):
            scn = dict(tee_swap_scn(), oracle=True, name="c-%s-%d" % (side, rnd))
            scn["faults"] = [{"kind": "crash", "target": "tee:" + side, "round": rnd}]
            corpus.append(scn)
    # single faults: group crashes across the swap window, both sides
    for side in ("alice", "bob"):
        for rnd in (9, 11, 13, 15, 17, 19, 21):
            scn = dict(dtc_swap_scn(), oracle=True, name="gc-%s-%d" % (side, rnd))
            scn["faults"] = [{"kind": "crash", "target": node_id(side, i), "round": rnd}
                             for i in (1, 2, 3, 4)]
            corpus.append(scn)
    # dropped protocol messages in the swap, both directions
    for ledger in ("scriptless", "timelock"):
        for src, dst in (("tee:alice", "tee:bob"), ("tee:bob", "tee:alice")):
            scn = dict(tee_swap_scn(ledger=ledger), oracle=True,
                       name="blk-%s" % src)
            scn["faults"] = [{"kind": "block_channel", "src": src, "dst": dst,
                              "round": 0}]
            corpus.append(scn)
    # pay-path faults
    for ledger in ("scriptless", "timelock"):
        blocked = dict(tee_pay_scn(seed=7), ledger=ledger, oracle=True)
        blocked["faults"] = [{"kind": "block_channel", "src": "tee:alice",
                              "dst": "tee:bob", "round": 1}]
        corpus.append(blocked)
        for target, rnd in (("tee:alice", 2), ("tee:bob", 3), ("bob", 3)):
            scn = dict(tee_pay_scn(seed=8), ledger=ledger, oracle=True)
            scn["faults"] = [{"kind": "crash", "target": target, "round": rnd}]
            corpus.append(scn)
        dscn = dict(dtc_pay_scn(), ledger=ledger, oracle=True)
        dscn["faults"] = [{"kind": "crash", "target": node_id("bob", 1), "round": 0}]
        corpus.append(dscn)
        dscn2 = dict(dtc_pay_scn(), ledger=ledger, oracle=True)
        dscn2["faults"] = [{"kind": "byzantine_silent", "target": node_id("alice", 2)}]
        corpus.append(dscn2)
    return corpus


def test_criterion_8_differential_equivalence():
    with criterion(8, "differential equivalence on >=50 scenarios + mutation", 60):
        corpus = _oracle_corpus()
        assert len(corpus) >= 50, len(corpus)
        unequal = []
        for scn in corpus:
            rep = harness.run(scn)
            if not rep["differential"]["equal"]:
                unequal.append((scn["name"], scn.get("faults"),
                                rep["differential"]["diffs"][:1]))
        assert not unequal, unequal
        # a deliberately broken backend is detected
        broken = dict(tee_swap_scn(t_b=100), oracle=True,
                      mutations={"skip_margin_check": True})
        rep = harness.run(broken)
        assert not rep["differential"]["equal"]
        broken_dtc = dict(dtc_swap_scn(), oracle=True,
                          mutations={"skip_margin_check": True})
        broken_dtc["funding"][1]["recovery_time"] = 100
        rep = harness.run(broken_dtc)
        assert not rep["differential"]["equal"]


def test_criterion_9_recovery_liveness_bound():
    with criterion(9, "recovery applied within delta, worst-case inclusion", 5):
        for ledger in ("scriptless", "timelock"):
            scn = {
                "name": "rec", "seed": 2, "ledger": ledger, "delta": 10,
                "backend": {"kind": "tee"}, "participants": ["alice"],
                "funding": [fund("a1", "alice", 40)],
                "faults": [{"kind": "crash", "target": "tee:alice", "round": 3}],
                "policies": {"inclusion_delay": {"by_party": {"alice": "max"}}},
                "horizon": 80, "oracle": False,
            }
            rep = harness.run(scn)
            rt = rep["_runtime"]
            sub = next(e for e in rt.sim.trace_events
                       if e["kind"] == "recovery_submitted")
            inc = next(e for e in rt.sim.trace_events
                       if e["kind"] == "ledger_included"
                       and e["detail"]["txid"] == sub["detail"]["txid"])
            assert sub["round"] >= 40
            assert inc["detail"]["applied"], inc
            assert inc["round"] - sub["round"] <= 10
            assert rep["ownership"]["a1"] == {"party": "alice", "via": "chain"}
