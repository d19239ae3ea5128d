import pytest

from dotsim import ledger as ledger_mod
from dotsim.clock_net import FaultSpec, Simulation
from dotsim.crypto import pkc
from dotsim.crypto.tlp import IdealSolver, TlpOracle
from dotsim.errors import (
    AssetLocked,
    MarginViolation,
    MonotonicityViolation,
    NoPayInfo,
    NoSwapProc,
    NotOwner,
    PastDeadline,
    SelfPay,
    StaleSid,
)
from dotsim.te_tee import LOCKED, UNLOCKED, TeeEnclave


DELTA = 10


def rig(ledger_kind=ledger_mod.SCRIPTLESS):
    from dotsim.clock_net import Actor

    sim = Simulation(seed=11)
    sim.tlp = TlpOracle(seed=b"tee-test")
    directory = {}
    enclaves = {}
    for user in ("alice", "bob"):
        enc = TeeEnclave(sim, user, ledger_kind, DELTA, sim.tlp, directory)
        directory[enc.participant_id] = enc.identity.pk
        enclaves[user] = sim.register(enc)
        sim.register(Actor(user, owner=user))
    return sim, enclaves["alice"], enclaves["bob"]


def test_getpk_fresh_record():
    sim, tee_a, _ = rig()
    pk = tee_a.getpk("s1", "a1", 100)
    rec = tee_a.assets["a1"]
    assert (rec.t_release, rec.state, rec.pk_a) == (100, UNLOCKED, pk)


def test_getpk_past_deadline():
    sim, tee_a, _ = rig()
    sim.run_until(10)
    with pytest.raises(PastDeadline):
        tee_a.getpk("s1", "a1", 5)


def test_getpk_replayed_sid():
    sim, tee_a, _ = rig()
    tee_a.getpk("s1", "a1", 100)
    with pytest.raises(StaleSid):
        tee_a.getpk("s1", "a2", 100)


def test_backup_initial_and_rebackup_boundary():
    sim, tee_a, _ = rig()
    tee_a.getpk("s1", "a1", 100)
    wallet = pkc.keygen(b"w")
    art = tee_a.backup("b0", "a1", wallet.pk, 100)
    assert art.release == 100 and tee_a.assets["a1"].state == UNLOCKED
    # exactly delta earlier is accepted
    tee_a.backup("b1", "a1", wallet.pk, 90)
    # one round short of delta is rejected
    with pytest.raises(MonotonicityViolation):
        tee_a.backup("b2", "a1", wallet.pk, 81)


def test_backup_initial_cannot_exceed_deposit_time():
    sim, tee_a, _ = rig()
    tee_a.getpk("s1", "a1", 100)
    with pytest.raises(MonotonicityViolation):
        tee_a.backup("b0", "a1", pkc.keygen(b"w").pk, 101)


def test_backup_on_locked_asset_rejected():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("s1", "a1", 100)
    tee_a.swap_initiate("sw", "a1", "bob", pkc.keygen(b"k").pk)
    with pytest.raises(AssetLocked):
        tee_a.backup("b0", "a1", pkc.keygen(b"w").pk, 90)


def test_backup_artifact_kind_follows_ledger():
    for kind, expected in ((ledger_mod.SCRIPTLESS, "tlp"), (ledger_mod.TIMELOCK, "native")):
        sim, tee_a, _ = rig(kind)
        tee_a.getpk("s1", "a1", 50)
        art = tee_a.backup("b0", "a1", pkc.keygen(b"w").pk, 50)
        assert art.kind == expected
        if expected == "tlp":
            assert art.puzzles[0].gamma == 50


def test_pay_removes_record_and_transfers_key():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("s1", "a1", 100)
    sk_before = tee_a.assets["a1"].sk_a
    tee_a.pay_initiate("p1", "a1", "bob")
    assert "a1" not in tee_a.assets
    sim.tick()  # PAY-INFO delivered
    aid, pk_a, t_rel = tee_b.pay_accept("p1")
    assert aid == "a1" and t_rel == 100 - DELTA
    assert tee_b.assets["a1"].sk_a == sk_before
    assert tee_b.assets["a1"].state == UNLOCKED


def test_pay_checks():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("s1", "a1", 100)
    with pytest.raises(SelfPay):
        tee_a.pay_initiate("p0", "a1", "alice")
    with pytest.raises(NotOwner):
        tee_a.pay_initiate("p1", "ghost", "bob")
    with pytest.raises(NoPayInfo):
        tee_b.pay_accept("nothing")


def test_pay_double_accept_rejected():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("s1", "a1", 100)
    tee_a.pay_initiate("p1", "a1", "bob")
    sim.tick()
    tee_b.pay_accept("p1")
    with pytest.raises(NoPayInfo):
        tee_b.pay_accept("p1")
    assert len([a for a in tee_b.assets if a == "a1"]) == 1


def test_tampered_handoff_rejected():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("s1", "a1", 100)
    env_id = tee_a.pay_initiate("p1", "a1", "bob")
    env = sim.envelopes[env_id]
    corrupted = bytearray(env.payload)
    corrupted[len(corrupted) // 2] ^= 0x01
    env.payload = bytes(corrupted)
    sim.tick()
    assert "p1" not in tee_b.pay_offers
    assert "a1" not in tee_b.assets
    assert any(e["kind"] == "handoff_rejected" for e in sim.trace_events)


def swap_setup(sim, tee_a, tee_b, t_a=80, t_b=101):
    tee_a.getpk("da", "a1", t_a)
    tee_b.getpk("db", "b1", t_b)
    pk_a_prime = pkc.keygen(b"pa").pk
    pk_b_prime = pkc.keygen(b"pb").pk
    tee_a.swap_initiate("sw", "a1", "bob", pk_a_prime)
    sim.tick()
    return pk_a_prime, pk_b_prime


def test_swap_margin_boundary_values():
    # t_a=80, t_b=101: margin 21 > 20 accepted; t' = 70, new t_b = 90.
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b, 80, 101)
    tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)
    assert tee_b.assets["a1"].t_release == 70
    assert tee_b.assets["b1"].t_release == 90
    assert tee_b.assets["a1"].state == LOCKED
    assert tee_b.assets["b1"].state == LOCKED


def test_swap_margin_exactly_two_delta_rejected():
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b, 80, 100)
    with pytest.raises(MarginViolation):
        tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)


def test_swap_respond_without_proc():
    sim, tee_a, tee_b = rig()
    tee_b.getpk("db", "b1", 101)
    with pytest.raises(NoSwapProc):
        tee_b.swap_respond("nope", "a1", "b1", 1, 2)


def test_swap_pess_artifact_nested_signatures_verify():
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b)
    pk_aa = tee_b.swap_offers["sw"][2]
    art = tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)
    pk_ab = tee_b.assets["b1"].pk_a
    solver = IdealSolver(sim.tlp, art.puzzles[0])
    for _ in range(art.puzzles[0].gamma):
        solver.step()
    outer = ledger_mod.tx_from_bytes(solver.message())
    assert outer.aid == "a1" and outer.pk_dst == pk_b_prime
    assert pkc.verify(pk_aa, ledger_mod.signing_bytes(
        ledger_mod.SCRIPTLESS, outer.aid, outer.pk_dst, None, outer.payload), outer.sig)
    inner = ledger_mod.tx_from_bytes(outer.payload)
    assert inner.aid == "b1" and inner.pk_dst == pk_a_prime
    assert pkc.verify(pk_ab, ledger_mod.signing_bytes(
        ledger_mod.SCRIPTLESS, inner.aid, inner.pk_dst, None, inner.payload), inner.sig)


def test_optimistic_swap_end_state_and_stage_machine():
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b)
    tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)
    sim.tick()  # SWAP-OPTI to A; A finalizes, emits SWAP-OK
    assert set(tee_a.assets) == {"b1"}
    assert tee_a.assets["b1"].state == UNLOCKED
    sim.tick()  # SWAP-OK to B
    assert set(tee_b.assets) == {"a1"}
    assert tee_b.assets["a1"].state == UNLOCKED
    assert tee_b.sessions["sw"].stage == "done"


def test_swap_initiator_aborts_without_opti():
    sim, tee_a, tee_b = rig()
    tee_a.getpk("da", "a1", 80)
    env_id = tee_a.swap_initiate("sw", "a1", "bob", pkc.keygen(b"pa").pk)
    sim.inject_fault(FaultSpec(kind="crash", target=tee_b.participant_id, round=1))
    sim.run_until(4)
    assert tee_a.sessions["sw"].stage == "aborted"
    assert tee_a.assets["a1"].state == LOCKED  # stays locked; recovery via artifact


def test_forged_swap_ok_rejected():
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b)
    tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)
    from dotsim import encoding, wire
    forged_identity = pkc.keygen(b"not-alice")
    body = encoding.pack("swap_ok", b"sw")
    payload = wire.wrap("tee:alice", forged_identity.sk, body)
    sim.send_async("sw", "tee:alice", "tee:bob", payload)
    sim.tick()
    assert tee_b.sessions["sw"].stage == "sent_B"  # not finalized
    assert any(e["kind"] == "handoff_rejected" for e in sim.trace_events)


def test_exclusive_unlocked_control_through_swap():
    sim, tee_a, tee_b = rig()
    pk_a_prime, pk_b_prime = swap_setup(sim, tee_a, tee_b)
    tee_b.swap_respond("sw", "a1", "b1", pk_a_prime, pk_b_prime)
    for _ in range(3):
        holders = {}
        for enc in (tee_a, tee_b):
            for aid, rec in enc.assets.items():
                if rec.state == UNLOCKED:
                    holders.setdefault(aid, []).append(enc.user)
        assert all(len(v) == 1 for v in holders.values())
        sim.tick()


def test_pay_external_ready_to_broadcast():
    sim, tee_a, _ = rig()
    tee_a.getpk("s1", "a1", 100)
    dest = pkc.keygen(b"merchant").pk
    art = tee_a.pay_external("x1", "a1", dest)
    assert art.kind == "native" and art.release == sim.clock
    assert "a1" not in tee_a.assets
    chain = ledger_mod.Ledger(sim, ledger_mod.SCRIPTLESS, delta=10)
    sim.add_service(chain)
    chain.genesis_mint("a1", art.owner_pk)
    chain.submit(art.tx)
    sim.tick()
    assert chain.query("a1") == dest
