"""Direct checks of the reference model under handwritten schedules."""

import pytest

from dotsim.errors import HookOrderError
from dotsim.ideal_model import IdealWorld, Step

WALLET_A = ("wallet", "alice")
WALLET_B = ("wallet", "bob")
DELTA = 10


def world():
    return IdealWorld(delta=DELTA, parties=["alice", "bob"])


def deposit_steps(aid="a1", party="alice", T=80, rnd=0):
    return [Step(rnd, "dep-" + aid, "deposit", "create",
                 {"party": party, "aid": aid, "T": T})]


def backup_steps(sid, aid, party, t_new, rnd, pk_r=WALLET_A, store_round=None):
    steps = [Step(rnd, sid, "backup", "lock",
                  {"aid": aid, "party": party, "pk_r": list(pk_r), "t_new": t_new})]
    steps.append(Step(store_round if store_round is not None else t_new,
                      sid, "backup", "store", {}))
    steps.append(Step(rnd, sid, "backup", "unlock", {}))
    return steps


def replay(w, steps):
    w.replay(sorted(steps, key=lambda s: s.round))
    return w


def test_deposit_and_backup_happy_path():
    w = world()
    steps = deposit_steps() + backup_steps("b0", "a1", "alice", 80, rnd=0)
    # availability comes after the unlock for puzzle-gated artifacts
    replay(w, steps)
    rec = w.records["a1"]
    assert (rec.owner, rec.t_release, rec.state) == ("alice", 80, "unlocked")
    state = w.comparable_state(horizon=100)
    assert state["backups"] == [("alice", "a1", list(WALLET_A), 80)]
    assert state["ledger"] == {"a1": ["custody", "a1"]}
    assert not w.gaps


def test_pay_moves_release_and_unlocks():
    w = world()
    steps = deposit_steps() + [
        Step(2, "p1", "pay", "lock", {"aid": "a1", "from": "alice", "to": "bob"}),
        Step(3, "p1", "pay", "move", {"aid": "a1", "to": "bob"}),
        Step(3, "p1", "pay", "update", {"aid": "a1", "to": "bob"}),
    ]
    replay(w, steps)
    rec = w.records["a1"]
    assert (rec.owner, rec.t_release, rec.state) == ("bob", 70, "unlocked")


def test_pay_blocked_mid_way_leaves_lock():
    w = world()
    steps = deposit_steps() + [
        Step(2, "p1", "pay", "lock", {"aid": "a1", "from": "alice", "to": "bob"}),
    ]
    replay(w, steps)
    rec = w.records["a1"]
    assert (rec.owner, rec.state) == ("alice", "locked")


def test_pay_checks_abort():
    w = world()
    steps = deposit_steps() + [
        Step(2, "p1", "pay", "lock", {"aid": "a1", "from": "bob", "to": "alice"}),
        Step(3, "p1", "pay", "move", {"aid": "a1", "to": "alice"}),
    ]
    replay(w, steps)
    assert w.records["a1"].owner == "alice"  # unchanged; session halted
    assert w.gaps and w.gaps[0]["step"] == "pay/move"


def swap_steps(sid="s1", rnd=2, with_unlock=True, store_round=70):
    steps = [
        Step(rnd, sid, "swap", "lock",
             {"initiator": "alice", "responder": "bob", "aid_a": "a1", "aid_b": "b1"}),
        Step(rnd + 1, sid, "swap", "move", {}),
        Step(rnd + 1, sid, "swap", "lock_both", {}),
        Step(rnd + 1, sid, "swap", "auth_inner", {}),
        Step(rnd + 1, sid, "swap", "auth_nested", {}),
        Step(store_round, sid, "swap", "store_nested", {}),
        Step(rnd + 2, sid, "swap", "move_b", {}),
    ]
    if with_unlock:
        steps.append(Step(rnd + 3, sid, "swap", "unlock_a", {}))
    return steps


def swap_world():
    w = world()
    steps = (deposit_steps("a1", "alice", 80)
             + deposit_steps("b1", "bob", 105)
             + swap_steps())
    replay(w, steps)
    return w


def test_swap_happy_path_state():
    w = swap_world()
    a1, b1 = w.records["a1"], w.records["b1"]
    assert (a1.owner, a1.t_release, a1.state) == ("bob", 70, "unlocked")
    assert (b1.owner, b1.t_release, b1.state) == ("alice", 90, "unlocked")
    assert w.comparable_state(100)["backups"] == [
        ("bob", "a1", ["skey", "bob", "s1"], 70)]


def test_swap_margin_abort():
    w = world()
    steps = (deposit_steps("a1", "alice", 80)
             + deposit_steps("b1", "bob", 100)   # margin exactly 2*delta
             + swap_steps())
    replay(w, steps)
    assert w.records["b1"].owner == "bob"
    assert w.records["b1"].state == "unlocked"
    assert w.records["a1"].owner == "bob"      # moved by step 1, then halted
    assert w.records["a1"].state == "locked"
    assert any(g["why"] == "session halted" for g in w.gaps)


def test_swap_block_between_moves_keeps_entitlement():
    # Halt right after the nested authorization: asset A sits locked at B,
    # B's contingent entitlement stays intact.
    w = world()
    steps = (deposit_steps("a1", "alice", 80)
             + deposit_steps("b1", "bob", 105)
             + swap_steps()[:6])    # through store_nested, no move_b/unlock
    replay(w, steps)
    assert w.records["a1"].state == "locked"
    assert w.records["b1"].owner == "bob"
    assert w.comparable_state(100)["backups"] == [
        ("bob", "a1", ["skey", "bob", "s1"], 70)]


def test_contingent_publication_reveals_inner_claim():
    w = swap_world()
    # bob publishes the nested backup at its release; the embedded inner
    # transaction becomes claimable by alice.
    w.replay([Step(70, "r1", "recovery", "submit",
                   {"party": "bob", "aid": "a1", "dst": ["skey", "bob", "s1"],
                    "include_at": 71})])
    assert w.ledger["a1"] == ("skey", "bob", "s1")
    w.replay([Step(72, "r2", "recovery", "submit",
                   {"party": "alice", "aid": "b1", "dst": ["skey", "alice", "s1"],
                    "include_at": 73})])
    assert w.ledger["b1"] == ("skey", "alice", "s1")


def test_recovery_requires_release_and_entitlement():
    w = world()
    replay(w, deposit_steps() + backup_steps("b0", "a1", "alice", 80, rnd=0))
    w.replay([Step(50, "r1", "recovery", "submit",
                   {"party": "alice", "aid": "a1", "dst": list(WALLET_A),
                    "include_at": 51})])
    assert w.ledger["a1"] == ("custody", "a1")  # too early, halted
    w2 = world()
    replay(w2, deposit_steps() + backup_steps("b0", "a1", "alice", 80, rnd=0))
    w2.replay([Step(80, "r1", "recovery", "submit",
                    {"party": "bob", "aid": "a1", "dst": list(WALLET_A),
                     "include_at": 81})])
    assert w2.ledger["a1"] == ("custody", "a1")  # not bob's entitlement


def test_recovery_inclusion_bound_enforced():
    w = world()
    replay(w, deposit_steps() + backup_steps("b0", "a1", "alice", 80, rnd=0))
    w.replay([Step(80, "r1", "recovery", "submit",
                   {"party": "alice", "aid": "a1", "dst": list(WALLET_A),
                    "include_at": 95})])  # > delta away
    assert w.ledger["a1"] == ("custody", "a1")


def test_stale_recovery_loses_to_newer_owner():
    w = world()
    steps = (deposit_steps()
             + backup_steps("b0", "a1", "alice", 80, rnd=0)
             + [Step(2, "p1", "pay", "lock", {"aid": "a1", "from": "alice", "to": "bob"}),
                Step(3, "p1", "pay", "move", {"aid": "a1", "to": "bob"}),
                Step(3, "p1", "pay", "update", {"aid": "a1", "to": "bob"})]
             + backup_steps("b1", "a1", "bob", 70, rnd=3, pk_r=WALLET_B))
    replay(w, steps)
    w.replay([
        Step(70, "r1", "recovery", "submit",
             {"party": "bob", "aid": "a1", "dst": list(WALLET_B), "include_at": 80}),
        Step(80, "r2", "recovery", "submit",
             {"party": "alice", "aid": "a1", "dst": list(WALLET_A), "include_at": 80}),
    ])
    assert w.ledger["a1"] == WALLET_B
    assert w.shadow_log[1].reason == "BadSig"


def test_out_of_order_hooks_rejected():
    w = world()
    steps = deposit_steps() + [
        Step(3, "p1", "pay", "move", {"aid": "a1", "to": "bob"}),
        Step(4, "p1", "pay", "lock", {"aid": "a1", "from": "alice", "to": "bob"}),
    ]
    with pytest.raises(HookOrderError):
        w.replay(steps)


def test_decreasing_rounds_rejected():
    w = world()
    steps = [Step(5, "d", "deposit", "create", {"party": "alice", "aid": "a1", "T": 80}),
             Step(4, "d2", "deposit", "create", {"party": "bob", "aid": "b1", "T": 80})]
    with pytest.raises(HookOrderError):
        w.replay(steps)


def test_replay_is_deterministic():
    def final():
        w = swap_world()
        return w.comparable_state(120)
    assert final() == final()


def test_ideal_fairness_under_every_halt_point():
    # Fairness on the model itself: halt the swap after each step, then run
    # the honest settlement policy (contingent publication, extraction, own
    # backups).  Each party must end owning exactly one of the two assets.
    full = swap_steps()
    for cut in range(0, len(full) + 1):
        w = world()
        replay(w, deposit_steps("a1", "alice", 80)
               + backup_steps("ba", "a1", "alice", 80, rnd=0, pk_r=WALLET_A)
               + deposit_steps("b1", "bob", 105)
               + backup_steps("bb", "b1", "bob", 105, rnd=0, pk_r=WALLET_B)
               + full[:cut])
        completed = cut == len(full)
        nested = [e for e in w.backups if e.nested_inner is not None]
        recoveries = []
        if not completed:
            if nested:
                entry = nested[0]
                recoveries.append(Step(entry.release, "rb", "recovery", "submit", {
                    "party": "bob", "aid": "a1", "dst": list(entry.pk_r),
                    "include_at": entry.release + 1}))
                recoveries.append(Step(entry.release + 2, "ra", "recovery", "submit", {
                    "party": "alice", "aid": "b1",
                    "dst": ["skey", "alice", "s1"],
                    "include_at": entry.release + 3}))
            else:
                recoveries.append(Step(80, "ra", "recovery", "submit", {
                    "party": "alice", "aid": "a1", "dst": list(WALLET_A),
                    "include_at": 81}))
                if w.records["b1"].state == "locked":
                    recoveries.append(Step(105, "rb", "recovery", "submit", {
                        "party": "bob", "aid": "b1", "dst": list(WALLET_B),
                        "include_at": 106}))
        w.replay(sorted(recoveries, key=lambda s: s.round))

        def owned(party, wallets):
            mine = set()
            for aid in ("a1", "b1"):
                if w.ledger[aid] in wallets:
                    mine.add(aid)
                elif (w.ledger[aid] == ("custody", aid)
                      and w.records[aid].owner == party
                      and w.records[aid].state == "unlocked"):
                    mine.add(aid)
            return mine
        alice = owned("alice", {WALLET_A, ("skey", "alice", "s1")})
        bob = owned("bob", {WALLET_B, ("skey", "bob", "s1")})
        assert len(alice) == 1 and len(bob) == 1 and not (alice & bob), \
            (cut, alice, bob, w.ledger)
