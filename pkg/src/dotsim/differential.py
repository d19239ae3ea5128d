"""Differential testing of a protocol run against the reference model.

Three pieces:

* transition extraction: a protocol trace is reduced to abstract custody
  transitions.  Enclave events map one-to-one; node-group events count only
  when t - f honest nodes have reported the same transition (f being the
  number of byzantine nodes in that group), which is the mapping the
  security argument uses.
* schedule derivation: transitions become a round-stamped step schedule for
  the reference model.  Missing protocol events simply produce no step, so a
  crashed component halts the ideal session at the same point.
* comparison: the reference model's final state is checked against a fold of
  the same transitions (owner, release time, lock state per asset, final
  on-chain owners, and which backup entitlements became available by the
  horizon).  Keys are canonicalized to symbolic form on both sides.

The verdict is ``equal`` only if all three views agree and no protocol event
lacked an ideal counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim.crypto import pkc
from dotsim.ideal_model import IdealWorld, Step

ASSET_KINDS = {
    "asset_created", "asset_locked", "asset_unlocked", "asset_added",
    "asset_removed", "trelease_set", "margin_checked", "backup_authorized",
    "backup_issued", "offer_received",
}


@dataclass
class Transition:
    round: int
    kind: str
    sid: str | None
    party: str | None
    detail: dict


def key_map(scenario: dict) -> dict[str, tuple]:
    """hex verification key -> symbolic identity, recomputed from the scenario."""
    seed = str(scenario["seed"]).encode()
    mapping: dict[str, tuple] = {}
    for party in scenario["participants"]:
        wallet = pkc.keygen(pkc.derive(b"wallet", seed, party.encode()))
        mapping["%064x" % wallet.pk] = ("wallet", party)
        for action in scenario.get("script", []):
            if action["op"] == "swap":
                sid = action["sid"]
                kp = pkc.keygen(pkc.derive(b"swap-key", seed, party.encode(), sid.encode()))
                mapping["%064x" % kp.pk] = ("skey", party, sid)
    return mapping


def symbolize(pk_hex: str, mapping: dict[str, tuple], custody: dict[str, str]) -> tuple:
    if pk_hex in custody:
        return ("custody", custody[pk_hex])
    if pk_hex in mapping:
        return mapping[pk_hex]
    return ("ext", pk_hex[:16])


def extract_transitions(trace: list[dict], scenario: dict) -> list[Transition]:
    backend = scenario["backend"]["kind"]
    if backend == "tee":
        out = []
        for i, e in enumerate(trace):
            if e["kind"] in ASSET_KINDS:
                out.append(Transition(e["round"], e["kind"], e["sid"],
                                      e["detail"].get("party"), dict(e["detail"], seq=i)))
        return out
    return _aggregate_node_transitions(trace, scenario)


def _byzantine_counts(scenario: dict) -> dict[str, set[str]]:
    byz: dict[str, set[str]] = {}
    for fault in scenario.get("faults", []):
        if fault["kind"].startswith("byzantine"):
            target = fault["target"]          # "node:<user>:<i>"
            user = target.split(":")[1]
            byz.setdefault(user, set()).add(target)
    return byz


def _aggregate_node_transitions(trace: list[dict], scenario: dict) -> list[Transition]:
    n = scenario["backend"]["n"]
    t = scenario["backend"]["t"]
    byz = _byzantine_counts(scenario)
    groups: dict[tuple, list] = {}
    for i, e in enumerate(trace):
        kind = e["kind"]
        if not kind.startswith("node_") or kind[5:] not in ASSET_KINDS:
            continue
        detail = e["detail"]
        node = detail.get("node", "")
        party = detail.get("party")
        if node in byz.get(party, set()):
            continue
        sig_detail = {k: v for k, v in sorted(detail.items()) if k != "node"}
        sig = (kind[5:], e["sid"], party, tuple(sorted(sig_detail.items())))
        groups.setdefault(sig, []).append((e["round"], node, i))
    out = []
    for (kind, sid, party, detail_items), hits in groups.items():
        f = len(byz.get(party, set()))
        need = t - f
        distinct: dict[str, tuple[int, int]] = {}
        for rnd, node, seq in sorted(hits):
            distinct.setdefault(node, (rnd, seq))
        if len(distinct) < need:
            continue
        ordered = sorted(distinct.values())
        rnd, seq = ordered[need - 1]
        out.append(Transition(rnd, kind, sid, party, dict(detail_items, seq=seq)))
    out.sort(key=lambda tr: (tr.round, tr.detail.get("seq", 0)))
    return out


@dataclass
class ArtifactView:
    party: str
    aid: str
    release: int
    pk_r: str
    stored_round: int
    solved_round: int | None = None
    solved_seq: int = 0


def extract_artifacts(trace: list[dict]) -> list[ArtifactView]:
    views: list[ArtifactView] = []
    for i, e in enumerate(trace):
        if e["kind"] == "artifact_stored":
            views.append(ArtifactView(party=e["src"], aid=e["detail"]["aid"],
                                      release=e["detail"]["release"],
                                      pk_r=e["detail"]["pk_r"], stored_round=e["round"]))
        elif e["kind"] == "artifact_solved":
            for v in views:
                if (v.party == e["src"] and v.aid == e["detail"]["aid"]
                        and v.release == e["detail"]["release"] and v.solved_round is None):
                    v.solved_round = e["round"]
                    v.solved_seq = i
                    break
    return views


def _custody_map(trace: list[dict]) -> dict[str, str]:
    custody = {}
    for e in trace:
        if e["kind"] == "ledger_genesis":
            custody[e["detail"]["pk"]] = e["detail"]["aid"]
    return custody


def derive_schedule(trace: list[dict], scenario: dict) -> list[Step]:
    """Map a protocol trace to a reference-model step schedule."""
    transitions = extract_transitions(trace, scenario)
    artifacts = extract_artifacts(trace)
    custody = _custody_map(trace)
    keys = key_map(scenario)
    sym = lambda pk_hex: list(symbolize(pk_hex, keys, custody))

    def solved_at(party, aid, release):
        for v in artifacts:
            if v.party == party and v.aid == aid and v.release == release:
                if v.solved_round is None:
                    return None
                return v.solved_round, v.solved_seq
        return None

    swaps = {a["sid"]: a for a in scenario.get("script", []) if a["op"] == "swap"}
    pays = {a["sid"]: a for a in scenario.get("script", []) if a["op"] == "pay"}

    by_sid: dict[str, list[Transition]] = {}
    for tr in transitions:
        by_sid.setdefault(tr.sid, []).append(tr)

    steps: list[Step] = []

    def find(trs, kind, **match):
        for tr in trs:
            if tr.kind != kind:
                continue
            if all(tr.detail.get(k) == v or (k == "party" and tr.party == v)
                   for k, v in match.items()):
                return tr
        return None

    for sid, trs in by_sid.items():
        if sid is None:
            continue
        created = find(trs, "asset_created")
        if created is not None:
            steps.append(Step(created.round, sid, "deposit", "create", {
                "party": created.party, "aid": created.detail["aid"],
                "T": created.detail["t_release"]}, seq=created.detail["seq"]))
            continue
        if sid in swaps:
            action = swaps[sid]
            initiator, responder = action["initiator"], action["responder"]
            aid_a, aid_b = action["aid_a"], action["aid_b"]
            lock = find(trs, "asset_locked", aid=aid_a, party=initiator)
            if lock is not None:
                steps.append(Step(lock.round, sid, "swap", "lock", {
                    "initiator": initiator, "responder": responder,
                    "aid_a": aid_a, "aid_b": aid_b}, seq=lock.detail["seq"]))
            move = find(trs, "offer_received", aid=aid_a, party=responder)
            if move is not None:
                steps.append(Step(move.round, sid, "swap", "move", {},
                                  seq=move.detail["seq"]))
            # Pegged to the state effect (locking the counter-asset), which on
            # the node backend happens at reshare completion, after the checks.
            lock_b = find(trs, "asset_locked", aid=aid_b, party=responder)
            if lock_b is not None:
                steps.append(Step(lock_b.round, sid, "swap", "lock_both", {},
                                  seq=lock_b.detail["seq"]))
            inner = find(trs, "backup_authorized", nested=False)
            if inner is not None:
                steps.append(Step(inner.round, sid, "swap", "auth_inner", {},
                                  seq=inner.detail["seq"]))
            nested = find(trs, "backup_authorized", nested=True)
            if nested is not None:
                steps.append(Step(nested.round, sid, "swap", "auth_nested", {},
                                  seq=nested.detail["seq"]))
                solved = solved_at(responder, aid_a, nested.detail["release"])
                if solved is not None:
                    steps.append(Step(solved[0], sid, "swap", "store_nested", {},
                                      seq=solved[1]))
            move_b = find(trs, "asset_added", aid=aid_b, party=initiator)
            if move_b is not None:
                steps.append(Step(move_b.round, sid, "swap", "move_b", {},
                                  seq=move_b.detail["seq"]))
            unlock_a = find(trs, "asset_unlocked", aid=aid_a, party=responder)
            if unlock_a is not None:
                steps.append(Step(unlock_a.round, sid, "swap", "unlock_a", {},
                                  seq=unlock_a.detail["seq"]))
            continue
        if sid in pays:
            action = pays[sid]
            aid = action["aid"]
            lock = find(trs, "asset_locked", aid=aid, party=action["from"])
            if lock is not None:
                steps.append(Step(lock.round, sid, "pay", "lock", {
                    "aid": aid, "from": action["from"], "to": action["to"]},
                    seq=lock.detail["seq"]))
            offer = find(trs, "offer_received", aid=aid, party=action["to"])
            if offer is not None:
                steps.append(Step(offer.round, sid, "pay", "move", {
                    "aid": aid, "to": action["to"]}, seq=offer.detail["seq"]))
            added = find(trs, "asset_added", aid=aid, party=action["to"])
            if added is not None:
                steps.append(Step(added.round, sid, "pay", "update", {
                    "aid": aid, "to": action["to"]}, seq=added.detail["seq"]))
            continue
        lock = find(trs, "asset_locked")
        tset = find(trs, "trelease_set")
        if lock is not None and tset is not None:
            issued = find(trs, "backup_issued")
            pk_r = sym(issued.detail["pk_r"]) if issued is not None else None
            steps.append(Step(lock.round, sid, "backup", "lock", {
                "aid": tset.detail["aid"], "party": lock.party,
                "pk_r": pk_r, "t_new": tset.detail["value"]},
                seq=lock.detail["seq"]))
            if issued is not None:
                solved = solved_at(issued.party, issued.detail["aid"],
                                   issued.detail["release"])
                if solved is not None:
                    steps.append(Step(solved[0], sid, "backup", "store", {},
                                      seq=solved[1]))
            unlock = find(trs, "asset_unlocked")
            if unlock is not None:
                steps.append(Step(unlock.round, sid, "backup", "unlock", {},
                                  seq=unlock.detail["seq"]))

    # recoveries, in submission order
    included_at = {}
    for e in trace:
        if e["kind"] == "ledger_submitted":
            included_at[e["detail"]["txid"]] = e["detail"]["included_round"]
    rec_n = 0
    for i, e in enumerate(trace):
        if e["kind"] != "recovery_submitted":
            continue
        d = e["detail"]
        steps.append(Step(e["round"], "rec-%d" % rec_n, "recovery", "submit", {
            "party": e["src"], "aid": d["aid"], "dst": sym(d["pk_r"]),
            "include_at": included_at.get(d["txid"], e["round"] + 1)}, seq=i))
        rec_n += 1

    order = {}
    for phase, names in (("deposit", ["create"]), ("backup", ["lock", "store", "unlock"]),
                         ("pay", ["lock", "move", "update"]),
                         ("swap", ["lock", "move", "lock_both", "auth_inner",
                                   "auth_nested", "store_nested", "move_b", "unlock_a"]),
                         ("recovery", ["submit"])):
        for i, name in enumerate(names):
            order[(phase, name)] = i
    steps.sort(key=lambda s: (s.round, s.seq, order[(s.phase, s.name)], s.sid))
    return steps


def fold_protocol_state(trace: list[dict], scenario: dict, horizon: int) -> dict:
    """Project the protocol trace onto the reference model's state vocabulary."""
    transitions = extract_transitions(trace, scenario)
    custody = _custody_map(trace)
    keys = key_map(scenario)
    records: dict[str, dict] = {}
    for tr in sorted(transitions, key=lambda tr: (tr.round, tr.detail.get("seq", 0))):
        aid = tr.detail.get("aid")
        if aid is None:
            continue
        rec = records.get(aid)
        if tr.kind == "asset_created":
            records[aid] = {"owner": tr.party, "t_release": tr.detail["t_release"],
                            "state": "unlocked"}
        elif tr.kind == "asset_added":
            records[aid] = {"owner": tr.party, "t_release": tr.detail["t_release"],
                            "state": "unlocked"}
        elif tr.kind == "offer_received":
            if rec is not None:
                rec["owner"] = tr.party
                rec["state"] = "locked"
        elif rec is None or tr.party != rec["owner"]:
            continue
        elif tr.kind == "asset_locked":
            rec["state"] = "locked"
        elif tr.kind == "asset_unlocked":
            rec["state"] = "unlocked"
        elif tr.kind == "trelease_set":
            rec["t_release"] = tr.detail["value"]
        elif tr.kind == "asset_removed":
            # Handoff in flight: custody stays with the sender, locked.
            rec["state"] = "locked"
    ledger_state: dict[str, list] = {}
    applied_dst: dict[int, str] = {}
    for e in trace:
        if e["kind"] == "ledger_genesis":
            ledger_state[e["detail"]["aid"]] = ["custody", e["detail"]["aid"]]
        elif e["kind"] == "ledger_included" and e["detail"]["applied"]:
            aid = e["detail"]["aid"]
            ledger_state[aid] = list(symbolize(e["detail"]["pk_dst"], keys, custody))
    backups = sorted(
        (v.party, v.aid, list(symbolize(v.pk_r, keys, custody)), v.release)
        for v in extract_artifacts(trace)
        if v.solved_round is not None and v.solved_round <= horizon
    )
    return {"records": {aid: records[aid] for aid in sorted(records)},
            "backups": backups,
            "ledger": {aid: ledger_state[aid] for aid in sorted(ledger_state)}}


def differential_check(trace: list[dict], scenario: dict, horizon: int) -> dict:
    """Run the reference model on the derived schedule and compare end states."""
    schedule = derive_schedule(trace, scenario)
    world = IdealWorld(delta=scenario["delta"], parties=list(scenario["participants"]))
    world.replay(schedule)
    ideal = world.comparable_state(horizon)
    proto = fold_protocol_state(trace, scenario, horizon)
    diffs = []
    for section in ("records", "backups", "ledger"):
        if ideal[section] != proto[section]:
            diffs.append({"section": section, "ideal": ideal[section],
                          "protocol": proto[section]})
    for gap in world.gaps:
        diffs.append({"section": "mapping_gap", "gap": gap})
    return {"equal": not diffs, "diffs": diffs, "steps": len(schedule)}
