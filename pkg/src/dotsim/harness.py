"""Scenario runner and acceptance driver.

A scenario file declares participants, a ledger, a TE backend, funded assets,
a round-stamped action script, faults, and a horizon.  ``run`` wires the
simulation, executes to the horizon, snapshots final state into the trace,
and builds a report (receipts, per-swap fairness verdicts, the differential
verdict against the reference model, final ownership) purely from the trace,
so a report is recomputable from a stored trace file.

Ownership at the horizon is attributed per asset as: usable TE custody (live
entity holding the record unlocked, chain key untouched), else on-chain
wallet ownership, else the best live recovery claim (the unretired artifact
with the earliest release that still verifies under the current chain owner,
held by a live user).  A swap is fair when its two assets end up attributed
to the two participants one-for-one.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from dotsim import differential, ledger as ledger_mod
from dotsim.clock_net import FaultSpec, Simulation
from dotsim.crypto.dtc import DtcGroup, default_threshold
from dotsim.crypto.tlp import TlpOracle
from dotsim.errors import ScenarioInvalid
from dotsim.te_dtc import DtcAdapter, DtcNode, GroupInfo, node_id
from dotsim.te_tee import TeeAdapter, TeeEnclave, tee_id
from dotsim.user_agent import UserAgent

DEFAULT_DELTA = 10

_OPS = {"pay", "swap", "backup", "recover", "pay_external"}


def load_scenario(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    return validate_scenario(data)


def validate_scenario(data: dict) -> dict:
    def fail(msg: str) -> None:
        raise ScenarioInvalid(msg)

    if not isinstance(data, dict):
        fail("scenario must be an object")
    for key in ("participants", "funding", "horizon"):
        if key not in data:
            fail("missing field %r" % key)
    data.setdefault("name", "scenario")
    data.setdefault("seed", 0)
    data.setdefault("ledger", ledger_mod.SCRIPTLESS)
    data.setdefault("delta", DEFAULT_DELTA)
    data.setdefault("backend", {"kind": "tee"})
    data.setdefault("script", [])
    data.setdefault("faults", [])
    data.setdefault("policies", {})
    data.setdefault("mutations", {})
    data.setdefault("oracle", False)
    if data["ledger"] not in (ledger_mod.SCRIPTLESS, ledger_mod.TIMELOCK):
        fail("ledger must be scriptless or timelock, got %r" % data["ledger"])
    backend = data["backend"]
    if backend.get("kind") not in ("tee", "dtc"):
        fail("backend.kind must be tee or dtc")
    if backend["kind"] == "dtc":
        backend.setdefault("n", 4)
        backend.setdefault("t", default_threshold(backend["n"]))
    parties = data["participants"]
    if not parties or len(set(parties)) != len(parties):
        fail("participants must be a non-empty list of unique names")
    aids = set()
    max_round = 0
    for i, f in enumerate(data["funding"]):
        for key in ("aid", "owner", "round", "recovery_time"):
            if key not in f:
                fail("funding[%d] missing %r" % (i, key))
        if f["owner"] not in parties:
            fail("funding[%d].owner %r not a participant" % (i, f["owner"]))
        if f["aid"] in aids:
            fail("funding[%d].aid %r duplicated" % (i, f["aid"]))
        aids.add(f["aid"])
        max_round = max(max_round, f["round"])
    sids = set()
    for i, a in enumerate(data["script"]):
        if a.get("op") not in _OPS:
            fail("script[%d].op %r unknown" % (i, a.get("op")))
        if "round" not in a:
            fail("script[%d] missing round" % i)
        max_round = max(max_round, a["round"])
        refs = [a[k] for k in ("aid", "aid_a", "aid_b") if k in a]
        for aid in refs:
            if aid not in aids:
                fail("script[%d] references unknown asset %r" % (i, aid))
        for k in ("party", "from", "to", "initiator", "responder"):
            if k in a and a[k] not in parties:
                fail("script[%d].%s %r not a participant" % (i, k, a[k]))
        if a["op"] in ("pay", "swap"):
            if "sid" not in a:
                fail("script[%d] missing sid" % i)
            if a["sid"] in sids:
                fail("script[%d].sid %r duplicated" % (i, a["sid"]))
            sids.add(a["sid"])
    for i, f in enumerate(data["faults"]):
        if f.get("kind") not in ("crash", "block_channel", "delay",
                                 "byzantine_silent", "byzantine_equivocate"):
            fail("faults[%d].kind unknown" % i)
        max_round = max(max_round, f.get("round", 0) or 0)
    if data["horizon"] < max_round + 3 * data["delta"]:
        fail("horizon %d < max referenced round %d + 3*delta"
             % (data["horizon"], max_round))
    return data


class ExclusiveCustodyChecker:
    """At most one TE layer holder may have an asset unlocked at any round."""

    def __init__(self, runtime: "Runtime") -> None:
        self.rt = runtime

    def end_round(self, sim: Simulation, rnd: int) -> None:
        holders: dict[str, list[str]] = {}
        for party, holder in self.rt.custody_view().items():
            for aid, state in holder.items():
                if state == "unlocked":
                    holders.setdefault(aid, []).append(party)
        for aid, parties in holders.items():
            if len(parties) > 1:
                sim.trace("invariant_violation", detail={
                    "invariant": "exclusive_custody", "aid": aid, "holders": parties})


@dataclass
class Runtime:
    scenario: dict
    sim: Simulation
    chain: ledger_mod.Ledger
    users: dict[str, UserAgent]
    enclaves: dict[str, TeeEnclave] = field(default_factory=dict)
    groups: dict[str, GroupInfo] = field(default_factory=dict)
    nodes: dict[str, DtcNode] = field(default_factory=dict)

    def custody_view(self) -> dict[str, dict[str, str]]:
        """party -> {aid: unlocked|locked} for usable (live) TE holdings."""
        out: dict[str, dict[str, str]] = {}
        if self.scenario["backend"]["kind"] == "tee":
            for party, enclave in self.enclaves.items():
                if self.sim.crashed(enclave.participant_id):
                    continue
                out[party] = {aid: rec.state for aid, rec in enclave.assets.items()}
            return out
        byz = differential._byzantine_counts(self.scenario)
        for party, info in self.groups.items():
            t = info.cfg.t
            counts: dict[str, int] = {}
            total: dict[str, int] = {}
            for nid in info.node_ids:
                node = self.nodes[nid]
                if self.sim.crashed(nid) or nid in byz.get(party, set()):
                    continue
                for aid, rec in node.assets.items():
                    total[aid] = total.get(aid, 0) + 1
                    if rec.state == "unlocked" and not rec.tombstoned:
                        counts[aid] = counts.get(aid, 0) + 1
            f = len(byz.get(party, set()))
            view = {}
            for aid in total:
                if counts.get(aid, 0) >= t - f:
                    view[aid] = "unlocked"
                elif total[aid] >= t - f:
                    view[aid] = "locked"
            out[party] = view
        return out


def build_runtime(scenario: dict) -> Runtime:
    scenario = validate_scenario(copy.deepcopy(scenario))
    sim = Simulation(seed=scenario["seed"])
    sim.tlp = TlpOracle(seed=b"tlp:%d" % scenario["seed"])
    policies = scenario["policies"]
    chain = ledger_mod.Ledger(sim, scenario["ledger"], delta=scenario["delta"])
    incl = policies.get("inclusion_delay", {})
    default_delay = incl.get("default", 1)
    chain.default_delay = scenario["delta"] if default_delay == "max" else default_delay
    sim.add_service(chain)

    users = {}
    for party in scenario["participants"]:
        users[party] = sim.register(UserAgent(sim, party, chain, scenario["delta"]))
    rt = Runtime(scenario=scenario, sim=sim, chain=chain, users=users)

    directory: dict[str, int] = {}
    backend = scenario["backend"]
    if backend["kind"] == "tee":
        for party, agent in users.items():
            enclave = TeeEnclave(sim, party, scenario["ledger"], scenario["delta"],
                                 sim.tlp, directory)
            directory[enclave.participant_id] = enclave.identity.pk
            enclave.user_actor = agent
            enclave.unsafe_skip_margin_check = bool(
                scenario["mutations"].get("skip_margin_check"))
            sim.register(enclave)
            agent.adapter = TeeAdapter(sim, agent, enclave)
            rt.enclaves[party] = enclave
    else:
        cfg = DtcGroup(name="g", n=backend["n"], t=backend["t"])
        for party in users:
            rt.groups[party] = GroupInfo(user=party, cfg=cfg)
        for party, agent in users.items():
            for i in cfg.indices:
                node = DtcNode(sim, party, i, rt.groups, scenario["ledger"],
                               scenario["delta"], sim.tlp, directory)
                node.unsafe_skip_margin_check = bool(
                    scenario["mutations"].get("skip_margin_check"))
                directory[node.participant_id] = node.identity.pk
                rt.nodes[node.participant_id] = sim.register(node)
            agent.adapter = DtcAdapter(sim, agent, rt.groups, scenario["ledger"],
                                       scenario["delta"])

    for party, agent in users.items():
        agent.watcher_delay = policies.get("watcher_delay", {}).get(party, 0)
        agent.stale_recovery = party in policies.get("stale_recovery", [])
        agent.auto_recover = policies.get("auto_recover", True)
        by_party = incl.get("by_party", {})
        if party in by_party:
            value = by_party[party]
            agent.inclusion_delay = scenario["delta"] if value == "max" else value

    for fault in scenario["faults"]:
        kind = fault["kind"]
        if kind.startswith("byzantine"):
            rt.nodes[fault["target"]].byzantine = kind.split("_", 1)[1]
            sim.trace("fault_injected", detail=dict(fault))
        else:
            sim.inject_fault(FaultSpec(
                kind=kind, target=fault.get("target"), round=fault.get("round"),
                src=fault.get("src"), dst=fault.get("dst"),
                env_id=fault.get("env_id"), until=fault.get("until")))

    for f in scenario["funding"]:
        aid, owner, rnd, t_rec = f["aid"], f["owner"], f["round"], f["recovery_time"]
        sim.at_round(rnd, lambda s, owner=owner, aid=aid, t_rec=t_rec:
                     users[owner].start_deposit("dep-" + aid, aid, t_rec))

    for i, action in enumerate(scenario["script"]):
        sim.at_round(action["round"], _make_action(rt, i, action))

    if scenario.get("check_invariants", True):
        sim.add_service(ExclusiveCustodyChecker(rt))
    for action in sim._env_actions.pop(0, []):
        action(sim)
    sim.drain_due()
    return rt


def _make_action(rt: Runtime, index: int, action: dict):
    users = rt.users

    def run_action(sim: Simulation) -> None:
        op = action["op"]
        if op == "pay":
            users[action["from"]].start_pay(action["sid"], action["aid"], action["to"])
        elif op == "swap":
            users[action["initiator"]].start_swap(
                action["sid"], action["aid_a"], action["aid_b"], action["responder"])
        elif op == "backup":
            sid = action.get("sid", "bk-%d" % index)
            users[action["party"]].start_backup(sid, action["aid"], action.get("release"))
        elif op == "recover":
            users[action["party"]].start_recover("rc-%d" % index, action["aid"])
        elif op == "pay_external":
            sid = action.get("sid", "ext-%d" % index)
            dest = action.get("dest_pk")
            dest_pk = int(dest, 16) if dest else users[action["party"]].wallet.pk
            users[action["party"]].start_pay_external(sid, action["aid"], dest_pk)
    return run_action


def _emit_snapshots(rt: Runtime) -> None:
    sim = rt.sim
    for party, enclave in sorted(rt.enclaves.items()):
        sim.trace("final_snapshot", src=enclave.participant_id,
                  detail={"kind": "enclave", "state": enclave.state_dump()})
    for nid, node in sorted(rt.nodes.items()):
        sim.trace("final_snapshot", src=nid,
                  detail={"kind": "node", "state": node.state_dump()})
    for party, agent in sorted(rt.users.items()):
        vault = []
        for aid, entries in sorted(agent.vault.items()):
            for e in entries:
                vault.append({"aid": aid, "release": e.release,
                              "pk_r": "%064x" % e.artifact.pk_r,
                              "owner_pk": "%064x" % e.owner_pk,
                              "solved": e.solved_tx is not None,
                              "retired": e.retired, "submitted": e.submitted})
        sim.trace("final_snapshot", src=party, detail={"kind": "vault", "vault": vault})
    sim.trace("final_snapshot", src=None, detail={
        "kind": "ledger",
        "assets": {aid: "%064x" % pk for aid, pk in sorted(rt.chain.assets.items())},
        "log": rt.chain.export_log()})
    crashed = {pid: rnd for pid, rnd in sorted(rt.sim.crashes.items())}
    sim.trace("final_snapshot", src=None, detail={"kind": "faults", "crashed": crashed})


def run(scenario: dict) -> dict:
    rt = build_runtime(scenario)
    rt.sim.run_until(rt.scenario["horizon"])
    _emit_snapshots(rt)
    report = build_report(rt.sim.trace_events, rt.scenario)
    report["_runtime"] = rt
    return report


# --- report construction (trace-only) ---------------------------------------------


def _snapshots(trace: list[dict]) -> dict:
    snaps = {"enclave": {}, "node": {}, "vault": {}, "ledger": None, "faults": None}
    for e in trace:
        if e["kind"] != "final_snapshot":
            continue
        kind = e["detail"]["kind"]
        if kind == "enclave":
            snaps["enclave"][e["src"]] = e["detail"]["state"]
        elif kind == "node":
            snaps["node"][e["src"]] = e["detail"]["state"]
        elif kind == "vault":
            snaps["vault"][e["src"]] = e["detail"]["vault"]
        else:
            snaps[kind] = e["detail"]
    return snaps


def attribute_ownership(trace: list[dict], scenario: dict) -> dict[str, dict]:
    snaps = _snapshots(trace)
    keys = differential.key_map(scenario)
    custody = differential._custody_map(trace)
    custody_pk_of = {aid: pk for pk, aid in custody.items()}
    crashed = snaps["faults"]["crashed"] if snaps["faults"] else {}
    horizon = scenario["horizon"]

    def is_crashed(pid: str) -> bool:
        at = crashed.get(pid)
        return at is not None and at <= horizon

    byz = differential._byzantine_counts(scenario)
    out = {}
    funded = [f["aid"] for f in scenario["funding"]]
    ledger_assets = snaps["ledger"]["assets"] if snaps["ledger"] else {}
    for aid in funded:
        pk_hex = ledger_assets.get(aid)
        if pk_hex is None:
            out[aid] = {"party": None, "via": "unfunded"}
            continue
        sym = differential.symbolize(pk_hex, keys, custody)
        if sym[0] in ("wallet", "skey"):
            out[aid] = {"party": sym[1], "via": "chain"}
            continue
        if sym[0] == "ext":
            out[aid] = {"party": None, "via": "external"}
            continue
        # still under TE custody on-chain: usable holder, else best live claim
        holder = None
        if scenario["backend"]["kind"] == "tee":
            for tee_pid, state in snaps["enclave"].items():
                party = state["user"]
                rec = state["assets"].get(aid)
                if rec and rec["state"] == "unlocked" and not is_crashed(tee_pid):
                    holder = party
                    break
        else:
            t = scenario["backend"]["t"]
            per_party: dict[str, int] = {}
            for nid, state in snaps["node"].items():
                party = nid.split(":")[1]
                if is_crashed(nid) or nid in byz.get(party, set()):
                    continue
                rec = state["assets"].get(aid)
                if rec and rec["state"] == "unlocked" and not rec["tombstoned"]:
                    per_party[party] = per_party.get(party, 0) + 1
            f = 0
            for party, count in sorted(per_party.items()):
                if count >= t - len(byz.get(party, set())):
                    holder = party
                    break
        if holder is not None:
            out[aid] = {"party": holder, "via": "custody"}
            continue
        claims = []
        for party, vault in snaps["vault"].items():
            if is_crashed(party):
                continue
            for entry in vault:
                if (entry["aid"] == aid and not entry["retired"]
                        and not entry["submitted"]
                        and entry["owner_pk"] == custody_pk_of.get(aid)):
                    claims.append((entry["release"], party))
        if claims:
            release, party = min(claims)
            out[aid] = {"party": party, "via": "claim", "release": release}
        else:
            out[aid] = {"party": None, "via": "stuck"}
    return out


def build_report(trace: list[dict], scenario: dict) -> dict:
    receipts = [dict(e["detail"]) for e in trace if e["kind"] == "receipt"]
    ownership = attribute_ownership(trace, scenario)
    messages: dict[str, int] = {}
    submissions: dict[str, int] = {}
    for e in trace:
        if e["kind"] == "send" and e["sid"]:
            messages[e["sid"]] = messages.get(e["sid"], 0) + 1
        if e["kind"] == "ledger_submitted":
            submissions["total"] = submissions.get("total", 0) + 1
    fairness = []
    for action in scenario.get("script", []):
        if action["op"] != "swap":
            continue
        a_party, b_party = action["initiator"], action["responder"]
        owners = {ownership[action["aid_a"]]["party"], ownership[action["aid_b"]]["party"]}
        verdict = owners == {a_party, b_party}
        fairness.append({"sid": action["sid"], "pass": verdict,
                         "owners": {action["aid_a"]: ownership[action["aid_a"]],
                                    action["aid_b"]: ownership[action["aid_b"]]}})
    diff = None
    if scenario.get("oracle"):
        diff = differential.differential_check(trace, scenario, scenario["horizon"])
    violations = [e["detail"] for e in trace if e["kind"] == "invariant_violation"]
    failed_ops = [e for e in trace if e["kind"] == "op_failed"]
    ok = (all(f["pass"] for f in fairness)
          and (diff is None or diff["equal"])
          and not violations)
    return {
        "name": scenario.get("name", "scenario"),
        "ok": ok,
        "receipts": receipts,
        "fairness": fairness,
        "differential": diff,
        "ownership": ownership,
        "messages_by_sid": messages,
        "onchain_submissions": submissions.get("total", 0),
        "invariant_violations": violations,
        "failed_ops": [{"sid": e["sid"], "detail": e["detail"]} for e in failed_ops],
    }


# --- sweeps and benchmarks ------------------------------------------------------------


def swap_window(report: dict, scenario: dict) -> tuple[int, int]:
    action = next(a for a in scenario["script"] if a["op"] == "swap")
    start = action["round"]
    completes = [r["complete"] for r in report["receipts"]
                 if r.get("sid") == action["sid"] and r.get("kind") == "swap"]
    end = max(completes) if completes else start + 12
    return start, end


def sweep_crashes(scenario: dict) -> list[dict]:
    """One run per (TE side x protocol round) single-crash point of the swap."""
    base = validate_scenario(copy.deepcopy(scenario))
    action = next(a for a in base["script"] if a["op"] == "swap")
    baseline = run(base)
    start, end = swap_window(baseline, base)
    reports = []
    backend = base["backend"]["kind"]
    for party in (action["initiator"], action["responder"]):
        for rnd in range(start, end + 1):
            variant = copy.deepcopy(base)
            variant["name"] = "%s-crash-%s-r%d" % (base["name"], party, rnd)
            if backend == "tee":
                targets = [tee_id(party)]
            else:
                targets = [node_id(party, i)
                           for i in range(1, base["backend"]["n"] + 1)]
            for target in targets:
                variant["faults"].append({"kind": "crash", "target": target, "round": rnd})
            report = run(variant)
            report["crash_point"] = {"party": party, "round": rnd}
            reports.append(report)
    return reports


def bench_rounds(scenario: dict, repetitions: int) -> dict:
    """Round/message counts per op kind over fresh runs with varied seeds."""
    per_kind: dict[str, dict] = {}
    for rep in range(repetitions):
        variant = copy.deepcopy(scenario)
        variant["seed"] = scenario.get("seed", 0) + rep
        report = run(variant)
        for receipt in report["receipts"]:
            kind = receipt["kind"]
            bucket = per_kind.setdefault(kind, {"rounds": [], "messages": [],
                                                "onchain": []})
            bucket["rounds"].append(receipt["rounds"])
            bucket["messages"].append(report["messages_by_sid"].get(receipt["sid"], 0))
            bucket["onchain"].append(receipt["onchain"])
    counters = {}
    for kind, bucket in sorted(per_kind.items()):
        counters[kind] = {
            "runs": len(bucket["rounds"]),
            "rounds_min": min(bucket["rounds"]),
            "rounds_max": max(bucket["rounds"]),
            "messages_min": min(bucket["messages"]),
            "messages_max": max(bucket["messages"]),
            "onchain_max": max(bucket["onchain"]),
        }
    return counters
