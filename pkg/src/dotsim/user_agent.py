"""User/wallet actor.

Funds temporary accounts, stores and solves recovery artifacts, relays
protocol notices to counterparties, fires unilateral recovery, and runs the
pessimistic-swap watchers against the ledger.  The user is backend-agnostic:
a small adapter object hides whether the trusted entity is a co-located
enclave (direct calls, same round) or a node group (envelopes plus quorum
aggregation).

Vault policy: the newest artifact per asset supersedes older ones; entries
are retired once the user has provably handed the asset on (payment receipt,
swap completion), so an honest user never races a successor.  Unsolved
puzzles advance one solve step per round.  Auto-recovery submits the newest
live claim at its release round unless the user's TE demonstrably still
holds the asset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim import encoding, ledger as ledger_mod
from dotsim.artifacts import NATIVE, TLP, TLP_SHARES, BackupArtifact
from dotsim.clock_net import Actor, Envelope, Simulation
from dotsim.crypto import pkc, shamir
from dotsim.crypto.tlp import IdealSolver
from dotsim.errors import BeforeRelease, NotFound, NotYetSolved, SimError


@dataclass
class VaultEntry:
    artifact: BackupArtifact
    owner_pk: int                  # custody key the transaction verifies under
    solvers: list[IdealSolver]
    solved_tx: ledger_mod.LedgerTx | None = None
    retired: bool = False
    submitted: bool = False

    @property
    def release(self) -> int:
        return self.artifact.release


@dataclass
class WatcherRule:
    sid: str
    watch_aid: str
    kind: str                      # "submit_own" | "extract"
    fire_round: int | None = None
    entry: VaultEntry | None = None
    retire_on_success: list[str] = field(default_factory=list)
    fired: bool = False
    cancelled: bool = False
    submitted_txid: int | None = None
    last_scanned: int = 0


@dataclass
class OpState:
    sid: str
    kind: str
    start_round: int
    detail: dict = field(default_factory=dict)
    status: str = "pending"        # pending | complete | failed


class UserAgent(Actor):
    def __init__(self, sim: Simulation, user: str, chain: ledger_mod.Ledger, delta: int) -> None:
        super().__init__(user, owner=user)
        self.sim = sim
        self.user = user
        self.chain = chain
        self.delta = delta
        self.wallet = pkc.keygen(pkc.derive(b"wallet", str(sim.seed).encode(), user.encode()))
        self.adapter = None  # wired by the harness
        self.vault: dict[str, list[VaultEntry]] = {}
        self.watchers: list[WatcherRule] = []
        self.ops: dict[str, OpState] = {}
        self.receipts: list[dict] = []
        self.swap_keys: dict[str, pkc.KeyPair] = {}
        # policies (set by the harness from the scenario)
        self.auto_recover = True
        self.stale_recovery = False
        self.watcher_delay = 0
        self.inclusion_delay: int | None = None

    # --- helpers -----------------------------------------------------------------

    def _trace(self, event: str, sid: str | None = None, **detail) -> None:
        self.sim.trace(event, sid=sid, src=self.user, detail=detail)

    def _receipt(self, op: OpState, complete_round: int, **extra) -> None:
        onchain = sum(1 for e in self.sim.trace_events
                      if e["kind"] == "ledger_submitted" and e["sid"] == op.sid)
        rec = {"sid": op.sid, "kind": op.kind, "party": self.user,
               "start": op.start_round, "complete": complete_round,
               "rounds": complete_round - op.start_round + 1, "onchain": onchain}
        rec.update(extra)
        self.receipts.append(rec)
        self.sim.trace("receipt", sid=op.sid, src=self.user, detail=rec)

    def swap_key(self, sid: str) -> pkc.KeyPair:
        if sid not in self.swap_keys:
            self.swap_keys[sid] = pkc.keygen(
                pkc.derive(b"swap-key", str(self.sim.seed).encode(), self.user.encode(), sid.encode()))
        return self.swap_keys[sid]

    def store_artifact(self, artifact: BackupArtifact) -> VaultEntry:
        solvers = [IdealSolver(self.sim.tlp, p) for p in artifact.puzzles]
        entry = VaultEntry(artifact=artifact, owner_pk=artifact.owner_pk, solvers=solvers)
        self.vault.setdefault(artifact.aid, []).append(entry)
        self._trace("artifact_stored", aid=artifact.aid, release=artifact.release,
                    kind=artifact.kind, pk_r="%064x" % artifact.pk_r)
        if artifact.kind == NATIVE:
            entry.solved_tx = artifact.tx
            self._trace("artifact_solved", aid=artifact.aid, release=artifact.release)
        return entry

    def retire_entries(self, aid: str) -> None:
        for entry in self.vault.get(aid, []):
            entry.retired = True

    def _newest_entry(self, aid: str, include_retired: bool = False) -> VaultEntry | None:
        entries = [e for e in self.vault.get(aid, []) if include_retired or not e.retired]
        if not entries:
            return None
        return min(entries, key=lambda e: e.release)

    # --- scripted operations ---------------------------------------------------------

    def start_deposit(self, sid: str, aid: str, recovery_time: int) -> None:
        op = self.ops[sid] = OpState(sid=sid, kind="deposit", start_round=self.sim.clock,
                                     detail={"aid": aid, "T": recovery_time})
        self._trace("op_started", sid=sid, kind="deposit", aid=aid)

        def on_pk(pk_a: int) -> None:
            def on_artifact(artifact: BackupArtifact) -> None:
                self.store_artifact(artifact)
                # Funding strictly follows artifact storage.
                self.chain.genesis_mint(aid, pk_a)
                op.status = "complete"
                self._receipt(op, self.sim.clock, aid=aid)
            self.adapter.backup(sid + "/b0", aid, self.wallet.pk, recovery_time,
                                on_artifact, lambda r: self._op_failed(op, r))
        self.adapter.deposit(sid, aid, recovery_time, on_pk, lambda r: self._op_failed(op, r))

    def _op_failed(self, op: OpState, reason: Exception | str) -> None:
        op.status = "failed"
        self._trace("op_failed", sid=op.sid, kind=op.kind, reason=str(reason))

    def start_backup(self, sid: str, aid: str, release: int | None) -> None:
        op = self.ops[sid] = OpState(sid=sid, kind="backup", start_round=self.sim.clock,
                                     detail={"aid": aid})
        self._trace("op_started", sid=sid, kind="backup", aid=aid)

        def on_artifact(artifact: BackupArtifact) -> None:
            self.store_artifact(artifact)
            op.status = "complete"
            self._receipt(op, self.sim.clock, aid=aid)
        self.adapter.backup(sid, aid, self.wallet.pk, release,
                            on_artifact, lambda r: self._op_failed(op, r))

    def start_pay(self, sid: str, aid: str, payee: str) -> None:
        op = self.ops[sid] = OpState(sid=sid, kind="pay", start_round=self.sim.clock,
                                     detail={"aid": aid, "payee": payee})
        self._trace("op_started", sid=sid, kind="pay", aid=aid, payee=payee)
        try:
            self.adapter.pay_initiate(sid, aid, payee)
        except SimError as exc:
            self._op_failed(op, exc)
            return
        body = encoding.pack("notice_pay", sid.encode(), aid.encode(),
                             encoding.encode_u64(op.start_round))
        self.sim.send_sync(sid, self.user, payee, body)

    def start_pay_external(self, sid: str, aid: str, dest_pk: int) -> None:
        op = self.ops[sid] = OpState(sid=sid, kind="pay_external", start_round=self.sim.clock,
                                     detail={"aid": aid})
        self._trace("op_started", sid=sid, kind="pay_external", aid=aid)

        def on_artifact(artifact: BackupArtifact) -> None:
            self.store_artifact(artifact)
            op.status = "complete"
            self._receipt(op, self.sim.clock, aid=aid, ready_to_broadcast=True)
        self.adapter.pay_external(sid, aid, dest_pk, on_artifact,
                                  lambda r: self._op_failed(op, r))

    def start_swap(self, sid: str, aid_a: str, aid_b: str, responder: str) -> None:
        op = self.ops[sid] = OpState(sid=sid, kind="swap", start_round=self.sim.clock,
                                     detail={"aid_a": aid_a, "aid_b": aid_b, "role": "initiator"})
        self._trace("op_started", sid=sid, kind="swap", aid_a=aid_a, aid_b=aid_b)
        pk_prime = self.swap_key(sid).pk
        try:
            self.adapter.swap_initiate(sid, aid_a, aid_b, responder, pk_prime)
        except SimError as exc:
            self._op_failed(op, exc)
            return
        self.watchers.append(WatcherRule(sid=sid, watch_aid=aid_a, kind="extract",
                                         last_scanned=self.sim.clock))
        self._trace("watcher_armed", sid=sid, watch_aid=aid_a, kind="extract")
        body = encoding.pack("notice_swap", sid.encode(), aid_a.encode(), aid_b.encode(),
                             encoding.encode_u64(op.start_round),
                             encoding.encode_int(pk_prime))
        self.sim.send_sync(sid, self.user, responder, body)

    def start_recover(self, sid: str, aid: str) -> None:
        self._trace("op_started", sid=sid, kind="recover", aid=aid)
        try:
            self.recover(aid)
        except SimError as exc:
            self._trace("op_failed", sid=sid, kind="recover", reason=str(exc))

    def recover(self, aid: str, include_retired: bool = False) -> int:
        entry = self._newest_entry(aid, include_retired=include_retired)
        if entry is None:
            raise NotFound("no artifact for %s" % aid)
        if self.sim.clock < entry.release:
            raise BeforeRelease("release %d" % entry.release)
        if entry.solved_tx is None:
            raise NotYetSolved(aid)
        return self._submit_entry(entry)

    def _submit_entry(self, entry: VaultEntry, sid: str | None = None) -> int:
        delay = self.inclusion_delay
        txid = self.chain.submit(entry.solved_tx, delay=delay)
        entry.submitted = True
        self.sim.trace("recovery_submitted", sid=sid, src=self.user, detail={
            "aid": entry.artifact.aid, "txid": txid, "release": entry.release,
            "pk_r": "%064x" % entry.artifact.pk_r})
        return txid

    # --- completion callbacks -----------------------------------------------------------

    def on_pay_complete(self, sid: str, aid: str, t_release: int) -> None:
        """Payee side: the payment phase is done; record it, back up, notify payer."""
        op = self.ops.setdefault(sid, OpState(sid=sid, kind="receive_pay",
                                              start_round=self.sim.clock))
        start = op.detail.get("payer_start", op.start_round)
        op.status = "complete"
        complete = self.sim.clock
        rec = {"sid": sid, "kind": "pay", "party": self.user,
               "start": start, "complete": complete,
               "rounds": complete - start + 1, "onchain": self._onchain(sid)}
        self.receipts.append(rec)
        self.sim.trace("receipt", sid=sid, src=self.user, detail=rec)

        def on_artifact(artifact: BackupArtifact) -> None:
            self.store_artifact(artifact)
            body = encoding.pack("notice_payok", sid.encode(), aid.encode())
            payer = op.detail.get("payer")
            if payer:
                self.sim.send_sync(sid, self.user, payer, body)
        self.adapter.backup(sid + "/b", aid, self.wallet.pk, None,
                            on_artifact, lambda r: self._op_failed(op, r))

    def _onchain(self, sid: str) -> int:
        return sum(1 for e in self.sim.trace_events
                   if e["kind"] == "ledger_submitted" and e["sid"] == sid)

    def on_swap_complete(self, sid: str, aid_received: str) -> None:
        op = self.ops.get(sid)
        role = op.detail.get("role", "responder") if op else "responder"
        if op is None:
            op = self.ops[sid] = OpState(sid=sid, kind="swap", start_round=self.sim.clock)
        op.status = "complete"
        for rule in self.watchers:
            if rule.sid == sid and rule.kind == "submit_own":
                rule.cancelled = True
        relinquished = op.detail.get("aid_a") if role == "initiator" else op.detail.get("aid_b")
        if relinquished:
            self.retire_entries(relinquished)
        complete = self.sim.clock
        start = op.detail.get("start", op.start_round)
        rec = {"sid": sid, "kind": "swap", "party": self.user, "role": role,
               "start": start, "complete": complete,
               "rounds": complete - start + 1, "onchain": self._onchain(sid)}
        self.receipts.append(rec)
        self.sim.trace("receipt", sid=sid, src=self.user, detail=rec)
        if not getattr(self.adapter, "auto_backup_on_swap", False):
            self.adapter.backup(sid + "/b-" + self.user, aid_received, self.wallet.pk, None,
                                lambda artifact: self.store_artifact(artifact),
                                lambda r: self._op_failed(op, r))

    # --- inbound notices ------------------------------------------------------------------

    def on_deliver(self, sim: Simulation, env: Envelope) -> None:
        if self.adapter is not None and self.adapter.handles(env):
            self.adapter.on_user_msg(env)
            return
        tag, fields = encoding.unpack(env.payload)
        if tag == "notice_pay":
            sid = fields[0].decode()
            aid = fields[1].decode()
            start = int.from_bytes(fields[2], "big")
            op = self.ops[sid] = OpState(sid=sid, kind="receive_pay", start_round=self.sim.clock,
                                         detail={"payer": env.src, "payer_start": start, "aid": aid})
            self.adapter.pay_accept(sid, aid, self.on_pay_complete,
                                    lambda r: self._op_failed(op, r))
        elif tag == "notice_swap":
            sid = fields[0].decode()
            aid_a, aid_b = fields[1].decode(), fields[2].decode()
            start = int.from_bytes(fields[3], "big")
            pk_a_prime = encoding.decode_int(fields[4])
            op = self.ops[sid] = OpState(
                sid=sid, kind="swap", start_round=self.sim.clock,
                detail={"aid_a": aid_a, "aid_b": aid_b, "role": "responder",
                        "start": start, "peer": env.src})
            pk_b_prime = self.swap_key(sid).pk

            def on_artifact(artifact: BackupArtifact) -> None:
                entry = self.store_artifact(artifact)
                rule = WatcherRule(sid=sid, watch_aid=aid_a, kind="submit_own",
                                   fire_round=artifact.release + self.watcher_delay,
                                   entry=entry, retire_on_success=[aid_b])
                self.watchers.append(rule)
                self._trace("watcher_armed", sid=sid, watch_aid=aid_a, kind="submit_own",
                            fire_round=rule.fire_round)
            self.adapter.swap_respond(sid, aid_a, aid_b, pk_a_prime, pk_b_prime,
                                      on_artifact, lambda r: self._op_failed(op, r))
        elif tag == "notice_payok":
            sid = fields[0].decode()
            aid = fields[1].decode()
            op = self.ops.get(sid)
            if op and op.kind == "pay":
                op.status = "complete"
                self.retire_entries(aid)
        else:
            self._trace("unknown_notice", sid=env.sid, tag=tag)

    # --- per-round duties --------------------------------------------------------------------

    def _solve_step(self, rnd: int) -> None:
        for entries in self.vault.values():
            for entry in entries:
                if entry.solved_tx is not None or not entry.solvers:
                    continue
                if rnd <= entry.artifact.created_round:
                    continue
                for solver in entry.solvers:
                    solver.step()
                self._maybe_finish(entry)

    def _maybe_finish(self, entry: VaultEntry) -> None:
        art = entry.artifact
        if art.kind == TLP:
            msg = entry.solvers[0].message()
            if msg is not None:
                entry.solved_tx = ledger_mod.tx_from_bytes(msg)
                self._trace("artifact_solved", aid=art.aid, release=art.release)
        elif art.kind == TLP_SHARES:
            done = [s for s in entry.solvers if s.solved()]
            if len(done) >= art.threshold:
                points: dict[int, int] = {}
                for s in done[:art.threshold]:
                    _, fields = encoding.unpack(s.message())
                    points[int.from_bytes(fields[0], "big")] = encoding.decode_int(fields[1])
                sk = shamir.interpolate_at_zero(points)
                timelock = art.release if art.ledger_kind == ledger_mod.TIMELOCK else None
                entry.solved_tx = ledger_mod.make_tx(sk, art.ledger_kind, art.aid,
                                                     art.pk_r, timelock)
                self._trace("artifact_solved", aid=art.aid, release=art.release,
                            reconstructed=True)

    def _run_watchers(self, rnd: int) -> None:
        for rule in self.watchers:
            if rule.cancelled:
                continue
            if rule.kind == "submit_own":
                if rule.fired:
                    if rule.submitted_txid is not None and rule.retire_on_success:
                        rec = self.chain.tx_log[rule.submitted_txid]
                        if rec.processed and rec.applied:
                            for aid in rule.retire_on_success:
                                self.retire_entries(aid)
                            rule.retire_on_success = []
                    continue
                if rnd >= rule.fire_round and rule.entry and rule.entry.solved_tx is not None:
                    rule.fired = True
                    rule.submitted_txid = self._submit_entry(rule.entry, sid=rule.sid)
                    self._trace("watcher_fired", sid=rule.sid, watch_aid=rule.watch_aid,
                                kind=rule.kind)
            elif rule.kind == "extract" and not rule.fired:
                for rec in self.chain.observe_since(rule.last_scanned):
                    if rec.tx.aid != rule.watch_aid or not rec.applied or not rec.tx.payload:
                        continue
                    try:
                        nested = ledger_mod.tx_from_bytes(rec.tx.payload)
                    except ValueError:
                        continue
                    rule.fired = True
                    txid = self.chain.submit(nested, delay=self.inclusion_delay)
                    self.sim.trace("recovery_submitted", sid=rule.sid, src=self.user, detail={
                        "aid": nested.aid, "txid": txid, "release": None, "extracted": True,
                        "pk_r": "%064x" % nested.pk_dst})
                    self._trace("watcher_fired", sid=rule.sid, watch_aid=rule.watch_aid,
                                kind=rule.kind)
                    break
                rule.last_scanned = rnd

    def _auto_recover(self, rnd: int) -> None:
        for aid, entries in self.vault.items():
            candidates = [e for e in entries if not e.submitted and e.solved_tx is not None
                          and e.release <= rnd and (self.stale_recovery or not e.retired)]
            if not candidates:
                continue
            entry = min(candidates, key=lambda e: e.release)
            if not self.stale_recovery:
                if self.adapter.holds_unlocked(aid):
                    continue
                try:
                    if self.chain.query(aid) != entry.owner_pk:
                        continue
                except NotFound:
                    continue
            self._submit_entry(entry)

    def on_round(self, sim: Simulation, rnd: int) -> None:
        self._solve_step(rnd)
        self._run_watchers(rnd)
        if self.auto_recover:
            self._auto_recover(rnd)
