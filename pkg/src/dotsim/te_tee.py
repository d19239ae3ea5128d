"""Enclave-flavored trusted entity.

One logical enclave per user.  The enclave holds the asset key material,
executes deposits, backups, payments and swaps, and talks to other enclaves
only through user-relayed channels (every inter-enclave payload is encrypted
to the destination's certified identity key and signed with the sender's).
The host process and enclave exchange calls within the same round, so the
owning user drives it with direct method calls; everything between enclaves
is an envelope.

Asset state machine: records are ``unlocked`` except while a handoff or
artifact issuance is in flight.  A record's release time is set at deposit
and afterwards only ever decreases: re-backups must come at least ``delta``
rounds earlier than the current release, and the first artifact issued for a
record may not release later than the record's current time.  That ordering
is what lets the newest owner always win on-chain recovery races.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim import encoding, ledger, wire
from dotsim.artifacts import NATIVE, TLP, BackupArtifact
from dotsim.clock_net import Actor, Envelope, Simulation
from dotsim.crypto import pkc
from dotsim.errors import (
    SimError,
    AssetLocked,
    BadHandoffSig,
    DecryptFailure,
    MarginViolation,
    MonotonicityViolation,
    NoPayInfo,
    NoSwapProc,
    NotOwner,
    PastDeadline,
    SelfPay,
    StaleSid,
)

LOCKED = "locked"
UNLOCKED = "unlocked"


@dataclass
class AssetRecord:
    aid: str
    sk_a: int
    pk_a: int
    t_release: int
    state: str = UNLOCKED
    has_backup: bool = False


@dataclass
class SwapSession:
    sid: str
    role: str                     # "initiator" | "responder"
    aid_a: str
    aid_b: str | None = None
    peer: str | None = None       # counterparty user id
    stage: str = "sent_A"         # sent_A | sent_B | done | aborted
    t_prime: int | None = None
    opti_deadline: int | None = None


def tee_id(user: str) -> str:
    return "tee:" + user


class TeeEnclave(Actor):
    def __init__(self, sim: Simulation, user: str, ledger_kind: str, delta: int,
                 tlp_oracle, directory: dict[str, int]) -> None:
        super().__init__(tee_id(user), owner=user)
        self.sim = sim
        self.user = user
        self.ledger_kind = ledger_kind
        self.delta = delta
        self.tlp = tlp_oracle
        self.directory = directory  # participant id -> certified identity pk
        self.identity = pkc.keygen(pkc.derive(b"tee-identity", str(sim.seed).encode(), user.encode()))
        self.assets: dict[str, AssetRecord] = {}
        self.seen_sids: set[str] = set()
        self.pay_offers: dict[str, tuple] = {}
        self.swap_offers: dict[str, tuple] = {}
        self.sessions: dict[str, SwapSession] = {}
        self._enc_counter = 0
        self.user_actor = None  # wired by the harness; receives completion callbacks
        self.unsafe_skip_margin_check = False  # mutation hook for oracle-sensitivity tests

    # --- helpers -----------------------------------------------------------------

    def _fresh_sid(self, sid: str) -> None:
        if sid in self.seen_sids:
            raise StaleSid(sid)
        self.seen_sids.add(sid)

    def _owned_unlocked(self, aid: str) -> AssetRecord:
        rec = self.assets.get(aid)
        if rec is None:
            raise NotOwner(aid)
        if rec.state == LOCKED:
            raise AssetLocked(aid)
        return rec

    def _entropy(self) -> bytes:
        self._enc_counter += 1
        return pkc.derive(b"tee-entropy", str(self.sim.seed).encode(),
                          self.user.encode(), encoding.encode_u64(self._enc_counter))

    def _send_wrapped(self, sid: str, dest_user: str, body: bytes, secret: bool) -> int:
        dst = tee_id(dest_user)
        recipient_pk = self.directory[dst] if secret else None
        payload = wire.wrap(self.participant_id, self.identity.sk, body,
                            recipient_pk=recipient_pk, entropy=self._entropy())
        return self.sim.send_async(sid, self.participant_id, dst, payload)

    def _trace(self, kind: str, sid: str | None = None, **detail) -> None:
        self.sim.trace(kind, sid=sid, src=self.participant_id, detail=detail)

    def _lock(self, rec: AssetRecord, sid: str) -> None:
        rec.state = LOCKED
        self._trace("asset_locked", sid=sid, aid=rec.aid, party=self.user)

    def _unlock(self, rec: AssetRecord, sid: str) -> None:
        rec.state = UNLOCKED
        self._trace("asset_unlocked", sid=sid, aid=rec.aid, party=self.user)

    def _notify_user(self, method: str, *args) -> None:
        if self.user_actor is not None and not self.sim.crashed(self.user):
            getattr(self.user_actor, method)(*args)

    # --- deposit --------------------------------------------------------------------

    def getpk(self, sid: str, aid: str, recovery_time: int) -> int:
        self._fresh_sid(sid)
        if recovery_time < self.sim.clock:
            raise PastDeadline("T=%d < round %d" % (recovery_time, self.sim.clock))
        kp = pkc.keygen(pkc.derive(b"asset-key", str(self.sim.seed).encode(),
                                   self.user.encode(), sid.encode(), aid.encode()))
        self.assets[aid] = AssetRecord(aid=aid, sk_a=kp.sk, pk_a=kp.pk, t_release=recovery_time)
        self._trace("asset_created", sid=sid, aid=aid, party=self.user,
                    t_release=recovery_time, pk="%064x" % kp.pk)
        return kp.pk

    # --- backup ---------------------------------------------------------------------

    def backup(self, sid: str, aid: str, pk_r: int, t_new: int) -> BackupArtifact:
        self._fresh_sid(sid)
        rec = self._owned_unlocked(aid)
        if t_new < self.sim.clock:
            raise PastDeadline("release before current round")
        if rec.has_backup:
            if rec.t_release - t_new < self.delta:
                raise MonotonicityViolation(
                    "re-backup must release >= delta earlier (have %d, want %d)"
                    % (rec.t_release, t_new))
        elif t_new > rec.t_release:
            raise MonotonicityViolation("initial backup may not release later than the deposit time")
        self._lock(rec, sid)
        rec.t_release = t_new
        rec.has_backup = True
        self._trace("trelease_set", sid=sid, aid=aid, party=self.user, value=t_new)
        if self.ledger_kind == ledger.TIMELOCK:
            tx = ledger.make_tx(rec.sk_a, ledger.TIMELOCK, aid, pk_r, t_new)
            artifact = BackupArtifact(aid=aid, pk_r=pk_r, release=t_new,
                                      created_round=self.sim.clock, kind=NATIVE,
                                      ledger_kind=self.ledger_kind, owner_pk=rec.pk_a, tx=tx)
        else:
            tx = ledger.make_tx(rec.sk_a, ledger.SCRIPTLESS, aid, pk_r, None)
            puzzle = self.tlp.pgen(t_new - self.sim.clock, ledger.tx_to_bytes(tx))
            artifact = BackupArtifact(aid=aid, pk_r=pk_r, release=t_new,
                                      created_round=self.sim.clock, kind=TLP,
                                      ledger_kind=self.ledger_kind, owner_pk=rec.pk_a, puzzles=[puzzle])
        self._trace("backup_issued", sid=sid, aid=aid, party=self.user,
                    pk_r="%064x" % pk_r, release=t_new)
        self._unlock(rec, sid)
        return artifact

    # --- payment ----------------------------------------------------------------------

    def pay_initiate(self, sid: str, aid: str, dest_user: str) -> int:
        self._fresh_sid(sid)
        if dest_user == self.user:
            raise SelfPay(dest_user)
        rec = self._owned_unlocked(aid)
        self._lock(rec, sid)
        body = encoding.pack("pay_info", sid.encode(), aid.encode(),
                             encoding.encode_int(rec.sk_a), encoding.encode_int(rec.pk_a),
                             encoding.encode_u64(rec.t_release))
        env_id = self._send_wrapped(sid, dest_user, body, secret=True)
        del self.assets[aid]
        self._trace("asset_removed", sid=sid, aid=aid, party=self.user)
        return env_id

    def pay_accept(self, sid: str) -> tuple[str, int, int]:
        offer = self.pay_offers.pop(sid, None)
        if offer is None:
            raise NoPayInfo(sid)
        self._fresh_sid(sid)
        aid, sk_a, pk_a, t_release, sender = offer
        t_new = t_release - self.delta
        self.assets[aid] = AssetRecord(aid=aid, sk_a=sk_a, pk_a=pk_a, t_release=t_new)
        self._trace("asset_added", sid=sid, aid=aid, party=self.user, t_release=t_new)
        self._trace("pay_complete", sid=sid, aid=aid, party=self.user)
        return aid, pk_a, t_new

    # --- swap -------------------------------------------------------------------------

    def swap_initiate(self, sid: str, aid_a: str, dest_user: str, pk_a_prime: int) -> int:
        self._fresh_sid(sid)
        if dest_user == self.user:
            raise SelfPay(dest_user)
        rec = self._owned_unlocked(aid_a)
        self._lock(rec, sid)
        self.sessions[sid] = SwapSession(sid=sid, role="initiator", aid_a=aid_a,
                                         peer=dest_user, opti_deadline=self.sim.clock + 2)
        body = encoding.pack("swap_proc", sid.encode(), aid_a.encode(),
                             encoding.encode_int(rec.sk_a), encoding.encode_int(rec.pk_a),
                             encoding.encode_u64(rec.t_release))
        return self._send_wrapped(sid, dest_user, body, secret=True)

    def swap_respond(self, sid: str, aid_a: str, aid_b: str,
                     pk_a_prime: int, pk_b_prime: int) -> BackupArtifact:
        offer = self.swap_offers.pop(sid, None)
        if offer is None or offer[0] != aid_a:
            raise NoSwapProc(sid)
        self._fresh_sid(sid)
        _, sk_aa, pk_aa, t_release_a, sender = offer
        rec_b = self._owned_unlocked(aid_b)
        margin = rec_b.t_release - t_release_a
        self._trace("margin_checked", sid=sid, aid=aid_a, margin=margin, bound=2 * self.delta)
        if margin <= 2 * self.delta and not self.unsafe_skip_margin_check:
            raise MarginViolation("need t_release_b - t_release_a > 2*delta, have %d" % margin)
        # Contingent lock: take custody of asset A, keep both locked.
        rec_a = AssetRecord(aid=aid_a, sk_a=sk_aa, pk_a=pk_aa, t_release=t_release_a,
                            state=LOCKED, has_backup=True)
        self.assets[aid_a] = rec_a
        self._trace("asset_added", sid=sid, aid=aid_a, party=self.user, t_release=t_release_a)
        self._trace("asset_locked", sid=sid, aid=aid_a, party=self.user)
        self._lock(rec_b, sid)
        t_prime = t_release_a - self.delta
        rec_a.t_release = t_prime
        rec_b.t_release = t_prime + 2 * self.delta
        self._trace("trelease_set", sid=sid, aid=aid_a, party=self.user, value=t_prime)
        self._trace("trelease_set", sid=sid, aid=aid_b, party=self.user, value=rec_b.t_release)
        timelock = t_prime if self.ledger_kind == ledger.TIMELOCK else None
        inner_tx = ledger.make_tx(rec_b.sk_a, self.ledger_kind, aid_b, pk_a_prime, timelock)
        self._trace("backup_authorized", sid=sid, aid=aid_b, party=self.user,
                    pk_r="%064x" % pk_a_prime, release=t_prime, nested=False)
        outer_tx = ledger.make_tx(rec_a.sk_a, self.ledger_kind, aid_a, pk_b_prime, timelock,
                                  payload=ledger.tx_to_bytes(inner_tx))
        self._trace("backup_authorized", sid=sid, aid=aid_a, party=self.user,
                    pk_r="%064x" % pk_b_prime, release=t_prime, nested=True)
        if self.ledger_kind == ledger.TIMELOCK:
            artifact = BackupArtifact(aid=aid_a, pk_r=pk_b_prime, release=t_prime,
                                      created_round=self.sim.clock, kind=NATIVE,
                                      ledger_kind=self.ledger_kind, owner_pk=rec_a.pk_a, tx=outer_tx)
        else:
            puzzle = self.tlp.pgen(t_prime - self.sim.clock, ledger.tx_to_bytes(outer_tx))
            artifact = BackupArtifact(aid=aid_a, pk_r=pk_b_prime, release=t_prime,
                                      created_round=self.sim.clock, kind=TLP,
                                      ledger_kind=self.ledger_kind, owner_pk=rec_a.pk_a, puzzles=[puzzle])
        self._trace("backup_issued", sid=sid, aid=aid_a, party=self.user,
                    pk_r="%064x" % pk_b_prime, release=t_prime)
        self.sessions[sid] = SwapSession(sid=sid, role="responder", aid_a=aid_a, aid_b=aid_b,
                                         peer=sender, stage="sent_B", t_prime=t_prime)
        body = encoding.pack("swap_opti", sid.encode(), aid_b.encode(),
                             encoding.encode_int(rec_b.sk_a), encoding.encode_int(rec_b.pk_a),
                             encoding.encode_u64(rec_b.t_release))
        self._send_wrapped(sid, sender, body, secret=True)
        return artifact

    def _finalize_initiator(self, sid: str, aid_b: str, sk_b: int, pk_b: int, t_release_b: int) -> None:
        session = self.sessions[sid]
        self.assets[aid_b] = AssetRecord(aid=aid_b, sk_a=sk_b, pk_a=pk_b, t_release=t_release_b)
        self._trace("asset_added", sid=sid, aid=aid_b, party=self.user, t_release=t_release_b)
        if session.aid_a in self.assets:
            del self.assets[session.aid_a]
            self._trace("asset_removed", sid=sid, aid=session.aid_a, party=self.user)
        ok_body = encoding.pack("swap_ok", sid.encode())
        self._send_wrapped(sid, session.peer, ok_body, secret=False)
        session.stage = "done"
        session.aid_b = aid_b
        self._trace("swap_complete", sid=sid, party=self.user, role="initiator")
        self._notify_user("on_swap_complete", sid, aid_b)

    def _finalize_responder(self, sid: str) -> None:
        session = self.sessions[sid]
        if session.aid_b in self.assets:
            del self.assets[session.aid_b]
            self._trace("asset_removed", sid=sid, aid=session.aid_b, party=self.user)
        rec_a = self.assets.get(session.aid_a)
        if rec_a is not None:
            self._unlock(rec_a, sid)
        session.stage = "done"
        self._trace("swap_complete", sid=sid, party=self.user, role="responder")
        self._notify_user("on_swap_complete", sid, session.aid_a)

    # --- non-participant exit payment ---------------------------------------------------

    def pay_external(self, sid: str, aid: str, dest_pk: int) -> BackupArtifact:
        """Sign a recovery-style transfer to an outside address, releasable now."""
        self._fresh_sid(sid)
        rec = self._owned_unlocked(aid)
        self._lock(rec, sid)
        now = self.sim.clock
        timelock = now if self.ledger_kind == ledger.TIMELOCK else None
        tx = ledger.make_tx(rec.sk_a, self.ledger_kind, aid, dest_pk, timelock)
        del self.assets[aid]
        self._trace("asset_removed", sid=sid, aid=aid, party=self.user)
        self._trace("backup_issued", sid=sid, aid=aid, party=self.user,
                    pk_r="%064x" % dest_pk, release=now)
        return BackupArtifact(aid=aid, pk_r=dest_pk, release=now, created_round=now,
                              kind=NATIVE, ledger_kind=self.ledger_kind, owner_pk=rec.pk_a, tx=tx)

    # --- envelope handling ----------------------------------------------------------------

    def on_deliver(self, sim: Simulation, env: Envelope) -> None:
        try:
            sender_id, body = wire.unwrap(env.payload, self.directory, recipient_sk=self.identity.sk)
        except (BadHandoffSig, DecryptFailure) as exc:
            self._trace("handoff_rejected", sid=env.sid, reason=exc.__class__.__name__)
            return
        sender_user = sender_id.split(":", 1)[1]
        tag, fields = encoding.unpack(body)
        if tag == "pay_info":
            sid = fields[0].decode()
            if sid in self.seen_sids or sid in self.pay_offers:
                self._trace("replay_dropped", sid=sid)
                return
            self.pay_offers[sid] = (fields[1].decode(), encoding.decode_int(fields[2]),
                                    encoding.decode_int(fields[3]),
                                    int.from_bytes(fields[4], "big"), sender_user)
            self._trace("offer_received", sid=sid, aid=fields[1].decode(),
                        party=self.user, op="pay")
        elif tag == "swap_proc":
            sid = fields[0].decode()
            if sid in self.seen_sids or sid in self.swap_offers:
                self._trace("replay_dropped", sid=sid)
                return
            self.swap_offers[sid] = (fields[1].decode(), encoding.decode_int(fields[2]),
                                     encoding.decode_int(fields[3]),
                                     int.from_bytes(fields[4], "big"), sender_user)
            self._trace("offer_received", sid=sid, aid=fields[1].decode(),
                        party=self.user, op="swap")
        elif tag == "swap_opti":
            sid = fields[0].decode()
            session = self.sessions.get(sid)
            if session is None or session.role != "initiator" or session.stage != "sent_A":
                self._trace("opti_dropped", sid=sid)
                return
            self._finalize_initiator(sid, fields[1].decode(), encoding.decode_int(fields[2]),
                                     encoding.decode_int(fields[3]), int.from_bytes(fields[4], "big"))
        elif tag == "swap_ok":
            sid = fields[0].decode()
            session = self.sessions.get(sid)
            if session is None or session.role != "responder" or session.stage != "sent_B":
                self._trace("ok_dropped", sid=sid)
                return
            if sender_user != session.peer:
                self._trace("handoff_rejected", sid=sid, reason="NoSwapOk")
                return
            self._finalize_responder(sid)
        else:
            self._trace("unknown_message", sid=env.sid, tag=tag)

    def on_round(self, sim: Simulation, rnd: int) -> None:
        for session in self.sessions.values():
            if (session.role == "initiator" and session.stage == "sent_A"
                    and session.opti_deadline is not None and rnd >= session.opti_deadline):
                session.stage = "aborted"
                self._trace("swap_aborted", sid=session.sid, party=self.user, reason="NoSwapOpti")

    # --- introspection -----------------------------------------------------------------------

    def state_dump(self) -> dict:
        return {
            "user": self.user,
            "assets": {aid: {"t_release": rec.t_release, "state": rec.state,
                             "pk": "%064x" % rec.pk_a, "has_backup": rec.has_backup}
                       for aid, rec in sorted(self.assets.items())},
            "sessions": {sid: {"role": s.role, "stage": s.stage} for sid, s in sorted(self.sessions.items())},
        }


class TeeAdapter:
    """User-side face of the co-located enclave: direct calls, same round."""

    auto_backup_on_swap = False  # the user drives the post-swap backup (same round)

    def __init__(self, sim: Simulation, agent, enclave: TeeEnclave) -> None:
        self.sim = sim
        self.agent = agent
        self.enclave = enclave

    def _reachable(self) -> bool:
        return not self.sim.crashed(self.enclave.participant_id)

    def deposit(self, sid, aid, recovery_time, on_ok, on_fail) -> None:
        if not self._reachable():
            on_fail("te unreachable")
            return
        try:
            on_ok(self.enclave.getpk(sid, aid, recovery_time))
        except SimError as exc:
            on_fail(exc)

    def backup(self, sid, aid, pk_r, release, on_ok, on_fail) -> None:
        if not self._reachable():
            on_fail("te unreachable")
            return
        if release is None:
            rec = self.enclave.assets.get(aid)
            if rec is None:
                on_fail(NotOwner(aid))
                return
            release = rec.t_release - self.enclave.delta if rec.has_backup else rec.t_release
        try:
            on_ok(self.enclave.backup(sid, aid, pk_r, release))
        except SimError as exc:
            on_fail(exc)

    def pay_initiate(self, sid, aid, payee) -> None:
        if not self._reachable():
            raise SimError("te unreachable")
        self.enclave.pay_initiate(sid, aid, payee)

    def pay_accept(self, sid, aid, on_ok, on_fail) -> None:
        if not self._reachable():
            on_fail("te unreachable")
            return
        try:
            got_aid, _pk, t_release = self.enclave.pay_accept(sid)
            on_ok(sid, got_aid, t_release)
        except SimError as exc:
            on_fail(exc)

    def pay_external(self, sid, aid, dest_pk, on_ok, on_fail) -> None:
        if not self._reachable():
            on_fail("te unreachable")
            return
        try:
            on_ok(self.enclave.pay_external(sid, aid, dest_pk))
        except SimError as exc:
            on_fail(exc)

    def swap_initiate(self, sid, aid_a, aid_b, responder, pk_a_prime) -> None:
        if not self._reachable():
            raise SimError("te unreachable")
        self.enclave.swap_initiate(sid, aid_a, responder, pk_a_prime)

    def swap_respond(self, sid, aid_a, aid_b, pk_a_prime, pk_b_prime, on_artifact, on_fail) -> None:
        if not self._reachable():
            on_fail("te unreachable")
            return
        try:
            on_artifact(self.enclave.swap_respond(sid, aid_a, aid_b, pk_a_prime, pk_b_prime))
        except SimError as exc:
            on_fail(exc)

    def holds_unlocked(self, aid) -> bool:
        if not self._reachable():
            return False
        rec = self.enclave.assets.get(aid)
        return rec is not None and rec.state == UNLOCKED

    def alive(self) -> bool:
        return self._reachable()

    def handles(self, env) -> bool:
        return False

    def on_user_msg(self, env) -> None:  # pragma: no cover
        pass
