"""Node-group trusted entity.

Each user's TE is an n-node group with threshold t = ceil(2n/3).  Deposit
runs a DKG per asset, backup is a threshold signature (or per-node puzzle set
on scriptless ledgers), payment reshares the asset key to the payee's group,
and a swap is reshare + two nested threshold signatures inside the responder
group + reshare back.  No node ever stores a full secret key.

All node-to-node traffic inside a group is relayed by a user (one round per
hop, halted if the relayer crashes); cross-group protocol messages travel on
the adversary-scheduled asynchronous channel.  Group-level effects are only
recognized on bytewise-consistent quorums.

Per the protocol figures, a payee's nodes act on a payment one round after
the acknowledgement reaches them (they first require a quorum of transfer
notices from the payer group); slow or dropped notices make them abort at
that check round, leaving the payer side locked but recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim import encoding, ledger as ledger_mod, wire
from dotsim.artifacts import NATIVE, TLP, TLP_SHARES, BackupArtifact
from dotsim.clock_net import Actor, Envelope, Simulation
from dotsim.crypto import pkc
from dotsim.crypto.dtc import DkgSession, DtcGroup, ReshareNew, ReshareOld, SignSession
from dotsim.crypto.tlp import IdealPuzzle
from dotsim.errors import BadHandoffSig, DecryptFailure, SimError

LOCKED = "locked"
UNLOCKED = "unlocked"


def node_id(user: str, index: int) -> str:
    """index is the Shamir x-coordinate, 1-based."""
    return "node:%s:%d" % (user, index)


@dataclass
class GroupInfo:
    user: str
    cfg: DtcGroup

    @property
    def node_ids(self) -> list[str]:
        return [node_id(self.user, i) for i in self.cfg.indices]


@dataclass
class ShareRecord:
    aid: str
    share: int
    pk_a: int
    t_release: int
    state: str = UNLOCKED
    has_backup: bool = False
    tombstoned: bool = False


@dataclass
class QuorumTracker:
    threshold: int
    received: dict[str, bytes] = field(default_factory=dict)
    fired: bool = False

    def add(self, sender: str, body: bytes) -> None:
        self.received.setdefault(sender, body)

    def winning(self) -> bytes | None:
        """The payload with >= threshold bytewise-equal copies, if any."""
        counts: dict[bytes, int] = {}
        for body in self.received.values():
            counts[body] = counts.get(body, 0) + 1
        for body, count in sorted(counts.items()):
            if count >= self.threshold:
                return body
        return None


def _puzzle_to_fields(p: IdealPuzzle) -> list[bytes]:
    return [encoding.encode_u64(p.puzzle_id), p.st0, encoding.encode_u64(p.gamma), p.tag]


def _puzzle_from_fields(fields: list[bytes]) -> IdealPuzzle:
    return IdealPuzzle(puzzle_id=int.from_bytes(fields[0], "big"), st0=fields[1],
                       gamma=int.from_bytes(fields[2], "big"), tag=fields[3])


class DtcNode(Actor):
    def __init__(self, sim: Simulation, user: str, index: int, groups: dict[str, GroupInfo],
                 ledger_kind: str, delta: int, tlp_oracle, directory: dict[str, int]) -> None:
        super().__init__(node_id(user, index))
        self.sim = sim
        self.user = user
        self.index = index
        self.groups = groups
        self.group = groups[user].cfg
        self.ledger_kind = ledger_kind
        self.delta = delta
        self.tlp = tlp_oracle
        self.directory = directory
        self.identity = pkc.keygen(pkc.derive(b"node-identity", str(sim.seed).encode(),
                                              self.participant_id.encode()))
        self.assets: dict[str, ShareRecord] = {}
        self.keycells: dict[str, dict] = {}   # raw key operations (crypto-level API)
        self.seen_sids: set[str] = set()
        self.byzantine: str | None = None     # None | "silent" | "equivocate"
        self._sessions: dict[tuple[str, str], dict] = {}
        self._inbox: dict[tuple[str, str], list[tuple[str, list[bytes]]]] = {}
        self._trackers: dict[tuple[str, str], QuorumTracker] = {}
        self._joins: list[dict] = []
        self._swaps: dict[str, dict] = {}
        self._offer_seen: set[tuple[str, str]] = set()

    # --- plumbing ------------------------------------------------------------------

    def _trace(self, kind: str, sid: str | None = None, **detail) -> None:
        detail.setdefault("party", self.user)
        detail.setdefault("node", self.participant_id)
        self.sim.trace(kind, sid=sid, src=self.participant_id, detail=detail)

    def _seed(self, *parts: str) -> bytes:
        return pkc.derive(b"dtc", str(self.sim.seed).encode(),
                          *[p.encode() for p in parts], encoding.encode_u64(self.index))

    def _send_user(self, sid: str, body: bytes, user: str | None = None) -> None:
        if self.byzantine == "silent":
            return
        self.sim.send_sync(sid, self.participant_id, user or self.user, body)

    def _send_node(self, sid: str, dst: str, body: bytes, relayer: str | None,
                   secret: bool, channel: str = "sync") -> None:
        if self.byzantine == "silent":
            return
        recipient_pk = self.directory[dst] if secret else None
        payload = wire.wrap(self.participant_id, self.identity.sk, body,
                            recipient_pk=recipient_pk,
                            entropy=self._seed("ent", sid, dst, str(self.sim.clock)))
        if channel == "async":
            self.sim.send_async(sid, self.participant_id, dst, payload)
        else:
            self.sim.send_sync(sid, self.participant_id, dst, payload, relayer=relayer)

    def _session_emit(self, sid: str, subid: str, emits: list[tuple[int, bytes]],
                      audience_user: str, relayer: str, secret: bool) -> None:
        for idx, body in emits:
            routed = encoding.pack("route", sid.encode(), subid.encode(), body)
            self._send_node(sid, node_id(audience_user, idx), routed, relayer, secret)

    # --- session hosting ----------------------------------------------------------------

    def _host(self, sid: str, subid: str, kind: str, session, context: dict) -> dict:
        hosted = {"kind": kind, "session": session, "ctx": context, "done": False}
        self._sessions[(sid, subid)] = hosted
        for sender, fields in self._inbox.pop((sid, subid), []):
            self._dispatch_session_msg(hosted, sender, fields)
        return hosted

    def _dispatch_session_msg(self, hosted: dict, tag_sender: str, fields: list[bytes]) -> None:
        session = hosted["session"]
        tag = hosted.pop("_pending_tag", None) or tag_sender
        if isinstance(session, DkgSession) and tag == "dkg_deal":
            session.on_msg(fields)
        elif isinstance(session, SignSession):
            if tag == "sign_r":
                session.on_commit(fields)
            elif tag == "sign_z":
                session.on_partial(fields)
        elif isinstance(session, ReshareOld):
            if tag == "rs_announce":
                session.on_announce(fields)
            elif tag == "rs_ack":
                session.on_ack(fields)
        elif isinstance(session, ReshareNew) and tag == "rs_deal":
            session.on_deal(fields)

    def _route(self, sender: str, fields: list[bytes]) -> None:
        sid = fields[0].decode()
        subid = fields[1].decode()
        tag, inner_fields = encoding.unpack(fields[2])
        hosted = self._sessions.get((sid, subid))
        if hosted is None or hosted["done"]:
            if hosted is None:
                self._inbox.setdefault((sid, subid), []).append((tag, inner_fields))
            return
        self._dispatch_session_msg(hosted, tag, inner_fields)

    # --- raw key operations (crypto-level API) -----------------------------------------------

    def cmd_keygen(self, sid: str, cell: str, relayer: str) -> None:
        session = DkgSession(self.group, self.index, sid, self.sim.clock,
                             self._seed("dkg", sid, cell))
        hosted = self._host(sid, "dkg:" + cell, "keygen", session,
                            {"cell": cell, "relayer": relayer})
        self._session_emit(sid, "dkg:" + cell, session.initial_emits(), self.user, relayer, True)

    def cmd_sign(self, sid: str, cell: str, msg: bytes, participants: list[int], relayer: str) -> None:
        info = self.keycells.get(cell)
        ctx = {"cell": cell, "relayer": relayer, "msg": msg}
        if info is None or info.get("tombstoned") or (participants and self.index not in participants):
            return
        session = SignSession(self.group, self.index, sid, "sig:" + cell,
                              info["share"], info["pk"], msg, self.sim.clock)
        self._host(sid, "sig:" + cell, "rawsign", session, ctx)
        self._session_emit(sid, "sig:" + cell, session.initial_emits(), self.user, relayer, False)

    def cmd_reshare_old(self, sid: str, cell: str, new_user: str, relayer: str) -> None:
        info = self.keycells.get(cell)
        if info is None or info.get("tombstoned"):
            return
        new_cfg = self.groups[new_user].cfg
        session = ReshareOld(self.group, self.index, sid, "rs:" + cell, info["share"],
                             new_cfg, self.sim.clock, self._seed("rs", sid, cell))
        self._host(sid, "rs:" + cell, "rawreshare_old", session,
                   {"cell": cell, "relayer": relayer, "new_user": new_user})
        self._session_emit(sid, "rs:" + cell, session.initial_emits(), self.user, relayer, False)

    def cmd_reshare_join(self, sid: str, cell: str, pk: int, old_user: str, relayer: str) -> None:
        session = ReshareNew(self.group, self.index, sid, "rs:" + cell,
                             self.sim.clock, self.sim.clock + self.group.t_reshare)
        self._host(sid, "rs:" + cell, "rawreshare_new", session,
                   {"cell": cell, "relayer": relayer, "pk": pk, "old_user": old_user})

    # --- user command handling ------------------------------------------------------------------

    def _handle_user_cmd(self, env: Envelope) -> None:
        tag, fields = encoding.unpack(env.payload)
        sid = fields[0].decode() if fields else env.sid
        if tag == "getpk_req":
            aid, t_rec = fields[1].decode(), int.from_bytes(fields[2], "big")
            if sid in self.seen_sids or t_rec < self.sim.clock:
                self._trace("node_abort", sid=sid, reason="StaleSid" if sid in self.seen_sids else "PastDeadline")
                return
            self.seen_sids.add(sid)
            session = DkgSession(self.group, self.index, sid, self.sim.clock,
                                 self._seed("dkg", sid, aid))
            self._host(sid, "dkg", "deposit", session, {"aid": aid, "T": t_rec, "relayer": self.user})
            self._session_emit(sid, "dkg", session.initial_emits(), self.user, self.user, True)
        elif tag == "backup_req":
            self._start_backup(sid, fields)
        elif tag == "exit_req":
            self._start_exit(sid, fields)
        elif tag == "pay_req":
            self._start_pay(sid, fields)
        elif tag == "pay_ack":
            aid = fields[1].decode()
            if sid in self.seen_sids:
                self._trace("node_abort", sid=sid, reason="StaleSid")
                return
            self.seen_sids.add(sid)
            self._joins.append({"kind": "pay", "sid": sid, "aid": aid,
                                "check_round": self.sim.clock + 1})
        elif tag == "swap_pre":
            self._start_swap(sid, fields)
        elif tag == "swap_ack":
            if sid in self.seen_sids:
                self._trace("node_abort", sid=sid, reason="StaleSid")
                return
            self.seen_sids.add(sid)
            self._joins.append({
                "kind": "swap", "sid": sid,
                "aid_a": fields[1].decode(), "aid_b": fields[2].decode(),
                "pk_a_prime": encoding.decode_int(fields[3]),
                "pk_b_prime": encoding.decode_int(fields[4]),
                "check_round": self.sim.clock + 1,
            })
        elif tag == "keygen_req":
            self.cmd_keygen(sid, fields[1].decode(), fields[2].decode())
        elif tag == "sign_req":
            participants = [int.from_bytes(fields[3][k:k + 8], "big")
                            for k in range(0, len(fields[3]), 8)]
            self.cmd_sign(sid, fields[1].decode(), fields[2], participants, fields[4].decode())
        elif tag == "reshare_req":
            self.cmd_reshare_old(sid, fields[1].decode(), fields[2].decode(), fields[3].decode())
        elif tag == "reshare_join":
            self.cmd_reshare_join(sid, fields[1].decode(), encoding.decode_int(fields[2]),
                                  fields[3].decode(), fields[4].decode())

    # --- asset operations --------------------------------------------------------------------------

    def _check_unlocked(self, sid: str, aid: str) -> ShareRecord | None:
        rec = self.assets.get(aid)
        if rec is None:
            self._trace("node_abort", sid=sid, reason="NotOwner", aid=aid)
            return None
        if rec.state == LOCKED:
            self._trace("node_abort", sid=sid, reason="AssetLocked", aid=aid)
            return None
        if rec.tombstoned:
            self._trace("node_abort", sid=sid, reason="TombstonedShare", aid=aid)
            return None
        return rec

    def _lock(self, rec: ShareRecord, sid: str) -> None:
        rec.state = LOCKED
        self._trace("node_asset_locked", sid=sid, aid=rec.aid)

    def _unlock(self, rec: ShareRecord, sid: str) -> None:
        rec.state = UNLOCKED
        self._trace("node_asset_unlocked", sid=sid, aid=rec.aid)

    def _start_backup(self, sid: str, fields: list[bytes]) -> None:
        aid = fields[1].decode()
        pk_r = encoding.decode_int(fields[2])
        use_default = fields[4] == b"\x01"
        if sid in self.seen_sids:
            self._trace("node_abort", sid=sid, reason="StaleSid")
            return
        self.seen_sids.add(sid)
        rec = self._check_unlocked(sid, aid)
        if rec is None:
            return
        if use_default:
            t_new = rec.t_release if not rec.has_backup else rec.t_release - self.delta
        else:
            t_new = int.from_bytes(fields[3], "big")
        if t_new < self.sim.clock:
            self._trace("node_abort", sid=sid, reason="PastDeadline", aid=aid)
            return
        if rec.has_backup:
            if rec.t_release - t_new < self.delta:
                self._trace("node_abort", sid=sid, reason="MonotonicityViolation", aid=aid)
                return
        elif t_new > rec.t_release:
            self._trace("node_abort", sid=sid, reason="MonotonicityViolation", aid=aid)
            return
        self._issue_backup(sid, rec, pk_r, t_new)

    def _issue_backup(self, sid: str, rec: ShareRecord, pk_r: int, t_new: int) -> None:
        aid = rec.aid
        self._lock(rec, sid)
        rec.t_release = t_new
        rec.has_backup = True
        self._trace("node_trelease_set", sid=sid, aid=aid, value=t_new)
        if self.ledger_kind == ledger_mod.TIMELOCK:
            msg = ledger_mod.signing_bytes(ledger_mod.TIMELOCK, aid, pk_r, t_new, b"")
            session = SignSession(self.group, self.index, sid, "bsig", rec.share,
                                  rec.pk_a, msg, self.sim.clock)
            self._host(sid, "bsig", "sign", session, {
                "on_ok": lambda sig: self._backup_signed(sid, rec, pk_r, t_new, sig),
                "on_fail": lambda why: self._trace("node_backup_failed", sid=sid, aid=aid,
                                                   reason=why),
                "relayer": self.user,
            })
            self._session_emit(sid, "bsig", session.initial_emits(), self.user, self.user, False)
        else:
            # Scriptless ledger: each node puzzle-locks its own share.
            puzzle = self.tlp.pgen(t_new - self.sim.clock,
                                   encoding.pack("share", encoding.encode_u64(self.index),
                                                 encoding.encode_int(rec.share)))
            self._unlock(rec, sid)
            self._trace("node_backup_issued", sid=sid, aid=aid, release=t_new,
                        pk_r="%064x" % pk_r)
            self._send_user(sid, encoding.pack(
                "backup_ok_puzzle", sid.encode(), aid.encode(), encoding.encode_int(pk_r),
                encoding.encode_u64(t_new), encoding.encode_int(rec.pk_a),
                *_puzzle_to_fields(puzzle)))

    def _backup_signed(self, sid: str, rec: ShareRecord, pk_r: int, t_new: int, sig: bytes) -> None:
        self._unlock(rec, sid)
        self._trace("node_backup_issued", sid=sid, aid=rec.aid, release=t_new,
                    pk_r="%064x" % pk_r)
        self._send_user(sid, encoding.pack(
            "backup_ok", sid.encode(), rec.aid.encode(), encoding.encode_int(pk_r),
            encoding.encode_u64(t_new), encoding.encode_int(rec.pk_a), sig))

    def _start_exit(self, sid: str, fields: list[bytes]) -> None:
        aid = fields[1].decode()
        dest_pk = encoding.decode_int(fields[2])
        if sid in self.seen_sids:
            return
        self.seen_sids.add(sid)
        rec = self._check_unlocked(sid, aid)
        if rec is None:
            return
        self._lock(rec, sid)
        now = self.sim.clock
        timelock = now if self.ledger_kind == ledger_mod.TIMELOCK else None
        msg = ledger_mod.signing_bytes(self.ledger_kind, aid, dest_pk, timelock, b"")
        session = SignSession(self.group, self.index, sid, "exitsig", rec.share,
                              rec.pk_a, msg, self.sim.clock)

        def on_ok(sig: bytes) -> None:
            pk_a = rec.pk_a
            del self.assets[aid]
            self._trace("node_asset_removed", sid=sid, aid=aid)
            self._send_user(sid, encoding.pack(
                "exit_ok", sid.encode(), aid.encode(), encoding.encode_int(dest_pk),
                encoding.encode_u64(now), encoding.encode_int(pk_a), sig))
        self._host(sid, "exitsig", "sign", session, {
            "on_ok": on_ok,
            "on_fail": lambda why: self._trace("node_exit_failed", sid=sid, aid=aid, reason=why),
            "relayer": self.user,
        })
        self._session_emit(sid, "exitsig", session.initial_emits(), self.user, self.user, False)

    def _start_pay(self, sid: str, fields: list[bytes]) -> None:
        aid = fields[1].decode()
        payee = fields[2].decode()
        if sid in self.seen_sids:
            self._trace("node_abort", sid=sid, reason="StaleSid")
            return
        self.seen_sids.add(sid)
        if payee == self.user or payee not in self.groups:
            self._trace("node_abort", sid=sid, reason="SelfPay")
            return
        rec = self._check_unlocked(sid, aid)
        if rec is None:
            return
        self._lock(rec, sid)
        body = encoding.pack("pay_proc", sid.encode(), aid.encode(),
                             encoding.encode_int(rec.pk_a), encoding.encode_u64(rec.t_release))
        self._broadcast_group(sid, payee, body)
        session = ReshareOld(self.group, self.index, sid, "rs1", rec.share,
                             self.groups[payee].cfg, self.sim.clock, self._seed("rs", sid, aid))
        self._host(sid, "rs1", "reshare_old", session, {
            "on_ok": lambda: self._pay_reshared(sid, aid),
            "on_fail": lambda why: self._trace("node_pay_failed", sid=sid, aid=aid, reason=why),
            "relayer": self.user, "new_user": payee,
        })
        self._session_emit(sid, "rs1", session.initial_emits(), self.user, self.user, False)

    def _pay_reshared(self, sid: str, aid: str) -> None:
        if aid in self.assets:
            del self.assets[aid]
            self._trace("node_asset_removed", sid=sid, aid=aid)

    def _broadcast_group(self, sid: str, dest_user: str, body: bytes) -> None:
        for dst in self.groups[dest_user].node_ids:
            out = body
            if self.byzantine == "equivocate":
                # Send a well-formed but conflicting variant to half the recipients.
                if int(dst.rsplit(":", 1)[1]) % 2 == 0:
                    out = body + encoding.encode_bytes(b"equivocation")
            self._send_node(sid, dst, encoding.pack("xgroup", out), relayer=None,
                            secret=False, channel="async")

    def _start_swap(self, sid: str, fields: list[bytes]) -> None:
        aid_a, aid_b = fields[1].decode(), fields[2].decode()
        pk_a_prime = encoding.decode_int(fields[3])
        responder = fields[4].decode()
        if sid in self.seen_sids:
            self._trace("node_abort", sid=sid, reason="StaleSid")
            return
        self.seen_sids.add(sid)
        rec = self._check_unlocked(sid, aid_a)
        if rec is None:
            return
        self._lock(rec, sid)
        body = encoding.pack("swap_proc", sid.encode(), aid_a.encode(), aid_b.encode(),
                             encoding.encode_int(rec.pk_a), encoding.encode_u64(rec.t_release),
                             encoding.encode_int(pk_a_prime))
        self._broadcast_group(sid, responder, body)
        self._swaps[sid] = {"role": "initiator", "aid_a": aid_a, "aid_b": aid_b,
                            "peer": responder, "stage": "reshare1",
                            "pk_a_prime": pk_a_prime}
        session = ReshareOld(self.group, self.index, sid, "rs1", rec.share,
                             self.groups[responder].cfg, self.sim.clock,
                             self._seed("rs", sid, aid_a))
        self._host(sid, "rs1", "reshare_old", session, {
            "on_ok": lambda: self._swap_r1_done(sid),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user, "new_user": responder,
        })
        self._session_emit(sid, "rs1", session.initial_emits(), self.user, self.user, False)

    def _swap_r1_done(self, sid: str) -> None:
        swap = self._swaps[sid]
        rec = self.assets.get(swap["aid_a"])
        if rec is not None:
            rec.tombstoned = True
        swap["stage"] = "await_opti"

    def _swap_abort(self, sid: str, why: str) -> None:
        swap = self._swaps.get(sid)
        if swap:
            swap["stage"] = "aborted"
        self._trace("node_swap_aborted", sid=sid, reason=str(why))

    # --- cross-group message handling ------------------------------------------------------------------

    def _handle_xgroup(self, sender: str, body: bytes) -> None:
        try:
            tag, fields = encoding.unpack(body)
            sid = fields[0].decode()
        except (ValueError, UnicodeDecodeError):
            self._trace("unknown_message", tag="malformed")
            return
        key = (sid, tag)
        sender_user = sender.split(":")[1]
        required = self.groups[sender_user].cfg.t if sender_user in self.groups else self.group.t
        tracker = self._trackers.setdefault(key, QuorumTracker(threshold=required))
        first = sender not in tracker.received
        tracker.add(sender, body)
        if first and tag in ("pay_proc", "swap_proc"):
            op = "pay" if tag == "pay_proc" else "swap"
            if key not in self._offer_seen:
                self._offer_seen.add(key)
                self._trace("node_offer_received", sid=sid, aid=fields[1].decode(), op=op)
        if tag == "swap_ok":
            self._maybe_finish_responder(sid)

    def _quorum_payload(self, sid: str, tag: str) -> list[bytes] | None:
        tracker = self._trackers.get((sid, tag))
        if tracker is None:
            return None
        body = tracker.winning()
        if body is None:
            return None
        return encoding.unpack(body)[1]

    # --- join checks and swap progress (round-driven) ----------------------------------------------------

    def _check_pay_join(self, join: dict) -> None:
        sid, aid = join["sid"], join["aid"]
        fields = self._quorum_payload(sid, "pay_proc")
        if fields is None or fields[1].decode() != aid:
            self._trace("node_abort", sid=sid, reason="InsufficientPayProc", aid=aid)
            return
        pk_a = encoding.decode_int(fields[2])
        t_release = int.from_bytes(fields[3], "big")
        session = ReshareNew(self.group, self.index, sid, "rs1",
                             self.sim.clock, self.sim.clock + self.group.t_reshare)
        self._host(sid, "rs1", "reshare_new", session, {
            "on_ok": lambda share, ack: self._pay_join_done(sid, aid, pk_a, t_release, share, ack),
            "on_fail": lambda why: self._trace("node_pay_failed", sid=sid, aid=aid, reason=why),
            "relayer": self.user,
        })

    def _pay_join_done(self, sid: str, aid: str, pk_a: int, t_release: int,
                       share: int, ack: bytes) -> None:
        t_new = t_release - self.delta
        self.assets[aid] = ShareRecord(aid=aid, share=share, pk_a=pk_a, t_release=t_new)
        self._trace("node_asset_added", sid=sid, aid=aid, t_release=t_new)
        payer_user = self._sender_user_for(sid, "pay_proc")
        if payer_user:
            for dst in self.groups[payer_user].node_ids:
                routed = encoding.pack("route", sid.encode(), "rs1".encode(), ack)
                self._send_node(sid, dst, routed, relayer=self.user, secret=False)
        self._send_user(sid, encoding.pack("pay_confirm", sid.encode(), aid.encode(),
                                           encoding.encode_int(pk_a),
                                           encoding.encode_u64(t_new)))

    def _sender_user_for(self, sid: str, tag: str) -> str | None:
        tracker = self._trackers.get((sid, tag))
        if not tracker:
            return None
        sender = sorted(tracker.received)[0]
        return sender.split(":")[1]

    def _check_swap_join(self, join: dict) -> None:
        sid = join["sid"]
        aid_a, aid_b = join["aid_a"], join["aid_b"]
        fields = self._quorum_payload(sid, "swap_proc")
        if fields is None or fields[1].decode() != aid_a:
            self._trace("node_abort", sid=sid, reason="InsufficientSwapProc", aid=aid_a)
            return
        pk_aa = encoding.decode_int(fields[3])
        t_release_a = int.from_bytes(fields[4], "big")
        rec_b = self._check_unlocked(sid, aid_b)
        if rec_b is None:
            return
        margin = rec_b.t_release - t_release_a
        self._trace("node_margin_checked", sid=sid, aid=aid_a, margin=margin,
                    bound=2 * self.delta)
        if margin <= 2 * self.delta and not getattr(self, "unsafe_skip_margin_check", False):
            self._trace("node_abort", sid=sid, reason="MarginViolation", aid=aid_b)
            return
        initiator_user = self._sender_user_for(sid, "swap_proc")
        self._swaps[sid] = {
            "role": "responder", "aid_a": aid_a, "aid_b": aid_b, "peer": initiator_user,
            "pk_a_prime": join["pk_a_prime"], "pk_b_prime": join["pk_b_prime"],
            "pk_aa": pk_aa, "t_release_a": t_release_a, "stage": "reshare1",
        }
        session = ReshareNew(self.group, self.index, sid, "rs1",
                             self.sim.clock, self.sim.clock + self.group.t_reshare)
        self._host(sid, "rs1", "reshare_new", session, {
            "on_ok": lambda share, ack: self._swap_r1_joined(sid, share, ack),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user, "old_user": initiator_user,
        })

    def _swap_r1_joined(self, sid: str, share: int, ack: bytes) -> None:
        swap = self._swaps[sid]
        aid_a, aid_b = swap["aid_a"], swap["aid_b"]
        rec_b = self.assets[aid_b]
        t_prime = swap["t_release_a"] - self.delta
        swap["t_prime"] = t_prime
        rec_a = ShareRecord(aid=aid_a, share=share, pk_a=swap["pk_aa"],
                            t_release=t_prime, state=LOCKED, has_backup=True)
        swap["pk_ab"] = rec_b.pk_a
        self.assets[aid_a] = rec_a
        self._trace("node_asset_added", sid=sid, aid=aid_a, t_release=t_prime)
        self._trace("node_asset_locked", sid=sid, aid=aid_a)
        self._lock(rec_b, sid)
        rec_b.t_release = t_prime + 2 * self.delta
        self._trace("node_trelease_set", sid=sid, aid=aid_a, value=t_prime)
        self._trace("node_trelease_set", sid=sid, aid=aid_b, value=rec_b.t_release)
        for dst in self.groups[swap["peer"]].node_ids:
            routed = encoding.pack("route", sid.encode(), "rs1".encode(), ack)
            self._send_node(sid, dst, routed, relayer=self.user, secret=False)
        timelock = t_prime if self.ledger_kind == ledger_mod.TIMELOCK else None
        m1 = ledger_mod.signing_bytes(self.ledger_kind, aid_b, swap["pk_a_prime"], timelock, b"")
        session = SignSession(self.group, self.index, sid, "sigA", rec_b.share,
                              rec_b.pk_a, m1, self.sim.clock)
        self._host(sid, "sigA", "sign", session, {
            "on_ok": lambda sig: self._swap_sig_a_done(sid, sig),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user,
        })
        self._session_emit(sid, "sigA", session.initial_emits(), self.user, self.user, False)
        swap["stage"] = "sigA"

    def _swap_sig_a_done(self, sid: str, sig_a: bytes) -> None:
        swap = self._swaps[sid]
        aid_a, aid_b = swap["aid_a"], swap["aid_b"]
        t_prime = swap["t_prime"]
        rec_a = self.assets[aid_a]
        rec_b = self.assets[aid_b]
        self._trace("node_sign_done", sid=sid, aid=aid_b, which="inner")
        self._trace("node_backup_authorized", sid=sid, aid=aid_b,
                    pk_r="%064x" % swap["pk_a_prime"], release=t_prime, nested=False)
        timelock = t_prime if self.ledger_kind == ledger_mod.TIMELOCK else None
        inner_tx = ledger_mod.LedgerTx(aid=aid_b, pk_dst=swap["pk_a_prime"],
                                       timelock=timelock, payload=b"", sig=sig_a)
        m2 = ledger_mod.signing_bytes(self.ledger_kind, aid_a, swap["pk_b_prime"], timelock,
                                      ledger_mod.tx_to_bytes(inner_tx))
        swap["inner_tx"] = inner_tx
        session = SignSession(self.group, self.index, sid, "sigB", rec_a.share,
                              rec_a.pk_a, m2, self.sim.clock)
        self._host(sid, "sigB", "sign", session, {
            "on_ok": lambda sig: self._swap_sig_b_done(sid, sig),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user,
        })
        self._session_emit(sid, "sigB", session.initial_emits(), self.user, self.user, False)
        swap["stage"] = "sigB"

    def _swap_sig_b_done(self, sid: str, sig_b: bytes) -> None:
        swap = self._swaps[sid]
        aid_a, aid_b = swap["aid_a"], swap["aid_b"]
        t_prime = swap["t_prime"]
        rec_b = self.assets[aid_b]
        self._trace("node_sign_done", sid=sid, aid=aid_a, which="outer")
        self._trace("node_backup_authorized", sid=sid, aid=aid_a,
                    pk_r="%064x" % swap["pk_b_prime"], release=t_prime, nested=True)
        timelock = t_prime if self.ledger_kind == ledger_mod.TIMELOCK else None
        outer_tx = ledger_mod.LedgerTx(aid=aid_a, pk_dst=swap["pk_b_prime"], timelock=timelock,
                                       payload=ledger_mod.tx_to_bytes(swap["inner_tx"]), sig=sig_b)
        tx_bytes = ledger_mod.tx_to_bytes(outer_tx)
        self._trace("node_backup_issued", sid=sid, aid=aid_a, release=t_prime,
                    pk_r="%064x" % swap["pk_b_prime"])
        if self.ledger_kind == ledger_mod.TIMELOCK:
            self._send_user(sid, encoding.pack(
                "swap_pess", sid.encode(), aid_a.encode(), encoding.encode_u64(t_prime),
                encoding.encode_int(swap["pk_b_prime"]),
                encoding.encode_int(self.assets[aid_a].pk_a), b"\x00", tx_bytes))
        else:
            puzzle = self.tlp.pgen(t_prime - self.sim.clock, tx_bytes)
            self._send_user(sid, encoding.pack(
                "swap_pess", sid.encode(), aid_a.encode(), encoding.encode_u64(t_prime),
                encoding.encode_int(swap["pk_b_prime"]),
                encoding.encode_int(self.assets[aid_a].pk_a), b"\x01",
                *_puzzle_to_fields(puzzle)))
        body = encoding.pack("swap_opti", sid.encode(), aid_b.encode(),
                             encoding.encode_int(rec_b.pk_a),
                             encoding.encode_u64(rec_b.t_release))
        self._broadcast_group(sid, swap["peer"], body)
        session = ReshareOld(self.group, self.index, sid, "rs2", rec_b.share,
                             self.groups[swap["peer"]].cfg, self.sim.clock,
                             self._seed("rs2", sid, aid_b))
        self._host(sid, "rs2", "reshare_old", session, {
            "on_ok": lambda: self._swap_r2_done(sid),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user, "new_user": swap["peer"],
        })
        self._session_emit(sid, "rs2", session.initial_emits(), self.user, self.user, False)
        swap["stage"] = "await_ok"

    def _swap_r2_done(self, sid: str) -> None:
        swap = self._swaps[sid]
        rec_b = self.assets.get(swap["aid_b"])
        if rec_b is not None:
            rec_b.tombstoned = True

    def _maybe_join_r2(self, sid: str) -> None:
        swap = self._swaps.get(sid)
        if swap is None or swap["role"] != "initiator" or swap["stage"] != "await_opti":
            return
        fields = self._quorum_payload(sid, "swap_opti")
        if fields is None:
            return
        swap["stage"] = "reshare2"
        swap["pk_ab"] = encoding.decode_int(fields[2])
        swap["t_release_b"] = int.from_bytes(fields[3], "big")
        session = ReshareNew(self.group, self.index, sid, "rs2",
                             self.sim.clock, self.sim.clock + self.group.t_reshare)
        self._host(sid, "rs2", "reshare_new", session, {
            "on_ok": lambda share, ack: self._swap_r2_joined(sid, share, ack),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user, "old_user": swap["peer"],
        })

    def _swap_r2_joined(self, sid: str, share: int, ack: bytes) -> None:
        swap = self._swaps[sid]
        aid_a, aid_b = swap["aid_a"], swap["aid_b"]
        if aid_a in self.assets:
            del self.assets[aid_a]
            self._trace("node_asset_removed", sid=sid, aid=aid_a)
        self.assets[aid_b] = ShareRecord(aid=aid_b, share=share, pk_a=swap["pk_ab"],
                                         t_release=swap["t_release_b"])
        self._trace("node_asset_added", sid=sid, aid=aid_b, t_release=swap["t_release_b"])
        for dst in self.groups[swap["peer"]].node_ids:
            routed = encoding.pack("route", sid.encode(), "rs2".encode(), ack)
            self._send_node(sid, dst, routed, relayer=self.user, secret=False)
        msg = encoding.pack("swap_ack_msg", sid.encode())
        session = SignSession(self.group, self.index, sid, "sigack", share,
                              swap["pk_ab"], msg, self.sim.clock)
        self._host(sid, "sigack", "sign", session, {
            "on_ok": lambda sig: self._swap_send_ok(sid, sig),
            "on_fail": lambda why: self._swap_abort(sid, why),
            "relayer": self.user,
        })
        self._session_emit(sid, "sigack", session.initial_emits(), self.user, self.user, False)
        bk_sid = sid + "/bk-init"
        if bk_sid not in self.seen_sids:
            self.seen_sids.add(bk_sid)
            self._issue_backup(bk_sid, self.assets[aid_b], swap["pk_a_prime"],
                               swap["t_release_b"])
        swap["stage"] = "sigack"

    def _swap_send_ok(self, sid: str, sig: bytes) -> None:
        swap = self._swaps[sid]
        body = encoding.pack("swap_ok", sid.encode(), sig)
        self._broadcast_group(sid, swap["peer"], body)
        swap["stage"] = "done"
        self._trace("node_swap_complete", sid=sid, role="initiator")
        self._send_user(sid, encoding.pack("swap_complete", sid.encode(),
                                           swap["aid_b"].encode()))

    def _maybe_finish_responder(self, sid: str) -> None:
        swap = self._swaps.get(sid)
        if swap is None or swap["role"] != "responder" or swap["stage"] != "await_ok":
            return
        fields = self._quorum_payload(sid, "swap_ok")
        if fields is None:
            return
        sig = fields[1]
        msg = encoding.pack("swap_ack_msg", sid.encode())
        if not pkc.verify(swap["pk_ab"], msg, sig):
            self._trace("node_abort", sid=sid, reason="NoSwapOk")
            return
        aid_a, aid_b = swap["aid_a"], swap["aid_b"]
        if aid_b in self.assets:
            del self.assets[aid_b]
            self._trace("node_asset_removed", sid=sid, aid=aid_b)
        rec_a = self.assets.get(aid_a)
        if rec_a is not None:
            self._unlock(rec_a, sid)
        swap["stage"] = "done"
        self._trace("node_swap_complete", sid=sid, role="responder")
        self._send_user(sid, encoding.pack("swap_complete", sid.encode(), aid_a.encode()))
        bk_sid = sid + "/bk-resp"
        if rec_a is not None and bk_sid not in self.seen_sids:
            self.seen_sids.add(bk_sid)
            self._issue_backup(bk_sid, rec_a, swap["pk_b_prime"],
                               rec_a.t_release - self.delta)

    # --- actor callbacks ---------------------------------------------------------------------------------

    def on_deliver(self, sim: Simulation, env: Envelope) -> None:
        if env.src == self.user:
            self._handle_user_cmd(env)
            return
        try:
            sender, body = wire.unwrap(env.payload, self.directory, recipient_sk=self.identity.sk)
        except (BadHandoffSig, DecryptFailure) as exc:
            self._trace("handoff_rejected", sid=env.sid, reason=exc.__class__.__name__)
            return
        tag, fields = encoding.unpack(body)
        if tag == "route":
            self._route(sender, fields)
        elif tag == "xgroup":
            self._handle_xgroup(sender, fields[0])
        else:
            self._trace("unknown_message", sid=env.sid, tag=tag)

    def on_round(self, sim: Simulation, rnd: int) -> None:
        for join in [j for j in self._joins if j["check_round"] == rnd]:
            if join["kind"] == "pay":
                self._check_pay_join(join)
            else:
                self._check_swap_join(join)
        for sid in list(self._swaps):
            self._maybe_join_r2(sid)
            self._maybe_finish_responder(sid)
        progressed = True
        while progressed:
            progressed = False
            for (sid, subid), hosted in list(self._sessions.items()):
                if hosted["done"]:
                    continue
                result = hosted["session"].on_round(rnd)
                if result is None:
                    continue
                progressed = True
                self._handle_session_result(sid, subid, hosted, result)
        for sid in list(self._swaps):
            self._maybe_join_r2(sid)

    def _handle_session_result(self, sid: str, subid: str, hosted: dict, result: tuple) -> None:
        kind, ctx = hosted["kind"], hosted["ctx"]
        session = hosted["session"]
        verdict = result[0]
        if verdict == "emit":
            self._session_emit(sid, subid, result[1], self.user, ctx.get("relayer", self.user), False)
            return
        if verdict == "deal":
            new_user = ctx["new_user"]
            for idx, body in result[1]:
                routed = encoding.pack("route", sid.encode(), subid.encode(), body)
                self._send_node(sid, node_id(new_user, idx), routed,
                                relayer=ctx.get("relayer", self.user), secret=True)
            return
        hosted["done"] = True
        if kind == "deposit":
            if verdict == "ok":
                _, pk, share = result
                aid, t_rec = ctx["aid"], ctx["T"]
                self.assets[aid] = ShareRecord(aid=aid, share=share, pk_a=pk, t_release=t_rec)
                self._trace("node_keygen_done", sid=sid, aid=aid)
                self._trace("node_asset_created", sid=sid, aid=aid, t_release=t_rec)
                self._send_user(sid, encoding.pack("getpk_confirm", sid.encode(),
                                                   aid.encode(), encoding.encode_int(pk),
                                                   encoding.encode_u64(t_rec)))
            else:
                self._trace("node_keygen_failed", sid=sid, aid=ctx.get("aid"))
                self._send_user(sid, encoding.pack("getpk_fail", sid.encode()))
        elif kind == "keygen":
            if verdict == "ok":
                _, pk, share = result
                self.keycells[ctx["cell"]] = {"share": share, "pk": pk, "tombstoned": False}
                self._send_user(sid, encoding.pack("keygen_ok", sid.encode(),
                                                   ctx["cell"].encode(), encoding.encode_int(pk)))
            else:
                self._send_user(sid, encoding.pack("keygen_fail", sid.encode(),
                                                   ctx["cell"].encode()))
        elif kind == "rawsign":
            if verdict == "ok":
                self._send_user(sid, encoding.pack("sign_ok", sid.encode(),
                                                   ctx["cell"].encode(), result[1]))
            else:
                self._send_user(sid, encoding.pack("sign_fail", sid.encode(),
                                                   ctx["cell"].encode()))
        elif kind == "rawreshare_old":
            if verdict == "ok":
                self.keycells[ctx["cell"]]["tombstoned"] = True
                self._send_user(sid, encoding.pack("reshare_ok", sid.encode(),
                                                   ctx["cell"].encode()))
            else:
                self._send_user(sid, encoding.pack("reshare_fail", sid.encode(),
                                                   ctx["cell"].encode()))
        elif kind == "rawreshare_new":
            if verdict == "ok":
                _, share, ack = result
                self.keycells[ctx["cell"]] = {"share": share, "pk": ctx["pk"], "tombstoned": False}
                old_user = ctx.get("old_user")
                self._send_user(sid, encoding.pack("reshare_joined", sid.encode(),
                                                   ctx["cell"].encode()))
                if old_user:
                    for dst in self.groups[old_user].node_ids:
                        routed = encoding.pack("route", sid.encode(), subid.encode(), ack)
                        self._send_node(sid, dst, routed, relayer=ctx.get("relayer", self.user),
                                        secret=False)
            else:
                self._send_user(sid, encoding.pack("reshare_fail", sid.encode(),
                                                   ctx["cell"].encode()))
        elif kind == "sign":
            if verdict == "ok":
                ctx["on_ok"](result[1])
            else:
                ctx["on_fail"](result[1])
        elif kind == "reshare_old":
            if verdict == "ok":
                ctx["on_ok"]()
            else:
                ctx["on_fail"](result[1])
        elif kind == "reshare_new":
            if verdict == "ok":
                _, share, ack = result
                ctx["on_ok"](share, ack)
            else:
                ctx["on_fail"](result[1])

    def state_dump(self) -> dict:
        return {
            "node": self.participant_id,
            "assets": {aid: {"t_release": r.t_release, "state": r.state,
                             "tombstoned": r.tombstoned, "pk": "%064x" % r.pk_a}
                       for aid, r in sorted(self.assets.items())},
        }


class DtcAdapter:
    """User-side face of the node group: fans out commands, aggregates quorums."""

    auto_backup_on_swap = True  # the group issues the post-swap backup at finalization

    def __init__(self, sim: Simulation, agent, groups: dict[str, GroupInfo],
                 ledger_kind: str, delta: int) -> None:
        self.sim = sim
        self.agent = agent
        self.groups = groups
        self.info = groups[agent.user]
        self.cfg = self.info.cfg
        self.ledger_kind = ledger_kind
        self.delta = delta
        self._pending: dict[str, dict] = {}
        self._agg: dict[tuple[str, str], QuorumTracker] = {}
        self._fail_counts: dict[tuple[str, str], set[str]] = {}
        self._fired: set[tuple[str, str]] = set()
        self._puzzles: dict[str, dict[str, list[bytes]]] = {}

    # --- outbound commands -----------------------------------------------------

    def _send_all(self, sid: str, body: bytes) -> None:
        for dst in self.info.node_ids:
            self.sim.send_sync(sid, self.agent.user, dst, body)

    def deposit(self, sid, aid, recovery_time, on_ok, on_fail) -> None:
        self._pending[sid] = {"kind": "deposit", "on_ok": on_ok, "on_fail": on_fail}
        self._send_all(sid, encoding.pack("getpk_req", sid.encode(), aid.encode(),
                                          encoding.encode_u64(recovery_time)))

    def backup(self, sid, aid, pk_r, release, on_ok, on_fail) -> None:
        self._pending[sid] = {"kind": "backup", "on_ok": on_ok, "on_fail": on_fail}
        default = release is None
        self._send_all(sid, encoding.pack(
            "backup_req", sid.encode(), aid.encode(), encoding.encode_int(pk_r),
            encoding.encode_u64(0 if default else release),
            b"\x01" if default else b"\x00"))

    def pay_initiate(self, sid, aid, payee) -> None:
        self._send_all(sid, encoding.pack("pay_req", sid.encode(), aid.encode(),
                                          payee.encode()))

    def pay_accept(self, sid, aid, on_ok, on_fail) -> None:
        self._pending[sid] = {"kind": "pay_accept", "on_ok": on_ok, "on_fail": on_fail}
        self._send_all(sid, encoding.pack("pay_ack", sid.encode(), aid.encode()))

    def pay_external(self, sid, aid, dest_pk, on_ok, on_fail) -> None:
        self._pending[sid] = {"kind": "exit", "on_ok": on_ok, "on_fail": on_fail}
        self._send_all(sid, encoding.pack("exit_req", sid.encode(), aid.encode(),
                                          encoding.encode_int(dest_pk)))

    def swap_initiate(self, sid, aid_a, aid_b, responder, pk_a_prime) -> None:
        self._send_all(sid, encoding.pack(
            "swap_pre", sid.encode(), aid_a.encode(), aid_b.encode(),
            encoding.encode_int(pk_a_prime), responder.encode()))

    def swap_respond(self, sid, aid_a, aid_b, pk_a_prime, pk_b_prime, on_artifact, on_fail) -> None:
        self._pending[sid] = {"kind": "swap_respond", "on_ok": on_artifact, "on_fail": on_fail}
        self._send_all(sid, encoding.pack(
            "swap_ack", sid.encode(), aid_a.encode(), aid_b.encode(),
            encoding.encode_int(pk_a_prime), encoding.encode_int(pk_b_prime)))

    # --- local state probes ------------------------------------------------------

    def _nodes(self) -> list[DtcNode]:
        return [self.sim.participants[nid] for nid in self.info.node_ids]

    def holds_unlocked(self, aid: str) -> bool:
        live_unlocked = 0
        for node in self._nodes():
            if self.sim.crashed(node.participant_id):
                continue
            rec = node.assets.get(aid)
            if rec is not None and rec.state == UNLOCKED and not rec.tombstoned:
                live_unlocked += 1
        return live_unlocked >= self.cfg.t

    def alive(self) -> bool:
        return sum(1 for n in self._nodes()
                   if not self.sim.crashed(n.participant_id)) >= self.cfg.t

    # --- inbound aggregation --------------------------------------------------------

    def handles(self, env: Envelope) -> bool:
        return env.src in self.info.node_ids

    def _quorum(self, sid: str, tag: str, sender: str, key: bytes, need: int) -> bool:
        """Track a confirmation; True exactly once when `need` matching copies exist."""
        agg_key = (sid, tag)
        if agg_key in self._fired:
            return False
        tracker = self._agg.setdefault(agg_key, QuorumTracker(threshold=need))
        tracker.add(sender, key)
        if tracker.winning() == key:
            self._fired.add(agg_key)
            return True
        return False

    def on_user_msg(self, env: Envelope) -> None:
        tag, fields = encoding.unpack(env.payload)
        sid = fields[0].decode()
        pend = self._pending.get(sid)
        if tag == "getpk_confirm":
            if self._quorum(sid, tag, env.src, fields[1] + fields[2] + fields[3], self.cfg.t):
                if pend and pend["kind"] == "deposit":
                    pend["on_ok"](encoding.decode_int(fields[2]))
        elif tag in ("getpk_fail", "keygen_fail_dep"):
            bad = self._fail_counts.setdefault((sid, tag), set())
            bad.add(env.src)
            if len(bad) >= self.cfg.n - self.cfg.t + 1 and pend and pend["kind"] == "deposit":
                if (sid, "failed") not in self._fired:
                    self._fired.add((sid, "failed"))
                    pend["on_fail"]("KeyGenFail")
        elif tag == "backup_ok":
            if self._quorum(sid, tag, env.src, b"".join(fields[1:]), self.cfg.t):
                aid = fields[1].decode()
                pk_r = encoding.decode_int(fields[2])
                t_new = int.from_bytes(fields[3], "big")
                pk_a = encoding.decode_int(fields[4])
                timelock = t_new if self.ledger_kind == ledger_mod.TIMELOCK else None
                tx = ledger_mod.LedgerTx(aid=aid, pk_dst=pk_r, timelock=timelock,
                                         payload=b"", sig=fields[5])
                artifact = BackupArtifact(
                    aid=aid, pk_r=pk_r, release=t_new, created_round=self.sim.clock,
                    kind=NATIVE, ledger_kind=self.ledger_kind, owner_pk=pk_a, tx=tx)
                if pend and pend["kind"] == "backup":
                    pend["on_ok"](artifact)
                elif sid.endswith(("/bk-init", "/bk-resp")):
                    self.agent.store_artifact(artifact)
        elif tag == "backup_ok_puzzle":
            meta = b"".join(fields[1:5])
            store = self._puzzles.setdefault(sid, {})
            store[env.src] = fields
            if self._quorum(sid, tag, env.src, meta, self.cfg.t):
                aid = fields[1].decode()
                pk_r = encoding.decode_int(fields[2])
                t_new = int.from_bytes(fields[3], "big")
                pk_a = encoding.decode_int(fields[4])
                puzzles = [_puzzle_from_fields(f[5:9])
                           for _, f in sorted(store.items())]
                artifact = BackupArtifact(
                    aid=aid, pk_r=pk_r, release=t_new, created_round=self.sim.clock,
                    kind=TLP_SHARES, ledger_kind=self.ledger_kind, owner_pk=pk_a,
                    puzzles=puzzles, threshold=self.cfg.t)
                if pend and pend["kind"] == "backup":
                    pend["on_ok"](artifact)
                elif sid.endswith(("/bk-init", "/bk-resp")):
                    self.agent.store_artifact(artifact)
        elif tag == "exit_ok":
            if self._quorum(sid, tag, env.src, b"".join(fields[1:]), self.cfg.t):
                if pend and pend["kind"] == "exit":
                    aid = fields[1].decode()
                    dest = encoding.decode_int(fields[2])
                    now = int.from_bytes(fields[3], "big")
                    pk_a = encoding.decode_int(fields[4])
                    timelock = now if self.ledger_kind == ledger_mod.TIMELOCK else None
                    tx = ledger_mod.LedgerTx(aid=aid, pk_dst=dest, timelock=timelock,
                                             payload=b"", sig=fields[5])
                    pend["on_ok"](BackupArtifact(
                        aid=aid, pk_r=dest, release=now, created_round=self.sim.clock,
                        kind=NATIVE, ledger_kind=self.ledger_kind, owner_pk=pk_a, tx=tx))
        elif tag == "pay_confirm":
            if self._quorum(sid, tag, env.src, b"".join(fields[1:]), self.cfg.t):
                if pend and pend["kind"] == "pay_accept":
                    aid = fields[1].decode()
                    t_new = int.from_bytes(fields[3], "big")
                    pend["on_ok"](sid, aid, t_new)
        elif tag == "swap_pess":
            meta = b"".join(fields[1:5])
            store = self._puzzles.setdefault(sid + "/pess", {})
            store[env.src] = fields
            if self._quorum(sid, tag, env.src, meta, self.cfg.t):
                if pend and pend["kind"] == "swap_respond":
                    aid_a = fields[1].decode()
                    t_prime = int.from_bytes(fields[2], "big")
                    pk_b_prime = encoding.decode_int(fields[3])
                    pk_aa = encoding.decode_int(fields[4])
                    chosen = store[sorted(store)[0]]
                    if chosen[5] == b"\x00":
                        tx = ledger_mod.tx_from_bytes(chosen[6])
                        art = BackupArtifact(aid=aid_a, pk_r=pk_b_prime, release=t_prime,
                                             created_round=self.sim.clock, kind=NATIVE,
                                             ledger_kind=self.ledger_kind, owner_pk=pk_aa, tx=tx)
                    else:
                        puzzle = _puzzle_from_fields(chosen[6:10])
                        art = BackupArtifact(aid=aid_a, pk_r=pk_b_prime, release=t_prime,
                                             created_round=self.sim.clock, kind=TLP,
                                             ledger_kind=self.ledger_kind, owner_pk=pk_aa,
                                             puzzles=[puzzle])
                    pend["on_ok"](art)
        elif tag == "swap_complete":
            if self._quorum(sid, tag, env.src, fields[1], self.cfg.t):
                self.agent.on_swap_complete(sid, fields[1].decode())
        elif tag in ("keygen_ok", "keygen_fail", "sign_ok", "sign_fail",
                     "reshare_ok", "reshare_fail", "reshare_joined"):
            results = self._pending.setdefault("raw:" + sid, {"kind": "raw", "msgs": {}})
            results["msgs"].setdefault(tag, {})[env.src] = fields

    def raw_result(self, sid: str, tag: str, need: int) -> list[list[bytes]] | None:
        results = self._pending.get("raw:" + sid)
        if not results:
            return None
        msgs = results["msgs"].get(tag, {})
        if len(msgs) >= need:
            return [msgs[k] for k in sorted(msgs)]
        return None


class KeyOpDriver(Actor):
    """Relaying user for raw key operations; used by the crypto-level API and tests.

    Collects per-node replies so callers can require t consistent copies.
    """

    def __init__(self, sim: Simulation, user: str, groups: dict[str, GroupInfo]) -> None:
        super().__init__(user)
        self.sim = sim
        self.user = user
        self.groups = groups
        self.inbox: dict[tuple[str, str], dict[str, list[bytes]]] = {}

    def on_deliver(self, sim: Simulation, env: Envelope) -> None:
        try:
            tag, fields = encoding.unpack(env.payload)
        except ValueError:
            return
        sid = fields[0].decode() if fields else env.sid
        self.inbox.setdefault((sid, tag), {})[env.src] = fields

    def _send_all(self, sid: str, body: bytes, user: str | None = None) -> None:
        for dst in self.groups[user or self.user].node_ids:
            self.sim.send_sync(sid, self.user, dst, body)

    def keygen(self, sid: str, cell: str) -> None:
        self._send_all(sid, encoding.pack("keygen_req", sid.encode(), cell.encode(),
                                          self.user.encode()))

    def sign(self, sid: str, cell: str, msg: bytes, participants: list[int] | None = None) -> None:
        enc = b"".join(encoding.encode_u64(i) for i in (participants or []))
        self._send_all(sid, encoding.pack("sign_req", sid.encode(), cell.encode(),
                                          msg, enc, self.user.encode()))

    def reshare_out(self, sid: str, cell: str, new_user: str) -> None:
        self._send_all(sid, encoding.pack("reshare_req", sid.encode(), cell.encode(),
                                          new_user.encode(), self.user.encode()))

    def reshare_join(self, sid: str, cell: str, pk: int, old_user: str,
                     new_user: str | None = None) -> None:
        self._send_all(sid, encoding.pack("reshare_join", sid.encode(), cell.encode(),
                                          encoding.encode_int(pk), old_user.encode(),
                                          self.user.encode()),
                       user=new_user or self.user)

    def replies(self, sid: str, tag: str) -> dict[str, list[bytes]]:
        return self.inbox.get((sid, tag), {})

    def consistent(self, sid: str, tag: str, need: int, field_index: int = 1) -> bytes | None:
        """The value appearing in >= need replies, if any (compared from field_index on)."""
        counts: dict[bytes, int] = {}
        for fields in self.replies(sid, tag).values():
            key = b"".join(fields[field_index:])
            counts[key] = counts.get(key, 0) + 1
        for key, count in sorted(counts.items()):
            if count >= need:
                return key
        return None
