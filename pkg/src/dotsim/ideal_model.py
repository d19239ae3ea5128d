"""Executable reference model of the trusted-third-party functionality.

The model keeps per-party asset lists and backup lists and exposes the five
phases (deposit, backup, recovery, payment, swap) as fine-grained steps, one
per adversary-chosen round in the functionality's description.  A replay
schedule (derived from a protocol trace, or written by hand) executes steps
in round order; a session halts permanently at the first step whose checks
fail, and steps that arrive for a halted or unknown session are recorded as
mapping gaps.

Keys are symbolic here: ``("custody", aid)`` is the TE-held key an asset
starts under, ``("wallet", party)`` and ``("skey", party, sid)`` are user
wallet keys.  A minimal ledger shadow finalizes recoveries within the
inclusion bound; publishing the responder's nested swap backup is what makes
the embedded counter-transaction claimable by the initiator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim.errors import HookOrderError

LOCKED = "locked"
UNLOCKED = "unlocked"

# Template order of steps inside each phase; rounds must be non-decreasing
# along a session and steps must follow this order.
PHASE_STEPS = {
    "deposit": ["create"],
    "backup": ["lock", "store", "unlock"],
    "pay": ["lock", "move", "update"],
    "swap": ["lock", "move", "lock_both", "auth_inner", "auth_nested",
             "store_nested", "move_b", "unlock_a"],
    "recovery": ["submit"],
}


@dataclass
class Step:
    round: int
    sid: str
    phase: str
    name: str
    args: dict
    seq: int = 0  # source-trace position; fixes within-round cross-session order


@dataclass
class IdealRecord:
    aid: str
    owner: str
    t_release: int
    state: str = UNLOCKED
    has_backup: bool = False


@dataclass
class BackupEntry:
    party: str
    aid: str
    pk_r: tuple
    release: int
    available_from: int
    nested_inner: dict | None = None   # inner authorization carried by a swap backup


@dataclass
class ShadowTx:
    index: int
    aid: str
    dst: tuple
    include_at: int
    applied: bool = False
    reason: str | None = None
    reveals: dict | None = None


class IdealWorld:
    def __init__(self, delta: int, parties: list[str]) -> None:
        self.delta = delta
        self.parties = list(parties)
        self.records: dict[str, IdealRecord] = {}
        self.backups: list[BackupEntry] = []
        self.ledger: dict[str, tuple] = {}
        self.shadow_log: list[ShadowTx] = []
        self.seen_sids: set[str] = set()
        self.halted: set[str] = set()
        self.gaps: list[dict] = []
        self.swap_ctx: dict[str, dict] = {}
        self._session_pos: dict[str, tuple[int, int]] = {}
        # authorizations revealed by publishing a nested backup: aid -> entry dict
        self.revealed: dict[str, dict] = {}

    # --- bookkeeping ---------------------------------------------------------------

    def genesis(self, aid: str) -> None:
        self.ledger[aid] = ("custody", aid)

    def _halt(self, sid: str, reason: str) -> None:
        self.halted.add(sid)

    def _gap(self, step: Step, why: str) -> None:
        self.gaps.append({"round": step.round, "sid": step.sid,
                          "step": step.phase + "/" + step.name, "why": why})

    # Availability events: stored when the artifact becomes usable (at its
    # release for puzzle-locked artifacts), which may postdate the unlock.
    _UNSEQUENCED = {"store", "store_nested"}

    def _order_check(self, step: Step) -> None:
        if step.name in self._UNSEQUENCED:
            return
        order = PHASE_STEPS[step.phase]
        idx = order.index(step.name)
        prev = self._session_pos.get(step.sid)
        if prev is not None:
            prev_idx, prev_round = prev
            if idx <= prev_idx or step.round < prev_round:
                raise HookOrderError("%s/%s out of order in %s"
                                     % (step.phase, step.name, step.sid))
        self._session_pos[step.sid] = (idx, step.round)

    # --- replay --------------------------------------------------------------------

    def replay(self, steps: list[Step]) -> None:
        for i, step in enumerate(steps):
            if i and (steps[i - 1].round > step.round):
                raise HookOrderError("schedule rounds must be non-decreasing")
        for step in steps:
            self._advance_shadow(step.round)
            if step.sid in self.halted:
                self._gap(step, "session halted")
                continue
            self._order_check(step)
            handler = getattr(self, "_step_%s_%s" % (step.phase, step.name))
            handler(step)
        self._advance_shadow(10 ** 9)

    def _advance_shadow(self, upto: int) -> None:
        for tx in self.shadow_log:
            if tx.applied or tx.reason is not None or tx.include_at > upto:
                continue
            owner = self.ledger.get(tx.aid)
            if owner is None:
                tx.reason = "UnknownAsset"
            elif owner != ("custody", tx.aid):
                tx.reason = "BadSig"
            else:
                tx.applied = True
                self.ledger[tx.aid] = tx.dst
                if tx.reveals is not None:
                    self.revealed[tx.reveals["aid"]] = dict(tx.reveals,
                                                            available_from=tx.include_at)

    # --- deposit -----------------------------------------------------------------------

    def _step_deposit_create(self, step: Step) -> None:
        a = step.args
        if step.sid in self.seen_sids or a["T"] < step.round or a["party"] not in self.parties:
            self._halt(step.sid, "deposit checks")
            return
        self.seen_sids.add(step.sid)
        self.records[a["aid"]] = IdealRecord(aid=a["aid"], owner=a["party"],
                                             t_release=a["T"])
        self.genesis(a["aid"])

    # --- backup ---------------------------------------------------------------------------

    def _backup_timing_ok(self, rec: IdealRecord, t_new: int, rnd: int) -> bool:
        if t_new < rnd:
            return False
        if rec.has_backup:
            return rec.t_release - t_new >= self.delta
        return t_new <= rec.t_release

    def _step_backup_lock(self, step: Step) -> None:
        a = step.args
        rec = self.records.get(a["aid"])
        if (step.sid in self.seen_sids or rec is None or rec.owner != a["party"]
                or rec.state != UNLOCKED
                or not self._backup_timing_ok(rec, a["t_new"], step.round)):
            self._halt(step.sid, "backup checks")
            return
        self.seen_sids.add(step.sid)
        rec.state = LOCKED
        rec.t_release = a["t_new"]
        rec.has_backup = True
        pk_r = tuple(a["pk_r"]) if a.get("pk_r") is not None else None
        self.swap_ctx[step.sid] = {"aid": a["aid"], "party": a["party"],
                                   "pk_r": pk_r, "t_new": a["t_new"]}

    def _step_backup_store(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        self.backups.append(BackupEntry(party=ctx["party"], aid=ctx["aid"],
                                        pk_r=ctx["pk_r"], release=ctx["t_new"],
                                        available_from=step.round))

    def _step_backup_unlock(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        rec = self.records.get(ctx["aid"])
        if rec is not None:
            rec.state = UNLOCKED

    # --- payment ------------------------------------------------------------------------------

    def _step_pay_lock(self, step: Step) -> None:
        a = step.args
        rec = self.records.get(a["aid"])
        if (step.sid in self.seen_sids or rec is None or rec.owner != a["from"]
                or rec.state != UNLOCKED or a["from"] == a["to"]
                or a["to"] not in self.parties):
            self._halt(step.sid, "pay checks")
            return
        self.seen_sids.add(step.sid)
        rec.state = LOCKED

    def _step_pay_move(self, step: Step) -> None:
        a = step.args
        rec = self.records.get(a["aid"])
        if rec is None:
            self._halt(step.sid, "pay move")
            return
        rec.owner = a["to"]

    def _step_pay_update(self, step: Step) -> None:
        a = step.args
        rec = self.records.get(a["aid"])
        if rec is None or rec.owner != a["to"]:
            self._halt(step.sid, "pay update")
            return
        rec.t_release -= self.delta
        rec.state = UNLOCKED
        rec.has_backup = False

    # --- swap ------------------------------------------------------------------------------------

    def _step_swap_lock(self, step: Step) -> None:
        a = step.args
        rec = self.records.get(a["aid_a"])
        if (step.sid in self.seen_sids or rec is None or rec.owner != a["initiator"]
                or rec.state != UNLOCKED or a["initiator"] == a["responder"]
                or a["responder"] not in self.parties):
            self._halt(step.sid, "swap checks")
            return
        self.seen_sids.add(step.sid)
        rec.state = LOCKED
        self.swap_ctx[step.sid] = dict(a)

    def _step_swap_move(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        self.records[ctx["aid_a"]].owner = ctx["responder"]

    def _step_swap_lock_both(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        rec_a = self.records.get(ctx["aid_a"])
        rec_b = self.records.get(ctx["aid_b"])
        if (rec_b is None or rec_b.owner != ctx["responder"] or rec_b.state != UNLOCKED
                or rec_a is None):
            self._halt(step.sid, "swap responder checks")
            return
        if rec_b.t_release - rec_a.t_release <= 2 * self.delta:
            self._halt(step.sid, "swap margin")
            return
        t_prime = rec_a.t_release - self.delta
        ctx["t_prime"] = t_prime
        rec_a.state = LOCKED
        rec_b.state = LOCKED
        rec_a.t_release = t_prime
        rec_a.has_backup = True
        rec_b.t_release = t_prime + 2 * self.delta

    def _step_swap_auth_inner(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        ctx["inner"] = {"aid": ctx["aid_b"], "dst": ("skey", ctx["initiator"], step.sid),
                        "release": ctx["t_prime"]}

    def _step_swap_auth_nested(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        ctx["nested"] = {"aid": ctx["aid_a"], "dst": ("skey", ctx["responder"], step.sid),
                         "release": ctx["t_prime"], "inner": ctx["inner"]}

    def _step_swap_store_nested(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        nested = ctx["nested"]
        self.backups.append(BackupEntry(
            party=ctx["responder"], aid=nested["aid"], pk_r=nested["dst"],
            release=nested["release"], available_from=step.round,
            nested_inner=nested["inner"]))

    def _step_swap_move_b(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        rec_b = self.records[ctx["aid_b"]]
        rec_b.owner = ctx["initiator"]
        rec_b.state = UNLOCKED
        rec_b.has_backup = False

    def _step_swap_unlock_a(self, step: Step) -> None:
        ctx = self.swap_ctx[step.sid]
        rec_a = self.records.get(ctx["aid_a"])
        if rec_a is not None:
            rec_a.state = UNLOCKED

    # --- recovery ----------------------------------------------------------------------------------

    def _entitled(self, party: str, aid: str, dst: tuple, rnd: int) -> BackupEntry | None:
        for entry in self.backups:
            if (entry.party == party and entry.aid == aid and entry.pk_r == dst
                    and entry.available_from <= rnd and rnd >= entry.release):
                return entry
        revealed = self.revealed.get(aid)
        if (revealed is not None and revealed["dst"] == dst
                and revealed["available_from"] <= rnd and rnd >= revealed["release"]):
            return BackupEntry(party=party, aid=aid, pk_r=dst,
                               release=revealed["release"],
                               available_from=revealed["available_from"])
        return None

    def _step_recovery_submit(self, step: Step) -> None:
        a = step.args
        dst = tuple(a["dst"])
        entry = self._entitled(a["party"], a["aid"], dst, step.round)
        if entry is None:
            self._halt(step.sid, "recovery entitlement")
            return
        include_at = a.get("include_at", step.round + 1)
        if include_at - step.round > self.delta:
            self._halt(step.sid, "recovery inclusion bound")
            return
        reveals = None
        if entry.nested_inner is not None:
            reveals = dict(entry.nested_inner)
        self.shadow_log.append(ShadowTx(index=len(self.shadow_log), aid=a["aid"],
                                        dst=dst, include_at=include_at, reveals=reveals))

    # --- final state -----------------------------------------------------------------------------------

    def comparable_state(self, horizon: int) -> dict:
        records = {}
        for aid, rec in sorted(self.records.items()):
            records[aid] = {"owner": rec.owner, "t_release": rec.t_release,
                            "state": rec.state}
        backups = sorted(
            (e.party, e.aid, list(e.pk_r), e.release)
            for e in self.backups if e.available_from <= horizon
        )
        ledger = {aid: list(dst) for aid, dst in sorted(self.ledger.items())}
        return {"records": records, "backups": backups, "ledger": ledger}
