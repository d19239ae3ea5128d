"""Simulated ledgers with delta-bounded inclusion.

Two kinds share one implementation:

* ``scriptless``: transactions are ``(aid, pk_dst, payload, sig)``; there is
  no native timelock, so delayed recovery is gated off-chain by time-lock
  puzzles.
* ``timelock``: transactions carry a spend-after round ``T``; a transaction
  is applied only when the inclusion round is at least ``T``.

Submission never fails: the adversary picks an inclusion round within
``[now, now + delta]`` (default ``now + 1``), and at inclusion the signature
is checked against the asset's *current* owner key.  Invalid transactions
stay in the log and are broadcast, flagged not applied, so observers can
distinguish attempted from successful transfers.  Within one inclusion round
transactions apply in submission order.
"""

from __future__ import annotations

from dataclasses import dataclass

from dotsim import encoding
from dotsim.crypto import pkc
from dotsim.errors import DuplicateAsset, NotFound

SCRIPTLESS = "scriptless"
TIMELOCK = "timelock"

_KIND_TAGS = {SCRIPTLESS: b"\x01", TIMELOCK: b"\x02"}


@dataclass(frozen=True)
class LedgerTx:
    aid: str
    pk_dst: int
    timelock: int | None
    payload: bytes
    sig: bytes

    def kind(self) -> str:
        return SCRIPTLESS if self.timelock is None else TIMELOCK


def signing_bytes(kind: str, aid: str, pk_dst: int, timelock: int | None, payload: bytes) -> bytes:
    """Canonical transaction encoding (see module docstring for the layout)."""
    out = [_KIND_TAGS[kind], encoding.encode_bytes(aid.encode()), encoding.encode_int(pk_dst)]
    if kind == TIMELOCK:
        out.append(encoding.encode_u64(timelock if timelock is not None else 0))
    out.append(encoding.encode_bytes(payload))
    return b"".join(out)


def make_tx(sk: int, kind: str, aid: str, pk_dst: int, timelock: int | None,
            payload: bytes = b"") -> LedgerTx:
    if kind == SCRIPTLESS:
        timelock = None
    sig = pkc.sign(sk, signing_bytes(kind, aid, pk_dst, timelock, payload))
    return LedgerTx(aid=aid, pk_dst=pk_dst, timelock=timelock, payload=payload, sig=sig)


def tx_to_bytes(tx: LedgerTx) -> bytes:
    return encoding.pack(
        "tx",
        _KIND_TAGS[tx.kind()],
        tx.aid.encode(),
        encoding.encode_int(tx.pk_dst),
        encoding.encode_u64(tx.timelock if tx.timelock is not None else 0),
        tx.payload,
        tx.sig,
    )


def tx_from_bytes(data: bytes) -> LedgerTx:
    tag, fields = encoding.unpack(data)
    if tag != "tx" or len(fields) != 6:
        raise ValueError("not a transaction")
    kind_tag, aid, pk_dst, timelock, payload, sig = fields
    kind = SCRIPTLESS if kind_tag == _KIND_TAGS[SCRIPTLESS] else TIMELOCK
    return LedgerTx(
        aid=aid.decode(),
        pk_dst=encoding.decode_int(pk_dst),
        timelock=None if kind == SCRIPTLESS else int.from_bytes(timelock, "big"),
        payload=payload,
        sig=sig,
    )


@dataclass
class TxRecord:
    index: int
    tx: LedgerTx
    submitted_round: int
    included_round: int
    applied: bool = False
    reason: str | None = None
    processed: bool = False


class Ledger:
    """One ledger instance; registered as a simulation service."""

    def __init__(self, sim, kind: str, delta: int, default_delay: int = 1, name: str = "ledger") -> None:
        if kind not in (SCRIPTLESS, TIMELOCK):
            raise ValueError(kind)
        self.sim = sim
        self.kind = kind
        self.delta = delta
        self.default_delay = default_delay
        self.name = name
        self.assets: dict[str, int] = {}
        self.tx_log: list[TxRecord] = []

    # --- asset registry ---------------------------------------------------------

    def genesis_mint(self, aid: str, pk: int) -> None:
        if aid in self.assets:
            raise DuplicateAsset(aid)
        self.assets[aid] = pk
        self.sim.trace("ledger_genesis", detail={"aid": aid, "pk": "%064x" % pk})

    def query(self, aid: str) -> int:
        if aid not in self.assets:
            raise NotFound(aid)
        return self.assets[aid]

    # --- submission and inclusion --------------------------------------------------

    def submit(self, tx: LedgerTx, delay: int | None = None) -> int:
        """Queue a transaction; the scheduler fixes inclusion within [now, now+delta]."""
        if delay is None:
            delay = self.default_delay
        if not 0 <= delay <= self.delta:
            raise ValueError("inclusion delay outside [0, delta]")
        rec = TxRecord(
            index=len(self.tx_log),
            tx=tx,
            submitted_round=self.sim.clock,
            included_round=self.sim.clock + delay,
        )
        self.tx_log.append(rec)
        self.sim.trace("ledger_submitted", detail={
            "txid": rec.index, "aid": tx.aid, "pk_dst": "%064x" % tx.pk_dst,
            "timelock": tx.timelock, "included_round": rec.included_round,
            "payload_size": len(tx.payload),
        })
        return rec.index

    def _apply(self, rec: TxRecord, rnd: int) -> None:
        tx = rec.tx
        rec.processed = True
        owner = self.assets.get(tx.aid)
        if owner is None:
            rec.reason = "UnknownAsset"
        elif self.kind == TIMELOCK and tx.timelock is not None and rnd < tx.timelock:
            # Spend-after semantics: valid only once the current round reaches T.
            rec.reason = "TimelockNotReached"
        elif not pkc.verify(owner, signing_bytes(self.kind, tx.aid, tx.pk_dst, tx.timelock, tx.payload), tx.sig):
            rec.reason = "BadSig"
        else:
            rec.applied = True
            self.assets[tx.aid] = tx.pk_dst
        self.sim.trace("ledger_included", detail={
            "txid": rec.index, "aid": tx.aid, "applied": rec.applied,
            "reason": rec.reason, "pk_dst": "%064x" % tx.pk_dst,
        })

    def _process_due(self, rnd: int) -> None:
        for rec in self.tx_log:
            if not rec.processed and rec.included_round == rnd:
                self._apply(rec, rnd)

    def begin_round(self, sim, rnd: int) -> None:
        self._process_due(rnd)

    def end_round(self, sim, rnd: int) -> None:
        # Catches zero-delay submissions made during the round.
        self._process_due(rnd)

    # --- observation ---------------------------------------------------------------

    def observe(self, rnd: int) -> list[TxRecord]:
        """All transactions included at `rnd` (applied or not), with full payloads."""
        return [rec for rec in self.tx_log if rec.processed and rec.included_round == rnd]

    def observe_since(self, rnd: int) -> list[TxRecord]:
        return [rec for rec in self.tx_log if rec.processed and rec.included_round >= rnd]

    def export_log(self) -> list[dict]:
        return [{
            "txid": rec.index,
            "aid": rec.tx.aid,
            "pk_dst": "%064x" % rec.tx.pk_dst,
            "timelock": rec.tx.timelock,
            "payload_size": len(rec.tx.payload),
            "submitted_round": rec.submitted_round,
            "included_round": rec.included_round,
            "applied": rec.applied,
            "reason": rec.reason,
        } for rec in self.tx_log]
