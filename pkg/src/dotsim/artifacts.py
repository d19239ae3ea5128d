"""Recovery artifacts handed from a trusted entity to its user.

Three forms, chosen by ledger capabilities and TE flavor:

* ``native``: a ready-to-broadcast transaction with an on-chain timelock.
* ``tlp``: a single time-lock puzzle hiding a signed transaction
  (scriptless ledgers, enclave TE).
* ``tlp_shares``: one puzzle per group node, each hiding that node's key
  share; solving any ``threshold`` of them reconstructs the asset key, after
  which the holder signs the recovery transaction themselves (scriptless
  ledgers, threshold TE).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from dotsim.crypto.tlp import IdealPuzzle
from dotsim.ledger import LedgerTx

NATIVE = "native"
TLP = "tlp"
TLP_SHARES = "tlp_shares"


@dataclass
class BackupArtifact:
    aid: str
    pk_r: int
    release: int
    created_round: int
    kind: str
    ledger_kind: str
    owner_pk: int = 0  # custody key the enclosed transaction verifies under
    tx: LedgerTx | None = None
    puzzles: list[IdealPuzzle] = field(default_factory=list)
    threshold: int | None = None
