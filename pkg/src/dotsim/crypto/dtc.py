"""Distributed threshold cryptography: DKG, threshold signing, resharing.

Node-level state machines for the three multi-round group operations, pure
apart from the messages the host delivers.  A node group of size n uses a
threshold t = ceil(2n/3) (enforced: t > 2n/3, so at most n - t < n/3 faulty
nodes), and every operation either completes within its round bound or fails
exactly at it.

Message flow per operation (all node-to-node traffic is relayed by the
owning user, one round per hop):

* keygen: each live node deals a Shamir (t, n) sharing of a random scalar;
  a node finalizes once dealings from at least t dealers arrived, summing
  share values per recipient.  The group key is the product of the dealt
  commitments; the group secret never exists at any single node.
* sign: participants announce nonce commitments, the t lowest-indexed
  announcers form the signer set, partial signatures interpolate with
  Lagrange weights into an ordinary Schnorr signature under the group key.
* reshare: a quorum of the old committee announces, then deals
  degree-(t'-1) sharings of its Lagrange-weighted shares to the new
  committee; new shares are the per-recipient sums, the group key is
  unchanged.  Old shares are tombstoned only after enough new-committee
  acknowledgements arrive.

Nonces and dealing coefficients are derived deterministically from the
node's secrets and the session id, so identical runs re-sign identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from dotsim import encoding
from dotsim.crypto import pkc, shamir
from dotsim.crypto.pkc import G, P, Q
from dotsim.errors import ThresholdConfigError


def default_threshold(n: int) -> int:
    return math.ceil(2 * n / 3)


@dataclass(frozen=True)
class DtcGroup:
    name: str
    n: int
    t: int
    t_keygen: int = 3
    t_sign: int = 3
    t_reshare: int = 3

    def __post_init__(self) -> None:
        if not (1 <= self.t <= self.n):
            raise ThresholdConfigError("threshold out of range")
        if 3 * self.t <= 2 * self.n:
            raise ThresholdConfigError("need t > 2n/3")

    @property
    def indices(self) -> list[int]:
        return list(range(1, self.n + 1))

    @property
    def f_max(self) -> int:
        return self.n - self.t


def _derive_coeffs(seed: bytes, count: int) -> list[int]:
    return [pkc.hash_to_scalar(b"coeff", seed, encoding.encode_u64(k)) for k in range(count)]


def _encode_indices(indices: list[int]) -> bytes:
    return b"".join(encoding.encode_u64(i) for i in sorted(indices))


def _decode_indices(data: bytes) -> list[int]:
    return [int.from_bytes(data[k:k + 8], "big") for k in range(0, len(data), 8)]


class DkgSession:
    def __init__(self, group: DtcGroup, my_index: int, sid: str, start_round: int, seed: bytes) -> None:
        self.group = group
        self.my_index = my_index
        self.sid = sid
        self.start = start_round
        secret = pkc.hash_to_scalar(b"dkg-secret", seed)
        self.commit = pow(G, secret, P)
        coeffs = _derive_coeffs(seed, group.t - 1)
        self.shares_out = shamir.share_secret(secret, group.t, group.indices, coeffs)
        self.dealings: dict[int, tuple[int, int]] = {my_index: (self.shares_out[my_index], self.commit)}
        self.result: tuple | None = None

    def initial_emits(self) -> list[tuple[int, bytes]]:
        return [
            (j, encoding.pack("dkg_deal",
                              encoding.encode_u64(self.my_index),
                              encoding.encode_int(self.shares_out[j]),
                              encoding.encode_int(self.commit)))
            for j in self.group.indices if j != self.my_index
        ]

    def on_msg(self, fields: list[bytes]) -> None:
        dealer = int.from_bytes(fields[0], "big")
        self.dealings[dealer] = (encoding.decode_int(fields[1]), encoding.decode_int(fields[2]))

    def on_round(self, rnd: int) -> tuple | None:
        if self.result is not None:
            return None
        if rnd > self.start and len(self.dealings) >= self.group.t:
            dealers = sorted(self.dealings)
            share = sum(self.dealings[d][0] for d in dealers) % Q
            pk = 1
            for d in dealers:
                pk = (pk * self.dealings[d][1]) % P
            self.result = ("ok", pk, share)
            return self.result
        if rnd >= self.start + self.group.t_keygen:
            self.result = ("fail", "KeyGenFail")
            return self.result
        return None


class SignSession:
    def __init__(self, group: DtcGroup, my_index: int, sid: str, subid: str,
                 share: int, group_pk: int, msg: bytes, start_round: int) -> None:
        self.group = group
        self.my_index = my_index
        self.sid = sid
        self.subid = subid
        self.share = share
        self.group_pk = group_pk
        self.msg = msg
        self.start = start_round
        self.nonce = pkc.hash_to_scalar(b"tsig-nonce", encoding.encode_int(share),
                                        sid.encode(), subid.encode(), msg)
        if self.nonce == 0:
            self.nonce = 1
        self.commits: dict[int, int] = {my_index: pow(G, self.nonce, P)}
        self.partials: dict[int, int] = {}
        self.signers: list[int] | None = None
        self.result: tuple | None = None

    def initial_emits(self) -> list[tuple[int, bytes]]:
        body = encoding.pack("sign_r", encoding.encode_u64(self.my_index),
                             encoding.encode_int(self.commits[self.my_index]))
        return [(j, body) for j in self.group.indices if j != self.my_index]

    def on_commit(self, fields: list[bytes]) -> None:
        idx = int.from_bytes(fields[0], "big")
        self.commits[idx] = encoding.decode_int(fields[1])

    def on_partial(self, fields: list[bytes]) -> None:
        idx = int.from_bytes(fields[0], "big")
        self.partials[idx] = encoding.decode_int(fields[1])

    def _aggregate_commit(self) -> int:
        agg = 1
        for j in self.signers:
            agg = (agg * self.commits[j]) % P
        return agg

    def on_round(self, rnd: int) -> tuple | None:
        """Returns ("emit", msgs), ("ok", sig), ("fail", reason) or None."""
        if self.result is not None:
            return None
        if self.signers is None and rnd > self.start and len(self.commits) >= self.group.t:
            self.signers = sorted(self.commits)[:self.group.t]
            if self.my_index in self.signers:
                agg = self._aggregate_commit()
                c = pkc.hash_to_scalar(b"challenge", encoding.encode_int(agg),
                                       encoding.encode_int(self.group_pk), self.msg)
                lam = shamir.lagrange_at_zero(self.signers)[self.my_index]
                z = (self.nonce + c * lam * self.share) % Q
                self.partials[self.my_index] = z
                body = encoding.pack("sign_z", encoding.encode_u64(self.my_index),
                                     encoding.encode_int(z))
                return ("emit", [(j, body) for j in self.group.indices if j != self.my_index])
            return None
        if self.signers is not None:
            have = [j for j in self.signers if j in self.partials]
            if len(have) == len(self.signers):
                agg = self._aggregate_commit()
                z = sum(self.partials[j] for j in self.signers) % Q
                sig = encoding.encode_int(agg) + encoding.encode_int(z)
                if pkc.verify(self.group_pk, self.msg, sig):
                    self.result = ("ok", sig)
                else:
                    self.result = ("fail", "SignFail")
                return self.result
        if rnd >= self.start + self.group.t_sign:
            self.result = ("fail", "SignFail")
            return self.result
        return None


class ReshareOld:
    """Old-committee side of a reshare."""

    def __init__(self, group: DtcGroup, my_index: int, sid: str, subid: str,
                 share: int, new_group: DtcGroup, start_round: int, seed: bytes) -> None:
        self.group = group
        self.my_index = my_index
        self.sid = sid
        self.subid = subid
        self.share = share
        self.new_group = new_group
        self.start = start_round
        self.seed = seed
        self.announces: set[int] = {my_index}
        self.acks: set[int] = set()
        self.dealt = False
        self.result: tuple | None = None

    def initial_emits(self) -> list[tuple[int, bytes]]:
        body = encoding.pack("rs_announce", encoding.encode_u64(self.my_index))
        return [(j, body) for j in self.group.indices if j != self.my_index]

    def on_announce(self, fields: list[bytes]) -> None:
        self.announces.add(int.from_bytes(fields[0], "big"))

    def on_ack(self, fields: list[bytes]) -> None:
        self.acks.add(int.from_bytes(fields[0], "big"))

    def on_round(self, rnd: int) -> tuple | None:
        """Returns ("deal", msgs for the new committee), ("ok",)/("fail", r), or None."""
        if self.result is not None:
            return None
        if not self.dealt and rnd > self.start and len(self.announces) >= self.group.t:
            dealers = sorted(self.announces)[:self.group.t]
            self.dealt = True
            if self.my_index in dealers:
                lam = shamir.lagrange_at_zero(dealers)[self.my_index]
                weighted = (lam * self.share) % Q
                coeffs = _derive_coeffs(self.seed, self.new_group.t - 1)
                out = shamir.share_secret(weighted, self.new_group.t, self.new_group.indices, coeffs)
                dealer_set = _encode_indices(dealers)
                return ("deal", [
                    (j, encoding.pack("rs_deal",
                                      encoding.encode_u64(self.my_index),
                                      dealer_set,
                                      encoding.encode_int(out[j])))
                    for j in self.new_group.indices
                ])
            return None
        if rnd >= self.start + self.group.t_reshare:
            if len(self.acks) >= self.new_group.t:
                self.result = ("ok",)
            else:
                self.result = ("fail", "ReshareFail")
            return self.result
        return None


class ReshareNew:
    """New-committee side; created once the host decides to join."""

    def __init__(self, new_group: DtcGroup, my_index: int, sid: str, subid: str,
                 start_round: int, deadline: int) -> None:
        self.new_group = new_group
        self.my_index = my_index
        self.sid = sid
        self.subid = subid
        self.start = start_round
        self.deadline = deadline
        self.dealings: dict[int, int] = {}
        self.dealer_set: list[int] | None = None
        self.result: tuple | None = None

    def on_deal(self, fields: list[bytes]) -> None:
        dealer = int.from_bytes(fields[0], "big")
        dealer_set = _decode_indices(fields[1])
        if self.dealer_set is None:
            self.dealer_set = dealer_set
        if dealer_set != self.dealer_set:
            return  # inconsistent dealing, drop
        self.dealings[dealer] = encoding.decode_int(fields[2])

    def on_round(self, rnd: int) -> tuple | None:
        """Returns ("ok", new_share, ack_msgs) or ("fail", reason) or None."""
        if self.result is not None:
            return None
        if self.dealer_set is not None and set(self.dealer_set) <= set(self.dealings):
            share = sum(self.dealings[d] for d in self.dealer_set) % Q
            ack = encoding.pack("rs_ack", encoding.encode_u64(self.my_index))
            self.result = ("ok", share)
            return ("ok", share, ack)
        if rnd >= self.deadline:
            self.result = ("fail", "ReshareFail")
            return self.result
        return None
