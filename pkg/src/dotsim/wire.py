"""Authenticated (and optionally encrypted) wrapping for inter-TE payloads.

The relayed channels are modeled as adversary-visible, so every payload that
crosses a trust boundary is signed with the sender's long-term identity key,
and encrypted to the recipient's identity key when it carries secret
material.  Receivers verify against a directory of certified identity keys;
any bit flip fails verification.
"""

from __future__ import annotations

from dotsim import encoding
from dotsim.crypto import pkc
from dotsim.errors import BadHandoffSig, DecryptFailure


def wrap(sender: str, sender_sk: int, body: bytes,
         recipient_pk: int | None = None, entropy: bytes = b"") -> bytes:
    """Sign `body` with the sender identity key; encrypt first if a recipient key is given."""
    if recipient_pk is not None:
        body = encoding.pack("enc", pkc.encrypt(recipient_pk, body, entropy))
    else:
        body = encoding.pack("clear", body)
    sig = pkc.sign(sender_sk, encoding.pack("wire", sender.encode(), body))
    return encoding.pack("wrapped", sender.encode(), body, sig)


def unwrap(data: bytes, directory: dict[str, int], recipient_sk: int | None = None) -> tuple[str, bytes]:
    """Verify and (if needed) decrypt; returns (sender, body). Raises on any tamper."""
    try:
        tag, fields = encoding.unpack(data)
    except ValueError as exc:
        raise BadHandoffSig(str(exc))
    if tag != "wrapped" or len(fields) != 3:
        raise BadHandoffSig("malformed wrapper")
    sender = fields[0].decode()
    body, sig = fields[1], fields[2]
    sender_pk = directory.get(sender)
    if sender_pk is None:
        raise BadHandoffSig("unknown sender %r" % sender)
    if not pkc.verify(sender_pk, encoding.pack("wire", sender.encode(), body), sig):
        raise BadHandoffSig("identity signature check failed")
    inner_tag, inner = encoding.unpack(body)
    if inner_tag == "enc":
        if recipient_sk is None:
            raise DecryptFailure("no decryption key")
        return sender, pkc.decrypt(recipient_sk, inner[0])
    return sender, inner[0]
