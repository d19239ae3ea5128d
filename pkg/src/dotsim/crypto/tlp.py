"""Time-lock puzzles.

Two modes:

* Ideal: a per-simulation oracle that hands out chains of gamma+1 opaque
  states.  One solve step maps a state to its successor; the hidden message is
  released only against the final state.  Solving an unknown state starts a
  fresh junk chain, so guessing buys nothing.  This is the default mode: it is
  exact (one step per clock round) and deterministic.

* Concrete: an RSA-style repeated-squaring puzzle with toy parameters.  The
  generator shortcuts the exponentiation with the factorization; the solver
  must do `steps` sequential squarings.  Kept off the simulation's critical
  path, verified in tests against an independent modular-exponentiation
  oracle.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field

from dotsim.encoding import encode_bytes, encode_u64


@dataclass(frozen=True)
class IdealPuzzle:
    puzzle_id: int
    st0: bytes
    gamma: int
    tag: bytes


class TlpOracle:
    """Ideal-mode puzzle registry; one instance per simulation."""

    def __init__(self, seed: bytes) -> None:
        self._seed = seed
        self._next_id = 0
        self._steps: dict[bytes, bytes] = {}          # state -> next state
        self._messages: dict[tuple[bytes, bytes], bytes] = {}  # (st0, final) -> msg
        self._fresh_counter = 0

    def _state(self, *parts: bytes) -> bytes:
        h = hashlib.sha256(self._seed)
        for p in parts:
            h.update(encode_bytes(p))
        return h.digest()

    def pgen(self, gamma: int, msg: bytes) -> IdealPuzzle:
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        pid = self._next_id
        self._next_id += 1
        chain = [self._state(b"chain", encode_u64(pid), encode_u64(j)) for j in range(gamma + 1)]
        for a, b in zip(chain, chain[1:]):
            self._steps[a] = b
        tag = self._state(b"tag", encode_u64(pid))
        self._messages[(chain[0], chain[-1])] = msg
        return IdealPuzzle(puzzle_id=pid, st0=chain[0], gamma=gamma, tag=tag)

    def solve_step(self, state: bytes) -> bytes:
        nxt = self._steps.get(state)
        if nxt is None:
            # Unknown state: start a fresh junk chain.
            nxt = self._state(b"fresh", encode_u64(self._fresh_counter), state)
            self._fresh_counter += 1
            self._steps[state] = nxt
        return nxt

    def get_msg(self, puzzle: IdealPuzzle, state: bytes) -> bytes | None:
        return self._messages.get((puzzle.st0, state))


@dataclass
class IdealSolver:
    """Tracks one solver's progress on one puzzle; one step per clock round."""

    oracle: TlpOracle
    puzzle: IdealPuzzle
    state: bytes = b""
    steps_done: int = 0

    def __post_init__(self) -> None:
        if not self.state:
            self.state = self.puzzle.st0

    def step(self) -> None:
        if self.solved():
            return
        self.state = self.oracle.solve_step(self.state)
        self.steps_done += 1

    def solved(self) -> bool:
        return self.oracle.get_msg(self.puzzle, self.state) is not None

    def message(self) -> bytes | None:
        return self.oracle.get_msg(self.puzzle, self.state)


# --- concrete repeated-squaring mode -----------------------------------------

@dataclass(frozen=True)
class ConcretePuzzle:
    modulus: int
    base: int
    steps: int
    tag: bytes
    body: bytes


def _stream(key: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(key + counter.to_bytes(8, "big")).digest()
        counter += 1
    return out[:length]


def _key_from(value: int) -> bytes:
    return hashlib.sha256(b"tlp-key" + value.to_bytes((value.bit_length() + 7) // 8 or 1, "big")).digest()


def concrete_pgen(p: int, q: int, base: int, steps: int, msg: bytes) -> ConcretePuzzle:
    """Generator-side construction using the factorization shortcut."""
    n = p * q
    phi = (p - 1) * (q - 1)
    blind = pow(base, pow(2, steps, phi), n)
    key = _key_from(blind)
    body = bytes(a ^ b for a, b in zip(msg, _stream(key, len(msg))))
    tag = hmac.new(key, body, hashlib.sha256).digest()
    return ConcretePuzzle(modulus=n, base=base % n, steps=steps, tag=tag, body=body)


@dataclass
class ConcreteSolver:
    puzzle: ConcretePuzzle
    value: int = 0
    steps_done: int = 0

    def __post_init__(self) -> None:
        if self.value == 0:
            self.value = self.puzzle.base

    def step(self, squarings: int = 1) -> None:
        for _ in range(min(squarings, self.puzzle.steps - self.steps_done)):
            self.value = (self.value * self.value) % self.puzzle.modulus
            self.steps_done += 1

    def message(self) -> bytes | None:
        if self.steps_done < self.puzzle.steps:
            return None
        key = _key_from(self.value)
        if not hmac.compare_digest(self.puzzle.tag, hmac.new(key, self.puzzle.body, hashlib.sha256).digest()):
            return None
        return bytes(a ^ b for a, b in zip(self.puzzle.body, _stream(key, len(self.puzzle.body))))
