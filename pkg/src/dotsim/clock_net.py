"""Round clock and message channels.

The simulation is a single-threaded event loop.  Each round proceeds in a
fixed order so identical inputs give byte-identical traces:

1. services (ledgers) process work scheduled for the new round,
2. environment actions scripted for the round run,
3. due envelopes are drained in ascending ``env_id`` (envelopes created
   during the drain with a same-round delivery are included),
4. actors' ``on_round`` hooks run in ascending participant id (deadline
   checks, puzzle solve steps, watchers),
5. end-of-round services run (invariant checks).

Two channels exist.  The asynchronous channel is adversary-scheduled: the
scheduler may fix any finite delivery round (default ``sent_at + 1``), and
each send leaks ``(sid, src, dst, |payload|)`` to the adversary log.  The
synchronous channel delivers at exactly ``sent_at + 1`` and cannot be
rescheduled; only crash faults suppress it.  Co-located participants (a user
process and its enclave) may exchange synchronous messages within the same
round (``deliver_at == sent_at``).

Crash faults permanently suppress both inbound processing and outbound
emission for the target from the crash round onward; the asynchronous
channel additionally supports per-edge blocks and per-envelope delays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

from dotsim.errors import (
    AlreadyDelivered,
    InfiniteDelayWithoutFault,
    UnknownParticipant,
)

Round = int

_MAX_DELIVERIES_PER_ROUND = 100_000


@dataclass
class Envelope:
    env_id: int
    sid: str
    src: str
    dst: str
    payload: bytes
    sent_at: Round
    deliver_at: Round | None  # None = pending (async, scheduler decides)
    channel: str              # "async" | "sync"
    relayer: str | None = None
    blocked: bool = False
    delivered: bool = False


@dataclass(frozen=True)
class FaultSpec:
    """crash(target, round) | block_channel(src, dst, from_round) | delay(env_id, until)."""

    kind: str
    target: str | None = None
    round: Round | None = None
    src: str | None = None
    dst: str | None = None
    env_id: int | None = None
    until: Round | None = None


class Actor:
    """Base participant: subclasses override the two callbacks."""

    def __init__(self, participant_id: str, owner: str | None = None) -> None:
        self.participant_id = participant_id
        self.owner = owner if owner is not None else participant_id

    def on_deliver(self, sim: "Simulation", env: Envelope) -> None:  # pragma: no cover
        pass

    def on_round(self, sim: "Simulation", rnd: Round) -> None:  # pragma: no cover
        pass


class Simulation:
    def __init__(self, seed: int = 0, default_async_delay: int = 1) -> None:
        self.seed = seed
        self.clock: Round = 0
        self.default_async_delay = default_async_delay
        self.participants: dict[str, Actor] = {}
        self.envelopes: dict[int, Envelope] = {}
        self._next_env_id = 1
        self.leaks: list[tuple[str, str, str, int]] = []
        self.trace_events: list[dict] = []
        self.crashes: dict[str, Round] = {}
        self.blocks: list[tuple[str, str, Round]] = []
        self._delays: dict[int, Round] = {}
        self._services: list = []
        self._env_actions: dict[Round, list[Callable[["Simulation"], None]]] = {}

    # --- registry -------------------------------------------------------------

    def register(self, actor: Actor) -> Actor:
        self.participants[actor.participant_id] = actor
        return actor

    def add_service(self, service) -> None:
        self._services.append(service)

    def at_round(self, rnd: Round, action: Callable[["Simulation"], None]) -> None:
        """Schedule an environment action for step 2 of the given round."""
        self._env_actions.setdefault(rnd, []).append(action)

    # --- fault state ------------------------------------------------------------

    def crashed(self, pid: str, rnd: Round | None = None) -> bool:
        at = self.crashes.get(pid)
        return at is not None and (rnd if rnd is not None else self.clock) >= at

    def _edge_blocked(self, src: str, dst: str, rnd: Round) -> bool:
        return any(s == src and d == dst and rnd >= frm for s, d, frm in self.blocks)

    def inject_fault(self, spec: FaultSpec) -> None:
        if spec.kind == "crash":
            self.crashes[spec.target] = spec.round
        elif spec.kind == "block_channel":
            self.blocks.append((spec.src, spec.dst, spec.round if spec.round is not None else 0))
        elif spec.kind == "delay":
            self._delays[spec.env_id] = spec.until
        else:
            raise ValueError("unknown fault kind %r" % spec.kind)
        self.trace("fault_injected", detail={
            "kind": spec.kind, "target": spec.target, "round": spec.round,
            "src": spec.src, "dst": spec.dst, "env_id": spec.env_id, "until": spec.until,
        })

    # --- channels ---------------------------------------------------------------

    def _check_registered(self, *pids: str) -> None:
        for pid in pids:
            if pid not in self.participants:
                raise UnknownParticipant(pid)

    def send_async(self, sid: str, src: str, dst: str, payload: bytes) -> int:
        self._check_registered(src, dst)
        if self.crashed(src):
            self.trace("send_suppressed", sid=sid, src=src, dst=dst)
            return -1
        env = Envelope(self._next_env_id, sid, src, dst, payload, self.clock, None, "async")
        self._next_env_id += 1
        self.envelopes[env.env_id] = env
        self.leaks.append((sid, src, dst, len(payload)))
        self.trace("send", sid=sid, src=src, dst=dst,
                   detail={"env_id": env.env_id, "channel": "async", "size": len(payload)})
        return env.env_id

    def send_sync(self, sid: str, src: str, dst: str, payload: bytes,
                  relayer: str | None = None, intra: bool = False) -> int:
        self._check_registered(src, dst)
        if self.crashed(src):
            self.trace("send_suppressed", sid=sid, src=src, dst=dst)
            return -1
        if intra and self.participants[src].owner != self.participants[dst].owner:
            raise ValueError("intra delivery requires co-located participants")
        deliver_at = self.clock if intra else self.clock + 1
        env = Envelope(self._next_env_id, sid, src, dst, payload, self.clock,
                       deliver_at, "sync", relayer=relayer)
        self._next_env_id += 1
        self.envelopes[env.env_id] = env
        self.trace("send", sid=sid, src=src, dst=dst,
                   detail={"env_id": env.env_id, "channel": "sync", "size": len(payload)})
        return env.env_id

    def adversary_set_delivery(self, env_id: int, rnd: Round | None) -> None:
        env = self.envelopes.get(env_id)
        if env is None:
            raise UnknownParticipant("envelope %d" % env_id)
        if env.delivered:
            raise AlreadyDelivered(env_id)
        if rnd is None:
            covered = (
                env.src in self.crashes or env.dst in self.crashes
                or any(s == env.src and d == env.dst for s, d, _ in self.blocks)
            )
            if not covered:
                raise InfiniteDelayWithoutFault(env_id)
            env.blocked = True
            return
        if rnd <= env.sent_at:
            raise ValueError("delivery round must exceed sent_at")
        env.deliver_at = rnd

    # --- the round loop -----------------------------------------------------------

    def _effective_deliver_at(self, env: Envelope) -> Round | None:
        if env.blocked:
            return None
        if env.env_id in self._delays:
            return self._delays[env.env_id]
        if env.deliver_at is not None:
            return env.deliver_at
        return env.sent_at + self.default_async_delay

    def _deliverable(self, env: Envelope, rnd: Round) -> bool:
        if env.channel == "async" and self._edge_blocked(env.src, env.dst, rnd):
            return False
        if env.relayer is not None and (self.crashed(env.relayer, env.sent_at) or self.crashed(env.relayer, rnd)):
            return False
        return not self.crashed(env.dst, rnd)

    def drain_due(self) -> None:
        """Deliver every envelope due at the current round, in env_id order."""
        rnd = self.clock
        for _ in range(_MAX_DELIVERIES_PER_ROUND):
            due = [e for e in self.envelopes.values()
                   if not e.delivered and not e.blocked and self._effective_deliver_at(e) == rnd]
            if not due:
                return
            env = min(due, key=lambda e: e.env_id)
            env.delivered = True
            if not self._deliverable(env, rnd):
                env.blocked = True
                env.delivered = False
                self.trace("suppressed", sid=env.sid, src=env.src, dst=env.dst,
                           detail={"env_id": env.env_id})
                continue
            self.trace("deliver", sid=env.sid, src=env.src, dst=env.dst,
                       detail={"env_id": env.env_id})
            self.participants[env.dst].on_deliver(self, env)
        raise RuntimeError("delivery loop did not settle")

    def tick(self) -> Round:
        self.clock += 1
        rnd = self.clock
        for service in self._services:
            begin = getattr(service, "begin_round", None)
            if begin:
                begin(self, rnd)
        for action in self._env_actions.pop(rnd, []):
            action(self)
        self.drain_due()
        for pid in sorted(self.participants):
            if not self.crashed(pid, rnd):
                self.participants[pid].on_round(self, rnd)
        self.drain_due()
        for service in self._services:
            end = getattr(service, "end_round", None)
            if end:
                end(self, rnd)
        return rnd

    def run_until(self, rnd: Round) -> None:
        while self.clock < rnd:
            self.tick()

    # --- trace ---------------------------------------------------------------------

    def trace(self, kind: str, sid: str | None = None, src: str | None = None,
              dst: str | None = None, detail: dict | None = None) -> None:
        self.trace_events.append({
            "round": self.clock,
            "kind": kind,
            "sid": sid,
            "src": src,
            "dst": dst,
            "detail": detail or {},
        })

    def trace_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.trace_events]

    def dump_trace(self, path: str) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")
