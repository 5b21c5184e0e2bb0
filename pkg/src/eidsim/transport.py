"""Deterministic message transport with interception hooks.

Every envelope event (sent, delivered, dropped, substituted) is appended to
the transcript.  Delivery is FIFO in send order.  Interceptors may only be
attached to the host-side channels; the TEE link and the server backbone
are out of the adversary's reach.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import dataclass, replace
from pathlib import Path

from . import crypto


class Channel(enum.Enum):
    HOST_SE = "HOST_SE"
    TEE_SE = "TEE_SE"
    HOST_ISSUER = "HOST_ISSUER"
    HOST_TSM = "HOST_TSM"
    HOST_EIDSERVER = "HOST_EIDSERVER"
    SERVER_SIDE = "SERVER_SIDE"


TAPPABLE = frozenset({Channel.HOST_SE, Channel.HOST_ISSUER, Channel.HOST_TSM, Channel.HOST_EIDSERVER})


class TransportError(Exception):
    pass


class NoReply(TransportError):
    pass


@dataclass(frozen=True)
class Envelope:
    seq: int
    channel: Channel
    sender: str
    recipient: str
    plaintext_flag: bool
    payload: bytes
    reply_to: int | None = None


# Interceptor actions


@dataclass(frozen=True)
class Observe:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Delay:
    pass


@dataclass(frozen=True)
class Duplicate:
    pass


@dataclass(frozen=True)
class Substitute:
    payload: bytes


@dataclass(frozen=True)
class Relay:
    via: str


Action = Observe | Drop | Delay | Duplicate | Substitute | Relay


@dataclass
class InterceptorPolicy:
    channels: frozenset[Channel]
    decide: Callable[[Envelope], Action] = lambda env: Observe()
    exempt: frozenset[str] = frozenset()

    def __post_init__(self):
        self.channels = frozenset(self.channels)
        bad = self.channels - TAPPABLE
        if bad:
            raise TransportError(f"cannot intercept {sorted(c.value for c in bad)}: not a host-side channel")

    def applies(self, env: Envelope) -> bool:
        return env.channel in self.channels and env.sender not in self.exempt and env.recipient not in self.exempt


def observer(channels: Iterable[Channel], sink: Callable[[Envelope], None]) -> InterceptorPolicy:
    def decide(env: Envelope) -> Action:
        sink(env)
        return Observe()

    return InterceptorPolicy(frozenset(channels), decide)


class LinkSealer:
    """AEAD protection of the pre-authenticated server backbone."""

    def __init__(self, secret: bytes, ledger: crypto.NonceLedger | None = None):
        self._secret = secret
        self._ledger = ledger
        self._counters: dict[tuple[str, str], int] = {}

    def link_key(self, a: str, b: str) -> crypto.SymmetricKey:
        lo, hi = sorted((a, b))
        return crypto.kdf(self._secret, f"link|{lo}|{hi}".encode(), crypto.KeyPurpose.ENC)

    def seal(self, sender: str, recipient: str, payload: bytes) -> bytes:
        n = self._counters.get((sender, recipient), 0)
        self._counters[(sender, recipient)] = n + 1
        nonce = crypto.digest(f"{sender}>{recipient}".encode())[:4] + n.to_bytes(8, "big")
        key = self.link_key(sender, recipient)
        aad = f"{sender}>{recipient}".encode()
        return crypto.aead_encrypt(key, nonce, payload, aad, self._ledger).to_bytes()

    def open(self, sender: str, recipient: str, sealed: bytes) -> bytes:
        return crypto.aead_decrypt(self.link_key(sender, recipient), sealed, f"{sender}>{recipient}".encode())


Handler = Callable[[Envelope], "bytes | None"]


class Transport:
    def __init__(self, sealer: LinkSealer | None = None):
        self.records: list[dict] = []
        self.envelopes: list[Envelope] = []
        self._handlers: dict[str, Handler] = {}
        self._interceptors: list[InterceptorPolicy] = []
        self._queue: deque[Envelope] = deque()
        self._delayed: list[Envelope] = []
        self._replies: dict[int, Envelope] = {}
        self._seq = 0
        self._sealer = sealer

    def __getstate__(self):
        # interceptor policies hold callables that are scenario-local
        state = dict(self.__dict__)
        state["_interceptors"] = []
        return state

    # wiring

    def register(self, actor_id: str, handler: Handler) -> None:
        self._handlers[actor_id] = handler

    def unregister(self, actor_id: str) -> None:
        self._handlers.pop(actor_id, None)

    def add_interceptor(self, policy: InterceptorPolicy) -> None:
        self._interceptors.append(policy)

    def clear_interceptors(self) -> None:
        self._interceptors = []

    # logging

    def _record(self, env: Envelope, event: str) -> None:
        self.records.append({
            "seq": env.seq,
            "channel": env.channel.value,
            "from": env.sender,
            "to": env.recipient,
            "plaintext_flag": env.plaintext_flag,
            "event": event,
            "payload_hex": env.payload.hex(),
        })

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    # sending

    def send(
        self,
        channel: Channel,
        sender: str,
        recipient: str,
        payload: bytes,
        plaintext: bool = False,
        reply_to: int | None = None,
    ) -> Envelope:
        if channel is Channel.SERVER_SIDE and self._sealer is not None:
            payload = self._sealer.seal(sender, recipient, payload)
        env = Envelope(self._next_seq(), channel, sender, recipient, plaintext, payload, reply_to)
        self._emit(env)
        return env

    def _emit(self, env: Envelope) -> None:
        for policy in self._interceptors:
            if not policy.applies(env):
                continue
            action = policy.decide(env)
            if isinstance(action, Relay) and env.reply_to is None:
                env = replace(env, recipient=action.via)
                break
            if isinstance(action, Drop):
                self._record(env, "sent")
                self.envelopes.append(env)
                self._record(env, "dropped")
                return
            if isinstance(action, Substitute):
                self._record(env, "sent")
                self.envelopes.append(env)
                env = replace(env, payload=action.payload)
                self._record(env, "substituted")
                self.envelopes.append(env)
                self._queue.append(env)
                return
            if isinstance(action, Delay):
                self._record(env, "sent")
                self.envelopes.append(env)
                self._delayed.append(env)
                return
            if isinstance(action, Duplicate):
                self._record(env, "sent")
                self.envelopes.append(env)
                self._queue.append(env)
                dup = replace(env, seq=self._next_seq())
                self._record(dup, "sent")
                self.envelopes.append(dup)
                self._queue.append(dup)
                return
        self._record(env, "sent")
        self.envelopes.append(env)
        self._queue.append(env)

    def pending(self) -> int:
        return len(self._queue) + len(self._delayed)

    def deliver_next(self) -> Envelope | None:
        if not self._queue:
            if not self._delayed:
                return None
            self._queue.extend(self._delayed)
            self._delayed = []
        env = self._queue.popleft()
        self._record(env, "delivered")
        if self._delayed:
            self._queue.extend(self._delayed)
            self._delayed = []
        payload = env.payload
        if env.channel is Channel.SERVER_SIDE and self._sealer is not None:
            try:
                payload = self._sealer.open(env.sender, env.recipient, payload)
            except crypto.AuthFailure:
                return env
        clear = replace(env, payload=payload)
        if env.reply_to is not None:
            self._replies[env.reply_to] = clear
            return env
        handler = self._handlers.get(env.recipient)
        if handler is None:
            return env
        reply = handler(clear)
        if reply is not None:
            self.send(env.channel, env.recipient, env.sender, reply, env.plaintext_flag, reply_to=env.seq)
        return env

    def request(
        self,
        channel: Channel,
        sender: str,
        recipient: str,
        payload: bytes,
        plaintext: bool = False,
    ) -> bytes:
        """Send and pump deliveries until the matching reply arrives."""
        env = self.send(channel, sender, recipient, payload, plaintext)
        while env.seq not in self._replies:
            if self.deliver_next() is None:
                raise NoReply(f"no reply to #{env.seq} {sender}->{recipient} on {channel.value}")
        return self._replies.pop(env.seq).payload

    # transcript

    def transcript_lines(self) -> list[str]:
        return [json.dumps(r, separators=(",", ":")) for r in self.records]

    def transcript_bytes(self, start: int = 0) -> bytes:
        lines = [json.dumps(r, separators=(",", ":")) for r in self.records[start:]]
        return ("\n".join(lines) + "\n").encode() if lines else b""

    def write_transcript(self, path: str | Path, start: int = 0) -> None:
        Path(path).write_bytes(self.transcript_bytes(start))


def read_transcript(path: str | Path) -> list[dict]:
    """Parse a JSONL transcript; raises ValueError on malformed content."""
    out = []
    keys = ("seq", "channel", "from", "to", "plaintext_flag", "event", "payload_hex")
    raw = Path(path).read_bytes()
    if raw and not raw.endswith(b"\n"):
        raise ValueError("transcript does not end with a newline (truncated?)")
    for n, line in enumerate(raw.decode().splitlines(), 1):
        rec = json.loads(line)
        if tuple(rec) != keys:
            raise ValueError(f"line {n}: unexpected record layout")
        bytes.fromhex(rec["payload_hex"])
        out.append(rec)
    return out


def record_payload(rec: dict) -> bytes:
    return bytes.fromhex(rec["payload_hex"])

