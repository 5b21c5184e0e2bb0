"""Normal-world app: untrusted storage and the initialization / authentication flows.

Report step numbering follows the protocol's bullet order:

    init: 1 availability, 2 SSD install + key rotation, 3 applet install (DAP),
          4 personalization
    auth: 1 TcToken + connect, 2 PIN in TEE, 3 TA, 4 CA, 5 token load,
          6 consent in TEE, 7 secure-messaging transfer, 8 lock
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from . import crypto
from .actors import CAPTURED_CONTEXT, TcToken, encode_captured
from .apdu import CLA_ISO, INS, SW, ApduResponse, LogicalCommand, transmit
from .encoding import DecodeError, message, read_message, read_text, text, unpack_texts
from .tee import MalformedQr, RequestExceedsCertificate, TeeError
from .transport import Channel

if TYPE_CHECKING:
    from .world import World

TOKEN_KEY = "eid_token"


class MissingKey(KeyError):
    pass


class StoreFormatError(ValueError):
    pass


class UntrustedStore:
    """Flat key/value file: repeated ``u16 key_len | key | u32 value_len | value``."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._items: dict[str, bytes] = {}
        if self.path is not None and self.path.exists():
            self._items = self.decode(self.path.read_bytes())

    @staticmethod
    def encode(items: dict[str, bytes]) -> bytes:
        out = bytearray()
        for key, value in items.items():
            k = key.encode()
            out += struct.pack(">H", len(k)) + k + struct.pack(">I", len(value)) + value
        return bytes(out)

    @staticmethod
    def decode(raw: bytes) -> dict[str, bytes]:
        items, pos = {}, 0
        try:
            while pos < len(raw):
                (klen,) = struct.unpack_from(">H", raw, pos)
                key = raw[pos + 2:pos + 2 + klen].decode()
                pos += 2 + klen
                (vlen,) = struct.unpack_from(">I", raw, pos)
                if pos + 4 + vlen > len(raw):
                    raise StoreFormatError("truncated value")
                items[key] = raw[pos + 4:pos + 4 + vlen]
                pos += 4 + vlen
        except (struct.error, UnicodeDecodeError) as exc:
            raise StoreFormatError(str(exc)) from exc
        return items

    def _sync_in(self) -> None:
        if self.path is not None and self.path.exists():
            self._items = self.decode(self.path.read_bytes())

    def store_blob(self, key: str, value: bytes) -> None:
        self._sync_in()
        self._items[key] = bytes(value)
        if self.path is not None:
            self.path.write_bytes(self.encode(self._items))

    def load_blob(self, key: str) -> bytes:
        self._sync_in()
        try:
            return self._items[key]
        except KeyError:
            raise MissingKey(key) from None

    def raw_bytes(self) -> bytes:
        """What an adversary reading the file sees."""
        self._sync_in()
        return self.encode(self._items)

    def overwrite_raw(self, raw: bytes) -> None:
        self._items = self.decode(raw)
        if self.path is not None:
            self.path.write_bytes(raw)


@dataclass
class StepOutcome:
    number: int
    name: str
    ok: bool
    detail: str = ""


@dataclass
class FlowReport:
    flow: str
    steps: list[StepOutcome] = field(default_factory=list)
    status: str = "running"
    abort_step: int | None = None
    cause: str | None = None

    def passed(self, number: int, name: str, detail: str = "") -> None:
        self.steps.append(StepOutcome(number, name, True, detail))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InitReport(FlowReport):
    flow: str = "init"


@dataclass
class AuthReport(FlowReport):
    flow: str = "auth"
    ta_verdict: str = "not run"
    ca_verdict: str = "not run"
    requested: list[str] = field(default_factory=list)
    approved: list[str] = field(default_factory=list)
    delivered: list[str] = field(default_factory=list)


class AbortAtStep(Exception):
    def __init__(self, step: int, cause: str, detail: str = "", report: FlowReport | None = None):
        super().__init__(f"step {step}: {cause}" + (f" ({detail})" if detail else ""))
        self.step = step
        self.cause = cause
        self.detail = detail
        self.report = report


@dataclass
class UserScript:
    """Scripted user input: what the user types, scans and approves."""

    captured: dict[str, str]
    card_pin_proof: str
    qr_payload: str
    init_pin: str
    pin_attempts: list[str]
    consent: frozenset[str]


class ActorFailure(Exception):
    def __init__(self, name: str, detail: str):
        super().__init__(f"{name}: {detail}")
        self.name = name
        self.detail = detail


class HostApp:
    ACTOR = "host"

    def __init__(self, world: "World"):
        self.world = world

    @property
    def transport(self):
        return self.world.transport

    # SE link

    def _se_send(self, raw: bytes) -> bytes:
        plaintext = len(raw) > 1 and raw[1] == INS.SELECT
        return self.transport.request(Channel.HOST_SE, self.ACTOR, self.world.se_actor, raw, plaintext)

    def se(self, cmd: LogicalCommand) -> ApduResponse:
        return transmit(self._se_send, cmd)

    def select(self, aid: bytes) -> ApduResponse:
        return self.se(LogicalCommand(CLA_ISO, INS.SELECT, 0x04, 0x00, aid))

    # actor jobs relayed through the host

    def relay_job(self, channel: Channel, actor: str, start: bytes,
                  checkpoints: dict[str, Callable[[], None]] | None = None) -> list[bytes]:
        reply = self.transport.request(channel, self.ACTOR, actor, start)
        while True:
            kind, fields = read_message(reply)
            if kind == "APDU":
                reply = self.transport.request(channel, self.ACTOR, actor, message("RAPDU", self._se_send(fields[0])))
            elif kind == "CHECKPOINT":
                name = read_text(fields[0])
                if checkpoints and name in checkpoints:
                    checkpoints[name]()
                reply = self.transport.request(channel, self.ACTOR, actor, message("CONTINUE"))
            elif kind == "DONE":
                return fields
            elif kind == "FAIL":
                raise ActorFailure(read_text(fields[0]), read_text(fields[1]))
            else:
                raise ActorFailure("ProtocolError", f"unexpected message {kind!r} from {actor}")

    def ask(self, channel: Channel, actor: str, payload: bytes) -> tuple[str, list[bytes]]:
        kind, fields = read_message(self.transport.request(channel, self.ACTOR, actor, payload))
        if kind == "FAIL":
            raise ActorFailure(read_text(fields[0]), read_text(fields[1]))
        return kind, fields

    # TcToken entry point

    def handle_tc_token_url(self, url: str) -> TcToken:
        return self.world.offerer_for_url(url).create_tc_token()


def _abort(report: FlowReport, step: int, cause: str, detail: str = "") -> AbortAtStep:
    report.status = "aborted"
    report.abort_step = step
    report.cause = cause
    report.steps.append(StepOutcome(step, "abort", False, f"{cause}: {detail}" if detail else cause))
    return AbortAtStep(step, cause, detail, report)


def run_initialization(world: "World", script: UserScript) -> InitReport:
    host, cfg, report = world.host, world.config, InitReport()
    se_id = cfg.se_id

    if not cfg.tee_available:
        raise _abort(report, 1, "TeeUnavailable")
    if not cfg.se_available:
        raise _abort(report, 1, "SecureElementUnavailable")
    report.passed(1, "availability", "TEE and secure element present")

    try:
        kind, _ = host.ask(Channel.HOST_TSM, "tsm", message("SSD_REQUEST", text(se_id)))
        if kind == "GOTO_ISSUER":
            host.relay_job(Channel.HOST_ISSUER, "issuer", message("RUN", text(se_id)))
        host.relay_job(Channel.HOST_TSM, "tsm", message("ROTATE", text(se_id)))
    except ActorFailure as exc:
        raise _abort(report, 2, exc.name, exc.detail) from exc
    report.passed(2, "ssd_install", "TSM domain installed, keys rotated by TSM" if kind == "GOTO_ISSUER"
                  else "TSM domain already present")

    try:
        host.relay_job(Channel.HOST_TSM, "tsm", message("DEPLOY", text(se_id)))
    except ActorFailure as exc:
        raise _abort(report, 3, exc.name, exc.detail) from exc
    report.passed(3, "applet_install", "DAP-verified applet installed")

    document = encode_captured(script.captured, script.card_pin_proof)
    sealed = crypto.hybrid_seal(world.sp.keypair.public_part, document, world.rng, CAPTURED_CONTEXT)
    try:
        _, fields = host.ask(Channel.HOST_TSM, "tsm", message("PERSONALIZE", sealed))
    except ActorFailure as exc:
        raise _abort(report, 4, exc.name, exc.detail) from exc
    package = fields[0]
    resp = host.select(world.applet_aid)
    if not resp.ok:
        raise _abort(report, 4, "AppletMissing", f"{resp.sw:04X}")
    resp = host.se(LogicalCommand(CLA_ISO, INS.STORE_DATA, 0, 0, package))
    if not resp.ok:
        raise _abort(report, 4, "PackageRejected", f"{resp.sw:04X}")
    try:
        resp = world.tee.secure_qr_scan(script.qr_payload, script.init_pin)
    except MalformedQr as exc:
        raise _abort(report, 4, "MalformedQr", str(exc)) from exc
    if not resp.ok:
        cause = "AlreadyPersonalized" if resp.sw == SW.CONDITIONS else "PersonalizeRejected"
        raise _abort(report, 4, cause, f"{resp.sw:04X}")
    world.store.store_blob(TOKEN_KEY, resp.data)
    report.passed(4, "personalization", "token blob stored; ID card no longer needed")
    report.status = "ok"
    return report


def run_authentication(world: "World", tc_token: TcToken, script: UserScript) -> AuthReport:
    host, report = world.host, AuthReport()
    report.requested = sorted(tc_token.required_attributes)
    state = {"step": 3}

    if tc_token.eid_server_address != world.eid_server.actor_id:
        raise _abort(report, 1, "UnknownEidServer", tc_token.eid_server_address)
    report.passed(1, "tc_token", f"{len(tc_token.required_attributes)} attributes requested")

    resp = host.select(world.applet_aid)
    if not resp.ok:
        raise _abort(report, 2, "AppletMissing", f"{resp.sw:04X}")
    unlocked = False
    for pin in script.pin_attempts:
        resp = world.tee.secure_pin_entry(pin)
        if resp.ok:
            unlocked = True
            break
        if resp.sw == SW.AUTH_BLOCKED:
            raise _abort(report, 2, "PinBlocked")
        if resp.sw == SW.CONDITIONS:
            raise _abort(report, 2, "NotPersonalized")
    if not unlocked:
        raise _abort(report, 2, "PinRejected", f"last status {resp.sw:04X}" if script.pin_attempts else "no input")
    report.passed(2, "pin", "access to the secure element granted")

    def lock_quietly():
        host.se(LogicalCommand(CLA_ISO, INS.LOCK))

    def after_ta():
        report.ta_verdict = "accepted"
        report.passed(3, "terminal_authentication", "terminal chain and challenge signature verified")
        state["step"] = 4

    def after_ca():
        report.ca_verdict = "accepted"
        report.passed(4, "chip_authentication", "chip chain verified, session keys confirmed")
        state["step"] = 5
        try:
            blob = world.store.load_blob(TOKEN_KEY)
        except MissingKey as exc:
            raise _abort(report, 5, "MissingKey", TOKEN_KEY) from exc
        resp = host.se(LogicalCommand(CLA_ISO, INS.LOAD_TOKEN, 0, 0, blob))
        if resp.sw == SW.WRONG_DATA:
            raise _abort(report, 5, "BlobTamper", "token blob failed authentication")
        if not resp.ok:
            raise _abort(report, 5, "AccessLocked", f"{resp.sw:04X}")
        report.passed(5, "token_load", "token decrypted inside the secure element")
        state["step"] = 6
        try:
            consent, resp = world.tee.approve_attributes(tc_token.required_attributes, script.consent)
        except RequestExceedsCertificate as exc:
            raise _abort(report, 6, "RequestExceedsCertificate", str(exc)) from exc
        except TeeError as exc:
            raise _abort(report, 6, "ConsentFailed", str(exc)) from exc
        if not resp.ok:
            raise _abort(report, 6, "ConsentRejected", f"{resp.sw:04X}")
        report.approved = sorted(consent.approved)
        report.passed(6, "consent", f"{len(consent.approved)} of {len(consent.requested)} attributes approved")
        state["step"] = 7

    try:
        fields = host.relay_job(Channel.HOST_EIDSERVER, tc_token.eid_server_address,
                                message("CONNECT", tc_token.offerer_session_id),
                                {"ta_complete": after_ta, "ca_complete": after_ca})
    except ActorFailure as exc:
        step = state["step"]
        if step == 3:
            report.ta_verdict = "rejected"
        elif step == 4:
            report.ca_verdict = "rejected"
        lock_quietly()
        raise _abort(report, step, exc.name, exc.detail) from exc
    except AbortAtStep:
        lock_quietly()
        raise
    try:
        report.delivered = sorted(unpack_texts(fields[0]))
    except DecodeError as exc:
        raise _abort(report, 7, "ProtocolError", str(exc)) from exc
    report.passed(7, "attribute_transfer", f"{len(report.delivered)} attributes over secure messaging")

    resp = host.se(LogicalCommand(CLA_ISO, INS.LOCK))
    if not resp.ok:
        raise _abort(report, 8, "LockFailed", f"{resp.sw:04X}")
    report.passed(8, "lock", "secure element locked again")
    report.status = "ok"
    return report
