"""Trusted execution environment: secure input and the monitor bridge to the SE.

The scripted "user" lives here.  PIN digits and the QR private part are
only ever packed into APDUs that travel on the TEE_SE channel.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .apdu import CLA_ISO, INS, ApduCommand, ApduResponse, LogicalCommand, transmit
from .encoding import DecodeError, pack, pack_texts, read_text, unpack, unpack_texts
from .secure_element import SECURE_INPUT_INS
from .transport import Channel, Transport

QR_PREFIX = "EIDQR1:"


class TeeError(Exception):
    pass


class RoutingError(TeeError):
    pass


class MalformedQr(TeeError):
    pass


class RequestExceedsCertificate(TeeError):
    pass


class Origin(enum.Enum):
    NORMAL_WORLD = "NORMAL_WORLD"
    SECURE_WORLD = "SECURE_WORLD"


@dataclass(frozen=True)
class PinEntry:
    pin: str


@dataclass(frozen=True)
class QrScan:
    payload: str
    pin: str


SecureInput = PinEntry | QrScan


@dataclass(frozen=True)
class MonitorCall:
    request: LogicalCommand | ApduCommand | PinEntry | QrScan
    origin: Origin


@dataclass(frozen=True)
class AttributeConsent:
    requested: frozenset[str]
    approved: frozenset[str]


def encode_qr(private_part: bytes) -> str:
    return QR_PREFIX + private_part.hex()


def decode_qr(payload: str) -> bytes:
    if not payload.startswith(QR_PREFIX):
        raise MalformedQr("missing QR prefix")
    body = payload[len(QR_PREFIX):]
    if not re.fullmatch(r"[0-9a-f]{64}", body):
        raise MalformedQr(f"expected 32 hex-encoded bytes, got {len(body)} characters")
    return bytes.fromhex(body)


def capture_consent(requested, allowed, choice) -> AttributeConsent:
    requested, allowed = frozenset(requested), frozenset(allowed)
    extra = requested - allowed
    if extra:
        raise RequestExceedsCertificate(f"not covered by terminal certificate: {sorted(extra)}")
    return AttributeConsent(requested, requested & frozenset(choice))


class Tee:
    ACTOR = "tee"

    def __init__(self, transport: Transport, se_actor: str = "se"):
        self.transport = transport
        self.se_actor = se_actor

    def _se(self, raw: bytes) -> bytes:
        return self.transport.request(Channel.TEE_SE, self.ACTOR, self.se_actor, raw)

    def monitor_call(self, call: MonitorCall) -> ApduResponse:
        req = call.request
        if call.origin is Origin.NORMAL_WORLD:
            if isinstance(req, (PinEntry, QrScan)) or req.ins in SECURE_INPUT_INS:
                raise RoutingError("secure-input requests must originate in the secure world")
        if isinstance(req, PinEntry):
            cmd = LogicalCommand(CLA_ISO, INS.VERIFY, 0, 0, req.pin.encode())
            secrets = [req.pin.encode()]
        elif isinstance(req, QrScan):
            qr_private = decode_qr(req.payload)
            cmd = LogicalCommand(CLA_ISO, INS.PERSONALIZE, 0, 0, pack([qr_private, req.pin.encode()]))
            secrets = [qr_private, req.pin.encode()]
        elif isinstance(req, ApduCommand):
            cmd, secrets = LogicalCommand.of(req), []
        else:
            cmd, secrets = req, []
        resp = transmit(self._se, cmd)
        if any(s and s in resp.data for s in secrets):
            raise RoutingError("response echoes secure input")
        return resp

    # secure-world entry points used by the host flows

    def secure_pin_entry(self, pin: str) -> ApduResponse:
        return self.monitor_call(MonitorCall(PinEntry(pin), Origin.SECURE_WORLD))

    def secure_qr_scan(self, qr_payload: str, pin: str) -> ApduResponse:
        return self.monitor_call(MonitorCall(QrScan(qr_payload, pin), Origin.SECURE_WORLD))

    def terminal_info(self) -> tuple[str, frozenset[str]]:
        resp = self.monitor_call(MonitorCall(LogicalCommand(CLA_ISO, INS.GET_TERMINAL_INFO), Origin.SECURE_WORLD))
        if not resp.ok:
            raise TeeError(f"terminal info unavailable (sw {resp.sw:04X})")
        try:
            subject, attrs = unpack(resp.data, 2)
            return read_text(subject), frozenset(unpack_texts(attrs))
        except DecodeError as exc:
            raise TeeError(str(exc)) from exc

    def approve_attributes(self, requested, choice) -> tuple[AttributeConsent, ApduResponse]:
        """Show the request, capture the user's choice, hand the approved set to the applet."""
        _, allowed = self.terminal_info()
        consent = capture_consent(requested, allowed, choice)
        cmd = LogicalCommand(CLA_ISO, INS.SET_CONSENT, 0, 0, pack_texts(sorted(consent.approved)))
        return consent, self.monitor_call(MonitorCall(cmd, Origin.SECURE_WORLD))
