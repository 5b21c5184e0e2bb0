"""Short APDUs, status words and command/response chaining.

Byte layout of a command: ``CLA INS P1 P2 [Lc data] [Le]`` with Lc in 1..255
and Le a single byte (0x00 meaning 256).  Payloads longer than 255 bytes
are split into a command chain (CLA bit 0x10 on every block but the last).
Responses longer than 256 bytes are delivered in 256-byte pieces with
status 0x61XX, fetched with GET RESPONSE.
"""

from __future__ import annotations

from dataclasses import dataclass


class SW:
    OK = 0x9000
    BYTES_REMAINING = 0x6100
    AUTH_FAILED = 0x6300
    RETRIES_BASE = 0x63C0
    WRONG_LENGTH = 0x6700
    SECURITY_STATUS = 0x6982
    AUTH_BLOCKED = 0x6983
    CONDITIONS = 0x6985
    WRONG_DATA = 0x6A80
    NOT_FOUND = 0x6A82
    NO_SPACE = 0x6A84
    INS_NOT_SUPPORTED = 0x6D00
    CLA_NOT_SUPPORTED = 0x6E00

    @staticmethod
    def retries(n: int) -> int:
        return SW.RETRIES_BASE | n

    @staticmethod
    def is_retry(sw: int) -> bool:
        return sw & 0xFFF0 == SW.RETRIES_BASE


class INS:
    SELECT = 0xA4
    INITIALIZE_UPDATE = 0x50
    EXTERNAL_AUTHENTICATE = 0x82
    INSTALL = 0xE6
    PUT_KEY = 0xD8
    GET_RESPONSE = 0xC0
    # eID applet, host port
    STORE_DATA = 0xE2
    LOAD_TOKEN = 0xD6
    LOCK = 0x04
    PSO_VERIFY_CERT = 0x2A
    GET_CHALLENGE = 0x84
    GENERAL_AUTHENTICATE = 0x86
    ENVELOPE = 0xC2
    READ_ATTRIBUTE = 0xB0
    # eID applet, monitor port only
    VERIFY = 0x20
    PERSONALIZE = 0xDA
    GET_TERMINAL_INFO = 0xCA
    SET_CONSENT = 0xDC


# INSTALL P1 values
INSTALL_SSD = 0x80
INSTALL_APPLET = 0x02

CLA_ISO = 0x00
CLA_GP = 0x80
CLA_GP_PROTECTED = 0x84
CLA_SM = 0x0C
CLA_CHAIN = 0x10

MAX_DATA = 255
MAX_RESPONSE = 256


class ApduError(ValueError):
    pass


@dataclass(frozen=True)
class ApduCommand:
    cla: int
    ins: int
    p1: int = 0
    p2: int = 0
    data: bytes = b""
    le: int | None = None

    def __post_init__(self):
        if len(self.data) > MAX_DATA:
            raise ApduError(f"short APDU carries at most {MAX_DATA} data bytes, got {len(self.data)}")

    @property
    def header(self) -> bytes:
        return bytes([self.cla, self.ins, self.p1, self.p2])

    @property
    def chained(self) -> bool:
        return bool(self.cla & CLA_CHAIN)

    def to_bytes(self) -> bytes:
        out = self.header
        if self.data:
            out += bytes([len(self.data)]) + self.data
        if self.le is not None:
            out += bytes([self.le & 0xFF])
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ApduCommand":
        if len(raw) < 4:
            raise ApduError("APDU shorter than header")
        cla, ins, p1, p2 = raw[:4]
        body = raw[4:]
        if not body:
            return cls(cla, ins, p1, p2)
        if len(body) == 1:
            return cls(cla, ins, p1, p2, le=body[0])
        lc = body[0]
        if lc == 0:
            raise ApduError("extended APDUs are not supported")
        if len(body) == 1 + lc:
            return cls(cla, ins, p1, p2, body[1:])
        if len(body) == 2 + lc:
            return cls(cla, ins, p1, p2, body[1:-1], body[-1])
        raise ApduError("Lc does not match body length")


@dataclass(frozen=True)
class ApduResponse:
    data: bytes = b""
    sw: int = SW.OK

    @property
    def ok(self) -> bool:
        return self.sw == SW.OK

    def to_bytes(self) -> bytes:
        return self.data + self.sw.to_bytes(2, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ApduResponse":
        if len(raw) < 2:
            raise ApduError("response shorter than status word")
        return cls(raw[:-2], int.from_bytes(raw[-2:], "big"))


@dataclass(frozen=True)
class LogicalCommand:
    """A command before splitting into short APDUs (data unbounded)."""

    cla: int
    ins: int
    p1: int = 0
    p2: int = 0
    data: bytes = b""
    le: int | None = None

    @property
    def header(self) -> bytes:
        return bytes([self.cla & ~CLA_CHAIN & 0xFF, self.ins, self.p1, self.p2])

    def split(self) -> list[ApduCommand]:
        return chain_command(self.cla, self.ins, self.p1, self.p2, self.data, self.le)

    @classmethod
    def of(cls, cmd: ApduCommand) -> "LogicalCommand":
        return cls(cmd.cla, cmd.ins, cmd.p1, cmd.p2, cmd.data, cmd.le)


def chain_command(cla: int, ins: int, p1: int, p2: int, data: bytes, le: int | None = None) -> list[ApduCommand]:
    """Split a logical command into short APDUs."""
    if len(data) <= MAX_DATA:
        return [ApduCommand(cla, ins, p1, p2, data, le)]
    blocks = [data[i:i + MAX_DATA] for i in range(0, len(data), MAX_DATA)]
    out = [ApduCommand(cla | CLA_CHAIN, ins, p1, p2, b) for b in blocks[:-1]]
    out.append(ApduCommand(cla, ins, p1, p2, blocks[-1], le))
    return out


def transmit(send, cmd: LogicalCommand) -> ApduResponse:
    """Host side: send a logical command as short APDUs, collect the full response.

    ``send`` maps raw command bytes to raw response bytes.
    """
    blocks = cmd.split()
    for block in blocks[:-1]:
        resp = ApduResponse.from_bytes(send(block.to_bytes()))
        if not resp.ok:
            return resp
    resp = ApduResponse.from_bytes(send(blocks[-1].to_bytes()))
    data = resp.data
    while resp.sw & 0xFF00 == SW.BYTES_REMAINING:
        resp = ApduResponse.from_bytes(send(get_response(resp.sw & 0xFF or 256).to_bytes()))
        data += resp.data
    return ApduResponse(data, resp.sw)


def get_response(remaining: int) -> ApduCommand:
    return ApduCommand(CLA_ISO, INS.GET_RESPONSE, 0, 0, le=min(remaining, MAX_RESPONSE) & 0xFF)


class ChainAssembler:
    """Card-side reassembly of command chains and response pieces."""

    def __init__(self):
        self._pending: list[ApduCommand] = []
        self._outgoing = b""
        self._outgoing_sw = SW.OK

    def feed(self, cmd: ApduCommand) -> LogicalCommand | None:
        """Return the reassembled command once the final block arrives."""
        if self._pending:
            head = self._pending[0]
            if (cmd.cla & ~CLA_CHAIN, cmd.ins, cmd.p1, cmd.p2) != (head.cla & ~CLA_CHAIN, head.ins, head.p1, head.p2):
                self._pending = []
                raise ApduError("chain interrupted by a different command")
        if cmd.chained:
            self._pending.append(cmd)
            return None
        blocks = self._pending + [cmd]
        self._pending = []
        return LogicalCommand(cmd.cla, cmd.ins, cmd.p1, cmd.p2, b"".join(b.data for b in blocks), cmd.le)

    def reset(self) -> None:
        self._pending = []
        self._outgoing = b""

    def respond(self, data: bytes, sw: int) -> ApduResponse:
        if len(data) <= MAX_RESPONSE:
            self._outgoing = b""
            return ApduResponse(data, sw)
        self._outgoing, self._outgoing_sw = data[MAX_RESPONSE:], sw
        return ApduResponse(data[:MAX_RESPONSE], _remaining_sw(len(self._outgoing)))

    def next_piece(self) -> ApduResponse:
        if not self._outgoing:
            return ApduResponse(sw=SW.CONDITIONS)
        piece, self._outgoing = self._outgoing[:MAX_RESPONSE], self._outgoing[MAX_RESPONSE:]
        if self._outgoing:
            return ApduResponse(piece, _remaining_sw(len(self._outgoing)))
        return ApduResponse(piece, self._outgoing_sw)


def _remaining_sw(n: int) -> int:
    return SW.BYTES_REMAINING | (n if n < 256 else 0)
