"""Remote actors: issuer, TSM, service provider, eID server and offerer.

Actors that drive the secure element (issuer, TSM, eID server) do so through
the host: each runs a generator job that yields APDUs, and the host relays
them to the SE and feeds the responses back.  Wire messages between host and
actor:

    host -> actor   RUN/CONNECT/...      start a job
    actor -> host   APDU(raw)            relay this command
    host -> actor   RAPDU(raw)           the SE response
    actor -> host   CHECKPOINT(name)     pause; host answers CONTINUE
    actor -> host   DONE(...) | FAIL(error, detail)
"""

from __future__ import annotations

import logging
from collections.abc import Generator
from dataclasses import dataclass, field

from . import crypto, eac, pki, scp
from .apdu import (
    CLA_ISO, CLA_SM, INS, INSTALL_APPLET, INSTALL_SSD, SW, ApduCommand, ApduResponse, LogicalCommand,
)
from .crypto import KeyPurpose, SymmetricKey
from .encoding import DecodeError, message, pack, read_message, read_text, text, unpack, unpack_texts
from .secure_element import (
    TOKEN_FIELDS, encode_applet_package, encode_put_key, encode_ssd_install, encode_token_package_plain,
)
from .transport import Channel, Envelope, Transport

logger = logging.getLogger(__name__)

CAPTURED_CONTEXT = b"captured-document"
PACKAGE_CONTEXT = b"token-package"

Job = Generator[tuple[str, bytes], bytes, tuple[bytes, ...]]


class ActorError(Exception):
    pass


class UnknownSecureElement(ActorError):
    pass


class NoSuchDomain(ActorError):
    pass


class DapRejected(ActorError):
    pass


class SecureChannelFailed(ActorError):
    pass


class ValidationFailed(ActorError):
    pass


class AlreadyRegistered(ActorError):
    pass


class TaFailed(ActorError):
    pass


class CaFailed(ActorError):
    pass


class SmFailure(ActorError):
    pass


class SessionUnknown(ActorError):
    pass


class UnknownOfferer(ActorError):
    pass


ERRORS = {cls.__name__: cls for cls in (
    UnknownSecureElement, NoSuchDomain, DapRejected, SecureChannelFailed, ValidationFailed,
    AlreadyRegistered, TaFailed, CaFailed, SmFailure, SessionUnknown, ActorError,
)}


def fail_message(exc: Exception) -> bytes:
    return message("FAIL", text(type(exc).__name__), text(str(exc)))


def raise_failure(fields: list[bytes]) -> None:
    name, detail = read_text(fields[0]), read_text(fields[1])
    raise ERRORS.get(name, ActorError)(detail)


def exchange(cmd: LogicalCommand) -> Generator[tuple[str, bytes], bytes, ApduResponse]:
    """Job-side transmit: chain the command, collect GET RESPONSE pieces."""
    blocks = cmd.split()
    for block in blocks[:-1]:
        resp = ApduResponse.from_bytes((yield "APDU", block.to_bytes()))
        if not resp.ok:
            return resp
    resp = ApduResponse.from_bytes((yield "APDU", blocks[-1].to_bytes()))
    data = resp.data
    while resp.sw & 0xFF00 == SW.BYTES_REMAINING:
        cmd = ApduCommand(CLA_ISO, INS.GET_RESPONSE, 0, 0, le=(resp.sw & 0xFF))
        resp = ApduResponse.from_bytes((yield "APDU", cmd.to_bytes()))
        data += resp.data
    return ApduResponse(data, resp.sw)


def select(aid: bytes) -> LogicalCommand:
    return LogicalCommand(CLA_ISO, INS.SELECT, 0x04, 0x00, aid)


class JobActor:
    """An actor that runs at most one APDU job at a time on behalf of the host."""

    actor_id = "actor"

    def __init__(self):
        self._job: Job | None = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_job"] = None
        return state

    def _start(self, job: Job) -> bytes:
        self._job = job
        return self._advance(None)

    def _advance(self, value: bytes | None) -> bytes:
        if self._job is None:
            return fail_message(ActorError("no job running"))
        try:
            kind, data = self._job.send(value)
        except StopIteration as stop:
            self._job = None
            return message("DONE", *(stop.value or ()))
        except ActorError as exc:
            self._job = None
            logger.info("%s job failed: %s", self.actor_id, exc)
            return fail_message(exc)
        return message(kind, data)

    def handle_job_message(self, kind: str, fields: list[bytes]) -> bytes | None:
        if kind == "RAPDU":
            return self._advance(fields[0])
        if kind == "CONTINUE":
            return self._advance(b"")
        return None

    def _open_channel(self, host: scp.ScpHost, aid: bytes) -> Generator[tuple[str, bytes], bytes, None]:
        resp = yield from exchange(select(aid))
        if resp.sw == SW.NOT_FOUND:
            raise NoSuchDomain(f"domain {aid.hex()} not on the SE")
        if not resp.ok:
            raise SecureChannelFailed(f"SELECT failed with {resp.sw:04X}")
        resp = yield from exchange(LogicalCommand.of(host.initialize_update()))
        if not resp.ok:
            raise SecureChannelFailed(f"INITIALIZE UPDATE failed with {resp.sw:04X}")
        try:
            host.check_card(resp.data)
        except scp.CardAuthFailed as exc:
            raise SecureChannelFailed(str(exc)) from exc
        resp = yield from exchange(LogicalCommand.of(host.external_authenticate()))
        if not resp.ok:
            raise SecureChannelFailed(f"EXTERNAL AUTHENTICATE failed with {resp.sw:04X}")


@dataclass
class SeRecord:
    isd_aid: bytes
    s_enc: SymmetricKey
    s_mac: SymmetricKey


class Issuer(JobActor):
    actor_id = "issuer"

    def __init__(self, transport: Transport, rng: crypto.ScenarioRng, ledger: crypto.NonceLedger,
                 manufacturing_db: dict[str, SeRecord], ssd_install_params: bytes = b""):
        super().__init__()
        self.transport = transport
        self.rng = rng
        self.ledger = ledger
        self.db = manufacturing_db
        self.install_params = ssd_install_params
        self.orders: dict[str, tuple[bytes, bytes]] = {}
        # initial TSM keys the issuer chose; kept to demonstrate the post-rotation lockout
        self.handed_keys: dict[str, tuple[SymmetricKey, SymmetricKey]] = {}
        self.last_session: crypto.SessionKeys | None = None

    def handle(self, env: Envelope) -> bytes | None:
        try:
            kind, fields = read_message(env.payload)
        except DecodeError as exc:
            return fail_message(ActorError(f"undecodable message: {exc}"))
        if env.channel is Channel.SERVER_SIDE and kind == "SSD_ORDER":
            se_id, aid, dap_public = read_text(fields[0]), fields[1], fields[2]
            if se_id not in self.db:
                return fail_message(UnknownSecureElement(se_id))
            self.orders[se_id] = (aid, dap_public)
            return message("ACCEPTED")
        if env.channel is Channel.HOST_ISSUER and kind == "RUN":
            se_id = read_text(fields[0])
            if se_id not in self.db:
                return fail_message(UnknownSecureElement(se_id))
            if se_id not in self.orders:
                return fail_message(ActorError(f"no SSD order for {se_id}"))
            return self._start(self._install_job(se_id))
        return self.handle_job_message(kind, fields)

    def _install_job(self, se_id: str) -> Job:
        rec = self.db[se_id]
        aid, dap_public = self.orders[se_id]
        host = scp.ScpHost(rec.s_enc, rec.s_mac, self.rng, self.ledger)
        yield from self._open_channel(host, rec.isd_aid)
        self.last_session = host.keys
        s_enc = crypto.random_key(KeyPurpose.ENC, self.rng)
        s_mac = crypto.random_key(KeyPurpose.MAC, self.rng)
        payload = encode_ssd_install(aid, s_enc.value, s_mac.value, dap_public, self.install_params)
        resp = yield from exchange(host.protected(INS.INSTALL, INSTALL_SSD, 0, payload))
        if resp.sw == SW.NO_SPACE:
            raise ActorError("SE storage exhausted by SSD install")
        if not resp.ok:
            raise SecureChannelFailed(f"INSTALL [SSD] rejected with {resp.sw:04X}")
        del self.orders[se_id]
        self.handed_keys[se_id] = (s_enc, s_mac)
        # hand the initial keys to the TSM over the backbone
        self.transport.request(Channel.SERVER_SIDE, self.actor_id, "tsm",
                               message("SSD_KEYS", text(se_id), aid, s_enc.value, s_mac.value))
        return (aid,)


@dataclass
class SeInventory:
    ssd_aid: bytes
    keys: tuple[SymmetricKey, SymmetricKey] | None = None
    rotated: bool = False
    applet: bool = False


class Tsm(JobActor):
    actor_id = "tsm"

    def __init__(self, transport: Transport, rng: crypto.ScenarioRng, ledger: crypto.NonceLedger,
                 dap_keypair: crypto.KeyPair, applet_aid: bytes, cvca: pki.Certificate, csca: pki.Certificate,
                 ssd_aid: bytes):
        super().__init__()
        self.transport = transport
        self.rng = rng
        self.ledger = ledger
        self.dap = dap_keypair
        self.applet_aid = applet_aid
        self.cvca = cvca
        self.csca = csca
        self.ssd_aid = ssd_aid
        self.inventory: dict[str, SeInventory] = {}
        self.tamper_package = False  # white-box hook: flip a package byte after signing

    def handle(self, env: Envelope) -> bytes | None:
        try:
            kind, fields = read_message(env.payload)
        except DecodeError as exc:
            return fail_message(ActorError(f"undecodable message: {exc}"))
        if env.channel is Channel.SERVER_SIDE and kind == "SSD_KEYS":
            se_id = read_text(fields[0])
            inv = self.inventory[se_id]
            inv.keys = (SymmetricKey(fields[2], KeyPurpose.ENC), SymmetricKey(fields[3], KeyPurpose.MAC))
            return message("ACK")
        if env.channel is not Channel.HOST_TSM:
            return None
        if kind == "SSD_REQUEST":
            return self._ssd_request(read_text(fields[0]))
        if kind == "ROTATE":
            inv = self.inventory.get(read_text(fields[0]))
            if inv is None or inv.keys is None:
                return fail_message(NoSuchDomain("no SSD keys for this SE"))
            if inv.rotated:
                return message("DONE", text("skipped"))
            return self._start(self._rotate_job(inv))
        if kind == "DEPLOY":
            inv = self.inventory.get(read_text(fields[0]))
            if inv is None or inv.keys is None:
                return fail_message(NoSuchDomain("no SSD on this SE"))
            if inv.applet:
                return message("DONE", text("skipped"))
            return self._start(self._deploy_job(inv))
        if kind == "PERSONALIZE":
            # forward the sealed captured document to the service provider
            return self.transport.request(Channel.SERVER_SIDE, self.actor_id, "sp", env.payload)
        return self.handle_job_message(kind, fields)

    def _ssd_request(self, se_id: str) -> bytes:
        inv = self.inventory.get(se_id)
        if inv is not None and inv.keys is not None:
            return message("SKIP")
        reply = self.transport.request(
            Channel.SERVER_SIDE, self.actor_id, "issuer",
            message("SSD_ORDER", text(se_id), self.ssd_aid, self.dap.public_part))
        kind, fields = read_message(reply)
        if kind != "ACCEPTED":
            return reply
        self.inventory[se_id] = SeInventory(self.ssd_aid)
        return message("GOTO_ISSUER")

    def _rotate_job(self, inv: SeInventory) -> Job:
        host = scp.ScpHost(*inv.keys, self.rng, self.ledger)
        yield from self._open_channel(host, inv.ssd_aid)
        new_enc = crypto.random_key(KeyPurpose.ENC, self.rng)
        new_mac = crypto.random_key(KeyPurpose.MAC, self.rng)
        resp = yield from exchange(host.protected(INS.PUT_KEY, 0, 0, encode_put_key(new_enc.value, new_mac.value)))
        if not resp.ok:
            raise SecureChannelFailed(f"PUT KEY rejected with {resp.sw:04X}")
        inv.keys = (new_enc, new_mac)
        inv.rotated = True
        return (text("rotated"),)

    def _deploy_job(self, inv: SeInventory) -> Job:
        host = scp.ScpHost(*inv.keys, self.rng, self.ledger)
        yield from self._open_channel(host, inv.ssd_aid)
        package = encode_applet_package(self.applet_aid, self.cvca, self.csca)
        signature = crypto.sign(self.dap, package)
        if self.tamper_package:
            package = package[:-1] + bytes([package[-1] ^ 1])
        resp = yield from exchange(host.protected(INS.INSTALL, INSTALL_APPLET, 0, pack([package, signature])))
        if resp.sw in (SW.AUTH_FAILED, SW.WRONG_DATA):
            raise DapRejected(f"applet install rejected with {resp.sw:04X}")
        if not resp.ok:
            raise ActorError(f"applet install failed with {resp.sw:04X}")
        inv.applet = True
        return (self.applet_aid,)


@dataclass
class CitizenRecord:
    token: dict[str, str]
    card_pin_proof: str
    qr_public: bytes


def encode_captured(token: dict[str, str], card_pin_proof: str) -> bytes:
    return pack([text(token[k]) for k in TOKEN_FIELDS] + [text(card_pin_proof)])


class ServiceProvider:
    actor_id = "sp"

    def __init__(self, rng: crypto.ScenarioRng, keypair: crypto.KeyPair, ds_keypair: crypto.KeyPair,
                 chain_to_ds: list[pki.Certificate], citizens: dict[str, CitizenRecord], now: int,
                 chip_lifetime: int):
        self.rng = rng
        self.keypair = keypair
        self.ds_keypair = ds_keypair
        self.chain_to_ds = chain_to_ds
        self.citizens = citizens
        self.now = now
        self.chip_lifetime = chip_lifetime
        self.registry: list[str] = []

    def handle(self, env: Envelope) -> bytes | None:
        try:
            kind, fields = read_message(env.payload)
        except DecodeError as exc:
            return fail_message(ActorError(f"undecodable message: {exc}"))
        if kind != "PERSONALIZE":
            return None
        try:
            return message("PACKAGE", self.personalize(fields[0]))
        except ActorError as exc:
            return fail_message(exc)

    def personalize(self, sealed_document: bytes) -> bytes:
        try:
            fields = unpack(crypto.hybrid_open(self.keypair, sealed_document, CAPTURED_CONTEXT), len(TOKEN_FIELDS) + 1)
            values = [read_text(f) for f in fields]
        except (crypto.CryptoError, DecodeError) as exc:
            raise ValidationFailed(f"captured document unreadable: {exc}") from exc
        captured = dict(zip(TOKEN_FIELDS, values))
        proof = values[-1]
        record = self.citizens.get(captured["document_number"])
        if record is None:
            raise ValidationFailed("no provisioned citizen with this document number")
        mismatched = sorted(k for k in TOKEN_FIELDS if record.token[k] != captured[k])
        if mismatched:
            raise ValidationFailed(f"captured fields differ from record: {mismatched}")
        if proof != record.card_pin_proof:
            raise ValidationFailed("card PIN proof rejected")
        if captured["document_number"] in self.registry:
            raise AlreadyRegistered("document already used for a device initialization")
        chip = crypto.generate_keypair(crypto.AGREEMENT, self.rng)
        ds_cert = self.chain_to_ds[-1]
        validity = pki.Validity(self.now, min(self.now + self.chip_lifetime, ds_cert.not_after))
        # random serial: the chain crosses the host link in clear during CA
        chip_cert = pki.issue_certificate(self.ds_keypair, ds_cert, f"CHIP-{self.rng.randbytes(6).hex()}",
                                          chip.public_part, pki.Role.CHIP, validity)
        plain = encode_token_package_plain(record.token, chip.private_part, [*self.chain_to_ds, chip_cert])
        package = crypto.hybrid_seal(record.qr_public, plain, self.rng, PACKAGE_CONTEXT)
        self.registry.append(captured["document_number"])
        return package


@dataclass
class TcToken:
    required_attributes: frozenset[str]
    eid_server_address: str
    offerer_session_id: bytes

    def __post_init__(self):
        if not self.required_attributes:
            raise ValueError("a TcToken must request at least one attribute")


@dataclass
class SessionRecord:
    required: frozenset[str]
    received: dict[str, str] | None = None


class Offerer:
    def __init__(self, name: str, transport: Transport, rng: crypto.ScenarioRng, eid_server: str,
                 required_attributes):
        self.actor_id = f"offerer:{name}"
        self.name = name
        self.transport = transport
        self.rng = rng
        self.eid_server = eid_server
        self.required_attributes = frozenset(required_attributes)
        self.sessions: dict[bytes, SessionRecord] = {}

    def create_tc_token(self, required_attributes=None) -> TcToken:
        required = frozenset(required_attributes if required_attributes is not None else self.required_attributes)
        token = TcToken(required, self.eid_server, self.rng.randbytes(16))
        self.sessions[token.offerer_session_id] = SessionRecord(required)
        self.transport.request(Channel.SERVER_SIDE, self.actor_id, self.eid_server,
                               message("SESSION", token.offerer_session_id, pack(text(a) for a in sorted(required))))
        return token

    def receive(self, session_id: bytes, attributes: dict[str, str]) -> SessionRecord:
        record = self.sessions.get(session_id)
        if record is None:
            raise SessionUnknown(session_id.hex())
        record.received = dict(attributes)
        return record

    def handle(self, env: Envelope) -> bytes | None:
        kind, fields = read_message(env.payload)
        if kind != "ATTRIBUTES":
            return None
        names = unpack_texts(fields[1])
        values = unpack_texts(fields[2])
        try:
            self.receive(fields[0], dict(zip(names, values)))
        except SessionUnknown as exc:
            return fail_message(exc)
        return message("ACK")


@dataclass
class EacSession:
    offerer: str
    required: frozenset[str]
    initiator: eac.EacInitiator | None = None
    delivered: dict[str, str] = field(default_factory=dict)


class EidServer(JobActor):
    actor_id = "eid_server"

    def __init__(self, transport: Transport, rng: crypto.ScenarioRng, ledger: crypto.NonceLedger,
                 terminal_keypair: crypto.KeyPair, terminal_chain: list[pki.Certificate],
                 csca_anchor: pki.TrustAnchor, clock):
        super().__init__()
        self.transport = transport
        self.rng = rng
        self.ledger = ledger
        self.terminal_keypair = terminal_keypair
        self.terminal_chain = terminal_chain
        self.csca_anchor = csca_anchor
        self.clock = clock
        self.sessions: dict[bytes, EacSession] = {}

    def handle(self, env: Envelope) -> bytes | None:
        try:
            kind, fields = read_message(env.payload)
        except DecodeError as exc:
            return fail_message(ActorError(f"undecodable message: {exc}"))
        if env.channel is Channel.SERVER_SIDE and kind == "SESSION":
            self.sessions[fields[0]] = EacSession(env.sender, frozenset(unpack_texts(fields[1])))
            return message("ACK")
        if env.channel is Channel.HOST_EIDSERVER and kind == "CONNECT":
            session = self.sessions.get(fields[0])
            if session is None:
                return fail_message(SessionUnknown(fields[0].hex()))
            allowed = self.terminal_chain[-1].attributes_allowed
            if not session.required <= allowed:
                return fail_message(TaFailed("requested attributes exceed the terminal certificate"))
            return self._start(self._eac_job(fields[0], session))
        return self.handle_job_message(kind, fields)

    def _eac_job(self, session_id: bytes, session: EacSession) -> Job:
        init = eac.EacInitiator(self.terminal_keypair, self.terminal_chain, self.csca_anchor, self.rng, self.ledger)
        session.initiator = init
        # Terminal Authentication
        resp = yield from exchange(LogicalCommand(CLA_ISO, INS.PSO_VERIFY_CERT, 0, 0, pki.encode_chain(self.terminal_chain)))
        if not resp.ok:
            raise TaFailed(f"terminal chain rejected ({resp.sw:04X})")
        resp = yield from exchange(LogicalCommand(CLA_ISO, INS.GET_CHALLENGE, 0, 0, le=crypto.CHALLENGE_LEN))
        if not resp.ok or len(resp.data) != crypto.CHALLENGE_LEN:
            raise TaFailed(f"no chip challenge ({resp.sw:04X})")
        signature = init.sign_challenge(resp.data)
        resp = yield from exchange(LogicalCommand(CLA_ISO, INS.EXTERNAL_AUTHENTICATE, 0, 0, init.commitment + signature))
        if not resp.ok:
            raise TaFailed(f"terminal signature rejected ({resp.sw:04X})")
        yield "CHECKPOINT", text("ta_complete")
        # Chip Authentication
        resp = yield from exchange(LogicalCommand(CLA_ISO, INS.GENERAL_AUTHENTICATE, 0, 0, init.ephemeral.public_part))
        if not resp.ok:
            raise CaFailed(f"chip refused key agreement ({resp.sw:04X})")
        try:
            chain_blob, chip_confirm = unpack(resp.data, 2)
            terminal_confirm = init.ca_process(pki.decode_chain(chain_blob), chip_confirm, self.clock.now())
        except DecodeError as exc:
            raise CaFailed(f"malformed CA response: {exc}") from exc
        except eac.EacError as exc:
            raise CaFailed(f"{type(exc).__name__}: {exc}") from exc
        resp = yield from exchange(LogicalCommand(CLA_ISO, INS.GENERAL_AUTHENTICATE, 1, 0, terminal_confirm))
        if not resp.ok:
            raise CaFailed(f"chip rejected key confirmation ({resp.sw:04X})")
        yield "CHECKPOINT", text("ca_complete")
        # attribute transfer under secure messaging
        sm = init.sm
        for name in sorted(session.required):
            inner = ApduCommand(CLA_ISO, INS.READ_ATTRIBUTE, 0, 0, text(name), le=0)
            resp = yield from exchange(LogicalCommand(CLA_SM, INS.ENVELOPE, 0, 0, sm.wrap(inner.to_bytes())))
            if not resp.ok:
                raise SmFailure(f"secure messaging envelope rejected ({resp.sw:04X})")
            try:
                inner_resp = ApduResponse.from_bytes(sm.unwrap(resp.data))
            except (eac.SmTamper, eac.SmReplay) as exc:
                raise SmFailure(f"{type(exc).__name__}: {exc}") from exc
            if inner_resp.ok:
                session.delivered[name] = read_text(inner_resp.data)
        names = sorted(session.delivered)
        reply = self.transport.request(
            Channel.SERVER_SIDE, self.actor_id, session.offerer,
            message("ATTRIBUTES", session_id, pack(text(n) for n in names),
                    pack(text(session.delivered[n]) for n in names)))
        kind, fields = read_message(reply)
        if kind == "FAIL":
            raise_failure(fields)
        return (pack(text(n) for n in names),)
