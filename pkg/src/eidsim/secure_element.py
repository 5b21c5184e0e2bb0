"""Software secure element: security domains, secure channels and the eID applet.

The card has two entry ports.  The host port is the APDU link driven by the
normal-world app (and therefore visible to a host-CPU adversary); the
monitor port is reachable only from the TEE.  Secure-input instructions
(VERIFY, PERSONALIZE, GET TERMINAL INFO, SET CONSENT) are refused on the
host port.
"""

from __future__ import annotations

import enum
import hmac
import logging
from dataclasses import dataclass, field

from . import crypto, eac, pki, scp
from .apdu import (
    CLA_CHAIN, CLA_GP_PROTECTED, CLA_SM, INS, INSTALL_APPLET, INSTALL_SSD, SW,
    ApduCommand, ApduError, ApduResponse, ChainAssembler, LogicalCommand,
)
from .crypto import KeyPurpose, SessionKeys, SymmetricKey
from .encoding import DecodeError, pack, pack_texts, read_text, text, u64, unpack, unpack_texts

logger = logging.getLogger(__name__)

STORAGE_BUDGET = 8192
PIN_LENGTH = 6
PIN_RETRIES = 3
TOKEN_AAD = b"eid-token"

TOKEN_FIELDS = ("document_number", "given_names", "family_name", "date_of_birth", "address", "nationality", "expiry")
SECURE_INPUT_INS = frozenset({INS.VERIFY, INS.PERSONALIZE, INS.GET_TERMINAL_INFO, INS.SET_CONSENT})


class Port(enum.Enum):
    HOST = "host"
    MONITOR = "monitor"


class Owner(enum.Enum):
    ISSUER = "ISSUER"
    TSM = "TSM"


class ChannelState(enum.Enum):
    INIT_UPDATED = "INIT_UPDATED"
    AUTHENTICATED = "AUTHENTICATED"
    CLOSED = "CLOSED"


class AppletState(enum.Enum):
    INSTALLED = "INSTALLED"
    PERSONALIZED = "PERSONALIZED"
    BLOCKED = "BLOCKED"


class CardError(Exception):
    """Internal: aborts a command with a status word."""

    def __init__(self, sw: int, reason: str = ""):
        super().__init__(f"{sw:04X} {reason}")
        self.sw = sw


# Payload layouts carried inside protected commands


def encode_ssd_install(aid: bytes, s_enc: bytes, s_mac: bytes, dap_public: bytes = b"", params: bytes = b"") -> bytes:
    return pack([aid, s_enc, s_mac, dap_public, params])


def encode_put_key(s_enc: bytes, s_mac: bytes, dap_public: bytes = b"") -> bytes:
    return pack([s_enc, s_mac, dap_public])


def encode_applet_package(applet_aid: bytes, cvca: pki.Certificate, csca: pki.Certificate, code: bytes = b"eid-applet-1") -> bytes:
    return pack([applet_aid, pki.canonical_encode(cvca), pki.canonical_encode(csca), code])


def encode_token(token: dict[str, str]) -> bytes:
    return pack_texts([token[k] for k in TOKEN_FIELDS])


def decode_token(blob: bytes) -> dict[str, str]:
    values = unpack_texts(blob)
    if len(values) != len(TOKEN_FIELDS):
        raise DecodeError("token field count")
    return dict(zip(TOKEN_FIELDS, values))


def encode_token_package_plain(token: dict[str, str], chip_private: bytes, chip_chain: list[pki.Certificate]) -> bytes:
    return pack([encode_token(token), chip_private, pki.encode_chain(chip_chain)])


@dataclass
class SecureChannelSession:
    domain_aid: bytes
    keys: SessionKeys
    state: ChannelState
    host_challenge: bytes
    card_challenge: bytes


@dataclass
class SecurityDomain:
    aid: bytes
    s_enc: SymmetricKey
    s_mac: SymmetricKey
    owner: Owner
    dap_public: bytes | None = None
    params: bytes = b""
    applets: list["EidApplet"] = field(default_factory=list)

    def persisted(self) -> bytes:
        return pack([self.aid, self.s_enc.value, self.s_mac.value, text(self.owner.value),
                     self.dap_public or b"", self.params])


class EidApplet:
    def __init__(self, aid: bytes, cvca: pki.TrustAnchor, csca: pki.TrustAnchor, code: bytes = b""):
        self.aid = aid
        self.code = code
        self.anchors = {"CVCA": cvca, "CSCA": csca}
        self.state = AppletState.INSTALLED
        self.pin_salt = b""
        self.pin_hash = b""
        self.retry_counter = PIN_RETRIES
        self.chip_ca_keypair: crypto.KeyPair | None = None
        self.chip_chain: list[pki.Certificate] = []
        self.token_key: SymmetricKey | None = None
        self.access_unlocked = False
        # transient (RAM) state
        self.staged_package = b""
        self.token: dict[str, str] | None = None
        self.consent: frozenset[str] | None = None
        self.responder: eac.EacResponder | None = None
        self.leak_token = False  # positive-control fault injection for the knowledge scan

    @property
    def chip_cert(self) -> pki.Certificate | None:
        return self.chip_chain[-1] if self.chip_chain else None

    def persisted(self) -> bytes:
        kp = self.chip_ca_keypair
        return pack([
            self.aid, self.code, text(self.state.value), self.pin_salt, self.pin_hash, bytes([self.retry_counter]),
            kp.private_part if kp else b"", kp.public_part if kp else b"",
            pki.encode_chain(self.chip_chain), self.token_key.value if self.token_key else b"",
            pki.canonical_encode(self.anchors["CVCA"].certificate),
            pki.canonical_encode(self.anchors["CSCA"].certificate),
        ])

    def clear_transient(self) -> None:
        self.token = None
        self.consent = None
        self.responder = None

    def _pin_digest(self, pin: bytes) -> bytes:
        return crypto.digest(self.pin_salt + pin)


class SecureElement:
    def __init__(
        self,
        se_id: str,
        isd_aid: bytes,
        isd_enc: SymmetricKey,
        isd_mac: SymmetricKey,
        rng: crypto.ScenarioRng,
        clock,
        ledger: crypto.NonceLedger | None = None,
        storage_budget: int = STORAGE_BUDGET,
    ):
        self.se_id = se_id
        self.rng = rng
        self.clock = clock
        self.ledger = ledger
        self.storage_budget = storage_budget
        self.domains: dict[bytes, SecurityDomain] = {
            isd_aid: SecurityDomain(isd_aid, isd_enc, isd_mac, Owner.ISSUER),
        }
        self.isd_aid = isd_aid
        self.active_session: SecureChannelSession | None = None
        self.selected: SecurityDomain | EidApplet | None = None
        self._assemblers = {Port.HOST: ChainAssembler(), Port.MONITOR: ChainAssembler()}
        self.responses: list[bytes] = []  # every response the card emitted, for leak checks

    # bookkeeping

    def applets(self) -> list[EidApplet]:
        return [a for d in self.domains.values() for a in d.applets]

    def find_applet(self, aid: bytes) -> EidApplet | None:
        return next((a for a in self.applets() if a.aid == aid), None)

    def domain_of(self, applet: EidApplet) -> SecurityDomain:
        return next(d for d in self.domains.values() if applet in d.applets)

    def persisted_size(self) -> int:
        return sum(len(d.persisted()) for d in self.domains.values()) + sum(len(a.persisted()) for a in self.applets())

    def persisted_image(self) -> bytes:
        return b"".join(d.persisted() for d in self.domains.values()) + b"".join(a.persisted() for a in self.applets())

    def _check_budget(self) -> None:
        if self.persisted_size() > self.storage_budget:
            raise CardError(SW.NO_SPACE, "storage budget exceeded")

    # entry point

    def transmit(self, raw: bytes, port: Port = Port.HOST) -> bytes:
        resp = self._transmit(raw, port)
        out = resp.to_bytes()
        self.responses.append(out)
        return out

    def _transmit(self, raw: bytes, port: Port) -> ApduResponse:
        assembler = self._assemblers[port]
        try:
            cmd = ApduCommand.from_bytes(raw)
        except ApduError:
            return ApduResponse(sw=SW.WRONG_LENGTH)
        if cmd.ins == INS.GET_RESPONSE:
            return assembler.next_piece()
        try:
            logical = assembler.feed(cmd)
        except ApduError:
            return ApduResponse(sw=SW.CONDITIONS)
        if logical is None:
            return ApduResponse()
        try:
            data = self._dispatch(logical, port)
            return assembler.respond(data, SW.OK)
        except CardError as err:
            logger.debug("%s: %s", self.se_id, err)
            return ApduResponse(sw=err.sw)

    def _dispatch(self, cmd: LogicalCommand, port: Port) -> bytes:
        if cmd.ins == INS.SELECT and cmd.p1 == 0x04:
            return self.select(cmd.data)
        if port is Port.HOST and cmd.ins in SECURE_INPUT_INS:
            raise CardError(SW.SECURITY_STATUS, "secure-input instruction on host port")
        if self.selected is None:
            raise CardError(SW.CONDITIONS, "nothing selected")
        if isinstance(self.selected, SecurityDomain):
            return self._domain_command(self.selected, cmd)
        return self._applet_command(self.selected, cmd, port)

    # SELECT

    def select(self, aid: bytes) -> bytes:
        self.active_session = None
        for applet in self.applets():
            applet.responder = None
        target = self.domains.get(aid) or self.find_applet(aid)
        if target is None:
            self.selected = None
            raise CardError(SW.NOT_FOUND, f"aid {aid.hex()} unknown")
        self.selected = target
        return b""

    # security domain commands

    def _domain_command(self, domain: SecurityDomain, cmd: LogicalCommand) -> bytes:
        if cmd.ins == INS.INITIALIZE_UPDATE:
            return self.initialize_update(domain, cmd.data)
        if cmd.ins == INS.EXTERNAL_AUTHENTICATE:
            return self.external_authenticate(domain, cmd.data)
        if cmd.cla & ~CLA_CHAIN != CLA_GP_PROTECTED or cmd.ins not in (INS.INSTALL, INS.PUT_KEY):
            raise CardError(SW.INS_NOT_SUPPORTED)
        session = self.active_session
        if session is None or session.state is not ChannelState.AUTHENTICATED or session.domain_aid != domain.aid:
            raise CardError(SW.SECURITY_STATUS, "no secure channel")
        try:
            payload = scp.unprotect(session.keys, cmd.header, cmd.data)
        except crypto.AuthFailure as exc:
            raise CardError(SW.WRONG_DATA, str(exc)) from exc
        if cmd.ins == INS.PUT_KEY:
            return self.put_key(domain, payload)
        if cmd.p1 == INSTALL_SSD:
            return self.install_ssd(domain, payload)
        if cmd.p1 == INSTALL_APPLET:
            return self.install_applet_with_dap(domain, payload)
        raise CardError(SW.WRONG_DATA, "unknown INSTALL variant")

    def initialize_update(self, domain: SecurityDomain, host_challenge: bytes) -> bytes:
        if self.active_session is not None and self.active_session.state is not ChannelState.CLOSED:
            raise CardError(SW.CONDITIONS, "session already open")
        if len(host_challenge) != crypto.CHALLENGE_LEN:
            raise CardError(SW.WRONG_DATA, "host challenge length")
        card_challenge = self.rng.challenge()
        keys = crypto.derive_session_keys(domain.s_enc, domain.s_mac, host_challenge, card_challenge)
        self.active_session = SecureChannelSession(
            domain.aid, keys, ChannelState.INIT_UPDATED, host_challenge, card_challenge)
        return card_challenge + scp.card_cryptogram(keys, host_challenge, card_challenge)

    def external_authenticate(self, domain: SecurityDomain, cryptogram: bytes) -> bytes:
        session = self.active_session
        if session is None or session.state is not ChannelState.INIT_UPDATED or session.domain_aid != domain.aid:
            raise CardError(SW.CONDITIONS, "no pending INITIALIZE UPDATE")
        expected = scp.host_cryptogram(session.keys, session.host_challenge, session.card_challenge)
        if not hmac.compare_digest(expected, cryptogram):
            session.state = ChannelState.CLOSED
            raise CardError(SW.AUTH_FAILED, "host cryptogram mismatch")
        session.state = ChannelState.AUTHENTICATED
        return b""

    def install_ssd(self, domain: SecurityDomain, payload: bytes) -> bytes:
        if domain.owner is not Owner.ISSUER:
            raise CardError(SW.SECURITY_STATUS, "only the issuer domain installs domains")
        try:
            aid, s_enc, s_mac, dap_public, params = unpack(payload, 5)
            new = SecurityDomain(aid, SymmetricKey(s_enc, KeyPurpose.ENC), SymmetricKey(s_mac, KeyPurpose.MAC),
                                 Owner.TSM, dap_public or None, params)
        except (DecodeError, ValueError) as exc:
            raise CardError(SW.WRONG_DATA, f"install payload: {exc}") from exc
        if not 5 <= len(aid) <= 16:
            raise CardError(SW.WRONG_DATA, "aid length")
        if aid in self.domains or self.find_applet(aid):
            raise CardError(SW.CONDITIONS, "aid already present")
        self.domains[aid] = new
        try:
            self._check_budget()
        except CardError:
            del self.domains[aid]
            raise
        return b""

    def put_key(self, domain: SecurityDomain, payload: bytes) -> bytes:
        try:
            s_enc, s_mac, dap_public = unpack(payload, 3)
            new_enc, new_mac = SymmetricKey(s_enc, KeyPurpose.ENC), SymmetricKey(s_mac, KeyPurpose.MAC)
        except (DecodeError, ValueError) as exc:
            raise CardError(SW.WRONG_DATA, f"put key payload: {exc}") from exc
        domain.s_enc, domain.s_mac = new_enc, new_mac
        if dap_public:
            domain.dap_public = dap_public
        self.active_session.state = ChannelState.CLOSED
        self.active_session = None
        return b""

    def install_applet_with_dap(self, domain: SecurityDomain, payload: bytes) -> bytes:
        if not domain.dap_public:
            raise CardError(SW.CONDITIONS, "domain has no DAP key")
        try:
            package, signature = unpack(payload, 2)
        except DecodeError as exc:
            raise CardError(SW.WRONG_DATA, str(exc)) from exc
        if not crypto.verify(domain.dap_public, package, signature):
            raise CardError(SW.AUTH_FAILED, "DAP verification failed")
        try:
            aid, cvca, csca, code = unpack(package, 4)
            cvca_cert, csca_cert = pki.canonical_decode(cvca), pki.canonical_decode(csca)
        except DecodeError as exc:
            raise CardError(SW.WRONG_DATA, f"applet package: {exc}") from exc
        if cvca_cert.role is not pki.Role.CVCA or csca_cert.role is not pki.Role.CSCA:
            raise CardError(SW.WRONG_DATA, "package anchors have wrong roles")
        if aid in self.domains or self.find_applet(aid):
            raise CardError(SW.CONDITIONS, "aid already present")
        applet = EidApplet(aid, pki.TrustAnchor(cvca_cert), pki.TrustAnchor(csca_cert), code)
        domain.applets.append(applet)
        try:
            self._check_budget()
        except CardError:
            domain.applets.remove(applet)
            raise
        return b""

    # eID applet commands

    def _applet_command(self, applet: EidApplet, cmd: LogicalCommand, port: Port) -> bytes:
        ins = cmd.ins
        if ins == INS.VERIFY:
            return self.verify_pin(applet, cmd.data)
        if ins == INS.PERSONALIZE:
            return self.personalize(applet, cmd.data)
        if ins == INS.GET_TERMINAL_INFO:
            return self._terminal_info(applet)
        if ins == INS.SET_CONSENT:
            return self._set_consent(applet, cmd.data)
        if ins == INS.STORE_DATA:
            if applet.state is not AppletState.INSTALLED:
                raise CardError(SW.CONDITIONS, "already personalized")
            applet.staged_package = cmd.data
            return b""
        if ins == INS.LOAD_TOKEN:
            return self.load_token(applet, cmd.data)
        if ins == INS.LOCK:
            return self.lock_access(applet)
        if applet.state is not AppletState.PERSONALIZED:
            raise CardError(SW.CONDITIONS, f"applet {applet.state.value}")
        if ins == INS.PSO_VERIFY_CERT:
            return self._ta_chain(applet, cmd.data)
        if ins == INS.GET_CHALLENGE:
            return self._ta_challenge(applet)
        if ins == INS.EXTERNAL_AUTHENTICATE:
            return self._ta_verify(applet, cmd.data)
        if ins == INS.GENERAL_AUTHENTICATE:
            return self._ca(applet, cmd)
        if ins == INS.ENVELOPE and cmd.cla & ~CLA_CHAIN == CLA_SM:
            return self._secure_messaging(applet, cmd.data)
        raise CardError(SW.INS_NOT_SUPPORTED)

    def verify_pin(self, applet: EidApplet, pin: bytes) -> bytes:
        if applet.state is AppletState.BLOCKED:
            raise CardError(SW.AUTH_BLOCKED, "PIN blocked")
        if applet.state is not AppletState.PERSONALIZED:
            raise CardError(SW.CONDITIONS, "no PIN set")
        if len(pin) != PIN_LENGTH or not pin.isdigit():
            raise CardError(SW.WRONG_DATA, "PIN format")
        if hmac.compare_digest(applet._pin_digest(pin), applet.pin_hash):
            applet.retry_counter = PIN_RETRIES
            applet.access_unlocked = True
            return b""
        applet.retry_counter -= 1
        applet.access_unlocked = False
        if applet.retry_counter == 0:
            applet.state = AppletState.BLOCKED
            applet.clear_transient()
            raise CardError(SW.AUTH_BLOCKED, "PIN blocked")
        raise CardError(SW.retries(applet.retry_counter), "wrong PIN")

    def personalize(self, applet: EidApplet, data: bytes) -> bytes:
        if applet.state is not AppletState.INSTALLED:
            raise CardError(SW.CONDITIONS, "already personalized")
        if not applet.staged_package:
            raise CardError(SW.CONDITIONS, "no token package staged")
        try:
            qr_private, pin = unpack(data, 2)
            qr = crypto.keypair_from_private(crypto.AGREEMENT, qr_private)
            plain = crypto.hybrid_open(qr, applet.staged_package, b"token-package")
            token_blob, chip_private, chain_blob = unpack(plain, 3)
            token = decode_token(token_blob)
            chip_chain = pki.decode_chain(chain_blob)
            chip_kp = crypto.keypair_from_private(crypto.AGREEMENT, chip_private)
        except (DecodeError, crypto.CryptoError, ValueError) as exc:
            raise CardError(SW.WRONG_DATA, f"token package: {exc}") from exc
        if len(pin) != PIN_LENGTH or not pin.isdigit():
            raise CardError(SW.WRONG_DATA, "PIN format")
        applet.staged_package = b""
        applet.chip_ca_keypair = chip_kp
        applet.chip_chain = chip_chain
        applet.pin_salt = self.rng.randbytes(16)
        applet.pin_hash = applet._pin_digest(pin)
        applet.retry_counter = PIN_RETRIES
        applet.token_key = crypto.random_key(KeyPurpose.TOKEN, self.rng)
        applet.state = AppletState.PERSONALIZED
        self._check_budget()
        ct = crypto.aead_encrypt(applet.token_key, self.rng.randbytes(crypto.NONCE_LEN),
                                 encode_token(token), TOKEN_AAD + applet.aid, self.ledger)
        return ct.to_bytes()

    def load_token(self, applet: EidApplet, blob: bytes) -> bytes:
        if not applet.access_unlocked or applet.state is not AppletState.PERSONALIZED:
            raise CardError(SW.SECURITY_STATUS, "access locked")
        try:
            plain = crypto.aead_decrypt(applet.token_key, blob, TOKEN_AAD + applet.aid)
            applet.token = decode_token(plain)
        except (crypto.AuthFailure, DecodeError) as exc:
            raise CardError(SW.WRONG_DATA, "token blob rejected") from exc
        if applet.leak_token:
            return plain
        return b""

    def lock_access(self, applet: EidApplet) -> bytes:
        applet.access_unlocked = False
        applet.clear_transient()
        return b""

    # EAC responder

    def _ta_chain(self, applet: EidApplet, data: bytes) -> bytes:
        if not applet.access_unlocked:
            raise CardError(SW.SECURITY_STATUS, "access locked")
        applet.responder = eac.EacResponder(applet.anchors["CVCA"], applet.chip_ca_keypair, applet.chip_chain,
                                            self.rng, self.ledger)
        try:
            applet.responder.receive_chain(pki.decode_chain(data), self.clock.now())
        except DecodeError as exc:
            raise CardError(SW.WRONG_DATA, str(exc)) from exc
        except eac.EacError as exc:
            raise CardError(SW.AUTH_FAILED, str(exc)) from exc
        return b""

    def _responder(self, applet: EidApplet) -> eac.EacResponder:
        if applet.responder is None or not applet.access_unlocked:
            raise CardError(SW.CONDITIONS, "no EAC session")
        return applet.responder

    def _ta_challenge(self, applet: EidApplet) -> bytes:
        try:
            return self._responder(applet).issue_challenge()
        except eac.PhaseError as exc:
            raise CardError(SW.CONDITIONS, str(exc)) from exc

    def _ta_verify(self, applet: EidApplet, data: bytes) -> bytes:
        if len(data) != 32 + crypto.SIGNATURE_LEN:
            raise CardError(SW.WRONG_DATA, "TA data length")
        try:
            self._responder(applet).verify_terminal(data[:32], data[32:])
        except eac.PhaseError as exc:
            raise CardError(SW.CONDITIONS, str(exc)) from exc
        except eac.EacError as exc:
            raise CardError(SW.AUTH_FAILED, str(exc)) from exc
        return b""

    def _ca(self, applet: EidApplet, cmd: LogicalCommand) -> bytes:
        responder = self._responder(applet)
        try:
            if cmd.p1 == 0:
                chain, confirm = responder.ca_respond(cmd.data)
                return pack([pki.encode_chain(chain), confirm])
            responder.ca_finish(cmd.data)
            return b""
        except eac.PhaseError as exc:
            raise CardError(SW.CONDITIONS, str(exc)) from exc
        except eac.EacError as exc:
            raise CardError(SW.AUTH_FAILED, str(exc)) from exc

    def _secure_messaging(self, applet: EidApplet, data: bytes) -> bytes:
        responder = self._responder(applet)
        if responder.sm is None:
            raise CardError(SW.CONDITIONS, "secure messaging not established")
        sm = responder.sm
        try:
            inner = ApduCommand.from_bytes(sm.unwrap(data))
        except (eac.SmTamper, eac.SmReplay, ApduError) as exc:
            applet.responder = None
            raise CardError(SW.WRONG_DATA, f"{type(exc).__name__}: {exc}") from exc
        try:
            resp = ApduResponse(self._read_attribute(applet, inner), SW.OK)
        except CardError as err:
            resp = ApduResponse(sw=err.sw)
        return sm.wrap(resp.to_bytes())

    def _read_attribute(self, applet: EidApplet, inner: ApduCommand) -> bytes:
        if inner.ins != INS.READ_ATTRIBUTE:
            raise CardError(SW.INS_NOT_SUPPORTED)
        if applet.token is None:
            raise CardError(SW.CONDITIONS, "token not loaded")
        name = read_text(inner.data)
        if applet.consent is None or name not in applet.consent:
            raise CardError(SW.SECURITY_STATUS, f"{name} not approved")
        if name not in applet.token:
            raise CardError(SW.NOT_FOUND, name)
        return text(applet.token[name])

    def _terminal_info(self, applet: EidApplet) -> bytes:
        responder = applet.responder
        if responder is None or responder.terminal is None:
            raise CardError(SW.CONDITIONS, "no verified terminal")
        return pack([text(responder.terminal.subject_id), pack_texts(sorted(responder.terminal.attributes_allowed))])

    def _set_consent(self, applet: EidApplet, data: bytes) -> bytes:
        responder = applet.responder
        if responder is None or responder.terminal is None:
            raise CardError(SW.CONDITIONS, "no verified terminal")
        try:
            approved = frozenset(unpack_texts(data))
        except DecodeError as exc:
            raise CardError(SW.WRONG_DATA, str(exc)) from exc
        if not approved <= responder.terminal.attributes_allowed:
            raise CardError(SW.WRONG_DATA, "consent exceeds terminal authorization")
        applet.consent = approved
        return b""


__all__ = [
    "SecureElement", "SecurityDomain", "EidApplet", "Port", "Owner", "ChannelState", "AppletState",
    "STORAGE_BUDGET", "TOKEN_FIELDS", "TOKEN_AAD", "encode_ssd_install", "encode_put_key",
    "encode_applet_package", "encode_token", "decode_token", "encode_token_package_plain", "u64",
]
