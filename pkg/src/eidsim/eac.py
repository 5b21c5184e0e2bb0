"""Terminal Authentication, Chip Authentication and secure messaging.

The eID server is the initiator, the SE applet the responder.  TA signs the
chip challenge together with a commitment to the initiator's ephemeral CA
key, which ties the two subprotocols together (see ``ta_signed_message``).
CA combines the chip's certified static key with the initiator's ephemeral
key; both sides confirm the derived keys with a MAC over the handshake
transcript.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import crypto, pki
from .crypto import KeyPurpose, SessionKeys


class EacError(Exception):
    pass


class TaChainInvalid(EacError):
    pass


class TaSignatureInvalid(EacError):
    pass


class TaCaBindingMismatch(EacError):
    pass


class CaChainInvalid(EacError):
    pass


class CaKeyConfirmFailed(EacError):
    pass


class SmTamper(EacError):
    pass


class SmReplay(EacError):
    pass


class PhaseError(EacError):
    pass


class Phase(enum.IntEnum):
    IDLE = 0
    CHAIN_VERIFIED = 1
    CHALLENGED = 2
    TA_DONE = 3
    CA_CONFIRMING = 4
    ESTABLISHED = 5
    FAILED = 99


def ta_commitment(ephemeral_public: bytes) -> bytes:
    return crypto.digest(b"eac-ca-commit" + ephemeral_public)


def ta_signed_message(chip_challenge: bytes, commitment: bytes) -> bytes:
    # the single place where TA is bound to the upcoming CA
    return b"eac-ta" + chip_challenge + commitment


def _handshake_hash(ephemeral_public: bytes, chip_public: bytes, chip_challenge: bytes) -> bytes:
    return crypto.digest(ephemeral_public + chip_public + chip_challenge)


def _session_keys(shared: bytes) -> SessionKeys:
    return SessionKeys(
        crypto.kdf(shared, b"ENC", KeyPurpose.SESSION_ENC),
        crypto.kdf(shared, b"MAC", KeyPurpose.SESSION_MAC),
    )


CMD = 0x01
RSP = 0x02


class SecureMessaging:
    """AEAD over (counter || APDU) with strictly increasing counters per direction."""

    def __init__(self, keys: SessionKeys, initiator: bool, ledger: crypto.NonceLedger | None = None):
        self.keys = keys
        self.send_dir, self.recv_dir = (CMD, RSP) if initiator else (RSP, CMD)
        self.send_counter = 0
        self.recv_counter = 0
        self._ledger = ledger

    @staticmethod
    def _nonce(direction: int, n: int) -> bytes:
        return bytes([direction, 0, 0, 0]) + n.to_bytes(8, "big")

    def wrap(self, message: bytes) -> bytes:
        self.send_counter += 1
        n = self.send_counter
        self.keys.counter = max(self.keys.counter, n)
        ct = crypto.aead_encrypt(
            self.keys.enc, self._nonce(self.send_dir, n), n.to_bytes(8, "big") + message,
            b"SM" + bytes([self.send_dir]), self._ledger,
        )
        return ct.to_bytes()

    def unwrap(self, payload: bytes) -> bytes:
        try:
            ct = crypto.AeadCiphertext.from_bytes(payload)
            plain = crypto.aead_decrypt(self.keys.enc, ct, b"SM" + bytes([self.recv_dir]))
        except crypto.AuthFailure as exc:
            raise SmTamper("secure messaging payload failed authentication") from exc
        n = int.from_bytes(plain[:8], "big")
        if ct.nonce != self._nonce(self.recv_dir, n):
            raise SmTamper("nonce does not match counter")
        if n <= self.recv_counter:
            raise SmReplay(f"counter {n} already seen (last {self.recv_counter})")
        if n != self.recv_counter + 1:
            raise SmTamper(f"counter gap: expected {self.recv_counter + 1}, got {n}")
        self.recv_counter = n
        return plain[8:]


@dataclass
class TerminalInfo:
    subject_id: str
    attributes_allowed: frozenset[str]


class EacResponder:
    """Chip side, run inside the eID applet."""

    def __init__(
        self,
        cvca_anchor: pki.TrustAnchor,
        chip_keypair: crypto.KeyPair,
        chip_chain: list[pki.Certificate],
        rng: crypto.ScenarioRng,
        ledger: crypto.NonceLedger | None = None,
    ):
        self.cvca_anchor = cvca_anchor
        self.chip_keypair = chip_keypair
        self.chip_chain = chip_chain
        self.rng = rng
        self.ledger = ledger
        self.phase = Phase.IDLE
        self.terminal: pki.VerifiedLeaf | None = None
        self.challenge: bytes | None = None
        self.commitment: bytes | None = None
        self._used_challenge: bytes | None = None
        self._pending: tuple[SessionKeys, bytes] | None = None
        self.sm: SecureMessaging | None = None

    def _fail(self, exc: EacError) -> EacError:
        self.phase = Phase.FAILED
        return exc

    def _expect(self, *phases: Phase) -> None:
        if self.phase not in phases:
            raise PhaseError(f"responder in {self.phase.name}, expected {[p.name for p in phases]}")

    def receive_chain(self, chain: list[pki.Certificate], now: int) -> pki.VerifiedLeaf:
        self._expect(Phase.IDLE)
        try:
            leaf = pki.verify_chain(self.cvca_anchor, chain, now)
        except pki.PkiError as exc:
            raise self._fail(TaChainInvalid(f"{type(exc).__name__}: {exc}")) from exc
        if leaf.role is not pki.Role.TERMINAL:
            raise self._fail(TaChainInvalid(f"leaf role {leaf.role.name} is not TERMINAL"))
        self.terminal = leaf
        self.phase = Phase.CHAIN_VERIFIED
        return leaf

    def issue_challenge(self) -> bytes:
        self._expect(Phase.CHAIN_VERIFIED, Phase.CHALLENGED)
        self.challenge = self.rng.challenge()
        self.phase = Phase.CHALLENGED
        return self.challenge

    def verify_terminal(self, commitment: bytes, signature: bytes) -> None:
        self._expect(Phase.CHALLENGED)
        challenge, self.challenge = self.challenge, None
        if not crypto.verify(self.terminal.public_part, ta_signed_message(challenge, commitment), signature):
            raise self._fail(TaSignatureInvalid("terminal signature over chip challenge does not verify"))
        self._used_challenge = challenge
        self.commitment = commitment
        self.phase = Phase.TA_DONE

    def ca_respond(self, ephemeral_public: bytes) -> tuple[list[pki.Certificate], bytes]:
        self._expect(Phase.TA_DONE)
        if ta_commitment(ephemeral_public) != self.commitment:
            raise self._fail(TaCaBindingMismatch("ephemeral key differs from the TA commitment"))
        try:
            shared = crypto.dh_agree(self.chip_keypair, ephemeral_public)
        except crypto.CryptoError as exc:
            raise self._fail(CaKeyConfirmFailed(str(exc))) from exc
        keys = _session_keys(shared)
        chip_public = self.chip_chain[-1].public_part
        th = _handshake_hash(ephemeral_public, chip_public, self._used_challenge)
        self._pending = (keys, th)
        self.phase = Phase.CA_CONFIRMING
        return self.chip_chain, crypto.mac(keys.mac, b"CHIP" + th)

    def ca_finish(self, terminal_confirm: bytes) -> SecureMessaging:
        self._expect(Phase.CA_CONFIRMING)
        keys, th = self._pending
        self._pending = None
        if not crypto.mac_verify(keys.mac, b"TERM" + th, terminal_confirm):
            raise self._fail(CaKeyConfirmFailed("terminal key confirmation mismatch"))
        self.sm = SecureMessaging(keys, initiator=False, ledger=self.ledger)
        self.phase = Phase.ESTABLISHED
        return self.sm


class EacInitiator:
    """eID server side."""

    def __init__(
        self,
        terminal_keypair: crypto.KeyPair,
        terminal_chain: list[pki.Certificate],
        csca_anchor: pki.TrustAnchor,
        rng: crypto.ScenarioRng,
        ledger: crypto.NonceLedger | None = None,
    ):
        self.terminal_keypair = terminal_keypair
        self.terminal_chain = terminal_chain
        self.csca_anchor = csca_anchor
        self.rng = rng
        self.ledger = ledger
        self.ephemeral = crypto.generate_keypair(crypto.AGREEMENT, rng)
        self.chip_challenge: bytes | None = None
        self.chip: pki.VerifiedLeaf | None = None
        self.sm: SecureMessaging | None = None
        self.phase = Phase.IDLE

    @property
    def commitment(self) -> bytes:
        return ta_commitment(self.ephemeral.public_part)

    def sign_challenge(self, chip_challenge: bytes) -> bytes:
        self.chip_challenge = chip_challenge
        self.phase = Phase.TA_DONE
        return crypto.sign(self.terminal_keypair, ta_signed_message(chip_challenge, self.commitment))

    def ca_process(self, chip_chain: list[pki.Certificate], chip_confirm: bytes, now: int) -> bytes:
        if self.phase is not Phase.TA_DONE:
            raise PhaseError("CA before TA")
        try:
            leaf = pki.verify_chain(self.csca_anchor, chip_chain, now)
        except pki.PkiError as exc:
            self.phase = Phase.FAILED
            raise CaChainInvalid(f"{type(exc).__name__}: {exc}") from exc
        if leaf.role is not pki.Role.CHIP:
            self.phase = Phase.FAILED
            raise CaChainInvalid(f"leaf role {leaf.role.name} is not CHIP")
        try:
            shared = crypto.dh_agree(self.ephemeral, leaf.public_part)
        except crypto.CryptoError as exc:
            self.phase = Phase.FAILED
            raise CaKeyConfirmFailed(str(exc)) from exc
        keys = _session_keys(shared)
        th = _handshake_hash(self.ephemeral.public_part, leaf.public_part, self.chip_challenge)
        if not crypto.mac_verify(keys.mac, b"CHIP" + th, chip_confirm):
            self.phase = Phase.FAILED
            raise CaKeyConfirmFailed("chip key confirmation mismatch")
        self.chip = leaf
        self.sm = SecureMessaging(keys, initiator=True, ledger=self.ledger)
        self.phase = Phase.ESTABLISHED
        return crypto.mac(keys.mac, b"TERM" + th)


def ta_run(initiator: EacInitiator, responder: EacResponder, now: int) -> bool:
    """In-process TA between the two state machines; raises on failure."""
    responder.receive_chain(initiator.terminal_chain, now)
    challenge = responder.issue_challenge()
    responder.verify_terminal(initiator.commitment, initiator.sign_challenge(challenge))
    return True


def ca_run(initiator: EacInitiator, responder: EacResponder, now: int) -> tuple[SessionKeys, SessionKeys]:
    """In-process CA; returns (initiator keys, responder keys)."""
    chain, chip_confirm = responder.ca_respond(initiator.ephemeral.public_part)
    terminal_confirm = initiator.ca_process(chain, chip_confirm, now)
    responder.ca_finish(terminal_confirm)
    return initiator.sm.keys, responder.sm.keys
