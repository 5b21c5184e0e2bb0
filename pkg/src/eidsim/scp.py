"""Security-domain secure channel: challenge-response handshake and command protection.

INITIALIZE UPDATE carries the host challenge; the card answers with its own
challenge and a cryptogram MAC(session_mac, host || card).  EXTERNAL
AUTHENTICATE carries MAC(session_mac, card || host).  Protected commands
(CLA 0x84) carry nonce || body || tag, AEAD under the session enc key with
the 4-byte header as associated data.  The nonce encodes a counter that
must advance by exactly one per command.
"""

from __future__ import annotations

from . import crypto
from .apdu import CLA_GP, CLA_GP_PROTECTED, INS, ApduCommand, LogicalCommand
from .crypto import SessionKeys, SymmetricKey


class ScpError(Exception):
    pass


class CardAuthFailed(ScpError):
    """The card cryptogram did not verify on the host side."""


def card_cryptogram(keys: SessionKeys, host_challenge: bytes, card_challenge: bytes) -> bytes:
    return crypto.mac(keys.mac, host_challenge + card_challenge)


def host_cryptogram(keys: SessionKeys, host_challenge: bytes, card_challenge: bytes) -> bytes:
    return crypto.mac(keys.mac, card_challenge + host_challenge)


def _nonce(counter: int) -> bytes:
    return b"\x01\x00\x00\x00" + counter.to_bytes(8, "big")


def protect(keys: SessionKeys, header: bytes, payload: bytes, ledger: crypto.NonceLedger | None = None) -> bytes:
    keys.counter += 1
    return crypto.aead_encrypt(keys.enc, _nonce(keys.counter), payload, header, ledger).to_bytes()


def unprotect(keys: SessionKeys, header: bytes, data: bytes) -> bytes:
    """Card side; raises crypto.AuthFailure on any mismatch."""
    ct = crypto.AeadCiphertext.from_bytes(data)
    if ct.nonce != _nonce(keys.counter + 1):
        raise crypto.AuthFailure("unexpected secure-channel counter")
    plain = crypto.aead_decrypt(keys.enc, ct, header)
    keys.counter += 1
    return plain


class ScpHost:
    """Off-card end of a secure channel, held by the issuer or TSM remote instance."""

    def __init__(self, s_enc: SymmetricKey, s_mac: SymmetricKey, rng: crypto.ScenarioRng,
                 ledger: crypto.NonceLedger | None = None):
        self.s_enc = s_enc
        self.s_mac = s_mac
        self.rng = rng
        self.ledger = ledger
        self.host_challenge = b""
        self.card_challenge = b""
        self.keys: SessionKeys | None = None

    def initialize_update(self) -> ApduCommand:
        self.host_challenge = self.rng.challenge()
        return ApduCommand(CLA_GP, INS.INITIALIZE_UPDATE, 0, 0, self.host_challenge, le=0)

    def check_card(self, response_data: bytes) -> None:
        if len(response_data) != crypto.CHALLENGE_LEN + crypto.MAC_LEN:
            raise CardAuthFailed("malformed INITIALIZE UPDATE response")
        self.card_challenge = response_data[:crypto.CHALLENGE_LEN]
        keys = crypto.derive_session_keys(self.s_enc, self.s_mac, self.host_challenge, self.card_challenge)
        if not crypto.mac_verify(keys.mac, self.host_challenge + self.card_challenge,
                                 response_data[crypto.CHALLENGE_LEN:]):
            raise CardAuthFailed("card cryptogram mismatch")
        self.keys = keys

    def external_authenticate(self) -> ApduCommand:
        data = host_cryptogram(self.keys, self.host_challenge, self.card_challenge)
        return ApduCommand(CLA_GP_PROTECTED, INS.EXTERNAL_AUTHENTICATE, 0, 0, data)

    def protected(self, ins: int, p1: int, p2: int, payload: bytes) -> LogicalCommand:
        header = bytes([CLA_GP_PROTECTED, ins, p1, p2])
        return LogicalCommand(CLA_GP_PROTECTED, ins, p1, p2, protect(self.keys, header, payload, self.ledger))
