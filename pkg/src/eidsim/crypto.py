"""Cryptographic primitives behind algorithm-agnostic interfaces.

Defaults: X25519 for key agreement, Ed25519 for signatures,
ChaCha20-Poly1305 for authenticated encryption, HMAC-SHA256 (truncated to
16 bytes) as MAC and HKDF-SHA256 as KDF.  Key material is carried as raw
bytes so that world state stays picklable.
"""

from __future__ import annotations

import enum
import hashlib
import hmac as _hmac
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives import hmac as c_hmac
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

AGREEMENT = "x25519"
SIGNATURE = "ed25519"
GROUPS = (AGREEMENT, SIGNATURE)

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
MAC_LEN = 16
CHALLENGE_LEN = 8
SIGNATURE_LEN = 64


class CryptoError(Exception):
    pass


class UnknownGroup(CryptoError):
    pass


class GroupMismatch(CryptoError):
    pass


class InvalidElement(CryptoError):
    pass


class NonceReuse(CryptoError):
    pass


class AuthFailure(CryptoError):
    pass


class WrongKeyPurpose(CryptoError):
    pass


class BadChallengeLength(CryptoError):
    pass


class EmptyLabel(CryptoError):
    pass


class ScenarioRng:
    """The single seeded randomness source of a scenario."""

    def __init__(self, seed: int):
        self.seed = seed
        self._random = random.Random(seed)

    def randbytes(self, n: int) -> bytes:
        return self._random.randbytes(n)

    def challenge(self) -> bytes:
        return self.randbytes(CHALLENGE_LEN)

    def randrange(self, n: int) -> int:
        return self._random.randrange(n)

    def sample(self, population, k: int) -> list:
        return self._random.sample(list(population), k)


class KeyPurpose(enum.Enum):
    ENC = "ENC"
    MAC = "MAC"
    TOKEN = "TOKEN"
    SESSION_ENC = "SESSION_ENC"
    SESSION_MAC = "SESSION_MAC"


_MAC_PURPOSES = (KeyPurpose.MAC, KeyPurpose.SESSION_MAC)
_AEAD_PURPOSES = (KeyPurpose.ENC, KeyPurpose.SESSION_ENC, KeyPurpose.TOKEN)


@dataclass(frozen=True)
class KeyPair:
    private_part: bytes = field(repr=False)
    public_part: bytes
    group_id: str


@dataclass(frozen=True)
class SymmetricKey:
    value: bytes = field(repr=False)
    purpose: KeyPurpose

    def __post_init__(self):
        if len(self.value) != KEY_LEN:
            raise ValueError(f"symmetric keys are {KEY_LEN} bytes, got {len(self.value)}")


@dataclass
class SessionKeys:
    enc: SymmetricKey
    mac: SymmetricKey
    counter: int = 0


@dataclass(frozen=True)
class AeadCiphertext:
    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AeadCiphertext":
        if len(blob) < NONCE_LEN + TAG_LEN:
            raise AuthFailure("ciphertext shorter than nonce and tag")
        return cls(blob[:NONCE_LEN], blob[NONCE_LEN:-TAG_LEN], blob[-TAG_LEN:])


class NonceLedger:
    """Remembers (key, nonce) pairs used for encryption within one scenario."""

    def __init__(self):
        self._seen: set[tuple[bytes, bytes]] = set()

    def claim(self, key: SymmetricKey, nonce: bytes) -> None:
        entry = (hashlib.sha256(key.value).digest(), nonce)
        if entry in self._seen:
            raise NonceReuse(f"nonce {nonce.hex()} already used with this key")
        self._seen.add(entry)

    def __len__(self) -> int:
        return len(self._seen)


def generate_keypair(group_id: str, rng: ScenarioRng) -> KeyPair:
    if group_id == AGREEMENT:
        priv = rng.randbytes(32)
        pub = X25519PrivateKey.from_private_bytes(priv).public_key().public_bytes_raw()
    elif group_id == SIGNATURE:
        priv = rng.randbytes(32)
        pub = Ed25519PrivateKey.from_private_bytes(priv).public_key().public_bytes_raw()
    else:
        raise UnknownGroup(group_id)
    return KeyPair(priv, pub, group_id)


def keypair_from_private(group_id: str, private_part: bytes) -> KeyPair:
    if len(private_part) != 32:
        raise InvalidElement("private part must be 32 bytes")
    if group_id == AGREEMENT:
        pub = X25519PrivateKey.from_private_bytes(private_part).public_key().public_bytes_raw()
    elif group_id == SIGNATURE:
        pub = Ed25519PrivateKey.from_private_bytes(private_part).public_key().public_bytes_raw()
    else:
        raise UnknownGroup(group_id)
    return KeyPair(private_part, pub, group_id)


def dh_agree(own: KeyPair, peer_public: bytes | KeyPair) -> bytes:
    if isinstance(peer_public, KeyPair):
        if peer_public.group_id != own.group_id:
            raise GroupMismatch(f"{own.group_id} vs {peer_public.group_id}")
        peer_public = peer_public.public_part
    if own.group_id != AGREEMENT:
        raise GroupMismatch(f"{own.group_id} is not an agreement group")
    if len(peer_public) != 32:
        raise InvalidElement("peer public part must be 32 bytes")
    try:
        peer = X25519PublicKey.from_public_bytes(peer_public)
        return X25519PrivateKey.from_private_bytes(own.private_part).exchange(peer)
    except ValueError as exc:
        # low-order points give an all-zero secret
        raise InvalidElement(str(exc)) from exc


def sign(own: KeyPair, message: bytes) -> bytes:
    if own.group_id != SIGNATURE:
        raise UnknownGroup(f"{own.group_id} cannot sign")
    return Ed25519PrivateKey.from_private_bytes(own.private_part).sign(message)


def verify(public_part: bytes, message: bytes, signature: bytes, group_id: str = SIGNATURE) -> bool:
    if group_id != SIGNATURE:
        raise UnknownGroup(f"{group_id} cannot verify")
    if len(public_part) != 32 or len(signature) != SIGNATURE_LEN:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_part).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def aead_encrypt(
    key: SymmetricKey,
    nonce: bytes,
    plaintext: bytes,
    aad: bytes = b"",
    ledger: NonceLedger | None = None,
) -> AeadCiphertext:
    if key.purpose not in _AEAD_PURPOSES:
        raise WrongKeyPurpose(f"{key.purpose.name} key used for encryption")
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    if ledger is not None:
        ledger.claim(key, nonce)
    sealed = ChaCha20Poly1305(key.value).encrypt(nonce, plaintext, aad)
    return AeadCiphertext(nonce, sealed[:-TAG_LEN], sealed[-TAG_LEN:])


def aead_decrypt(key: SymmetricKey, ct: AeadCiphertext | bytes, aad: bytes = b"") -> bytes:
    if isinstance(ct, (bytes, bytearray)):
        ct = AeadCiphertext.from_bytes(bytes(ct))
    if len(ct.nonce) != NONCE_LEN or len(ct.tag) != TAG_LEN:
        raise AuthFailure("malformed ciphertext")
    try:
        return ChaCha20Poly1305(key.value).decrypt(ct.nonce, ct.body + ct.tag, aad)
    except InvalidTag as exc:
        raise AuthFailure("authentication tag mismatch") from exc


def _hmac_sha256(key: bytes, message: bytes) -> bytes:
    h = c_hmac.HMAC(key, hashes.SHA256())
    h.update(message)
    return h.finalize()


def mac(key: SymmetricKey, message: bytes) -> bytes:
    if key.purpose not in _MAC_PURPOSES:
        raise WrongKeyPurpose(f"{key.purpose.name} key used for MAC")
    return _hmac_sha256(key.value, message)[:MAC_LEN]


def mac_verify(key: SymmetricKey, message: bytes, tag: bytes) -> bool:
    return _hmac.compare_digest(mac(key, message), tag)


def derive_session_keys(
    s_enc: SymmetricKey, s_mac: SymmetricKey, host_challenge: bytes, card_challenge: bytes
) -> SessionKeys:
    if s_enc.purpose is not KeyPurpose.ENC or s_mac.purpose is not KeyPurpose.MAC:
        raise WrongKeyPurpose("session keys derive from an ENC and a MAC static key")
    if len(host_challenge) != CHALLENGE_LEN or len(card_challenge) != CHALLENGE_LEN:
        raise BadChallengeLength("challenges are 8 bytes")
    material = host_challenge + card_challenge
    enc = SymmetricKey(_hmac_sha256(s_enc.value, material + b"ENC"), KeyPurpose.SESSION_ENC)
    mac_key = SymmetricKey(_hmac_sha256(s_mac.value, material + b"MAC"), KeyPurpose.SESSION_MAC)
    return SessionKeys(enc, mac_key, 0)


def kdf(shared_secret: bytes, label: bytes, purpose: KeyPurpose = KeyPurpose.SESSION_ENC) -> SymmetricKey:
    if not label:
        raise EmptyLabel("kdf label must be non-empty")
    out = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=None, info=label).derive(shared_secret)
    return SymmetricKey(out, purpose)


def random_key(purpose: KeyPurpose, rng: ScenarioRng) -> SymmetricKey:
    return SymmetricKey(rng.randbytes(KEY_LEN), purpose)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# Hybrid encryption to an X25519 public part: ephemeral agreement + AEAD.
# Wire layout: ephemeral_public(32) || nonce(12) || body || tag(16).

HYBRID_LABEL = b"eidsim-hybrid"


def hybrid_seal(recipient_public: bytes, plaintext: bytes, rng: ScenarioRng, context: bytes = b"") -> bytes:
    eph = generate_keypair(AGREEMENT, rng)
    key = kdf(dh_agree(eph, recipient_public), HYBRID_LABEL + context, KeyPurpose.ENC)
    ct = aead_encrypt(key, rng.randbytes(NONCE_LEN), plaintext, eph.public_part + recipient_public)
    return eph.public_part + ct.to_bytes()


def hybrid_open(recipient: KeyPair, blob: bytes, context: bytes = b"") -> bytes:
    if len(blob) < 32 + NONCE_LEN + TAG_LEN:
        raise AuthFailure("hybrid ciphertext too short")
    eph_pub, rest = blob[:32], blob[32:]
    try:
        shared = dh_agree(recipient, eph_pub)
    except (InvalidElement, GroupMismatch) as exc:
        raise AuthFailure(str(exc)) from exc
    key = kdf(shared, HYBRID_LABEL + context, KeyPurpose.ENC)
    return aead_decrypt(key, rest, eph_pub + recipient.public_part)
