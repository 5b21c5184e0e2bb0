"""Card-verifiable-style certificates under the CVCA and CSCA hierarchies."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from . import crypto
from .encoding import DecodeError, pack, read_text, read_u64, text, u64, unpack, pack_texts, unpack_texts


class PkiError(Exception):
    pass


class RoleOrderViolation(PkiError):
    pass


class ValidityOutOfRange(PkiError):
    pass


class BadRoot(PkiError):
    pass


class BadSignature(PkiError):
    pass


class Expired(PkiError):
    pass


class Role(enum.Enum):
    CVCA = "CVCA"
    DV = "DV"
    TERMINAL = "TERMINAL"
    CSCA = "CSCA"
    DS = "DS"
    CHIP = "CHIP"


ROOTS = (Role.CVCA, Role.CSCA)

PARENT = {
    Role.DV: Role.CVCA,
    Role.TERMINAL: Role.DV,
    Role.DS: Role.CSCA,
    Role.CHIP: Role.DS,
}


@dataclass(frozen=True)
class Validity:
    not_before: int
    not_after: int

    def contains(self, t: int) -> bool:
        return self.not_before <= t <= self.not_after

    def within(self, other: "Validity") -> bool:
        return other.not_before <= self.not_before and self.not_after <= other.not_after


@dataclass(frozen=True)
class Certificate:
    subject_id: str
    role: Role
    public_part: bytes
    not_before: int
    not_after: int
    issuer_id: str
    attributes_allowed: frozenset[str] = frozenset()
    signature: bytes = field(default=b"", repr=False)

    @property
    def validity(self) -> Validity:
        return Validity(self.not_before, self.not_after)

    def tbs(self) -> bytes:
        return pack([
            text(self.subject_id),
            text(self.role.value),
            self.public_part,
            u64(self.not_before),
            u64(self.not_after),
            text(self.issuer_id),
            pack_texts(sorted(self.attributes_allowed)),
        ])


@dataclass(frozen=True)
class TrustAnchor:
    certificate: Certificate


@dataclass(frozen=True)
class VerifiedLeaf:
    subject_id: str
    role: Role
    public_part: bytes
    attributes_allowed: frozenset[str]


def canonical_encode(cert: Certificate) -> bytes:
    return pack([cert.tbs(), cert.signature])


def canonical_decode(blob: bytes) -> Certificate:
    tbs, signature = unpack(blob, 2)
    subject, role, public, nb, na, issuer, attrs = unpack(tbs, 7)
    try:
        role_v = Role(read_text(role))
    except ValueError as exc:
        raise DecodeError(f"unknown role {role!r}") from exc
    return Certificate(
        subject_id=read_text(subject),
        role=role_v,
        public_part=public,
        not_before=read_u64(nb),
        not_after=read_u64(na),
        issuer_id=read_text(issuer),
        attributes_allowed=frozenset(unpack_texts(attrs)),
        signature=signature,
    )


def encode_chain(chain: list[Certificate]) -> bytes:
    return pack(canonical_encode(c) for c in chain)


def decode_chain(blob: bytes) -> list[Certificate]:
    return [canonical_decode(b) for b in unpack(blob)]


def create_trust_anchor(keypair: crypto.KeyPair, subject_id: str, role: Role, validity: Validity) -> TrustAnchor:
    if role not in ROOTS:
        raise RoleOrderViolation(f"{role.name} cannot be a root")
    cert = Certificate(subject_id, role, keypair.public_part, validity.not_before, validity.not_after, subject_id)
    return TrustAnchor(replace(cert, signature=crypto.sign(keypair, cert.tbs())))


def issue_certificate(
    issuer_keypair: crypto.KeyPair,
    issuer_cert: Certificate,
    subject_id: str,
    subject_public: bytes,
    role: Role,
    validity: Validity,
    attributes_allowed: frozenset[str] | set[str] = frozenset(),
) -> Certificate:
    if PARENT.get(role) is not issuer_cert.role:
        raise RoleOrderViolation(f"{issuer_cert.role.name} cannot issue {role.name}")
    if not validity.within(issuer_cert.validity):
        raise ValidityOutOfRange(f"{validity} exceeds issuer validity {issuer_cert.validity}")
    if attributes_allowed and role is not Role.TERMINAL:
        raise PkiError("attributes_allowed only applies to TERMINAL certificates")
    cert = Certificate(
        subject_id, role, subject_public, validity.not_before, validity.not_after,
        issuer_cert.subject_id, frozenset(attributes_allowed),
    )
    return replace(cert, signature=crypto.sign(issuer_keypair, cert.tbs()))


def _check_signature(cert: Certificate, signer_public: bytes) -> None:
    if not crypto.verify(signer_public, cert.tbs(), cert.signature):
        raise BadSignature(f"signature on {cert.subject_id!r} does not verify")


def verify_chain(anchor: TrustAnchor, chain: list[Certificate], check_time: int) -> VerifiedLeaf:
    """Validate ``chain`` (root first) against ``anchor`` at ``check_time``.

    Per link the checks run in a fixed order: issuer linkage, role order,
    signature, validity window.  So a mutated role surfaces as
    RoleOrderViolation and any other mutated field as BadSignature.
    """
    if not chain:
        raise BadRoot("empty chain")
    root = chain[0]
    if canonical_encode(root) != canonical_encode(anchor.certificate):
        raise BadRoot(f"chain root {root.subject_id!r} is not the trust anchor")
    if root.role not in ROOTS:
        raise RoleOrderViolation("anchor is not a root role")
    _check_signature(root, root.public_part)
    if not root.validity.contains(check_time):
        raise Expired(f"{root.subject_id!r} not valid at {check_time}")
    for parent, child in zip(chain, chain[1:]):
        if child.issuer_id != parent.subject_id:
            raise BadSignature(f"{child.subject_id!r} not issued by {parent.subject_id!r}")
        if PARENT.get(child.role) is not parent.role:
            raise RoleOrderViolation(f"{parent.role.name} -> {child.role.name}")
        _check_signature(child, parent.public_part)
        if not child.validity.contains(check_time):
            raise Expired(f"{child.subject_id!r} not valid at {check_time}")
    leaf = chain[-1]
    return VerifiedLeaf(leaf.subject_id, leaf.role, leaf.public_part, leaf.attributes_allowed)
