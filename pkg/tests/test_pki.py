from dataclasses import replace

import pytest

from eidsim import crypto, pki
from eidsim.pki import Role, Validity

NOW = 1000


@pytest.fixture
def hierarchy():
    rng = crypto.ScenarioRng(11)
    root_kp = crypto.generate_keypair(crypto.SIGNATURE, rng)
    anchor = pki.create_trust_anchor(root_kp, "CVCA", Role.CVCA, Validity(0, 5000))
    dv_kp = crypto.generate_keypair(crypto.SIGNATURE, rng)
    dv = pki.issue_certificate(root_kp, anchor.certificate, "DV", dv_kp.public_part, Role.DV, Validity(100, 4000))
    t_kp = crypto.generate_keypair(crypto.SIGNATURE, rng)
    term = pki.issue_certificate(dv_kp, dv, "TERM", t_kp.public_part, Role.TERMINAL, Validity(900, 1100),
                                 {"given_names"})
    return anchor, [anchor.certificate, dv, term], root_kp, dv_kp


def test_valid_chain(hierarchy):
    anchor, chain, *_ = hierarchy
    leaf = pki.verify_chain(anchor, chain, NOW)
    assert leaf.role is Role.TERMINAL and leaf.attributes_allowed == {"given_names"}


def test_expired(hierarchy):
    anchor, chain, *_ = hierarchy
    with pytest.raises(pki.Expired):
        pki.verify_chain(anchor, chain, 1200)


def test_encoding_roundtrip(hierarchy):
    _, chain, *_ = hierarchy
    assert pki.decode_chain(pki.encode_chain(chain)) == chain


def test_issue_rules(hierarchy):
    anchor, chain, root_kp, dv_kp = hierarchy
    with pytest.raises(pki.RoleOrderViolation):
        pki.issue_certificate(root_kp, anchor.certificate, "X", b"k" * 32, Role.TERMINAL, Validity(1, 2))
    with pytest.raises(pki.ValidityOutOfRange):
        pki.issue_certificate(dv_kp, chain[1], "X", b"k" * 32, Role.TERMINAL, Validity(0, 9000))
    with pytest.raises(pki.RoleOrderViolation):
        pki.create_trust_anchor(dv_kp, "DV", Role.DV, Validity(0, 1))


def test_foreign_root(hierarchy):
    _, chain, *_ = hierarchy
    other = pki.create_trust_anchor(crypto.generate_keypair(crypto.SIGNATURE, crypto.ScenarioRng(99)),
                                    "CVCA", Role.CVCA, Validity(0, 5000))
    with pytest.raises(pki.BadRoot):
        pki.verify_chain(other, chain, NOW)


def _mutations(cert):
    yield "subject_id", replace(cert, subject_id=cert.subject_id + "X")
    yield "public_part", replace(cert, public_part=bytes([cert.public_part[0] ^ 1]) + cert.public_part[1:])
    yield "not_before", replace(cert, not_before=cert.not_before - 1)
    yield "not_after", replace(cert, not_after=cert.not_after + 1)
    yield "attributes", replace(cert, attributes_allowed=cert.attributes_allowed | {"address"})
    yield "signature", replace(cert, signature=bytes([cert.signature[0] ^ 1]) + cert.signature[1:])


@pytest.mark.parametrize("index", [1, 2])
def test_field_mutations_give_bad_signature(hierarchy, index):
    anchor, chain, *_ = hierarchy
    for name, mutated in _mutations(chain[index]):
        bad = list(chain)
        bad[index] = mutated
        with pytest.raises(pki.BadSignature):
            pki.verify_chain(anchor, bad, NOW)


def test_role_mutation(hierarchy):
    anchor, chain, *_ = hierarchy
    bad = [chain[0], chain[1], replace(chain[2], role=Role.DV)]
    with pytest.raises(pki.RoleOrderViolation):
        pki.verify_chain(anchor, bad, NOW)


def test_issuer_mutation(hierarchy):
    anchor, chain, *_ = hierarchy
    with pytest.raises(pki.BadSignature):
        pki.verify_chain(anchor, [chain[0], chain[1], replace(chain[2], issuer_id="OTHER")], NOW)
