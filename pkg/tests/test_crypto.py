import json
from pathlib import Path

import pytest

from eidsim import crypto
from eidsim.crypto import KeyPurpose, SymmetricKey
from tests.oracles import reference

VECTORS = json.loads((Path(__file__).parent / "data" / "reference_vectors.json").read_text())
H = bytes.fromhex


# the oracle itself, against published vectors

def test_oracle_x25519_rfc7748():
    alice = H("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    bob = H("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
    assert reference.x25519_public(alice).hex() == "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a"
    assert reference.x25519(alice, reference.x25519_public(bob)).hex() == (
        "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742")


def test_oracle_hkdf_rfc5869_case3():
    okm = reference.hkdf_sha256(b"\x0b" * 22, b"", 42)
    assert okm.hex() == ("8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d"
                         "9d201395faa4b61a96c8")


def test_oracle_hmac_rfc4231_case2():
    tag = reference.mac16(b"Jefe", b"what do ya want for nothing?")
    assert tag.hex() == "5bdcc146bf60754e6a042426089575c7"


def test_frozen_vectors_match_oracle():
    assert VECTORS == reference.build_vectors()


# package under test vs frozen vectors

@pytest.mark.parametrize("v", VECTORS["keygen"], ids=lambda v: f"seed{v['seed']}")
def test_keygen_vectors(v):
    kp = crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed"]))
    assert kp.public_part.hex() == v["public"]


@pytest.mark.parametrize("v", VECTORS["agree"], ids=lambda v: f"{v['seed_a']}x{v['seed_b']}")
def test_agreement_vectors(v):
    a = crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed_a"]))
    b = crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed_b"]))
    assert crypto.dh_agree(a, b.public_part).hex() == v["shared"]
    assert crypto.dh_agree(b, a).hex() == v["shared"]


@pytest.mark.parametrize("v", VECTORS["mac"])
def test_mac_vectors(v):
    key = SymmetricKey(H(v["key"]), KeyPurpose.MAC)
    assert crypto.mac(key, H(v["message"])).hex() == v["tag"]


@pytest.mark.parametrize("v", VECTORS["kdf"], ids=lambda v: H(v["label"]).decode())
def test_kdf_vectors(v):
    assert crypto.kdf(H(v["secret"]), H(v["label"])).value.hex() == v["key"]


@pytest.mark.parametrize("v", VECTORS["session_keys"])
def test_session_key_vectors(v):
    keys = crypto.derive_session_keys(SymmetricKey(H(v["s_enc"]), KeyPurpose.ENC),
                                      SymmetricKey(H(v["s_mac"]), KeyPurpose.MAC),
                                      H(v["host_challenge"]), H(v["card_challenge"]))
    assert (keys.enc.value.hex(), keys.mac.value.hex()) == (v["enc"], v["mac"])
    assert keys.counter == 0


def test_vector_counts():
    assert all(len(VECTORS[k]) >= 5 for k in ("keygen", "agree", "mac", "kdf", "session_keys"))


def test_errors():
    rng = crypto.ScenarioRng(1)
    with pytest.raises(crypto.UnknownGroup):
        crypto.generate_keypair("p256", rng)
    sig = crypto.generate_keypair(crypto.SIGNATURE, rng)
    agr = crypto.generate_keypair(crypto.AGREEMENT, rng)
    with pytest.raises(crypto.GroupMismatch):
        crypto.dh_agree(sig, agr)
    with pytest.raises(crypto.InvalidElement):
        crypto.dh_agree(agr, bytes(32))
    with pytest.raises(crypto.EmptyLabel):
        crypto.kdf(b"x" * 32, b"")
    enc = crypto.random_key(KeyPurpose.ENC, rng)
    with pytest.raises(crypto.WrongKeyPurpose):
        crypto.mac(enc, b"m")
    with pytest.raises(crypto.BadChallengeLength):
        crypto.derive_session_keys(enc, crypto.random_key(KeyPurpose.MAC, rng), b"short", bytes(8))


def test_aead_roundtrip_and_tamper():
    rng = crypto.ScenarioRng(3)
    key = crypto.random_key(KeyPurpose.ENC, rng)
    ct = crypto.aead_encrypt(key, bytes(12), b"attribute", b"aad")
    assert crypto.aead_decrypt(key, ct.to_bytes(), b"aad") == b"attribute"
    with pytest.raises(crypto.AuthFailure):
        crypto.aead_decrypt(key, ct, b"other")
    raw = bytearray(ct.to_bytes())
    raw[14] ^= 1
    with pytest.raises(crypto.AuthFailure):
        crypto.aead_decrypt(key, bytes(raw), b"aad")


def test_nonce_ledger_rejects_reuse():
    ledger = crypto.NonceLedger()
    key = crypto.random_key(KeyPurpose.ENC, crypto.ScenarioRng(4))
    crypto.aead_encrypt(key, bytes(12), b"a", ledger=ledger)
    with pytest.raises(crypto.NonceReuse):
        crypto.aead_encrypt(key, bytes(12), b"b", ledger=ledger)


def test_signatures():
    kp = crypto.generate_keypair(crypto.SIGNATURE, crypto.ScenarioRng(5))
    sig = crypto.sign(kp, b"msg")
    assert crypto.verify(kp.public_part, b"msg", sig)
    assert not crypto.verify(kp.public_part, b"msh", sig)
    assert not crypto.verify(kp.public_part, b"msg", sig[:-1] + bytes([sig[-1] ^ 1]))


def test_hybrid_binding():
    rng = crypto.ScenarioRng(6)
    qr = crypto.generate_keypair(crypto.AGREEMENT, rng)
    other = crypto.generate_keypair(crypto.AGREEMENT, rng)
    blob = crypto.hybrid_seal(qr.public_part, b"token", rng, b"ctx")
    assert crypto.hybrid_open(qr, blob, b"ctx") == b"token"
    with pytest.raises(crypto.AuthFailure):
        crypto.hybrid_open(other, blob, b"ctx")
    with pytest.raises(crypto.AuthFailure):
        crypto.hybrid_open(qr, blob, b"other")
    with pytest.raises(crypto.AuthFailure):
        crypto.hybrid_open(qr, blob[:20])


def test_rng_is_seeded():
    assert crypto.ScenarioRng(9).randbytes(16) == crypto.ScenarioRng(9).randbytes(16)
    assert crypto.ScenarioRng(9).challenge() != crypto.ScenarioRng(10).challenge()
