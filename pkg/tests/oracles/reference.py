"""Independent reference computations for the crypto oracles.

Pure standard library: an RFC 7748 Montgomery ladder for X25519, stdlib
hmac for the MAC and session-key derivation, and a hand-written RFC 5869
HKDF.  Nothing here imports the package under test.

Run as a script to regenerate ``tests/data/reference_vectors.json``.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import random
import sys
from pathlib import Path

P = 2**255 - 19
A24 = 121665


def _decode_scalar(k: bytes) -> int:
    b = bytearray(k)
    b[0] &= 248
    b[31] &= 127
    b[31] |= 64
    return int.from_bytes(b, "little")


def _decode_u(u: bytes) -> int:
    b = bytearray(u)
    b[31] &= 127
    return int.from_bytes(b, "little") % P


def x25519(k: bytes, u: bytes) -> bytes:
    scalar = _decode_scalar(k)
    x1 = _decode_u(u)
    x2, z2, x3, z3 = 1, 0, x1, 1
    swap = 0
    for t in reversed(range(255)):
        bit = (scalar >> t) & 1
        swap ^= bit
        if swap:
            x2, x3, z2, z3 = x3, x2, z3, z2
        swap = bit
        a = (x2 + z2) % P
        aa = a * a % P
        b = (x2 - z2) % P
        bb = b * b % P
        e = (aa - bb) % P
        c = (x3 + z3) % P
        d = (x3 - z3) % P
        da = d * a % P
        cb = c * b % P
        x3 = (da + cb) ** 2 % P
        z3 = x1 * (da - cb) ** 2 % P
        x2 = aa * bb % P
        z2 = e * (aa + A24 * e) % P
    if swap:
        x2, z2 = x3, z3
    return (x2 * pow(z2, P - 2, P) % P).to_bytes(32, "little")


BASE_U = (9).to_bytes(32, "little")


def x25519_public(k: bytes) -> bytes:
    return x25519(k, BASE_U)


def private_from_seed(seed: int) -> bytes:
    return random.Random(seed).randbytes(32)


def mac16(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()[:16]


def hkdf_sha256(ikm: bytes, info: bytes, length: int = 32) -> bytes:
    prk = hmac.new(b"\x00" * 32, ikm, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out += block
        i += 1
    return out[:length]


def session_keys(s_enc: bytes, s_mac: bytes, host: bytes, card: bytes) -> tuple[bytes, bytes]:
    enc = hmac.new(s_enc, host + card + b"ENC", hashlib.sha256).digest()
    mac = hmac.new(s_mac, host + card + b"MAC", hashlib.sha256).digest()
    return enc, mac


def _h(n: int, tag: str) -> bytes:
    return hashlib.sha256(f"{tag}-{n}".encode()).digest()


def build_vectors() -> dict:
    keygen = [
        {"seed": s, "public": x25519_public(private_from_seed(s)).hex()}
        for s in (42, 7, 8, 1, 2024)
    ]
    agree = []
    for a, b in ((42, 7), (1, 2), (3, 4), (100, 200), (5, 5)):
        pa, pb = private_from_seed(a), private_from_seed(b)
        agree.append({"seed_a": a, "seed_b": b, "shared": x25519(pa, x25519_public(pb)).hex()})
    macs = []
    for i in range(5):
        key = _h(i, "mac-key")
        msg = _h(i, "mac-msg")[: 7 * (i + 1)]
        macs.append({"key": key.hex(), "message": msg.hex(), "tag": mac16(key, msg).hex()})
    kdfs = []
    for i, label in enumerate((b"ENC", b"MAC", b"TOKEN", b"hybrid", b"link")):
        secret = _h(i, "kdf-secret")
        kdfs.append({"secret": secret.hex(), "label": label.hex(), "key": hkdf_sha256(secret, label).hex()})
    sessions = []
    for i in range(5):
        s_enc, s_mac = _h(i, "s-enc"), _h(i, "s-mac")
        host, card = _h(i, "host")[:8], _h(i, "card")[:8]
        enc, mac = session_keys(s_enc, s_mac, host, card)
        sessions.append({
            "s_enc": s_enc.hex(), "s_mac": s_mac.hex(),
            "host_challenge": host.hex(), "card_challenge": card.hex(),
            "enc": enc.hex(), "mac": mac.hex(),
        })
    return {"keygen": keygen, "agree": agree, "mac": macs, "kdf": kdfs, "session_keys": sessions}


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "data" / "reference_vectors.json"
    out.write_text(json.dumps(build_vectors(), indent=2) + "\n")
    sys.stdout.write(f"wrote {out}\n")
