"""Exit-gate checks.  Each criterion prints one PASS/FAIL line.

Run standalone with ``python -m tests.test_acceptance`` or through pytest;
under pytest the lines are also repeated in the terminal summary.
"""

from __future__ import annotations

import contextlib
import dataclasses
import io
import itertools
import json
import pickle
import random
import sys
import tempfile
from pathlib import Path

import pytest

from eidsim import AbortAtStep, World, crypto, default_config, eac, pki, run_authentication, run_initialization, scp
from eidsim.adversary import knowledge_scan, outside_tee, secret_corpus
from eidsim.apdu import CLA_ISO, INS, SW, LogicalCommand
from eidsim.cli import main as cli_main
from eidsim.crypto import KeyPurpose, SymmetricKey
from eidsim.host import TOKEN_KEY
from eidsim.scenarios import SCENARIOS, run_scenario
from eidsim.secure_element import TOKEN_FIELDS, AppletState, Owner
from tests.helpers import authenticate, open_channel, pin, select, send

VECTORS = json.loads((Path(__file__).parent / "data" / "reference_vectors.json").read_text())
RESULTS: dict[int, tuple[bool, str]] = {}

RIGHT, WRONG = "123456", "999999"


def _initialized(seed=7, cfg=None):
    w = World(cfg or default_config(), seed)
    run_initialization(w, w.user_script())
    return w


def _line(n: int, ok: bool, detail: str) -> str:
    return f"AC{n:>2} {'PASS' if ok else 'FAIL'}  {detail}"


# 1 -------------------------------------------------------------------------

def criterion_1():
    w = _initialized()
    tsm = w.se.domains.get(w.tsm_ssd_aid)
    handed = w.issuer.handed_keys[w.config.se_id]
    rotated = tsm is not None and tsm.owner is Owner.TSM and (tsm.s_enc.value, tsm.s_mac.value) != (
        handed[0].value, handed[1].value)
    applet = w.se.find_applet(w.applet_aid)
    personalized = applet is not None and applet.state is AppletState.PERSONALIZED
    blob = w.store.load_blob(TOKEN_KEY)
    encrypted = all(v.encode() not in blob for v in w.config.citizen().token().values())
    registry = len(w.sp.registry) == 1
    ok = rotated and personalized and encrypted and registry
    return ok, (f"TSM domain rotated={rotated}, applet PERSONALIZED={personalized}, "
                f"token blob encrypted={encrypted} ({len(blob)} B), registry size={len(w.sp.registry)}")


# 2 -------------------------------------------------------------------------

def _intersection_oracle(requested, consent):
    return sorted(f for f in TOKEN_FIELDS if f in requested and f in consent)


def criterion_2(pairs=50):
    frozen = pickle.dumps(_initialized())
    rnd = random.Random(2024)
    bad = []
    for i in range(pairs):
        requested = {f for f in TOKEN_FIELDS if rnd.random() < 0.5} or {rnd.choice(TOKEN_FIELDS)}
        consent = {f for f in TOKEN_FIELDS if rnd.random() < 0.5}
        w = pickle.loads(frozen)
        tc = w.offerer.create_tc_token(requested)
        script = w.user_script()
        script.consent = frozenset(consent)
        run_authentication(w, tc, script)
        received = w.offerer.sessions[tc.offerer_session_id].received
        token = w.config.citizen().token()
        expected = _intersection_oracle(requested, consent)
        if sorted(received) != expected or any(received[k] != token[k] for k in received):
            bad.append(i)
    return not bad, f"{pairs - len(bad)}/{pairs} (requested, consent) pairs delivered exactly the intersection"


# 3 -------------------------------------------------------------------------

def criterion_3():
    parts, ok = [], True
    sniff = run_scenario("sniff", default_config(), 7)
    d = sniff.report.details
    w = sniff.world
    aids_ok = set(d["aids"]) == {w.isd_aid.hex(), w.tsm_ssd_aid.hex(), w.applet_aid.hex()}
    ok &= sniff.report.exit_code == 0 and aids_ok and d["derived_plaintext"] == 0
    parts.append(f"sniff: {len(d['aids'])} AIDs, {d['derived_plaintext']} derived")
    for name in ("relay", "relay-personalize"):
        r = run_scenario(name, default_config(), 7)
        d = r.report.details
        done = r.report.security_assertions.get("initialization_completed", False)
        ok &= r.report.exit_code == 0 and done and d["derived_plaintext"] == 0
        parts.append(f"{name}: completed={done}, {d['derived_plaintext']} derived")
    return bool(ok), "; ".join(parts)


# 4 -------------------------------------------------------------------------

def criterion_4(trials=100):
    hits = 0
    for seed in range(trials):
        w = _initialized(seed)
        try:
            run_initialization(w, w.user_script())
        except AbortAtStep as exc:
            hits += exc.cause == "AlreadyRegistered" and exc.step == 4
    return hits == trials, f"second initialization rejected with AlreadyRegistered in {hits}/{trials} trials"


# 5 -------------------------------------------------------------------------

def _issuer_lockout(w) -> bool:
    handed = w.issuer.handed_keys[w.config.se_id]
    isd = w.issuer.db[w.config.se_id]
    for enc, mac in (handed, (isd.s_enc, isd.s_mac)):
        # honest issuer host notices the card does not share its keys
        try:
            open_channel(w.se, w.tsm_ssd_aid, enc, mac, crypto.ScenarioRng(w.seed + 1))
            return False
        except scp.CardAuthFailed:
            pass
        # pressing on regardless: the card refuses the host cryptogram
        w.se.active_session = None
        host = scp.ScpHost(enc, mac, crypto.ScenarioRng(w.seed + 2))
        select(w.se, w.tsm_ssd_aid)
        resp = send(w.se, LogicalCommand.of(host.initialize_update()))
        host.card_challenge = resp.data[:crypto.CHALLENGE_LEN]
        host.keys = crypto.derive_session_keys(enc, mac, host.host_challenge, host.card_challenge)
        if authenticate(w.se, host).sw != SW.AUTH_FAILED:
            return False
        w.se.active_session = None
    return True


def criterion_5(trials=100):
    locked = sum(_issuer_lockout(_initialized(seed)) for seed in range(trials))
    return locked == trials, f"issuer-keyed channel to the TSM domain refused in {locked}/{trials} trials"


# 6 -------------------------------------------------------------------------

def pin_model(attempts):
    counter, blocked, out = 3, False, []
    for a in attempts:
        if blocked:
            out.append(SW.AUTH_BLOCKED)
        elif a == RIGHT:
            counter = 3
            out.append(SW.OK)
        else:
            counter -= 1
            blocked = counter == 0
            out.append(SW.AUTH_BLOCKED if blocked else SW.retries(counter))
    return out, blocked


def criterion_6(max_len=5):
    frozen = pickle.dumps(_initialized())
    total = mismatches = absorbing_violations = 0
    for n in range(max_len + 1):
        for seq in itertools.product((RIGHT, WRONG), repeat=n):
            total += 1
            w = pickle.loads(frozen)
            select(w.se, w.applet_aid)
            applet = w.se.find_applet(w.applet_aid)
            sws, states = [], []
            for a in seq:
                sws.append(pin(w.se, a).sw)
                states.append(applet.state)
            expected, blocked = pin_model(seq)
            if sws != expected or (applet.state is AppletState.BLOCKED) != blocked:
                mismatches += 1
            first = next((i for i, s in enumerate(states) if s is AppletState.BLOCKED), None)
            if first is not None and any(s is not AppletState.BLOCKED for s in states[first:]):
                absorbing_violations += 1
    ok = mismatches == 0 and absorbing_violations == 0
    return ok, (f"{total} attempt sequences (length <= {max_len}): {mismatches} mismatches vs 3-strikes model, "
                f"{absorbing_violations} exits from BLOCKED")


# 7 -------------------------------------------------------------------------

def criterion_7(seeds=20):
    dirty = []
    for seed in range(seeds):
        r = run_scenario("full", default_config(), seed)
        w = r.world
        occ = outside_tee(knowledge_scan(w.transport.records[r.start:], secret_corpus(w)))
        if occ or r.report.exit_code != 0:
            dirty.append(seed)
    w = _initialized()
    w.se.find_applet(w.applet_aid).leak_token = True
    start = len(w.transport.records)
    run_authentication(w, w.host.handle_tc_token_url(w.tc_token_url), w.user_script())
    leaks = outside_tee(knowledge_scan(w.transport.records[start:], secret_corpus(w)))
    ok = not dirty and len(leaks) >= 1
    return ok, f"{seeds - len(dirty)}/{seeds} seeds clean outside the TEE; leak control found {len(leaks)} occurrence(s)"


# 8 -------------------------------------------------------------------------

def criterion_8():
    H = bytes.fromhex
    checks = []
    for v in VECTORS["keygen"]:
        checks.append(crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed"])).public_part.hex()
                      == v["public"])
    for v in VECTORS["agree"]:
        a = crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed_a"]))
        b = crypto.generate_keypair(crypto.AGREEMENT, crypto.ScenarioRng(v["seed_b"]))
        checks.append(crypto.dh_agree(a, b.public_part).hex() == v["shared"])
    for v in VECTORS["mac"]:
        checks.append(crypto.mac(SymmetricKey(H(v["key"]), KeyPurpose.MAC), H(v["message"])).hex() == v["tag"])
    for v in VECTORS["kdf"]:
        checks.append(crypto.kdf(H(v["secret"]), H(v["label"])).value.hex() == v["key"])
    for v in VECTORS["session_keys"]:
        k = crypto.derive_session_keys(SymmetricKey(H(v["s_enc"]), KeyPurpose.ENC),
                                       SymmetricKey(H(v["s_mac"]), KeyPurpose.MAC),
                                       H(v["host_challenge"]), H(v["card_challenge"]))
        checks.append((k.enc.value.hex(), k.mac.value.hex()) == (v["enc"], v["mac"]))
    counts = {k: len(v) for k, v in VECTORS.items()}
    ok = all(checks) and all(c >= 5 for c in counts.values())
    return ok, f"{sum(checks)}/{len(checks)} reference vectors match ({counts})"


# 9 -------------------------------------------------------------------------

def criterion_9(seeds=10):
    cfg = default_config()
    unequal = []
    for name in SCENARIOS:
        for seed in range(seeds):
            a = run_scenario(name, cfg, seed)
            b = run_scenario(name, cfg, seed)
            if a.transcript != b.transcript or a.report.to_json() != b.report.to_json() or not a.transcript:
                unequal.append((name, seed))
    replays = {}
    with tempfile.TemporaryDirectory() as tmp, contextlib.redirect_stdout(io.StringIO()):
        for name in SCENARIOS:
            path = Path(tmp) / f"{name}.jsonl"
            path.write_bytes(run_scenario(name, cfg, 5).transcript)
            replays[name] = cli_main(["replay", "--scenario", name, "--seed", "5", "--transcript", str(path)])
    ok = not unequal and all(code == 0 for code in replays.values())
    runs = len(SCENARIOS) * seeds
    return ok, f"{runs - len(unequal)}/{runs} double runs byte-identical; replay exit codes {sorted(set(replays.values()))}"


# 10 ------------------------------------------------------------------------

CERT_FIELDS = ("subject_id", "role", "public_part", "not_before", "not_after", "issuer_id",
               "attributes_allowed", "signature")


def _mutate_field(cert: pki.Certificate, name: str) -> pki.Certificate:
    value = getattr(cert, name)
    if name == "role":
        roles = list(pki.Role)
        value = roles[(roles.index(value) + 1) % len(roles)]
    elif isinstance(value, bytes):
        value = bytes([value[0] ^ 1]) + value[1:]
    elif isinstance(value, int):
        value = value + 1
    elif isinstance(value, str):
        value = value + "X"
    else:
        value = frozenset(value) ^ {"given_names"}
    return dataclasses.replace(cert, **{name: value})


def _flips(blob: bytes):
    for i in range(len(blob)):
        yield blob[:i] + bytes([blob[i] ^ 0x01]) + blob[i + 1:]


class _Matrix:
    def __init__(self):
        self.cases = 0
        self.wrong: list[str] = []

    def expect(self, label: str, error, fn) -> None:
        self.cases += 1
        try:
            fn()
        except error:
            return
        except Exception as exc:  # a crash or a different error both count against the matrix
            self.wrong.append(f"{label}: {type(exc).__name__}")
            return
        self.wrong.append(f"{label}: accepted")


def _eac_pair():
    from tests.test_eac import build
    return build()


def criterion_10():
    NOW = 500
    m = _Matrix()

    # certificates: every field of every certificate in both chains
    for idx in range(3):
        for f in CERT_FIELDS:
            init, resp = _eac_pair()
            chain = list(init.terminal_chain)
            chain[idx] = _mutate_field(chain[idx], f)
            m.expect(f"terminal[{idx}].{f}", eac.TaChainInvalid, lambda: resp.receive_chain(chain, NOW))

            init, resp = _eac_pair()
            eac.ta_run(init, resp, NOW)
            chip_chain, confirm = resp.ca_respond(init.ephemeral.public_part)
            chip_chain = list(chip_chain)
            chip_chain[idx] = _mutate_field(chip_chain[idx], f)
            m.expect(f"chip[{idx}].{f}", eac.CaChainInvalid, lambda: init.ca_process(chip_chain, confirm, NOW))

    # TA signature: every byte of the signature and of the commitment it covers
    for i in range(64):
        init, resp = _eac_pair()
        resp.receive_chain(init.terminal_chain, NOW)
        good = init.sign_challenge(resp.issue_challenge())
        bad = good[:i] + bytes([good[i] ^ 1]) + good[i + 1:]
        m.expect(f"ta_sig[{i}]", eac.TaSignatureInvalid, lambda: resp.verify_terminal(init.commitment, bad))
    for i in range(32):
        init, resp = _eac_pair()
        resp.receive_chain(init.terminal_chain, NOW)
        sig = init.sign_challenge(resp.issue_challenge())
        c = init.commitment
        bad_c = c[:i] + bytes([c[i] ^ 1]) + c[i + 1:]
        m.expect(f"ta_commit[{i}]", eac.TaSignatureInvalid, lambda: resp.verify_terminal(bad_c, sig))

    # CA key material: ephemeral key, chip confirmation, terminal confirmation, chip private key
    for i in range(32):
        init, resp = _eac_pair()
        eac.ta_run(init, resp, NOW)
        e = init.ephemeral.public_part
        bad_e = e[:i] + bytes([e[i] ^ 1]) + e[i + 1:]
        m.expect(f"ca_ephemeral[{i}]", eac.TaCaBindingMismatch, lambda: resp.ca_respond(bad_e))
    for i in range(crypto.MAC_LEN):
        init, resp = _eac_pair()
        eac.ta_run(init, resp, NOW)
        chain, confirm = resp.ca_respond(init.ephemeral.public_part)
        bad = confirm[:i] + bytes([confirm[i] ^ 1]) + confirm[i + 1:]
        m.expect(f"ca_chip_confirm[{i}]", eac.CaKeyConfirmFailed, lambda: init.ca_process(chain, bad, NOW))

        init, resp = _eac_pair()
        eac.ta_run(init, resp, NOW)
        chain, confirm = resp.ca_respond(init.ephemeral.public_part)
        tc = init.ca_process(chain, confirm, NOW)
        bad_t = tc[:i] + bytes([tc[i] ^ 1]) + tc[i + 1:]
        m.expect(f"ca_term_confirm[{i}]", eac.CaKeyConfirmFailed, lambda: resp.ca_finish(bad_t))
    from tests.test_eac import build
    init, resp = build(chip_private=bytes(31) + b"\x09")

    def uncertified():
        eac.ta_run(init, resp, NOW)
        eac.ca_run(init, resp, NOW)
    m.expect("ca_chip_private", eac.CaKeyConfirmFailed, uncertified)

    # SM payloads: every byte of a wrapped command, plus a replay
    init, resp = _eac_pair()
    eac.ta_run(init, resp, NOW)
    eac.ca_run(init, resp, NOW)
    wrapped = init.sm.wrap(bytes([CLA_ISO, INS.READ_ATTRIBUTE, 0, 0]) + b"family_name")
    for i, bad in enumerate(_flips(wrapped)):
        m.expect(f"sm[{i}]", eac.SmTamper, lambda: resp.sm.unwrap(bad))
    resp.sm.unwrap(wrapped)
    m.expect("sm_replay", eac.SmReplay, lambda: resp.sm.unwrap(wrapped))

    # token blob: every byte, at the SE and through the full flow
    w = _initialized()
    frozen = pickle.dumps(w)
    blob = w.store.load_blob(TOKEN_KEY)
    for i, bad in enumerate(_flips(blob)):
        w = pickle.loads(frozen)
        select(w.se, w.applet_aid)
        pin(w.se, RIGHT)

        def load(w=w, bad=bad):
            resp = send(w.se, LogicalCommand(CLA_ISO, INS.LOAD_TOKEN, 0, 0, bad))
            if resp.sw == SW.WRONG_DATA:
                raise ValueError("6A80")
            raise RuntimeError(f"SW {resp.sw:04X}")
        m.expect(f"blob[{i}]", ValueError, load)
    for i in (0, len(blob) // 2, len(blob) - 1):
        w = pickle.loads(frozen)
        w.store.store_blob(TOKEN_KEY, next(itertools.islice(_flips(blob), i, None)))

        def flow(w=w):
            try:
                run_authentication(w, w.host.handle_tc_token_url(w.tc_token_url), w.user_script())
            except AbortAtStep as exc:
                if (exc.step, exc.cause) == (5, "BlobTamper"):
                    raise LookupError from exc
                raise
        m.expect(f"blob_flow[{i}]", LookupError, flow)

    detail = f"{m.cases - len(m.wrong)}/{m.cases} single-field mutations raised their documented error"
    if m.wrong:
        detail += f"; first offenders: {m.wrong[:3]}"
    return not m.wrong, detail


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_acceptance(number):
    ok, detail = CRITERIA[number]()
    RESULTS[number] = (ok, detail)
    print(_line(number, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        failed += not ok
        print(_line(n, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
