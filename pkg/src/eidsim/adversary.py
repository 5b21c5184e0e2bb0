"""Host-CPU adversary: passive SELECT sniffing, relaying, decryption attempts, knowledge scans."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

from . import crypto
from .actors import CAPTURED_CONTEXT, PACKAGE_CONTEXT
from .apdu import CLA_CHAIN, INS, ApduCommand, ApduError, ApduResponse
from .crypto import SymmetricKey
from .encoding import DecodeError, read_message, unpack
from .host import StoreFormatError, UntrustedStore, run_authentication, run_initialization
from .secure_element import TOKEN_AAD
from .transport import Channel, Envelope, InterceptorPolicy, Observe, Relay, observer, read_transcript, record_payload

ADVERSARY = "adversary"
HYBRID_CONTEXTS = (PACKAGE_CONTEXT, CAPTURED_CONTEXT, b"")
MIN_CORPUS_ITEM = 4


class SecurityAssertionFailed(AssertionError):
    pass


@dataclass
class KnowledgeSet:
    aids: set[bytes] = field(default_factory=set)
    blobs: list[bytes] = field(default_factory=list)
    derived: list[tuple[str, bytes]] = field(default_factory=list)
    keys: list[SymmetricKey] = field(default_factory=list)
    keypairs: list[crypto.KeyPair] = field(default_factory=list)
    _chains: dict[tuple[str, str], list[ApduCommand]] = field(default_factory=dict, repr=False)

    def observe(self, env: Envelope) -> None:
        """Record what the envelope reveals; SELECT data is an AID, everything else a blob."""
        if env.channel is Channel.HOST_SE and env.reply_to is None:
            try:
                cmd = ApduCommand.from_bytes(env.payload)
            except ApduError:
                cmd = None
            if cmd is not None and cmd.ins == INS.SELECT and cmd.p1 == 0x04:
                self.aids.add(cmd.data)
                return
            if cmd is not None:
                key = (env.sender, env.recipient)
                pending = self._chains.setdefault(key, [])
                pending.append(cmd)
                if not cmd.chained:
                    self._chains.pop(key)
                    if len(pending) > 1:
                        self.blobs.append(_header(pending[-1]) + b"".join(c.data for c in pending))
        self.blobs.append(env.payload)

    def observe_store(self, raw: bytes) -> None:
        self.blobs.append(raw)

    def grant_key(self, key: SymmetricKey) -> None:
        self.keys.append(key)

    def grant_keypair(self, keypair: crypto.KeyPair) -> None:
        self.keypairs.append(keypair)


def _header(cmd: ApduCommand) -> bytes:
    # synthetic unchained command header, the reassembled data follows
    return bytes([cmd.cla & ~CLA_CHAIN & 0xFF, cmd.ins, cmd.p1, cmd.p2])


def _candidates(blob: bytes, depth: int = 0) -> Iterable[tuple[bytes, bytes]]:
    """(ciphertext candidate, header-or-empty) pairs found by parsing the blob."""
    yield blob, b""
    if depth > 3:
        return
    if len(blob) >= 4:
        # reassembled chain or APDU: header then data
        yield blob[4:], blob[:4]
        try:
            cmd = ApduCommand.from_bytes(blob)
            yield cmd.data, cmd.header
            yield cmd.data, _header(cmd)
        except ApduError:
            pass
    if len(blob) >= 2:
        yield ApduResponse.from_bytes(blob).data, b""
    for parse in (read_message, lambda b: ("", unpack(b))):
        try:
            _, fields = parse(blob)
        except (DecodeError, UnicodeDecodeError):
            continue
        for f in fields:
            if f and f != blob:
                yield from _candidates(f, depth + 1)
    try:
        stored = UntrustedStore.decode(blob)
    except StoreFormatError:
        return
    for value in stored.values():
        if value != blob:
            yield value, b""


def attempt_decrypt(ks: KnowledgeSet) -> list[tuple[str, bytes]]:
    """Try every observed blob against every key the adversary holds; record successes."""
    if not ks.keys and not ks.keypairs:
        return ks.derived
    aad_pool = [b"", b"SM\x01", b"SM\x02"] + [TOKEN_AAD + aid for aid in sorted(ks.aids)]
    seen: set[bytes] = set()
    for blob in ks.blobs:
        for cand, header in _candidates(blob):
            if cand in seen or len(cand) < crypto.NONCE_LEN + crypto.TAG_LEN:
                continue
            seen.add(cand)
            for key in ks.keys:
                for aad in ([header] if header else []) + aad_pool:
                    try:
                        plain = crypto.aead_decrypt(key, cand, aad)
                    except (crypto.CryptoError, ValueError):
                        continue
                    ks.derived.append(("aead", plain))
                    break
            for kp in ks.keypairs:
                for ctx in HYBRID_CONTEXTS:
                    try:
                        plain = crypto.hybrid_open(kp, cand, ctx)
                    except (crypto.CryptoError, ValueError):
                        continue
                    ks.derived.append(("hybrid", plain))
                    break
    return ks.derived


@dataclass(frozen=True)
class Occurrence:
    seq: int
    channel: str
    event: str
    item: str


def knowledge_scan(records: Iterable[dict], corpus: dict[str, bytes]) -> list[Occurrence]:
    """Every transcript record whose payload contains a corpus item as a substring."""
    items = sorted((name, v) for name, v in corpus.items() if len(v) >= MIN_CORPUS_ITEM)
    out = []
    for rec in records:
        payload = record_payload(rec)
        for name, value in items:
            if value in payload:
                out.append(Occurrence(rec["seq"], rec["channel"], rec["event"], name))
    return out


def outside_tee(occurrences: Iterable[Occurrence]) -> list[Occurrence]:
    return [o for o in occurrences if o.channel != Channel.TEE_SE.value]


def scan_transcript_file(path, corpus: dict[str, bytes]) -> list[Occurrence]:
    return knowledge_scan(read_transcript(path), corpus)


def secret_corpus(world) -> dict[str, bytes]:
    """PIN digits, every private part, every symmetric key, every attribute value."""
    cfg = world.config
    corpus: dict[str, bytes] = {"pin:init": cfg.init_pin.encode()}
    for i, pin in enumerate(cfg.pin_attempts):
        corpus[f"pin:attempt{i}"] = pin.encode()
    for name in ("cvca", "dv", "terminal", "csca", "ds"):
        corpus[f"private:{name}"] = getattr(world, name).keypair.private_part
    corpus["private:dap"] = world.dap_keypair.private_part
    corpus["private:sp"] = world.sp.keypair.private_part
    for doc, letter in sorted(world.qr_letters.items()):
        corpus[f"private:qr:{doc}"] = letter.qr_keypair.private_part
    for aid, domain in sorted(world.se.domains.items()):
        corpus[f"key:{aid.hex()}:s_enc"] = domain.s_enc.value
        corpus[f"key:{aid.hex()}:s_mac"] = domain.s_mac.value
    for se_id, (enc, mac) in sorted(world.issuer.handed_keys.items()):
        corpus[f"key:initial-tsm:{se_id}:s_enc"] = enc.value
        corpus[f"key:initial-tsm:{se_id}:s_mac"] = mac.value
    for applet in world.se.applets():
        if applet.chip_ca_keypair is not None:
            corpus[f"private:chip:{applet.aid.hex()}"] = applet.chip_ca_keypair.private_part
        if applet.token_key is not None:
            corpus[f"key:token:{applet.aid.hex()}"] = applet.token_key.value
    for citizen in cfg.citizens:
        for k, v in sorted(citizen.token().items()):
            corpus[f"attr:{citizen.document_number}:{k}"] = v.encode()
        corpus[f"proof:{citizen.document_number}"] = citizen.card_pin_proof.encode()
    return corpus


# Attack harnesses


def sniff_policy(ks: KnowledgeSet) -> InterceptorPolicy:
    return observer([Channel.HOST_SE], ks.observe)


class RelayAdversary:
    """Sits between host and a remote end: records, then forwards unchanged."""

    TARGETS = {
        Channel.HOST_SE: "se",
        Channel.HOST_ISSUER: "issuer",
        Channel.HOST_TSM: "tsm",
        Channel.HOST_EIDSERVER: "eid_server",
    }

    def __init__(self, transport, knowledge: KnowledgeSet):
        self.transport = transport
        self.knowledge = knowledge
        self.relayed = 0

    def handle(self, env: Envelope) -> bytes:
        self.knowledge.observe(env)
        self.relayed += 1
        reply = self.transport.request(env.channel, ADVERSARY, self.TARGETS[env.channel], env.payload,
                                       env.plaintext_flag)
        self.knowledge.blobs.append(reply)
        return reply

    def policy(self, channels, select=lambda env: True) -> InterceptorPolicy:
        def decide(env: Envelope):
            if env.sender == "host" and env.reply_to is None and select(env):
                return Relay(ADVERSARY)
            return Observe()

        return InterceptorPolicy(frozenset(channels), decide, exempt=frozenset({ADVERSARY}))


def is_personalization(env: Envelope) -> bool:
    """Token-package traffic: PERSONALIZE to the TSM and STORE DATA towards the applet."""
    if env.channel is Channel.HOST_TSM:
        try:
            return read_message(env.payload)[0] == "PERSONALIZE"
        except (DecodeError, UnicodeDecodeError):
            return False
    if env.channel is Channel.HOST_SE:
        return len(env.payload) > 1 and env.payload[1] == INS.STORE_DATA
    return False


@dataclass
class AttackReport:
    attack: str
    knowledge: KnowledgeSet
    completed: bool
    flow_reports: list = field(default_factory=list)
    derived: list[tuple[str, bytes]] = field(default_factory=list)
    envelope_count: int = 0
    baseline_envelope_count: int | None = None
    relayed_messages: int = 0
    registry_growth: int = 0
    package_captured: bool = False

    @property
    def shape_differs(self) -> bool:
        return self.baseline_envelope_count is not None and self.baseline_envelope_count != self.envelope_count


def _assert_nothing_derived(ks: KnowledgeSet) -> list[tuple[str, bytes]]:
    derived = attempt_decrypt(ks)
    if derived:
        raise SecurityAssertionFailed(f"adversary derived {len(derived)} plaintext fragment(s)")
    return derived


def attack_select_sniff(world) -> AttackReport:
    """Passive observer on the host-SE link across initialization and authentication."""

    ks = KnowledgeSet()
    world.transport.add_interceptor(sniff_policy(ks))
    start = len(world.transport.envelopes)
    script = world.user_script()
    reports = [run_initialization(world, script)]
    tc = world.host.handle_tc_token_url(world.tc_token_url)
    reports.append(run_authentication(world, tc, script))
    ks.observe_store(world.store.raw_bytes())
    return AttackReport("sniff", ks, True, reports, _assert_nothing_derived(ks),
                        len(world.transport.envelopes) - start)


def _package_seen(ks: KnowledgeSet) -> bool:
    for blob in ks.blobs:
        try:
            kind, _ = read_message(blob)
        except (DecodeError, UnicodeDecodeError):
            continue
        if kind == "PACKAGE":
            return True
    return False


def attack_relay(world, baseline_count: int | None = None, personalization_only: bool = False) -> AttackReport:
    """Redirect host traffic through the adversary during initialization, then try to decrypt it."""

    ks = KnowledgeSet()
    relay = RelayAdversary(world.transport, ks)
    world.transport.register(ADVERSARY, relay.handle)
    if personalization_only:
        policy = relay.policy([Channel.HOST_TSM, Channel.HOST_SE], is_personalization)
    else:
        policy = relay.policy([Channel.HOST_SE, Channel.HOST_ISSUER, Channel.HOST_TSM])
    world.transport.add_interceptor(policy)
    before = len(world.sp.registry)
    start = len(world.transport.envelopes)
    report = run_initialization(world, world.user_script())
    ks.observe_store(world.store.raw_bytes())
    world.transport.clear_interceptors()
    world.transport.unregister(ADVERSARY)
    return AttackReport(
        "relay-personalize" if personalization_only else "relay", ks, report.status == "ok", [report],
        _assert_nothing_derived(ks), len(world.transport.envelopes) - start, baseline_count,
        relay.relayed, len(world.sp.registry) - before, _package_seen(ks),
    )


def attack_relay_install(world, baseline_count: int | None = None) -> AttackReport:
    return attack_relay(world, baseline_count, personalization_only=False)


def attack_relay_personalize(world, baseline_count: int | None = None) -> AttackReport:
    return attack_relay(world, baseline_count, personalization_only=True)
