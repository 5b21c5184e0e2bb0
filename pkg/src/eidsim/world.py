"""A scenario world: every actor, the SE, the TEE and the transport, built from one seed."""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path

from . import crypto, pki
from .actors import CitizenRecord, EidServer, Issuer, Offerer, SeRecord, ServiceProvider, Tsm, UnknownOfferer
from .config import ScenarioConfig
from .crypto import KeyPurpose
from .host import HostApp, UntrustedStore, UserScript
from .secure_element import Port, SecureElement
from .tee import Tee, encode_qr
from .transport import Channel, Envelope, LinkSealer, Transport

ISD_AID = bytes.fromhex("A000000151000000")
TSM_SSD_AID = bytes.fromhex("A0000001515353440001")
APPLET_AID = bytes.fromhex("E80704007F00070302")

EPOCH = 20_000  # simulated day number; certificate validity is counted in days


class Clock:
    def __init__(self, now: int = EPOCH):
        self._now = now

    def now(self) -> int:
        return self._now

    def advance(self, days: int) -> None:
        self._now += days


@dataclass(frozen=True)
class QrLetter:
    qr_keypair: crypto.KeyPair
    document_number: str

    @property
    def payload(self) -> str:
        return encode_qr(self.qr_keypair.private_part)


@dataclass
class Authority:
    keypair: crypto.KeyPair
    certificate: pki.Certificate


class World:
    se_actor = "se"

    def __init__(self, config: ScenarioConfig, seed: int | None = None, store_path: str | Path | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.rng = crypto.ScenarioRng(self.seed)
        self.ledger = crypto.NonceLedger()
        self.clock = Clock()
        self.transport = Transport(LinkSealer(self.rng.randbytes(32), self.ledger))
        now = self.clock.now()
        sig = crypto.SIGNATURE

        # terminal hierarchy
        cvca_kp = crypto.generate_keypair(sig, self.rng)
        cvca = pki.create_trust_anchor(cvca_kp, "CVCA-DE", pki.Role.CVCA, pki.Validity(now - 1000, now + 3650))
        self.cvca = Authority(cvca_kp, cvca.certificate)
        dv_kp = crypto.generate_keypair(sig, self.rng)
        dv = pki.issue_certificate(cvca_kp, cvca.certificate, "DV-EID", dv_kp.public_part, pki.Role.DV,
                                   pki.Validity(now - 500, now + 1825))
        self.dv = Authority(dv_kp, dv)
        term_kp = crypto.generate_keypair(sig, self.rng)
        term = pki.issue_certificate(dv_kp, dv, "TERM-EIDSERVER", term_kp.public_part, pki.Role.TERMINAL,
                                     pki.Validity(now - 10, now - 10 + config.terminal_validity_days),
                                     config.terminal_attributes)
        self.terminal = Authority(term_kp, term)
        self.terminal_chain = [cvca.certificate, dv, term]

        # document hierarchy
        csca_kp = crypto.generate_keypair(sig, self.rng)
        csca = pki.create_trust_anchor(csca_kp, "CSCA-DE", pki.Role.CSCA, pki.Validity(now - 1000, now + 3650))
        self.csca = Authority(csca_kp, csca.certificate)
        ds_kp = crypto.generate_keypair(sig, self.rng)
        ds = pki.issue_certificate(csca_kp, csca.certificate, "DS-EID", ds_kp.public_part, pki.Role.DS,
                                   pki.Validity(now - 500, now + 1825))
        self.ds = Authority(ds_kp, ds)
        self.cvca_anchor, self.csca_anchor = cvca, csca

        # secure element in manufacturing state: only the issuer domain
        isd_enc = crypto.random_key(KeyPurpose.ENC, self.rng)
        isd_mac = crypto.random_key(KeyPurpose.MAC, self.rng)
        self.isd_aid, self.tsm_ssd_aid, self.applet_aid = ISD_AID, TSM_SSD_AID, APPLET_AID
        self.se = SecureElement(config.se_id, ISD_AID, isd_enc, isd_mac, self.rng, self.clock, self.ledger,
                                config.storage_budget)
        self.tee = Tee(self.transport, self.se_actor)

        self.issuer = Issuer(self.transport, self.rng, self.ledger,
                             {config.se_id: SeRecord(ISD_AID, isd_enc, isd_mac)},
                             bytes(config.ssd_install_params_len))
        self.dap_keypair = crypto.generate_keypair(sig, self.rng)
        self.tsm = Tsm(self.transport, self.rng, self.ledger, self.dap_keypair, APPLET_AID,
                       cvca.certificate, csca.certificate, TSM_SSD_AID)

        self.qr_letters: dict[str, QrLetter] = {}
        records = {}
        for citizen in config.citizens:
            qr = crypto.generate_keypair(crypto.AGREEMENT, self.rng)
            self.qr_letters[citizen.document_number] = QrLetter(qr, citizen.document_number)
            records[citizen.document_number] = CitizenRecord(citizen.token(), citizen.card_pin_proof, qr.public_part)
        self.sp = ServiceProvider(self.rng, crypto.generate_keypair(crypto.AGREEMENT, self.rng), ds_kp,
                                  [csca.certificate, ds], records, now, 1825)

        self.eid_server = EidServer(self.transport, self.rng, self.ledger, term_kp, self.terminal_chain, csca,
                                    self.clock)
        self.offerers = {config.offerer_name: Offerer(config.offerer_name, self.transport, self.rng,
                                                      self.eid_server.actor_id, config.required_attributes)}

        self.store = UntrustedStore(store_path)
        self.host = HostApp(self)

        self.transport.register(self.se_actor, self._se_handler)
        for actor in (self.issuer, self.tsm, self.sp, self.eid_server, *self.offerers.values()):
            self.transport.register(actor.actor_id, actor.handle)

    def _se_handler(self, env: Envelope) -> bytes:
        port = Port.MONITOR if env.channel is Channel.TEE_SE else Port.HOST
        return self.se.transmit(env.payload, port)

    @property
    def offerer(self) -> Offerer:
        return self.offerers[self.config.offerer_name]

    def offerer_for_url(self, url: str) -> Offerer:
        """``eid://<offerer name>/...`` -> the registered offerer."""
        name = url.removeprefix("eid://").split("/", 1)[0]
        if name not in self.offerers:
            raise UnknownOfferer(url)
        return self.offerers[name]

    @property
    def tc_token_url(self) -> str:
        return f"eid://{self.config.offerer_name}/login"

    def user_script(self) -> UserScript:
        cfg = self.config
        citizen = cfg.citizen()
        captured = citizen.token()
        overrides = dict(cfg.captured_overrides)
        proof = overrides.pop("card_pin_proof", citizen.card_pin_proof)
        captured.update(overrides)
        return UserScript(
            captured=captured,
            card_pin_proof=proof,
            qr_payload=self.qr_letters[citizen.document_number].payload,
            init_pin=cfg.init_pin,
            pin_attempts=list(cfg.pin_attempts),
            consent=cfg.consent,
        )

    # persistence between CLI invocations

    def save(self, path: str | Path) -> None:
        self.transport.clear_interceptors()
        Path(path).write_bytes(pickle.dumps(self))

    @staticmethod
    def load(path: str | Path) -> "World":
        world = pickle.loads(Path(path).read_bytes())
        if not isinstance(world, World):
            raise TypeError("state file does not hold a world")
        return world
