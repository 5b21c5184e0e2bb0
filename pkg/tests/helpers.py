"""Direct SE drivers shared by several test modules."""

from eidsim import crypto, scp
from eidsim.actors import CAPTURED_CONTEXT, encode_captured
from eidsim.apdu import CLA_ISO, INS, ApduResponse, LogicalCommand, transmit
from eidsim.secure_element import Port


def send(se, cmd: LogicalCommand, port=Port.HOST) -> ApduResponse:
    return transmit(lambda raw: se.transmit(raw, port), cmd)


def select(se, aid, port=Port.HOST) -> ApduResponse:
    return send(se, LogicalCommand(CLA_ISO, INS.SELECT, 4, 0, aid), port)


def open_channel(se, aid, s_enc, s_mac, rng=None) -> scp.ScpHost:
    """Returns the host end; raises scp.CardAuthFailed if the card proves other keys."""
    host = scp.ScpHost(s_enc, s_mac, rng or crypto.ScenarioRng(1234))
    assert select(se, aid).ok
    resp = send(se, LogicalCommand.of(host.initialize_update()))
    assert resp.ok
    host.check_card(resp.data)
    return host


def authenticate(se, host) -> ApduResponse:
    return send(se, LogicalCommand.of(host.external_authenticate()))


def issuer_keys(world):
    rec = world.issuer.db[world.config.se_id]
    return rec.s_enc, rec.s_mac


def fresh_package(world, doc=None):
    """Token package for a citizen not yet in the registry, straight from the SP."""
    citizen = world.config.citizen(doc)
    sealed = crypto.hybrid_seal(world.sp.keypair.public_part, encode_captured(citizen.token(), citizen.card_pin_proof),
                                world.rng, CAPTURED_CONTEXT)
    return world.sp.personalize(sealed)


def pin(se, digits, port=Port.MONITOR) -> ApduResponse:
    return send(se, LogicalCommand(CLA_ISO, INS.VERIFY, 0, 0, digits.encode()), port)
