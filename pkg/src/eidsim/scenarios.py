"""Named scenarios with a stable report format and exit-code mapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import adversary
from .config import ScenarioConfig
from .host import AbortAtStep, run_authentication, run_initialization
from .world import World

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROTOCOL = 2
EXIT_SECURITY = 3

SCENARIOS = ("init", "auth", "full", "sniff", "relay", "relay-personalize")


@dataclass
class RunReport:
    scenario: str
    seed: int
    status: str = "ok"
    exit_code: int = EXIT_OK
    steps: list[dict] = field(default_factory=list)
    security_assertions: dict[str, bool] = field(default_factory=dict)
    verdict: str = ""
    details: dict = field(default_factory=dict)
    transcript: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2) + "\n"

    def add_flow(self, report) -> None:
        for s in report.steps:
            self.steps.append({"flow": report.flow, "step": s.number, "name": s.name, "ok": s.ok, "detail": s.detail})


@dataclass
class ScenarioResult:
    world: World
    report: RunReport
    start: int

    @property
    def transcript(self) -> bytes:
        return self.world.transport.transcript_bytes(self.start)


def _abort(report: RunReport, exc: AbortAtStep) -> None:
    if exc.report is not None:
        report.add_flow(exc.report)
    report.status = "aborted"
    report.exit_code = EXIT_PROTOCOL
    report.verdict = f"aborted at step {exc.step}: {exc.cause}"


def _security(report: RunReport, ok: bool, name: str) -> None:
    report.security_assertions[name] = ok
    if not ok:
        report.status = "security_failure"
        report.exit_code = EXIT_SECURITY


def _attack_details(rep: adversary.AttackReport) -> dict:
    return {
        "aids": sorted(a.hex() for a in rep.knowledge.aids),
        "observed_blobs": len(rep.knowledge.blobs),
        "derived_plaintext": len(rep.derived),
        "envelopes": rep.envelope_count,
        "baseline_envelopes": rep.baseline_envelope_count,
        "relayed_messages": rep.relayed_messages,
        "registry_growth": rep.registry_growth,
        "token_package_captured": rep.package_captured,
    }


def run_scenario(name: str, config: ScenarioConfig, seed: int, world: World | None = None,
                 store_path: str | Path | None = None) -> ScenarioResult:
    """Run one scenario; protocol aborts and failed security assertions land in the report."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    world = world or World(config, seed, store_path)
    start = len(world.transport.records)
    report = RunReport(name, seed)
    result = ScenarioResult(world, report, start)
    try:
        if name in ("init", "full"):
            report.add_flow(run_initialization(world, world.user_script()))
        if name in ("auth", "full"):
            tc = world.host.handle_tc_token_url(world.tc_token_url)
            auth = run_authentication(world, tc, world.user_script())
            report.add_flow(auth)
            record = world.offerer.sessions[tc.offerer_session_id]
            delivered = sorted(record.received or {})
            report.details.update(requested=auth.requested, approved=auth.approved, delivered=delivered)
            _security(report, delivered == auth.approved, "offerer_received_exactly_consented")
        if name in ("init", "full", "auth"):
            occ = adversary.outside_tee(adversary.knowledge_scan(world.transport.records[start:],
                                                                 adversary.secret_corpus(world)))
            _security(report, not occ, "no_secret_outside_tee")
            report.details["secret_occurrences"] = [o.__dict__ for o in occ]
            if report.exit_code == EXIT_OK:
                report.verdict = "completed"
        elif name == "sniff":
            rep = adversary.attack_select_sniff(world)
            for flow in rep.flow_reports:
                report.add_flow(flow)
            report.details.update(_attack_details(rep))
            expected = {world.isd_aid, world.tsm_ssd_aid, world.applet_aid}
            _security(report, rep.knowledge.aids == expected, "aids_exactly_three")
            _security(report, not rep.derived, "no_plaintext_derived")
            report.verdict = "no plaintext derived; only AIDs learned"
        else:
            baseline = World(config, seed)
            run_initialization(baseline, baseline.user_script())
            rep = adversary.attack_relay(world, len(baseline.transport.envelopes), name == "relay-personalize")
            report.add_flow(rep.flow_reports[0])
            report.details.update(_attack_details(rep))
            _security(report, rep.completed, "initialization_completed")
            _security(report, not rep.derived, "no_plaintext_derived")
            _security(report, rep.package_captured, "token_package_ciphertext_captured")
            report.details["transcript_shape_differs"] = rep.shape_differs
            report.verdict = "no plaintext derived; relay visible only as extra hops"
    except AbortAtStep as exc:
        _abort(report, exc)
    except adversary.SecurityAssertionFailed as exc:
        _security(report, False, "no_plaintext_derived")
        report.verdict = str(exc)
    return result
