"""Scenario configuration (TOML).

Grammar, all sections optional except ``citizens``::

    seed = 7                       # used when --seed is not given

    [device]
    se_id = "SE-0001"
    tee_available = true
    se_available = true
    storage_budget = 8192
    ssd_install_params_len = 0     # padding inside the SSD install payload

    [terminal]
    attributes_allowed = ["given_names", ...]
    validity_days = 365

    [offerer]
    name = "shop"
    required_attributes = ["given_names", ...]

    [user]
    document_number = "T22000129"  # the card the user holds
    init_pin = "123456"
    pin_attempts = ["123456"]
    consent = ["given_names", ...]
    [user.captured]                # optional overrides of what the camera read
    date_of_birth = "1964-08-13"

    [[citizens]]                   # provisioned records at the service provider
    document_number = "T22000129"
    given_names = "ERIKA"
    ...
    card_pin_proof = "..."

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import datetime
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .secure_element import TOKEN_FIELDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Citizen:
    document_number: str
    given_names: str
    family_name: str
    date_of_birth: str
    address: str
    nationality: str
    expiry: str
    card_pin_proof: str

    def token(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in TOKEN_FIELDS}


@dataclass(frozen=True)
class ScenarioConfig:
    citizens: tuple[Citizen, ...]
    seed: int = 7
    se_id: str = "SE-0001"
    tee_available: bool = True
    se_available: bool = True
    storage_budget: int = 8192
    ssd_install_params_len: int = 0
    terminal_attributes: frozenset[str] = frozenset(TOKEN_FIELDS)
    terminal_validity_days: int = 365
    offerer_name: str = "shop"
    required_attributes: frozenset[str] = frozenset({"given_names", "family_name", "date_of_birth"})
    document_number: str = ""
    init_pin: str = "123456"
    pin_attempts: tuple[str, ...] = ("123456",)
    consent: frozenset[str] = frozenset({"given_names", "family_name", "date_of_birth"})
    captured_overrides: dict[str, str] = field(default_factory=dict)

    def citizen(self, document_number: str | None = None) -> Citizen:
        doc = document_number or self.document_number
        for c in self.citizens:
            if c.document_number == doc:
                return c
        raise ConfigError(f"no citizen with document number {doc!r}")

    def with_(self, **changes) -> "ScenarioConfig":
        return validate(replace(self, **changes))


DEFAULT_CITIZENS = (
    Citizen("T22000129", "ERIKA", "MUSTERMANN", "1964-08-12", "HEIDESTRASSE 17, 51147 KOELN", "DE",
            "2031-10-31", "card-proof-7f3a91"),
    Citizen("L01X00T47", "LEON", "PETERSEN", "1990-02-28", "AM MARKT 3, 24103 KIEL", "DE",
            "2029-05-14", "card-proof-22c0e4"),
)


def default_config() -> ScenarioConfig:
    return validate(ScenarioConfig(citizens=DEFAULT_CITIZENS, document_number="T22000129"))


_SECTIONS = {
    "seed": None,
    "device": {"se_id", "tee_available", "se_available", "storage_budget", "ssd_install_params_len"},
    "terminal": {"attributes_allowed", "validity_days"},
    "offerer": {"name", "required_attributes"},
    "user": {"document_number", "init_pin", "pin_attempts", "consent", "captured"},
    "citizens": set(TOKEN_FIELDS) | {"card_pin_proof"},
}


def _expect(value, kind, where: str):
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _str_list(value, where: str) -> list[str]:
    _expect(value, list, where)
    return [_expect(v, str, f"{where}[]") for v in value]


def _unknown(keys, allowed, where: str) -> None:
    extra = sorted(set(keys) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")


def parse_config(raw: dict) -> ScenarioConfig:
    _unknown(raw, _SECTIONS, "top level")
    kw: dict = {}
    if "seed" in raw:
        kw["seed"] = _expect(raw["seed"], int, "seed")
    device = _expect(raw.get("device", {}), dict, "device")
    _unknown(device, _SECTIONS["device"], "device")
    for key, kind in (("se_id", str), ("tee_available", bool), ("se_available", bool),
                      ("storage_budget", int), ("ssd_install_params_len", int)):
        if key in device:
            kw[key] = _expect(device[key], kind, f"device.{key}")
    terminal = _expect(raw.get("terminal", {}), dict, "terminal")
    _unknown(terminal, _SECTIONS["terminal"], "terminal")
    if "attributes_allowed" in terminal:
        kw["terminal_attributes"] = frozenset(_str_list(terminal["attributes_allowed"], "terminal.attributes_allowed"))
    if "validity_days" in terminal:
        kw["terminal_validity_days"] = _expect(terminal["validity_days"], int, "terminal.validity_days")
    offerer = _expect(raw.get("offerer", {}), dict, "offerer")
    _unknown(offerer, _SECTIONS["offerer"], "offerer")
    if "name" in offerer:
        kw["offerer_name"] = _expect(offerer["name"], str, "offerer.name")
    if "required_attributes" in offerer:
        kw["required_attributes"] = frozenset(_str_list(offerer["required_attributes"], "offerer.required_attributes"))
    user = _expect(raw.get("user", {}), dict, "user")
    _unknown(user, _SECTIONS["user"], "user")
    for key in ("document_number", "init_pin"):
        if key in user:
            kw[key] = _expect(user[key], str, f"user.{key}")
    if "pin_attempts" in user:
        kw["pin_attempts"] = tuple(_str_list(user["pin_attempts"], "user.pin_attempts"))
    if "consent" in user:
        kw["consent"] = frozenset(_str_list(user["consent"], "user.consent"))
    if "captured" in user:
        captured = _expect(user["captured"], dict, "user.captured")
        _unknown(captured, TOKEN_FIELDS + ("card_pin_proof",), "user.captured")
        kw["captured_overrides"] = {k: _expect(v, str, f"user.captured.{k}") for k, v in captured.items()}
    citizens = _expect(raw.get("citizens", []), list, "citizens")
    parsed = []
    for i, entry in enumerate(citizens):
        _expect(entry, dict, f"citizens[{i}]")
        _unknown(entry, _SECTIONS["citizens"], f"citizens[{i}]")
        missing = sorted(_SECTIONS["citizens"] - set(entry))
        if missing:
            raise ConfigError(f"citizens[{i}]: missing {missing}")
        parsed.append(Citizen(**{k: _expect(entry[k], str, f"citizens[{i}].{k}") for k in entry}))
    if not parsed:
        raise ConfigError("at least one [[citizens]] entry is required")
    kw["citizens"] = tuple(parsed)
    kw.setdefault("document_number", parsed[0].document_number)
    return validate(ScenarioConfig(**kw))


def _check_date(value: str, where: str) -> None:
    try:
        datetime.date.fromisoformat(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: not an ISO-8601 date: {value!r}") from exc


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    docs = [c.document_number for c in cfg.citizens]
    if len(set(docs)) != len(docs):
        raise ConfigError("document numbers must be unique")
    for c in cfg.citizens:
        for k in TOKEN_FIELDS:
            if not getattr(c, k):
                raise ConfigError(f"citizen {c.document_number}: empty {k}")
        _check_date(c.date_of_birth, f"citizen {c.document_number}.date_of_birth")
        _check_date(c.expiry, f"citizen {c.document_number}.expiry")
        if not re.fullmatch(r"[A-Z]{2}", c.nationality):
            raise ConfigError(f"citizen {c.document_number}: nationality must be a 2-letter code")
    unknown = (cfg.terminal_attributes | cfg.required_attributes | cfg.consent) - set(TOKEN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown attribute names {sorted(unknown)}")
    if not cfg.required_attributes:
        raise ConfigError("offerer.required_attributes must be non-empty")
    if cfg.storage_budget <= 0 or cfg.ssd_install_params_len < 0 or cfg.terminal_validity_days <= 0:
        raise ConfigError("sizes and lifetimes must be positive")
    if not 5 <= len(cfg.se_id) <= 64:
        raise ConfigError("device.se_id length out of range")
    return cfg


def load_config(source: str | Path) -> ScenarioConfig:
    """``default`` selects the built-in config; anything else is a TOML path."""
    if str(source) == "default":
        return default_config()
    try:
        raw = tomllib.loads(Path(source).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return parse_config(raw)
