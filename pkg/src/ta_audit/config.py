"""TOML configuration loading for runs and backends.

String values support ${VAR} environment interpolation; a missing variable
is a configuration error, not a silent empty string.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib  # py311+
except ImportError:  # pragma: no cover - depends on interpreter version
    import tomli as tomllib

from .backends import BackendSpec
from .protocols import ProtocolAssignment, ProtocolSpec, parse_protocol


class ConfigError(ValueError):
    pass


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate_env(value: Any, env: Mapping[str, str] | None = None) -> Any:
    """Expand ${VAR} in every string of a parsed config structure."""
    env = os.environ if env is None else env

    def expand(text: str) -> str:
        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in env:
                raise ConfigError(f"environment variable {name} is not set")
            return env[name]

        return _ENV_RE.sub(sub, text)

    if isinstance(value, str):
        return expand(value)
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    return value


def load_toml(path: str | Path, env: Mapping[str, str] | None = None) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return interpolate_env(data, env)


_BACKEND_KEYS = {
    "id", "kind", "model_name", "endpoint", "temperature", "max_tokens",
    "rate_limit", "max_retries", "timeout", "backoff_base", "behavior",
    "api_key",
    # audit wiring, not part of BackendSpec itself
    "protocol", "open_ended_protocol", "escalate_on_refusal",
    "behaviors_file", "default_behavior",
}

_SPEC_KEYS = {
    "id", "kind", "model_name", "endpoint", "temperature", "max_tokens",
    "rate_limit", "max_retries", "timeout", "backoff_base", "behavior",
    "api_key",
}


@dataclass
class BackendConfig:
    """One configured backend plus how the audit should drive it."""

    spec: BackendSpec
    protocol: str | None = None
    open_ended_protocol: str | None = None
    escalate_on_refusal: bool = False
    behaviors_file: str | None = None
    default_behavior: str | None = None

    def load_behaviors(self, base_dir: Path) -> dict[str, str]:
        if self.behaviors_file is None:
            return {}
        path = Path(self.behaviors_file)
        if not path.is_absolute():
            path = base_dir / path
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"behaviors file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in data.items()
        ):
            raise ConfigError(f"{path}: behaviors must map item ids to behavior strings")
        return data

    def assignment(self, fallback_protocol: str | None = None) -> ProtocolAssignment:
        """Resolve this backend's protocols into an assignment.

        A lone MCQ protocol applies to everything it can; circular degrades
        to single-pass for open-ended items unless an explicit open-ended
        protocol is configured.
        """
        protocol = self.protocol or fallback_protocol
        if protocol is None:
            raise ConfigError(
                f"backend {self.spec.id!r}: no protocol configured "
                "(set `protocol` or pass --protocol/--preset)"
            )
        mcq = parse_protocol(protocol, escalate_on_refusal=self.escalate_on_refusal)
        if self.open_ended_protocol:
            open_spec = parse_protocol(
                self.open_ended_protocol,
                escalate_on_refusal=self.escalate_on_refusal,
            )
            return ProtocolAssignment(mcq=mcq, open_ended=open_spec)
        return ProtocolAssignment.uniform(mcq)


def parse_backend_table(table: Mapping[str, Any], base_url: str | None = None) -> BackendConfig:
    if not isinstance(table, Mapping):
        raise ConfigError("backend entry must be a table")
    unknown = set(table) - _BACKEND_KEYS
    if unknown:
        raise ConfigError(
            f"backend {table.get('id', '?')!r}: unknown key(s): {sorted(unknown)}"
        )
    fields = {k: table[k] for k in _SPEC_KEYS if k in table}
    if base_url and fields.get("kind", "http-chat") == "http-chat":
        fields["endpoint"] = base_url.rstrip("/") + "/chat/completions"
    try:
        spec = BackendSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad backend entry: {exc}") from None
    return BackendConfig(
        spec=spec,
        protocol=table.get("protocol"),
        open_ended_protocol=table.get("open_ended_protocol"),
        escalate_on_refusal=bool(table.get("escalate_on_refusal", False)),
        behaviors_file=table.get("behaviors_file"),
        default_behavior=table.get("default_behavior"),
    )


def parse_backends(data: Mapping[str, Any], base_url: str | None = None) -> list[BackendConfig]:
    """Read [[backends]] (or a single [backend] table) from parsed TOML."""
    if "backends" in data:
        tables = data["backends"]
        if not isinstance(tables, list):
            raise ConfigError("`backends` must be an array of tables")
    elif "backend" in data:
        tables = [data["backend"]]
    else:
        raise ConfigError("config declares no backends")
    configs = [parse_backend_table(t, base_url) for t in tables]
    ids = [c.spec.id for c in configs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate backend ids in config: {ids}")
    return configs


_RUN_KEYS = {
    "dataset", "out", "preset", "protocol", "workers", "max_uncovered",
    "all_trials", "include_raw", "template_file", "refusal_terms",
    "backends", "backend",
}


@dataclass
class RunConfig:
    """Everything `eval` needs, from file and/or flags."""

    dataset: str | None = None
    out: str | None = None
    preset: str | None = None
    protocol: str | None = None
    workers: int = 8
    max_uncovered: float = 0.01
    all_trials: bool = False
    include_raw: bool = True
    template_file: str | None = None
    refusal_terms: str | None = None
    backends: list[BackendConfig] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_file(cls, path: str | Path, base_url: str | None = None) -> "RunConfig":
        path = Path(path)
        data = load_toml(path)
        unknown = set(data) - _RUN_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown key(s): {sorted(unknown)}")
        config = cls(
            dataset=data.get("dataset"),
            out=data.get("out"),
            preset=data.get("preset"),
            protocol=data.get("protocol"),
            workers=int(data.get("workers", 8)),
            max_uncovered=float(data.get("max_uncovered", 0.01)),
            all_trials=bool(data.get("all_trials", False)),
            include_raw=bool(data.get("include_raw", True)),
            template_file=data.get("template_file"),
            refusal_terms=data.get("refusal_terms"),
            base_dir=path.parent,
        )
        if "backends" in data or "backend" in data:
            config.backends = parse_backends(data, base_url)
        if config.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0.0 <= config.max_uncovered <= 1.0:
            raise ConfigError("max_uncovered must be within [0, 1]")
        return config

    def resolve(self, name: str | None) -> Path | None:
        """Paths in a config file are relative to the file itself."""
        if name is None:
            return None
        path = Path(name)
        return path if path.is_absolute() else self.base_dir / path
