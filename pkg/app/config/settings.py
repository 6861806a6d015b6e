"""Settings for every LWM role.

Values are resolved in this order, later sources winning:

1. dataclass defaults,
2. the role's table in a TOML config file (``[log]``, ``[notifier]``...),
3. environment variables ``LWM_<ROLE>_<FIELD>`` (``LWM_<FIELD>`` for telemetry),
4. command-line flags.
"""

import os
import sys
from dataclasses import field, fields
from pathlib import Path
from typing import Any, TypeVar

from pydantic import ValidationError, field_validator
from pydantic.dataclasses import dataclass

from app.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

HOUR_MS = 3_600_000
MINUTE_MS = 60_000


@dataclass
class TelemetrySettings:
    log_level: str = "INFO"
    cloud_logging: bool = False
    tracing: bool = False
    gcp_project: str | None = None


@dataclass
class LogSettings:
    data_dir: Path | None = None
    interval_ms: int = HOUR_MS
    host: str = "127.0.0.1"
    port: int = 8080


@dataclass
class NotifierSettings:
    """Notifier configuration.

    Attributes:
        log_url: Base URL of the log's HTTP surface.
        interval_ms: The log's STH frequency; sets the default poll period.
        poll_period_ms: Explicit poll period; defaults to a quarter of the
            STH interval, capped at one minute.
        max_backoff_ms: Longest wait between retries while the log is down.
        retention: Number of recent batches kept in memory.
        audit: Check rebuilt batches against the lwm extension.
        proofs_only: Leave certificate blobs out of notifications.
        state_path: JSON file holding subscriptions and the resume index.
    """

    log_url: str = "http://127.0.0.1:8080"
    interval_ms: int = HOUR_MS
    poll_period_ms: int | None = None
    retention: int = 168
    audit: bool = True
    proofs_only: bool = False
    start_index: int = 0
    state_path: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8081
    push_timeout_s: float = 10.0
    max_backoff_ms: int = 10 * MINUTE_MS

    @property
    def effective_poll_period_ms(self) -> int:
        if self.poll_period_ms is not None:
            return self.poll_period_ms
        return min(self.interval_ms // 4, MINUTE_MS)


@dataclass
class SubjectSettings:
    query: str = ""
    apex_included: bool = True
    log_url: str = "http://127.0.0.1:8080"
    notifier_url: str = "http://127.0.0.1:8081"
    pubkey: Path | None = None
    state_dir: Path = Path(".lwm-subject")
    freshness_window_ms: int = 25 * HOUR_MS
    skew_ms: int = 10 * MINUTE_MS
    poll_period_ms: int = MINUTE_MS
    require_certificates: bool = True


@dataclass
class MonitorSettings:
    log_url: str = "http://127.0.0.1:8080"
    pubkey: Path | None = None
    from_index: int = 0
    continuous: bool = False
    poll_period_ms: int = MINUTE_MS
    workers: int = 1
    verdicts: Path | None = None


@dataclass
class DemoSettings:
    intervals: int = 10
    subjects: int = 3
    seed: int = 0
    certs_per_interval: int = 24
    interval_ms: int = HOUR_MS
    retention: int = 168
    inject: str | None = None
    corpus: Path | None = None


@dataclass
class BenchSettings:
    corpus: Path | None = None
    synthetic: bool = False
    sizes: list[int] = field(default_factory=lambda: [1 << k for k in range(10, 18)])
    out: Path | None = None
    repeats: int = 200
    throughput_seconds: float = 1.0
    check: bool = False
    sth_interval_ms: int = HOUR_MS

    @field_validator("sizes", mode="before")
    @classmethod
    def _split_sizes(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(part) for part in value.split(",") if part.strip()]
        return value


SettingsT = TypeVar("SettingsT")

_SECTIONS: dict[type, str] = {
    TelemetrySettings: "telemetry",
    LogSettings: "log",
    NotifierSettings: "notifier",
    SubjectSettings: "subject",
    MonitorSettings: "monitor",
    DemoSettings: "demo",
    BenchSettings: "bench",
}


def load_settings(
    cls: type[SettingsT],
    config_path: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> SettingsT:
    """Builds a settings object from file, environment and flag overrides.

    Args:
        cls: One of the settings dataclasses.
        config_path: Optional TOML file.
        overrides: Flag values; ``None`` entries are ignored.

    Returns:
        The validated settings.

    Raises:
        ConfigError: When the file cannot be read or a value is invalid.
    """
    section = _SECTIONS[cls]
    values: dict[str, Any] = {}
    if config_path is not None:
        try:
            with open(config_path, "rb") as f:
                document = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Cannot read config file {config_path}: {e}") from e
        table = document.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] in {config_path} must be a table")
        values.update(table)

    prefix = "LWM_" if section == "telemetry" else f"LWM_{section.upper()}_"
    names = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for name in names:
        env_value = os.environ.get(prefix + name.upper())
        if env_value is not None:
            values[name] = env_value

    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value

    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"Unknown {section} settings: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {section} settings: {e}") from e
