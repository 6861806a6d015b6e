import json
import logging
from typing import Any

from google.cloud import logging as google_cloud_logging

from app.config.settings import TelemetrySettings

SERVICE_NAME = "lwm-notifier"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_cloud_client: google_cloud_logging.Client | None = None


def setup_logging(settings: TelemetrySettings) -> None:
    """Configures the root logger, attaching Cloud Logging when enabled."""
    global _cloud_client
    logging.basicConfig(level=settings.log_level.upper(), format=LOG_FORMAT)
    if settings.cloud_logging:
        _cloud_client = google_cloud_logging.Client(project=settings.gcp_project)
        _cloud_client.setup_logging(log_level=logging.getLevelName(settings.log_level.upper()))


class EventLogger:
    """Structured event sink with the ``log_struct`` interface of Cloud Logging.

    Payloads go to a Cloud Logging logger when ``setup_logging`` enabled it,
    and otherwise to the standard logging tree as one JSON object per line.
    """

    def __init__(self, name: str) -> None:
        self.name = name
        self._logger = logging.getLogger(name)
        self._cloud = _cloud_client.logger(name) if _cloud_client is not None else None

    def log_struct(self, payload: dict[str, Any], severity: str = "INFO", kind: str = "event") -> None:
        labels = {"type": kind, "service_name": SERVICE_NAME}
        if self._cloud is not None:
            self._cloud.log_struct(payload, labels=labels, severity=severity)
            return
        level = logging.getLevelName(severity)
        if not isinstance(level, int):
            level = logging.INFO
        self._logger.log(level, json.dumps({**labels, **payload}, sort_keys=True, default=str))
