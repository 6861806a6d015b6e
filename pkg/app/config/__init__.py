from app.config.settings import (
    BenchSettings,
    DemoSettings,
    LogSettings,
    MonitorSettings,
    NotifierSettings,
    SubjectSettings,
    TelemetrySettings,
    load_settings,
)

__all__ = [
    "BenchSettings",
    "DemoSettings",
    "LogSettings",
    "MonitorSettings",
    "NotifierSettings",
    "SubjectSettings",
    "TelemetrySettings",
    "load_settings",
]
