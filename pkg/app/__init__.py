"""Verifiable light-weight monitoring for Certificate Transparency logs."""

from app.roles.log import CTLog
from app.roles.monitor import Monitor
from app.roles.notifier import Notifier
from app.roles.subject import Subject

__all__ = ["CTLog", "Monitor", "Notifier", "Subject"]
