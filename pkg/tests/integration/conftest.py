from collections.abc import Callable, Iterator
from typing import Any

import pytest
import requests
from fastapi import FastAPI
from fastapi.testclient import TestClient
from requests.adapters import BaseAdapter
from requests.structures import CaseInsensitiveDict

from app.config import LogSettings, NotifierSettings
from app.integrations.log_client import LogClient, LogClientConfig
from app.integrations.notifier_client import NotifierClient, NotifierClientConfig
from app.roles.log import CTLog
from app.roles.notifier import Notifier
from app.server import log_api, notifier_api

BASE_URL = "http://testserver"
INTERVAL = 1_000
T0 = 1_700_000_000_000


class AppAdapter(BaseAdapter):
    """Serves ``requests`` sessions from an in-process FastAPI app."""

    def __init__(self, app: FastAPI) -> None:
        super().__init__()
        self.client = TestClient(app, base_url=BASE_URL)

    def send(self, request: requests.PreparedRequest, **kwargs: Any) -> requests.Response:
        reply = self.client.request(
            request.method or "GET",
            request.path_url,
            content=request.body,
            headers=dict(request.headers),
        )
        response = requests.Response()
        response.status_code = reply.status_code
        response._content = reply.content
        response.headers = CaseInsensitiveDict(reply.headers)
        response.encoding = reply.encoding
        response.url = request.url or ""
        response.request = request
        return response

    def close(self) -> None:
        self.client.close()


def session_for(app: FastAPI) -> requests.Session:
    session = requests.Session()
    session.mount(BASE_URL, AppAdapter(app))
    return session


@pytest.fixture
def log() -> CTLog:
    return CTLog(LogSettings(interval_ms=INTERVAL))


@pytest.fixture
def log_client(log: CTLog) -> Iterator[LogClient]:
    session = session_for(log_api.create_app(log))
    yield LogClient(LogClientConfig(url=BASE_URL), session=session)
    session.close()


@pytest.fixture
def notifier(log_client: LogClient) -> Notifier:
    return Notifier(log_client, NotifierSettings(interval_ms=INTERVAL))


@pytest.fixture
def notifier_client(notifier: Notifier) -> Iterator[NotifierClient]:
    session = session_for(notifier_api.create_app(notifier))
    yield NotifierClient(NotifierClientConfig(url=BASE_URL), session=session)
    session.close()


@pytest.fixture
def serve_notifier() -> Iterator[Callable[[Notifier], NotifierClient]]:
    """Wraps any notifier in its HTTP surface and returns a client for it."""
    sessions: list[requests.Session] = []

    def serve(notifier: Notifier) -> NotifierClient:
        session = session_for(notifier_api.create_app(notifier))
        sessions.append(session)
        return NotifierClient(NotifierClientConfig(url=BASE_URL), session=session)

    yield serve
    for session in sessions:
        session.close()
