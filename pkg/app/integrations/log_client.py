import os
from dataclasses import dataclass
from typing import Any

import requests
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from pydantic import BaseModel, ValidationError

from app.core.hashcore import Digest, as_digest
from app.core.sth import LogEntry, SignedTreeHead, load_public_key
from app.core.wtree import AuditPath
from app.errors import CodecError, LogError, LogUnreachable, RangeError, RateLimited
from app.utils.typing import (
    ConsistencyResponse,
    EntriesResponse,
    InclusionResponse,
    PublicKeyResponse,
    SignedTreeHeadModel,
    SubmitRequest,
    SubmitResponse,
)


@dataclass
class LogClientConfig:
    """Connection settings for a log's HTTP surface.

    Attributes:
        url: Base URL of the log, e.g. ``http://127.0.0.1:8080``.
        timeout: Request timeout in seconds.
    """

    url: str
    timeout: float = 15.0


class LogClient:
    """HTTP client for the log endpoints.

    Implements the same read interface as the in-process ``CTLog`` so the
    notifier, monitor and subject can follow a remote log unchanged.
    Transport failures become ``LogUnreachable``; a 400 from the log means
    the requested range or index does not exist and becomes ``RangeError``.
    """

    def __init__(self, config: LogClientConfig | None = None, session: requests.Session | None = None) -> None:
        """Initialize the client.

        Args:
            config: Connection settings. If None, loads ``LWM_LOG_URL`` from
                the environment.

        Raises:
            ValueError: When the environment variable is missing.
        """
        self.config = config or self._load_config_from_env()
        self.session = session or requests.Session()
        self.headers = {"Accept": "application/json", "Content-Type": "application/json"}

    def _load_config_from_env(self) -> LogClientConfig:
        try:
            return LogClientConfig(url=os.environ["LWM_LOG_URL"])
        except KeyError as e:
            raise ValueError(f"Required environment variable {e} is not defined") from e

    def _request(self, method: str, path: str, model: type[BaseModel], **kwargs: Any) -> Any:
        url = f"{self.config.url.rstrip('/')}{path}"
        try:
            response = self.session.request(method, url, headers=self.headers, timeout=self.config.timeout, **kwargs)
        except requests.exceptions.RequestException as e:
            raise LogUnreachable(f"{method} {url} failed: {e}") from e
        if response.status_code == 400:
            raise RangeError(_detail(response))
        if response.status_code == 429:
            raise RateLimited(_detail(response))
        try:
            response.raise_for_status()
        except requests.exceptions.HTTPError as e:
            raise LogError(f"{method} {url}: {e}") from e
        try:
            return model.model_validate(response.json())
        except (ValueError, ValidationError) as e:
            raise CodecError(f"malformed response from {url}: {e}") from e

    def get_sth(self) -> SignedTreeHead:
        return self._request("GET", "/ct/sth", SignedTreeHeadModel).to_sth()

    def get_sth_at(self, index: int) -> SignedTreeHead:
        return self._request("GET", f"/ct/sth/{index}", SignedTreeHeadModel).to_sth()

    def get_entries(self, start: int, end: int) -> list[LogEntry]:
        body = self._request("GET", "/ct/entries", EntriesResponse, params={"start": start, "end": end})
        return [e.to_entry() for e in body.entries]

    def consistency_proof(self, first: int, second: int) -> list[Digest]:
        body = self._request(
            "GET", "/ct/proof/consistency", ConsistencyResponse, params={"first": first, "second": second}
        )
        return [as_digest(d) for d in body.consistency]

    def inclusion_proof(self, seq: int, size: int) -> AuditPath:
        body = self._request("GET", "/ct/proof/inclusion", InclusionResponse, params={"seq": seq, "size": size})
        return AuditPath(body.leaf_index, tuple(as_digest(d) for d in body.audit_path))

    def submit(self, subject: str, blob: bytes) -> int:
        request = SubmitRequest(subject=subject, blob=blob)
        body = self._request("POST", "/ct/submit", SubmitResponse, json=request.model_dump(mode="json"))
        return body.seq

    def public_key(self) -> Ed25519PublicKey:
        """Fetches the log key. Only for trust-on-first-use setups."""
        return load_public_key(self._request("GET", "/ct/pubkey", PublicKeyResponse).pubkey)


def _detail(response: requests.Response) -> str:
    try:
        return str(response.json().get("detail", response.text))
    except ValueError:
        return response.text
