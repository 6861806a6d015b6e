import os
from dataclasses import dataclass
from typing import Any

import requests
from pydantic import BaseModel, ValidationError

from app.errors import (
    BatchEvicted,
    BatchUnavailable,
    CodecError,
    NotifierError,
    NotifierUnreachable,
    SnapshotMismatch,
    UnknownSubscription,
)
from app.roles.notifier import Notification
from app.utils.typing import (
    NotificationModel,
    NotificationsResponse,
    SubscribeRequest,
    SubscriptionModel,
)

_ERRORS: dict[int, type[NotifierError]] = {
    404: UnknownSubscription,
    409: SnapshotMismatch,
    410: BatchEvicted,
    425: BatchUnavailable,
}


@dataclass
class NotifierClientConfig:
    url: str
    timeout: float = 15.0


class NotifierClient:
    """Pull client for a notifier.

    Status codes the notifier uses for its own errors are mapped back to the
    same exceptions the in-process ``Notifier`` raises.
    """

    def __init__(self, config: NotifierClientConfig | None = None, session: requests.Session | None = None) -> None:
        self.config = config or self._load_config_from_env()
        self.session = session or requests.Session()

    def _load_config_from_env(self) -> NotifierClientConfig:
        try:
            return NotifierClientConfig(url=os.environ["LWM_NOTIFIER_URL"])
        except KeyError as e:
            raise ValueError(f"Required environment variable {e} is not defined") from e

    def _request(self, method: str, path: str, model: type[BaseModel] | None, **kwargs: Any) -> Any:
        url = f"{self.config.url.rstrip('/')}{path}"
        try:
            response = self.session.request(method, url, timeout=self.config.timeout, **kwargs)
        except requests.exceptions.RequestException as e:
            raise NotifierUnreachable(f"{method} {url} failed: {e}") from e
        error = _ERRORS.get(response.status_code)
        if error is not None:
            raise error(response.text)
        try:
            response.raise_for_status()
        except requests.exceptions.HTTPError as e:
            raise NotifierError(f"{method} {url}: {e}") from e
        if model is None:
            return None
        try:
            return model.model_validate(response.json())
        except (ValueError, ValidationError) as e:
            raise CodecError(f"malformed response from {url}: {e}") from e

    def subscribe(
        self,
        query: str,
        apex_included: bool = True,
        callback_url: str | None = None,
        since_index: int | None = None,
    ) -> SubscriptionModel:
        request = SubscribeRequest(
            query=query, apex_included=apex_included, callback_url=callback_url, since_index=since_index
        )
        return self._request("POST", "/lwm/subscribe", SubscriptionModel, json=request.model_dump(mode="json"))

    def unsubscribe(self, subscription_id: str) -> None:
        self._request("DELETE", f"/lwm/subscribe/{subscription_id}", None)

    def whats_new(self, subscription_id: str, since_index: int) -> list[Notification]:
        body = self._request(
            "GET", "/lwm/new", NotificationsResponse, params={"id": subscription_id, "since": since_index}
        )
        return [Notification.from_model(n) for n in body.notifications]

    def notify(self, subscription_id: str, sth_index: int) -> Notification:
        body = self._request(
            "GET", "/lwm/notification", NotificationModel, params={"id": subscription_id, "sth_index": sth_index}
        )
        return Notification.from_model(body)
