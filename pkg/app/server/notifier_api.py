"""HTTP surface of the notifier."""

from fastapi import FastAPI, Response

from app.roles.notifier import Notifier
from app.server.errors import install_error_handlers
from app.utils.typing import (
    NotificationModel,
    NotificationsResponse,
    SubscribeRequest,
    SubscriptionModel,
)


def create_app(notifier: Notifier) -> FastAPI:
    app = FastAPI(title="lwm-notifier")
    install_error_handlers(app)

    @app.post("/lwm/subscribe")
    def subscribe(request: SubscribeRequest) -> SubscriptionModel:
        sub = notifier.subscribe(
            request.query,
            apex_included=request.apex_included,
            callback_url=request.callback_url,
            since_index=request.since_index,
        )
        return sub.to_model()

    @app.delete("/lwm/subscribe/{subscription_id}", status_code=204)
    def unsubscribe(subscription_id: str) -> Response:
        notifier.unsubscribe(subscription_id)
        return Response(status_code=204)

    @app.get("/lwm/new")
    def whats_new(id: str, since: int) -> NotificationsResponse:
        notifications = notifier.whats_new(id, since)
        return NotificationsResponse(notifications=[n.to_model() for n in notifications])

    @app.get("/lwm/notification")
    def notification(id: str, sth_index: int) -> NotificationModel:
        return notifier.notify(id, sth_index).to_model()

    return app
