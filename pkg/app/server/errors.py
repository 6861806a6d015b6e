"""Maps package errors to HTTP status codes."""

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from app.errors import (
    BatchEvicted,
    BatchUnavailable,
    CodecError,
    LWMError,
    MalformedName,
    RangeError,
    RateLimited,
    SnapshotMismatch,
    UnknownSubscription,
)

STATUS_CODES: list[tuple[type[LWMError], int]] = [
    (RangeError, 400),
    (MalformedName, 400),
    (UnknownSubscription, 404),
    (SnapshotMismatch, 409),
    (BatchEvicted, 410),
    (BatchUnavailable, 425),
    (CodecError, 422),
    (RateLimited, 429),
]


def status_for(error: LWMError) -> int:
    for cls, status in STATUS_CODES:
        if isinstance(error, cls):
            return status
    return 500


def install_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(LWMError)
    async def _handle(request: Request, exc: LWMError) -> JSONResponse:
        return JSONResponse(
            status_code=status_for(exc),
            content={"error": type(exc).__name__, "detail": str(exc)},
        )
