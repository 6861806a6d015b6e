"""HTTP surface of the log: JSON bodies with base64 binary fields."""

from fastapi import FastAPI, Query

from app.core.sth import public_key_raw
from app.roles.log import CTLog
from app.server.errors import install_error_handlers
from app.utils.typing import (
    ConsistencyResponse,
    EntriesResponse,
    InclusionResponse,
    LogEntryModel,
    PublicKeyResponse,
    SignedTreeHeadModel,
    SubmitRequest,
    SubmitResponse,
)


def create_app(log: CTLog) -> FastAPI:
    app = FastAPI(title="lwm-log")
    install_error_handlers(app)

    @app.get("/ct/sth")
    def get_sth() -> SignedTreeHeadModel:
        return SignedTreeHeadModel.from_sth(log.get_sth())

    @app.get("/ct/sth/{index}")
    def get_sth_at(index: int) -> SignedTreeHeadModel:
        return SignedTreeHeadModel.from_sth(log.get_sth_at(index))

    @app.get("/ct/entries")
    def get_entries(start: int = Query(ge=0), end: int = Query(ge=0)) -> EntriesResponse:
        entries = log.get_entries(start, end)
        return EntriesResponse(entries=[LogEntryModel.from_entry(e) for e in entries])

    @app.get("/ct/proof/consistency")
    def consistency(first: int, second: int) -> ConsistencyResponse:
        return ConsistencyResponse(consistency=list(log.consistency_proof(first, second)))

    @app.get("/ct/proof/inclusion")
    def inclusion(seq: int, size: int) -> InclusionResponse:
        path = log.inclusion_proof(seq, size)
        return InclusionResponse(leaf_index=path.leaf_index, audit_path=list(path.siblings))

    @app.post("/ct/submit")
    def submit(request: SubmitRequest) -> SubmitResponse:
        return SubmitResponse(seq=log.submit(request.subject, request.blob))

    @app.get("/ct/pubkey")
    def pubkey() -> PublicKeyResponse:
        return PublicKeyResponse(pubkey=public_key_raw(log.public_key))

    return app
