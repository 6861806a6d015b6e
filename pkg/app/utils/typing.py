"""JSON mirrors of the wire types, with base64 for every binary field."""

import base64
import binascii
from typing import Annotated, Literal

from pydantic import BaseModel, PlainSerializer, PlainValidator

from app.core.hashcore import Digest
from app.core.sth import Extension, LogEntry, SignedTreeHead


def _b64decode(value: object) -> bytes:
    if isinstance(value, bytes):
        return value
    if not isinstance(value, str):
        raise ValueError("expected a base64 string")
    try:
        return base64.b64decode(value.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as e:
        raise ValueError(f"invalid base64: {e}") from e


def _b64encode(value: bytes) -> str:
    return base64.b64encode(value).decode("ascii")


B64 = Annotated[bytes, PlainValidator(_b64decode), PlainSerializer(_b64encode, return_type=str)]


class ExtensionModel(BaseModel):
    key: str
    value: B64


class SignedTreeHeadModel(BaseModel):
    tree_size: int
    timestamp: int
    main_root: B64
    extensions: list[ExtensionModel]
    signature: B64

    @classmethod
    def from_sth(cls, sth: SignedTreeHead) -> "SignedTreeHeadModel":
        return cls(
            tree_size=sth.tree_size,
            timestamp=sth.timestamp,
            main_root=sth.main_root,
            extensions=[ExtensionModel(key=e.key, value=e.value) for e in sth.extensions],
            signature=sth.signature,
        )

    def to_sth(self) -> SignedTreeHead:
        return SignedTreeHead(
            tree_size=self.tree_size,
            timestamp=self.timestamp,
            main_root=Digest(self.main_root),
            extensions=tuple(Extension(e.key, e.value) for e in self.extensions),
            signature=self.signature,
        )


class LogEntryModel(BaseModel):
    seq: int
    subject: str
    blob: B64

    @classmethod
    def from_entry(cls, entry: LogEntry) -> "LogEntryModel":
        return cls(seq=entry.seq, subject=entry.subject, blob=entry.blob)

    def to_entry(self) -> LogEntry:
        return LogEntry(self.seq, self.subject, self.blob)


class EntriesResponse(BaseModel):
    entries: list[LogEntryModel]


class ConsistencyResponse(BaseModel):
    consistency: list[B64]


class InclusionResponse(BaseModel):
    leaf_index: int
    audit_path: list[B64]


class SubmitRequest(BaseModel):
    subject: str
    blob: B64


class SubmitResponse(BaseModel):
    seq: int


class PublicKeyResponse(BaseModel):
    pubkey: B64


class NotificationModel(BaseModel):
    sth_index: int
    sth: SignedTreeHeadModel
    proof: B64
    certificates: list[list[B64]] | None = None


class NotificationsResponse(BaseModel):
    notifications: list[NotificationModel]


class SubscribeRequest(BaseModel):
    query: str
    apex_included: bool = True
    callback_url: str | None = None
    since_index: int | None = None


class SubscriptionModel(BaseModel):
    id: str
    query: str
    apex_included: bool = True
    last_acknowledged_index: int = 0
    callback_url: str | None = None


class NotifierStateModel(BaseModel):
    resume_index: int = 0
    subscriptions: list[SubscriptionModel] = []


class SubjectStateModel(BaseModel):
    """Persisted subject state. STHs are stored in their full binary encoding."""

    query: str
    apex_included: bool = True
    expected_next_index: int
    last_timestamp: int
    freshness_window_ms: int
    skew_ms: int
    accepted: dict[int, B64] = {}


class VerdictModel(BaseModel):
    log_type: Literal["verdict"] = "verdict"
    service_name: Literal["lwm-notifier"] = "lwm-notifier"
    index: int | None
    tree_size: int
    status: Literal["ok", "failed"]
    kind: str | None = None
    detail: str = ""
