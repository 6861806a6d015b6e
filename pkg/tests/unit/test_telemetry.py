import json
import logging

import pytest
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import SimpleSpanProcessor

from app.utils.telemetry import SERVICE_NAME, EventLogger
from app.utils.tracing import SpanLogExporter


def _records(caplog: pytest.LogCaptureFixture, name: str) -> list[dict]:
    return [json.loads(r.getMessage()) for r in caplog.records if r.name == name]


def test_log_struct_writes_one_json_line(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.DEBUG)
    EventLogger("lwm.test").log_struct({"index": 3, "size": b"x"}, severity="WARNING", kind="sth_issued")
    (record,) = [r for r in caplog.records if r.name == "lwm.test"]
    assert record.levelno == logging.WARNING
    payload = json.loads(record.getMessage())
    assert payload == {"index": 3, "size": "b'x'", "type": "sth_issued", "service_name": SERVICE_NAME}


def test_unknown_severity_falls_back_to_info(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.DEBUG)
    EventLogger("lwm.test").log_struct({}, severity="NOTICE")
    (record,) = [r for r in caplog.records if r.name == "lwm.test"]
    assert record.levelno == logging.INFO


def test_spans_become_telemetry_events(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.DEBUG)
    provider = TracerProvider()
    provider.add_span_processor(SimpleSpanProcessor(SpanLogExporter(EventLogger("lwm.spans"))))
    with provider.get_tracer(__name__).start_as_current_span("notifier.notify") as span:
        span.set_attribute("lwm.batch_size", 7)
    (event,) = _records(caplog, "lwm.spans")
    assert event["type"] == "lwm_telemetry"
    assert event["name"] == "notifier.notify"
    assert event["attributes"] == {"lwm.batch_size": 7}
    assert event["duration_us"] >= 0
