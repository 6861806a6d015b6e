import json
import logging
from collections.abc import Sequence

from opentelemetry import trace
from opentelemetry.sdk.trace import ReadableSpan, TracerProvider, export
from opentelemetry.sdk.trace.export import SpanExporter, SpanExportResult

from app.config.settings import TelemetrySettings
from app.utils.telemetry import EventLogger


class SpanLogExporter(SpanExporter):
    """
    Exports finished spans as structured log records.

    Each span becomes one ``lwm_telemetry`` event carrying its name, trace and
    span ids, duration and attributes, so proof generation and audit timings
    show up next to the rest of the service logs.
    """

    def __init__(self, event_logger: EventLogger | None = None, debug: bool = False) -> None:
        """
        :param event_logger: Sink for span records
        :param debug: Also print span records to stdout
        """
        self.debug = debug
        self.events = event_logger or EventLogger(__name__)

    def export(self, spans: Sequence[ReadableSpan]) -> SpanExportResult:
        for span in spans:
            span_context = span.get_span_context()
            span_dict = json.loads(span.to_json())
            record = {
                "name": span.name,
                "trace_id": format(span_context.trace_id, "x") if span_context else None,
                "span_id": format(span_context.span_id, "x") if span_context else None,
                "duration_us": _duration_us(span),
                "attributes": span_dict.get("attributes", {}),
            }
            if self.debug:
                print(record)
            self.events.log_struct(record, severity="DEBUG", kind="lwm_telemetry")
        return SpanExportResult.SUCCESS

    def shutdown(self) -> None:
        return None


def _duration_us(span: ReadableSpan) -> float | None:
    if span.start_time is None or span.end_time is None:
        return None
    return (span.end_time - span.start_time) / 1000


def setup_tracing(settings: TelemetrySettings) -> None:
    """Installs a tracer provider when tracing is enabled."""
    if not settings.tracing:
        return
    provider = TracerProvider()
    provider.add_span_processor(export.BatchSpanProcessor(SpanLogExporter()))
    if settings.gcp_project:
        from opentelemetry.exporter.cloud_trace import CloudTraceSpanExporter

        provider.add_span_processor(
            export.BatchSpanProcessor(CloudTraceSpanExporter(project_id=settings.gcp_project))
        )
        logging.info(f"Exporting spans to Cloud Trace in project {settings.gcp_project}")
    trace.set_tracer_provider(provider)
