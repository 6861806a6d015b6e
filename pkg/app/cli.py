"""Command-line entry point: ``lwm <role> ...``.

Every command reads its role's settings through ``load_settings`` so a TOML
file, ``LWM_*`` variables and flags can be mixed; flags win.
"""

import argparse
import json
import logging
import sys
import threading
from pathlib import Path
from typing import Any

import uvicorn
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from app.bench import run_bench
from app.config.settings import (
    BenchSettings,
    DemoSettings,
    LogSettings,
    MonitorSettings,
    NotifierSettings,
    SubjectSettings,
    TelemetrySettings,
    load_settings,
)
from app.core.sth import load_public_key, public_key_pem
from app.demo import FAULTS, run_demo
from app.errors import ConfigError, LWMError, RateLimited, Rejection
from app.integrations.log_client import LogClient, LogClientConfig
from app.integrations.notifier_client import NotifierClient, NotifierClientConfig
from app.roles.log import CTLog, now_ms
from app.roles.monitor import Monitor
from app.roles.notifier import Notification, Notifier
from app.roles.subject import (
    STATE_FILE,
    Subject,
    export_records,
    import_records,
    load_evidence,
    verify_evidence,
)
from app.roles.watcher import SubjectWatcher, resume_subscription
from app.server import log_api, notifier_api
from app.utils.telemetry import setup_logging
from app.utils.tracing import setup_tracing
from app.utils.typing import NotificationModel

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace, names: list[str]) -> dict[str, Any]:
    return {name: getattr(args, name, None) for name in names}


def _load_key(path: Path) -> Ed25519PublicKey:
    try:
        return load_public_key(Path(path).read_bytes())
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read public key {path}: {e}") from e


def _public_key(path: Path | None, log: LogClient) -> Ed25519PublicKey:
    if path is not None:
        return _load_key(path)
    logger.warning("No --pubkey given, trusting the key served by the log")
    return log.public_key()


def _issue_loop(log: CTLog, stop: threading.Event) -> None:
    interval_s = log.settings.interval_ms / 1000
    while not stop.is_set():
        try:
            log.issue_sth()
            delay = interval_s
        except RateLimited:
            latest = log.get_sth()
            delay = max(latest.timestamp + log.settings.interval_ms - now_ms(), 0) / 1000
        stop.wait(delay)


def cmd_log_serve(args: argparse.Namespace) -> int:
    settings = load_settings(LogSettings, args.config, _overrides(args, ["data_dir", "interval_ms", "host", "port"]))
    log = CTLog.open(settings)
    stop = threading.Event()
    issuer = threading.Thread(target=_issue_loop, args=(log, stop), name="sth-issuer", daemon=True)
    issuer.start()
    try:
        uvicorn.run(log_api.create_app(log), host=settings.host, port=settings.port)
    finally:
        stop.set()
    return 0


def cmd_log_pubkey(args: argparse.Namespace) -> int:
    settings = load_settings(LogSettings, args.config, _overrides(args, ["data_dir"]))
    if settings.data_dir is None:
        raise ConfigError("--data-dir is required to read the log key")
    sys.stdout.buffer.write(public_key_pem(CTLog.open(settings).public_key))
    return 0


def cmd_notifier_serve(args: argparse.Namespace) -> int:
    settings = load_settings(
        NotifierSettings,
        args.config,
        _overrides(
            args,
            ["log_url", "interval_ms", "poll_period_ms", "retention", "audit", "proofs_only", "state_path", "host", "port"],
        ),
    )
    notifier = Notifier.open(LogClient(LogClientConfig(settings.log_url)), settings)
    stop = threading.Event()
    poller = threading.Thread(target=notifier.run, args=(stop,), name="notifier-poll", daemon=True)
    poller.start()
    try:
        uvicorn.run(notifier_api.create_app(notifier), host=settings.host, port=settings.port)
    finally:
        stop.set()
        notifier.save_state()
    return 0


_SUBJECT_FIELDS = ["query", "apex_included", "log_url", "notifier_url", "pubkey", "state_dir", "poll_period_ms"]


def cmd_subject_watch(args: argparse.Namespace) -> int:
    settings = load_settings(SubjectSettings, args.config, _overrides(args, _SUBJECT_FIELDS))
    if not settings.query and not (Path(settings.state_dir) / STATE_FILE).exists():
        raise ConfigError("--query is required on first run")
    log = LogClient(LogClientConfig(settings.log_url))
    subject = Subject.open(_public_key(settings.pubkey, log), settings)
    if not subject.bootstrapped:
        logger.warning("No trusted STH in the state directory, bootstrapping from the log's latest")
        subject.bootstrap(log.get_sth())
    notifier = NotifierClient(NotifierClientConfig(settings.notifier_url))
    subscription_id = resume_subscription(notifier, subject, settings.state_dir)
    watcher = SubjectWatcher(subject, notifier, subscription_id, log)
    stop = threading.Event()
    try:
        watcher.run(stop, settings.poll_period_ms / 1000)
    except KeyboardInterrupt:
        stop.set()
    if watcher.halted:
        logger.error(f"Stopped on log misbehaviour, evidence in {settings.state_dir}")
        return 1
    return 0


def cmd_subject_verify(args: argparse.Namespace) -> int:
    settings = load_settings(SubjectSettings, args.config, _overrides(args, _SUBJECT_FIELDS))
    if settings.pubkey is None:
        raise ConfigError("--pubkey is required for one-shot verification")
    if not (Path(settings.state_dir) / STATE_FILE).exists():
        raise ConfigError(f"No subject state in {settings.state_dir}; run `lwm subject watch` first")
    subject = Subject.open(_load_key(settings.pubkey), settings)
    if not subject.bootstrapped:
        raise ConfigError(f"No accepted STH in {settings.state_dir}; run `lwm subject watch` first")
    try:
        raw = json.loads(Path(args.notification).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read notification {args.notification}: {e}") from e
    notification = Notification.from_model(NotificationModel.model_validate(raw))
    try:
        matches = subject.verify_notification(notification)
    except Rejection as e:
        print(f"rejected: {e.kind}: {e}")
        return 1
    for name, blobs in matches:
        print(f"{name}\t{len(blobs)} certificates")
    return 0


def cmd_evidence_export(args: argparse.Namespace) -> int:
    settings = load_settings(SubjectSettings, args.config, _overrides(args, ["state_dir"]))
    records = load_evidence(settings.state_dir)
    data = export_records(records)
    if args.out is None:
        sys.stdout.buffer.write(data)
    else:
        Path(args.out).write_bytes(data)
        logger.info(f"Wrote {len(records)} evidence records to {args.out}")
    return 0


def cmd_evidence_verify(args: argparse.Namespace) -> int:
    public_key = _load_key(args.pubkey)
    records = import_records(Path(args.file).read_bytes())
    failed = 0
    for evidence in records:
        valid = verify_evidence(evidence, public_key)
        failed += not valid
        print(f"{evidence.kind.value}\t{'valid' if valid else 'INVALID'}")
    return 1 if failed else 0


def cmd_monitor(args: argparse.Namespace) -> int:
    settings = load_settings(
        MonitorSettings,
        args.config,
        _overrides(args, ["log_url", "pubkey", "from_index", "continuous", "poll_period_ms", "workers", "verdicts"]),
    )
    log = LogClient(LogClientConfig(settings.log_url))
    monitor = Monitor(log, _public_key(settings.pubkey, log), settings)
    stop = threading.Event()
    try:
        ok = monitor.run(stop)
    except KeyboardInterrupt:
        stop.set()
        ok = all(v.ok for v in monitor.verdicts)
    return 0 if ok else 1


def cmd_demo(args: argparse.Namespace) -> int:
    settings = load_settings(
        DemoSettings,
        args.config,
        _overrides(args, ["intervals", "subjects", "seed", "certs_per_interval", "interval_ms", "retention", "inject", "corpus"]),
    )
    return run_demo(settings)


def cmd_bench(args: argparse.Namespace) -> int:
    settings = load_settings(
        BenchSettings,
        args.config,
        _overrides(args, ["corpus", "synthetic", "sizes", "out", "repeats", "throughput_seconds", "check"]),
    )
    return run_bench(settings)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwm", description="Verifiable light-weight monitoring for CT logs")
    parser.add_argument("--config", type=Path, default=None, help="TOML file with one table per role")
    parser.add_argument("--log-level", default=None, help="Logging level (defaults to INFO)")
    roles = parser.add_subparsers(dest="role", required=True)

    log = roles.add_parser("log", help="Run a CT log").add_subparsers(dest="action", required=True)
    serve = log.add_parser("serve", help="Serve the log over HTTP and issue STHs")
    serve.add_argument("--data-dir", type=Path, default=None)
    serve.add_argument("--interval-ms", type=int, default=None, help="STH frequency")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.set_defaults(handler=cmd_log_serve)
    pubkey = log.add_parser("pubkey", help="Print the log's public key as PEM")
    pubkey.add_argument("--data-dir", type=Path, default=None)
    pubkey.set_defaults(handler=cmd_log_pubkey)

    notifier = roles.add_parser("notifier", help="Run a notifier").add_subparsers(dest="action", required=True)
    serve = notifier.add_parser("serve", help="Follow a log and serve notifications")
    serve.add_argument("--log-url", default=None)
    serve.add_argument("--interval-ms", type=int, default=None, help="The log's STH frequency")
    serve.add_argument("--poll-period-ms", type=int, default=None)
    serve.add_argument("--retention", type=int, default=None, help="Number of batches kept")
    serve.add_argument("--no-audit", dest="audit", action="store_false", default=None)
    serve.add_argument("--proofs-only", action="store_true", default=None)
    serve.add_argument("--state-path", type=Path, default=None)
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.set_defaults(handler=cmd_notifier_serve)

    subject = roles.add_parser("subject", help="Verify notifications for a domain").add_subparsers(
        dest="action", required=True
    )

    def subject_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--query", default=None, help="e.g. '*.example.com'")
        p.add_argument("--no-apex", dest="apex_included", action="store_false", default=None)
        p.add_argument("--pubkey", type=Path, default=None, help="The log's public key (PEM)")
        p.add_argument("--state-dir", type=Path, default=None)

    watch = subject.add_parser("watch", help="Pull and verify notifications until stopped")
    subject_options(watch)
    watch.add_argument("--log-url", default=None)
    watch.add_argument("--notifier-url", default=None)
    watch.add_argument("--poll-period-ms", type=int, default=None)
    watch.set_defaults(handler=cmd_subject_watch)
    verify = subject.add_parser("verify", help="Verify one notification file")
    subject_options(verify)
    verify.add_argument("--notification", type=Path, required=True)
    verify.set_defaults(handler=cmd_subject_verify)

    evidence = subject.add_parser("evidence", help="Evidence records").add_subparsers(dest="evidence", required=True)
    export = evidence.add_parser("export", help="Write the evidence journal as one file")
    export.add_argument("--state-dir", type=Path, default=None)
    export.add_argument("--out", type=Path, default=None, help="Defaults to stdout")
    export.set_defaults(handler=cmd_evidence_export)
    check = evidence.add_parser("verify", help="Re-verify exported evidence against the log key")
    check.add_argument("--file", type=Path, required=True)
    check.add_argument("--pubkey", type=Path, required=True)
    check.set_defaults(handler=cmd_evidence_verify)

    monitor = roles.add_parser("monitor", help="Audit every STH of a log")
    monitor.add_argument("--log-url", default=None)
    monitor.add_argument("--pubkey", type=Path, default=None)
    monitor.add_argument("--from-index", type=int, default=None)
    monitor.add_argument("--continuous", action="store_true", default=None)
    monitor.add_argument("--poll-period-ms", type=int, default=None)
    monitor.add_argument("--workers", type=int, default=None)
    monitor.add_argument("--verdicts", type=Path, default=None, help="Append verdicts as JSON lines")
    monitor.set_defaults(handler=cmd_monitor)

    demo = roles.add_parser("demo", help="Run every role in process")
    demo.add_argument("--intervals", type=int, default=None)
    demo.add_argument("--subjects", type=int, default=None)
    demo.add_argument("--seed", type=int, default=None)
    demo.add_argument("--certs-per-interval", type=int, default=None)
    demo.add_argument("--interval-ms", type=int, default=None)
    demo.add_argument("--retention", type=int, default=None)
    demo.add_argument("--inject", choices=sorted(FAULTS), default=None)
    demo.add_argument("--corpus", type=Path, default=None, help="rank,domain CSV")
    demo.set_defaults(handler=cmd_demo)

    bench = roles.add_parser("bench", help="Measure build, prove and verify costs")
    bench.add_argument("--corpus", type=Path, default=None, help="rank,domain CSV")
    bench.add_argument("--synthetic", action="store_true", default=None)
    bench.add_argument("--sizes", default=None, help="Comma-separated batch sizes")
    bench.add_argument("--out", type=Path, default=None, help="CSV output")
    bench.add_argument("--repeats", type=int, default=None)
    bench.add_argument("--throughput-seconds", type=float, default=None)
    bench.add_argument("--check", action="store_true", default=None)
    bench.set_defaults(handler=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        telemetry = load_settings(TelemetrySettings, args.config, {"log_level": args.log_level})
        setup_logging(telemetry)
        setup_tracing(telemetry)
        return int(args.handler(args))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except LWMError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
