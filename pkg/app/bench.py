"""Desk-scale benchmark of batch tree construction, proofs and bandwidth.

Batches of size n hold the n most popular names of a rank,domain corpus, each
with one 1500-byte certificate. Every row times snapshot creation, membership
and non-membership proofs, and a whole-TLD query over the same batch.
"""

from __future__ import annotations

import csv
import logging
import math
import random
import statistics
import sys
import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from app.config.settings import BenchSettings
from app.core import hashcore, wtree
from app.core.omega import normalize, parse_query
from app.errors import ConfigError, MalformedName

logger = logging.getLogger(__name__)

CERTIFICATE_SIZE = 1500
BLOB_POOL_SIZE = 256
MEDIAN_BATCH = 22818
DAY_MS = 86_400_000

_TLDS = [
    ("com", 48), ("org", 6), ("net", 6), ("ru", 5), ("de", 5), ("co.uk", 3),
    ("jp", 3), ("br", 3), ("fr", 2), ("it", 2), ("in", 2), ("pl", 2),
    ("io", 2), ("cn", 2), ("es", 1), ("nl", 1), ("au", 1), ("ca", 1),
    ("info", 1), ("edu", 1),
]  # fmt: skip
_SYLLABLES = [
    "ka", "lo", "mi", "ne", "ra", "si", "to", "vu", "ze", "bo", "da", "fi",
    "gu", "he", "jo", "pa", "qu", "te", "wi", "xo", "an", "el", "in", "or",
]  # fmt: skip


@dataclass
class BenchRow:
    size: int
    build_s: float
    member_prove_s: float
    member_verify_s: float
    nonmember_prove_s: float
    nonmember_verify_s: float
    member_proof_bytes: int
    nonmember_proof_bytes: int
    overhead_bytes: int
    siblings: int
    tld_query: str
    tld_matches: int
    tld_prove_s: float
    tld_verify_s: float

    @property
    def tld_ratio(self) -> float:
        """TLD verification time over the build time of a batch of the matched size."""
        same_size_build = self.build_s * self.tld_matches / self.size
        return self.tld_verify_s / same_size_build if same_size_build else math.inf


COLUMNS = [f.name for f in fields(BenchRow)]


def load_corpus(path: Path) -> list[str]:
    """Reads an Alexa-style ``rank,domain`` CSV in rank order.

    Raises:
        ConfigError: If the file cannot be read or holds no usable names.
    """
    names: list[str] = []
    seen: set[str] = set()
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.reader(f):
                if len(row) < 2:
                    continue
                try:
                    name = normalize(row[1])
                except MalformedName:
                    continue
                if name not in seen:
                    seen.add(name)
                    names.append(name)
    except OSError as e:
        raise ConfigError(f"Cannot read corpus {path}: {e}") from e
    if not names:
        raise ConfigError(f"Corpus {path} holds no valid domain names")
    return names


def synthetic_corpus(count: int, seed: int = 0) -> list[str]:
    """Popularity-ranked synthetic registrable domains with a realistic TLD mix."""
    rng = random.Random(seed)
    tlds = [t for t, _ in _TLDS]
    weights = [w for _, w in _TLDS]
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < count:
        label = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 4)))
        if rng.random() < 0.08:
            label += "-" + rng.choice(_SYLLABLES) * 2
        name = f"{label}.{rng.choices(tlds, weights)[0]}"
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def blob_pool(seed: int = 0, size: int = BLOB_POOL_SIZE) -> list[bytes]:
    rng = random.Random(seed)
    return [rng.randbytes(CERTIFICATE_SIZE) for _ in range(size)]


def batch_entries(names: Sequence[str], pool: Sequence[bytes]) -> dict[str, list[bytes]]:
    return {name: [pool[i % len(pool)]] for i, name in enumerate(names)}


def median_time(fn: Callable[[], object], repeats: int) -> float:
    samples = []
    for _ in range(max(repeats, 1)):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def bench_size(names: Sequence[str], pool: Sequence[bytes], size: int, repeats: int, seed: int = 0) -> BenchRow:
    """Times one batch size.

    Raises:
        ConfigError: If the corpus has fewer than ``size`` names.
    """
    if len(names) < size:
        raise ConfigError(f"corpus has {len(names)} names, batch size {size} requested")
    rng = random.Random(seed)
    entries = batch_entries(names[:size], pool)
    constant = hashcore.new_constant()
    build_repeats = max(1, min(5, repeats // 40))
    build_s = median_time(lambda: wtree.build(constant, entries), build_repeats)
    tree = wtree.build(constant, entries)
    snap = tree.snapshot()

    member = parse_query(tree.names[rng.randrange(tree.size)])
    member_proof = tree.prove(member)
    absent = parse_query(f"*.lwm-absent-{rng.randrange(1 << 30)}.com")
    absent_proof = tree.prove(absent)
    tld = parse_query("*.com")
    tld_proof = tree.prove(tld)
    tld_repeats = max(1, min(5, repeats // 40))

    return BenchRow(
        size=size,
        build_s=build_s,
        member_prove_s=median_time(lambda: tree.prove(member), repeats),
        member_verify_s=median_time(lambda: wtree.verify(snap, member, member_proof), repeats),
        nonmember_prove_s=median_time(lambda: tree.prove(absent), repeats),
        nonmember_verify_s=median_time(lambda: wtree.verify(snap, absent, absent_proof), repeats),
        member_proof_bytes=len(member_proof.encode()),
        nonmember_proof_bytes=len(absent_proof.encode()),
        overhead_bytes=member_proof.overhead_bytes(),
        siblings=max(member_proof.sibling_count(), absent_proof.sibling_count()),
        tld_query=str(tld),
        tld_matches=len(tld_proof.matches),
        tld_prove_s=median_time(lambda: tree.prove(tld), tld_repeats),
        tld_verify_s=median_time(lambda: wtree.verify(snap, tld, tld_proof), tld_repeats),
    )


def throughput(tree: wtree.WildTree, seconds: float, seed: int = 0) -> float:
    """Non-membership notifications (proof plus encoding) per second on one core."""
    rng = random.Random(seed)
    queries = [parse_query(f"*.lwm-absent-{rng.randrange(1 << 30)}.com") for _ in range(64)]
    done = 0
    start = time.perf_counter()
    deadline = start + seconds
    while time.perf_counter() < deadline:
        for query in queries:
            tree.prove(query).encode()
        done += len(queries)
    return done / (time.perf_counter() - start)


@dataclass
class BandwidthReport:
    batch_size: int
    overhead_bytes: int
    sths_per_day: float
    overhead_per_day_bytes: float
    full_batch_bytes: int
    saving_per_sth_bytes: int
    notifications_per_hour: float
    notifier_outbound_bytes_per_s: float


def bandwidth(batch_size: int, overhead_bytes: int, sth_interval_ms: int, proofs_per_second: float) -> BandwidthReport:
    """Bandwidth arithmetic for one log, one subject and one notifier core."""
    sths_per_day = DAY_MS / sth_interval_ms
    full_batch = batch_size * CERTIFICATE_SIZE
    return BandwidthReport(
        batch_size=batch_size,
        overhead_bytes=overhead_bytes,
        sths_per_day=sths_per_day,
        overhead_per_day_bytes=overhead_bytes * sths_per_day,
        full_batch_bytes=full_batch,
        saving_per_sth_bytes=full_batch - overhead_bytes,
        notifications_per_hour=proofs_per_second * 3600,
        notifier_outbound_bytes_per_s=proofs_per_second * overhead_bytes,
    )


def check(rows: Sequence[BenchRow], proofs_per_second: float | None, median_overhead: int | None) -> list[str]:
    """Evaluates the ratio-based bounds. Returns the failures."""
    by_size = {row.size: row for row in rows}
    failures = []
    for row in rows:
        bound = 2 * math.ceil(math.log2(row.size)) if row.size > 1 else 0
        if row.siblings > bound:
            failures.append(f"n={row.size}: {row.siblings} siblings > {bound}")
    if 1 << 17 in by_size and 1 << 14 in by_size:
        ratio = by_size[1 << 17].build_s / by_size[1 << 14].build_s
        if not 4 <= ratio <= 16:
            failures.append(f"build time ratio 2^17/2^14 = {ratio:.2f} outside [4, 16]")
    if 1 << 17 in by_size and 1 << 10 in by_size:
        ratio = by_size[1 << 17].nonmember_prove_s / by_size[1 << 10].nonmember_prove_s
        if ratio > 5:
            failures.append(f"non-membership proof ratio 2^17/2^10 = {ratio:.2f} > 5")
    if 1 << 17 in by_size:
        row = by_size[1 << 17]
        for label, value in (("membership", row.member_verify_s), ("non-membership", row.nonmember_verify_s)):
            if value >= 1e-3:
                failures.append(f"{label} verification at 2^17 took {value * 1e3:.2f} ms")
        if row.tld_prove_s >= 1:
            failures.append(f"{row.tld_query} proof took {row.tld_prove_s:.2f} s")
        if not 0.5 <= row.tld_ratio <= 10:
            failures.append(f"{row.tld_query} verification/build ratio {row.tld_ratio:.2f} outside [0.5, 10]")
    if median_overhead is not None and median_overhead > 1200:
        failures.append(f"proof overhead at n={MEDIAN_BATCH} is {median_overhead} bytes > 1200")
    if proofs_per_second is not None and proofs_per_second < 1e4:
        failures.append(f"throughput {proofs_per_second:.0f} proofs/s < 10000")
    return failures


def write_csv(rows: Sequence[BenchRow], out: Path) -> None:
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def format_table(rows: Sequence[BenchRow]) -> Iterator[str]:
    yield (
        f"{'n':>8} {'build ms':>10} {'mem gen us':>11} {'mem ver us':>11} "
        f"{'non gen us':>11} {'non ver us':>11} {'proof B':>8} {'tld hits':>9} {'tld ver ms':>11}"
    )
    for r in rows:
        yield (
            f"{r.size:>8} {r.build_s * 1e3:>10.2f} {r.member_prove_s * 1e6:>11.1f} "
            f"{r.member_verify_s * 1e6:>11.1f} {r.nonmember_prove_s * 1e6:>11.1f} "
            f"{r.nonmember_verify_s * 1e6:>11.1f} {r.member_proof_bytes:>8} "
            f"{r.tld_matches:>9} {r.tld_verify_s * 1e3:>11.2f}"
        )


def run_bench(settings: BenchSettings) -> int:
    """Runs the benchmark and prints the report. Returns the exit status."""
    largest = max(settings.sizes + ([MEDIAN_BATCH] if settings.check else []))
    if settings.corpus is not None:
        names = load_corpus(settings.corpus)
    elif settings.synthetic:
        names = synthetic_corpus(largest)
    else:
        raise ConfigError("bench needs --corpus or --synthetic")
    pool = blob_pool()

    rows = []
    for size in sorted(settings.sizes):
        logger.info(f"Benchmarking batch size {size}")
        rows.append(bench_size(names, pool, size, settings.repeats))
    for line in format_table(rows):
        print(line)
    if settings.out is not None:
        write_csv(rows, settings.out)
        logger.info(f"Wrote {settings.out}")

    largest_tree = wtree.build(hashcore.new_constant(), batch_entries(names[: max(settings.sizes)], pool))
    rate = throughput(largest_tree, settings.throughput_seconds)
    median = bench_size(names, pool, MEDIAN_BATCH, 20) if len(names) >= MEDIAN_BATCH else None
    report = bandwidth(
        median.size if median else rows[-1].size,
        median.overhead_bytes if median else rows[-1].overhead_bytes,
        settings.sth_interval_ms,
        rate,
    )
    print(f"non-membership notifications: {rate:,.0f}/s, {report.notifications_per_hour:,.0f}/h per core")
    print(
        f"proof overhead at n={report.batch_size}: {report.overhead_bytes} B per STH, "
        f"{report.overhead_per_day_bytes / 1024:.1f} KiB per day; "
        f"full batch would be {report.full_batch_bytes / 1e6:.1f} MB"
    )
    print(f"notifier outbound at that rate: {report.notifier_outbound_bytes_per_s / 1e6:.1f} MB/s")

    if settings.check:
        failures = check(rows, rate, median.overhead_bytes if median else None)
        for failure in failures:
            print(f"FAIL {failure}", file=sys.stderr)
        return 1 if failures else 0
    return 0
