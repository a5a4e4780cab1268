"""
Desk-scale benchmark: insert a batch of identifiers, seal, then run verified
searches spread over every sealed snapshot. One CSV row per snapshot.
"""
import csv
import logging
import random
import time
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Iterator, List, Optional, TextIO

from integrity_catalog.core.record_store import DEFAULT_PAGE_SIZE
from integrity_catalog.core.treap_pad import MembershipProof, TreapPAD, verify_absence, verify_proof
from integrity_catalog.errors import KeyExists, KeyTooLarge

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "snapshot_id", "inserts", "avg_insert_us", "avg_snapshot_us_per_elem",
    "searches", "avg_search_us", "file_size_bytes",
]


@dataclass
class BenchConfig:
    keys_per_snapshot: int = 50_000
    snapshot_count: int = 10
    searches_per_snapshot: int = 10_000
    skip_no: int = 0
    page_size: int = DEFAULT_PAGE_SIZE
    hash_algorithm: str = "sha256"
    input_path: Optional[Path] = None
    seed: int = 0


@dataclass
class BenchRow:
    snapshot_id: int
    inserts: int
    avg_insert_us: float
    avg_snapshot_us_per_elem: float
    searches: int
    avg_search_us: float
    file_size_bytes: int

    def as_csv(self) -> List[str]:
        return [
            str(self.snapshot_id), str(self.inserts), f"{self.avg_insert_us:.3f}",
            f"{self.avg_snapshot_us_per_elem:.3f}", str(self.searches), f"{self.avg_search_us:.3f}",
            str(self.file_size_bytes),
        ]


def identifiers(config: BenchConfig, rng: random.Random) -> Iterator[bytes]:
    """Lines of the input file, or synthetic URNs when none is given."""
    if config.input_path is not None:
        with open(config.input_path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    yield line.encode("utf-8")
        return
    while True:
        yield f"urn:bench:{rng.getrandbits(64):016x}".encode("ascii")


def run_bench(config: BenchConfig, catalog_path: Path) -> List[BenchRow]:
    rng = random.Random(config.seed)
    pad = TreapPAD.create(catalog_path, config.page_size, config.skip_no, config.hash_algorithm)
    prefix = config.hash_algorithm.encode("ascii") + b":"
    source = identifiers(config, rng)
    keys: List[bytes] = []
    # keys[:boundaries[s - 1]] are the keys present at snapshot s
    boundaries: List[int] = []
    rows = []
    try:
        for _ in range(config.snapshot_count):
            started = time.perf_counter()
            inserted = 0
            for key in islice(source, config.keys_per_snapshot):
                value = prefix + pad.hasher.digest(key).hex().encode("ascii")
                try:
                    pad.insert(key, value)
                except (KeyExists, KeyTooLarge) as e:
                    logger.warning(f"Skipping identifier {key!r}: {e}")
                    continue
                keys.append(key)
                inserted += 1
            insert_time = time.perf_counter() - started

            started = time.perf_counter()
            view = pad.snapshot()
            snapshot_time = time.perf_counter() - started
            boundaries.append(len(keys))

            search_time, searches = _search(pad, keys, boundaries, config.searches_per_snapshot, rng)
            row = BenchRow(
                snapshot_id=view.snapshot_id,
                inserts=inserted,
                avg_insert_us=_micros(insert_time, inserted),
                avg_snapshot_us_per_elem=_micros(snapshot_time, inserted),
                searches=searches,
                avg_search_us=_micros(search_time, searches),
                file_size_bytes=catalog_path.stat().st_size,
            )
            logger.info(f"Snapshot {row.snapshot_id}: {row.inserts} inserts, {row.avg_insert_us:.1f} µs/insert, "
                        f"{row.avg_search_us:.1f} µs/search, {row.file_size_bytes} bytes")
            rows.append(row)
            if inserted == 0:
                logger.warning("Input exhausted; stopping early")
                break
    finally:
        pad.close()
    return rows


def _search(pad: TreapPAD, keys: List[bytes], boundaries: List[int], count: int, rng: random.Random):
    """Random verified lookups, each against a randomly chosen sealed snapshot."""
    if not keys:
        return 0.0, 0
    records = {sid: pad.aasl.record(sid) for sid in range(1, len(boundaries) + 1)}
    started = time.perf_counter()
    for _ in range(count):
        sid = rng.randint(1, len(boundaries))
        record = records[sid]
        present = boundaries[sid - 1]
        key = keys[rng.randrange(present)] if present else keys[0]
        proof = pad.lookup_proof(key, sid)
        if isinstance(proof, MembershipProof):
            verify_proof(proof, record.pra, pad.hasher)
        else:
            verify_absence(proof, key, record.pra, pad.hasher)
    return time.perf_counter() - started, count


def _micros(seconds: float, count: int) -> float:
    return seconds * 1e6 / count if count else 0.0


def write_csv(rows: List[BenchRow], out: TextIO):
    writer = csv.writer(out)
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv())
