import pytest
import csv
import io

from integrity_catalog.bench import CSV_COLUMNS, BenchConfig, run_bench, write_csv
from integrity_catalog.core.record_store import MIN_PAGE_SIZE
from integrity_catalog.core.treap_pad import TreapPAD


def small(**changes):
    settings = dict(keys_per_snapshot=40, snapshot_count=3, searches_per_snapshot=25, page_size=MIN_PAGE_SIZE)
    settings.update(changes)
    return BenchConfig(**settings)


def pras(path):
    pad = TreapPAD.open(path)
    try:
        return [pad.aasl.record(sid).pra for sid in range(1, pad.latest_snapshot + 1)]
    finally:
        pad.close()


class TestRunBench:

    def test_one_row_per_snapshot(self, tmp_path):
        """Each snapshot reports its inserts, searches and the file size after sealing."""
        rows = run_bench(small(), tmp_path / "bench.icat")
        assert [row.snapshot_id for row in rows] == [1, 2, 3]
        assert all(row.inserts == 40 and row.searches == 25 for row in rows)
        sizes = [row.file_size_bytes for row in rows]
        assert sizes == sorted(sizes)
        assert sizes[-1] == (tmp_path / "bench.icat").stat().st_size

    def test_deterministic_trees(self, tmp_path):
        """The same seed builds the same trees: every snapshot has the same PRA."""
        run_bench(small(seed=3), tmp_path / "a.icat")
        run_bench(small(seed=3), tmp_path / "b.icat")
        assert pras(tmp_path / "a.icat") == pras(tmp_path / "b.icat")

    def test_skip_factor(self, tmp_path):
        """A skip factor trades cached authenticators for recomputation; searches still verify."""
        rows = run_bench(small(skip_no=2), tmp_path / "bench.icat")
        assert len(rows) == 3

    def test_input_file(self, tmp_path):
        """Identifiers come from the file; duplicates are skipped and the run stops when it is exhausted."""
        source = tmp_path / "ids.txt"
        source.write_text("urn:a\nurn:b\nurn:a\n\nurn:c\nurn:d\n")
        rows = run_bench(small(keys_per_snapshot=3, snapshot_count=5, input_path=source), tmp_path / "bench.icat")
        assert [row.inserts for row in rows] == [2, 2, 0]


class TestCsv:

    def test_columns(self, tmp_path):
        rows = run_bench(small(snapshot_count=2), tmp_path / "bench.icat")
        out = io.StringIO()
        write_csv(rows, out)
        parsed = list(csv.reader(io.StringIO(out.getvalue())))
        assert parsed[0] == CSV_COLUMNS
        assert [line[0] for line in parsed[1:]] == ["1", "2"]
        assert all(len(line) == len(CSV_COLUMNS) for line in parsed)


class TestThroughput:

    @pytest.mark.slow
    def test_half_million_keys(self, tmp_path):
        """50 000 identifiers per snapshot over ten snapshots."""
        rows = run_bench(BenchConfig(searches_per_snapshot=1000), tmp_path / "bench.icat")
        assert sum(row.inserts for row in rows) == 500_000
        assert all(row.avg_search_us > 0 for row in rows)
