import pytest
import struct

from integrity_catalog.core.record_store import (
    HEADER_SIZE,
    MIN_PAGE_SIZE,
    BlockImage,
    RecordId,
    RecordStore,
)
from integrity_catalog.errors import (
    BadRecordId,
    CorruptBlock,
    EpochRegression,
    InvalidPageSize,
    IoError,
    NotInUpdateSession,
    RecordTooLarge,
)


@pytest.fixture
def store(tmp_path):
    store = RecordStore.create(tmp_path / "store.icat", MIN_PAGE_SIZE)
    yield store
    store.close()


class TestRecordStoreLifecycle:

    @pytest.mark.parametrize("page_size", [1024, 5000, 65536])
    def test_create_rejects_bad_page_size(self, tmp_path, page_size):
        """Page sizes must be powers of two inside the supported range."""
        with pytest.raises(InvalidPageSize):
            RecordStore.create(tmp_path / "bad.icat", page_size)

    def test_open_missing_file(self, tmp_path):
        """Opening a path that does not exist is an I/O error."""
        with pytest.raises(IoError):
            RecordStore.open(tmp_path / "missing.icat")

    def test_open_bad_magic(self, tmp_path):
        """A file without the store header is rejected."""
        path = tmp_path / "junk.icat"
        path.write_bytes(b"\x00" * HEADER_SIZE)
        with pytest.raises(CorruptBlock, match="magic"):
            RecordStore.open(path)

    def test_flush_persists_records(self, tmp_path, store):
        """Records written before a flush survive reopening."""
        rid = store.insert_record(b"hello")
        store.set_current_epoch(2)
        store.flush()
        store.close()

        reopened = RecordStore.open(tmp_path / "store.icat")
        try:
            assert reopened.read_record(rid) == b"hello"
            assert reopened.current_epoch == 2
            assert reopened.page_size == MIN_PAGE_SIZE
        finally:
            reopened.close()

    def test_unflushed_records_are_not_on_disk(self, tmp_path, store):
        """Mutations live in memory until flush; the file keeps the sealed image."""
        store.insert_record(b"pending")
        assert store.has_pending_writes
        assert (tmp_path / "store.icat").stat().st_size == HEADER_SIZE

    def test_discard_drops_dirty_pages(self, store):
        """discard() returns the store to its last flushed state."""
        store.insert_record(b"kept")
        store.flush()
        store.insert_record(b"dropped")
        store.discard()
        assert not store.has_pending_writes
        assert store.block_count == 1


class TestRecords:

    def test_insert_and_read(self, store):
        """Several records share one page and read back unchanged."""
        rids = [store.insert_record(f"record-{i}".encode()) for i in range(10)]
        assert {rid.block_no for rid in rids} == {0}
        assert [store.read_record(rid) for rid in rids] == [f"record-{i}".encode() for i in range(10)]

    def test_record_too_large(self, store):
        """A record larger than a page payload is refused."""
        with pytest.raises(RecordTooLarge):
            store.insert_record(b"x" * (store.max_record_size + 1))

    def test_max_size_record_fits(self, store):
        """A record of exactly max_record_size fits an empty page."""
        rid = store.insert_record(b"y" * store.max_record_size)
        assert len(store.read_record(rid)) == store.max_record_size

    def test_update_in_place(self, store):
        """A shrinking update keeps the RecordId."""
        rid = store.insert_record(b"a" * 100)
        assert store.update_record(rid, b"b" * 50) == rid
        assert store.read_record(rid) == b"b" * 50

    def test_update_relocates_and_forwards(self, store):
        """A record that outgrows its page moves; the old id forwards to the new one."""
        rid = store.insert_record(b"a" * 100)
        store.insert_record(b"f" * (store.max_record_size - 200))
        new_rid = store.update_record(rid, b"z" * 1000)

        assert new_rid != rid
        assert store.read_record(rid) == b"z" * 1000
        assert store.locate(rid) == new_rid

    def test_repeated_relocation_keeps_every_old_id_readable(self, tmp_path, store):
        """A record moved dozens of times across epochs still resolves from every id it ever had."""
        first = store.insert_record(b"a" * 100)
        store.insert_record(b"f" * (store.max_record_size - 200))
        rids = [first]
        rid = first
        for round_no in range(40):
            grown = bytes([round_no]) * 1200
            rid = store.update_record(rid, grown)
            assert rid not in rids
            rids.append(rid)
            store.insert_record(b"f" * (store.max_record_size - 1300))
            store.set_current_epoch(store.current_epoch + 1)
            store.flush()
            latest = bytes([round_no]) * 1000
            assert store.update_record(rid, latest) == rid

        for old in rids:
            assert store.read_record(old) == latest
            assert store.locate(old) == rid
        store.flush()
        store.close()

        reopened = RecordStore.open(tmp_path / "store.icat")
        try:
            assert {reopened.read_record(old) for old in rids} == {latest}
        finally:
            reopened.close()

    def test_bad_record_id(self, store):
        """Ids outside the store or past the slot directory are rejected."""
        store.insert_record(b"only")
        with pytest.raises(BadRecordId):
            store.read_record(RecordId(5, 0))
        with pytest.raises(BadRecordId):
            store.read_record(RecordId(0, 3))


class TestEpochsAndBlocks:

    def test_epoch_regression(self, store):
        """The current epoch never moves backwards."""
        store.set_current_epoch(3)
        with pytest.raises(EpochRegression):
            store.set_current_epoch(2)

    def test_blocks_of_epoch_tracks_modified_pages(self, store):
        """Rewriting a sealed record restamps its page with the open epoch."""
        rid = store.insert_record(b"v1")
        store.set_current_epoch(2)
        store.flush()
        assert store.blocks_of_epoch(1, sealed=True) == [0]

        store.update_record(rid, b"v2")
        assert store.blocks_of_epoch(2) == [0]
        assert store.blocks_of_epoch(1, sealed=True) == [0]

        store.set_current_epoch(3)
        store.flush()
        assert store.blocks_of_epoch(2, sealed=True) == [0]
        assert store.read_block(0, sealed=True).epoch_stamp == 2

    def test_write_block_requires_session(self, store):
        """Raw page writes are only legal inside a binary update."""
        image = BlockImage(0, 1, bytes(MIN_PAGE_SIZE))
        with pytest.raises(NotInUpdateSession):
            store.write_block(0, image)

    def test_write_block_copies_a_page(self, tmp_path, store):
        """A page image written in a session reproduces the source records after commit."""
        rid = store.insert_record(b"replicated")
        store.flush()
        image = store.read_block(0, sealed=True)

        replica = RecordStore.create(tmp_path / "replica.icat", MIN_PAGE_SIZE)
        try:
            replica.begin_update(1)
            replica.write_block(0, image)
            replica.commit_update()
            assert replica.read_record(rid) == b"replicated"
            assert replica.current_epoch == 2
        finally:
            replica.close()

    def test_stats(self, store):
        """stats() reports the page layout per epoch."""
        store.insert_record(b"x")
        store.flush()
        info = store.stats()
        assert info["block_count"] == 1
        assert info["page_size"] == MIN_PAGE_SIZE
        assert info["blocks_per_epoch"] == {1: 1}
        assert info["file_size"] == HEADER_SIZE + MIN_PAGE_SIZE


class TestDurability:

    def test_leftover_journal_is_rolled_back(self, tmp_path, store):
        """An interrupted flush is undone from the journal on the next open."""
        path = tmp_path / "store.icat"
        rid = store.insert_record(b"sealed")
        store.flush()
        store.close()

        image = path.read_bytes()
        journal = image[:HEADER_SIZE] + struct.pack("<Q", 0) + image[HEADER_SIZE:HEADER_SIZE + MIN_PAGE_SIZE]
        (tmp_path / "store.icat.journal").write_bytes(journal)
        # half-written flush: garbage over block 0 and an extra block
        path.write_bytes(image[:HEADER_SIZE] + b"\xab" * (2 * MIN_PAGE_SIZE))

        reopened = RecordStore.open(path)
        try:
            assert reopened.read_record(rid) == b"sealed"
            assert reopened.block_count == 1
        finally:
            reopened.close()
        assert not (tmp_path / "store.icat.journal").exists()
        assert path.stat().st_size == HEADER_SIZE + MIN_PAGE_SIZE

    def test_damaged_slot_directory(self, tmp_path, store, flip_octet):
        """A corrupted page header is detected when the page is read."""
        path = tmp_path / "store.icat"
        rid = store.insert_record(b"data")
        store.flush()
        store.close()
        flip_octet(path, HEADER_SIZE + 9)

        reopened = RecordStore.open(path)
        try:
            with pytest.raises(CorruptBlock):
                reopened.read_record(rid)
        finally:
            reopened.close()
