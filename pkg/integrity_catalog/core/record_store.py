import logging
import os
import struct
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

from integrity_catalog.errors import (
    BadBlockNo,
    BadRecordId,
    CorruptBlock,
    EpochRegression,
    InvalidPageSize,
    IoError,
    NotInUpdateSession,
    RecordTooLarge,
    StoreError,
)

logger = logging.getLogger(__name__)

MAGIC = b"ICAT"
FORMAT_VERSION = 1
HEADER_SIZE = 4096
HEADER_FORMAT = "<4sIIQQ"  # magic, format_version, page_size, block_count, current_epoch

DEFAULT_PAGE_SIZE = 16384
MIN_PAGE_SIZE = 4096
MAX_PAGE_SIZE = 32768  # free_offset and slot offsets are u16

PAGE_HEADER_FORMAT = "<QHH"  # epoch_stamp, slot_count, free_offset
PAGE_HEADER_SIZE = struct.calcsize(PAGE_HEADER_FORMAT)
SLOT_FORMAT = "<HH"  # offset, length
SLOT_SIZE = struct.calcsize(SLOT_FORMAT)
MOVED = 0xFFFF
HOMED = 0x8000  # offset flag: the record starts with the RecordId of its home slot
MIN_ALLOCATION = 8  # every slot owns room for a forwarding pointer
# Old slots forward to the home slot and the home slot to the live one; a longer chain is a cycle.
MAX_FORWARD_HOPS = 2

RECORD_ID_SIZE = 8
_BLOCK_MASK = (1 << 48) - 1


class RecordId(NamedTuple):
    block_no: int
    slot_no: int

    def encode(self) -> bytes:
        return struct.pack("<Q", (self.block_no & _BLOCK_MASK) | (self.slot_no << 48))

    @staticmethod
    def decode(raw: bytes) -> Optional["RecordId"]:
        if raw == NIL_RECORD_ID:
            return None
        (packed,) = struct.unpack("<Q", raw)
        return RecordId(packed & _BLOCK_MASK, packed >> 48)


NIL_RECORD_ID = b"\xff" * RECORD_ID_SIZE


def encode_record_id(rid: Optional[RecordId]) -> bytes:
    return NIL_RECORD_ID if rid is None else rid.encode()


class BlockImage(NamedTuple):
    block_no: int
    epoch_stamp: int
    payload: bytes


class SlottedPage:
    """
    One fixed-size block: epoch_stamp u64, slot_count u16, free_offset u16,
    a slot directory growing upward and a data heap growing downward.
    """

    def __init__(self, data: Union[bytes, bytearray]):
        self.data = bytearray(data)

    @classmethod
    def blank(cls, page_size: int, epoch_stamp: int) -> "SlottedPage":
        page = cls(bytes(page_size))
        struct.pack_into(PAGE_HEADER_FORMAT, page.data, 0, epoch_stamp, 0, page_size)
        return page

    @property
    def epoch_stamp(self) -> int:
        return struct.unpack_from("<Q", self.data, 0)[0]

    @epoch_stamp.setter
    def epoch_stamp(self, value: int):
        struct.pack_into("<Q", self.data, 0, value)

    @property
    def slot_count(self) -> int:
        return struct.unpack_from("<H", self.data, 8)[0]

    @property
    def free_offset(self) -> int:
        return struct.unpack_from("<H", self.data, 10)[0]

    def _set_counts(self, slot_count: int, free_offset: int):
        struct.pack_into("<HH", self.data, 8, slot_count, free_offset)

    def slot(self, slot_no: int):
        """(offset, length, homed) of a slot; length is MOVED for a forwarding tombstone."""
        offset, length = struct.unpack_from(SLOT_FORMAT, self.data, PAGE_HEADER_SIZE + slot_no * SLOT_SIZE)
        return offset & ~HOMED, length, bool(offset & HOMED)

    def _set_slot(self, slot_no: int, offset: int, length: int, homed: bool = False):
        struct.pack_into(SLOT_FORMAT, self.data, PAGE_HEADER_SIZE + slot_no * SLOT_SIZE,
                         offset | (HOMED if homed else 0), length)

    def free_space(self) -> int:
        return self.free_offset - (PAGE_HEADER_SIZE + self.slot_count * SLOT_SIZE)

    def add(self, record: bytes, home: Optional[RecordId] = None) -> Optional[int]:
        """Adds a record, returning its slot number, or None when the page is full."""
        stored = record if home is None else home.encode() + record
        allocation = max(len(stored), MIN_ALLOCATION)
        if self.free_space() < allocation + SLOT_SIZE:
            return None
        slot_no = self.slot_count
        start = self.free_offset - allocation
        self.data[start:start + len(stored)] = stored
        self._set_slot(slot_no, start, len(stored), home is not None)
        self._set_counts(slot_no + 1, start)
        return slot_no

    def get(self, slot_no: int) -> Union[bytes, RecordId]:
        """Returns the record octets, or the forwarding RecordId of a moved slot."""
        offset, length, homed = self.slot(slot_no)
        if length == MOVED:
            return RecordId.decode(bytes(self.data[offset:offset + RECORD_ID_SIZE]))
        if homed:
            return bytes(self.data[offset + RECORD_ID_SIZE:offset + length])
        return bytes(self.data[offset:offset + length])

    def home(self, slot_no: int) -> Optional[RecordId]:
        """The slot a relocated record was first written to, or None for a record still at home."""
        offset, length, homed = self.slot(slot_no)
        if length == MOVED or not homed:
            return None
        return RecordId.decode(bytes(self.data[offset:offset + RECORD_ID_SIZE]))

    def put(self, slot_no: int, record: bytes) -> bool:
        """Rewrites a record inside this page if it fits; False means relocation is needed."""
        offset, length, homed = self.slot(slot_no)
        homed = homed and length != MOVED
        stored = bytes(self.data[offset:offset + RECORD_ID_SIZE]) + record if homed else record
        if length != MOVED and len(stored) <= max(length, MIN_ALLOCATION):
            self.data[offset:offset + len(stored)] = stored
            self._set_slot(slot_no, offset, len(stored), homed)
            return True
        allocation = max(len(stored), MIN_ALLOCATION)
        if self.free_space() < allocation:
            return False
        start = self.free_offset - allocation
        self.data[start:start + len(stored)] = stored
        self._set_slot(slot_no, start, len(stored), homed)
        self._set_counts(self.slot_count, start)
        return True

    def mark_moved(self, slot_no: int, target: RecordId):
        offset, _, _ = self.slot(slot_no)
        self.data[offset:offset + RECORD_ID_SIZE] = target.encode()
        self._set_slot(slot_no, offset, MOVED)

    def check(self, block_no: int):
        """Validates the slot directory; raises CorruptBlock on any inconsistency."""
        page_size = len(self.data)
        slot_count, free_offset = self.slot_count, self.free_offset
        directory_end = PAGE_HEADER_SIZE + slot_count * SLOT_SIZE
        if not directory_end <= free_offset <= page_size:
            raise CorruptBlock(f"Block {block_no}: slot directory overruns heap ({slot_count} slots, heap at {free_offset}).")
        extents = []
        for slot_no in range(slot_count):
            offset, length, homed = self.slot(slot_no)
            if homed and (length == MOVED or length < RECORD_ID_SIZE):
                raise CorruptBlock(f"Block {block_no}: slot {slot_no} has a malformed home reference.")
            extent = RECORD_ID_SIZE if length == MOVED else max(length, MIN_ALLOCATION)
            if offset < free_offset or offset + extent > page_size:
                raise CorruptBlock(f"Block {block_no}: slot {slot_no} points outside the heap.")
            extents.append((offset, offset + extent))
        extents.sort()
        for (_, end), (start, _) in zip(extents, extents[1:]):
            if start < end:
                raise CorruptBlock(f"Block {block_no}: overlapping records in slot directory.")


class RecordStore:
    """
    Grow-only variable-length record manager over fixed-size blocks in a single file.

    Mutations of the open epoch are held in memory as dirty pages and reach the disk
    only in flush(), so the file always holds the image of the last sealed epoch.
    """

    def __init__(self, path: Path, handle, page_size: int, block_count: int, current_epoch: int,
                 cache_pages: int = 4096):
        self.path = Path(path)
        self._file = handle
        self.page_size = page_size
        self.block_count = block_count
        self.current_epoch = current_epoch
        self._durable_block_count = block_count
        self._dirty: Dict[int, SlottedPage] = {}
        self._clean: "OrderedDict[int, SlottedPage]" = OrderedDict()
        self._cache_pages = cache_pages
        self._sealed_stamps: List[int] = []
        self._fill_block: Optional[int] = None
        self._session: Optional[int] = None

    # --- lifecycle ---

    @staticmethod
    def _journal_path(path: Path) -> Path:
        return Path(str(path) + ".journal")

    @classmethod
    def create(cls, path: Union[str, Path], page_size: int = DEFAULT_PAGE_SIZE, cache_pages: int = 4096) -> "RecordStore":
        if page_size < MIN_PAGE_SIZE or page_size > MAX_PAGE_SIZE or page_size & (page_size - 1):
            raise InvalidPageSize(
                f"Page size {page_size} must be a power of two between {MIN_PAGE_SIZE} and {MAX_PAGE_SIZE}."
            )
        path = Path(path)
        try:
            handle = open(path, "w+b")
            handle.write(cls._pack_header(page_size, 0, 1))
            handle.flush()
            os.fsync(handle.fileno())
        except OSError as e:
            raise IoError(f"Cannot create catalog file {path}: {e}")
        logger.info(f"Created record store {path} (page size {page_size})")
        return cls(path, handle, page_size, 0, 1, cache_pages=cache_pages)

    @classmethod
    def open(cls, path: Union[str, Path], cache_pages: int = 4096) -> "RecordStore":
        path = Path(path)
        try:
            handle = open(path, "r+b")
        except OSError as e:
            raise IoError(f"Cannot open catalog file {path}: {e}")
        journal = cls._journal_path(path)
        if journal.exists():
            cls._roll_back(handle, journal)
        handle.seek(0)
        raw = handle.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise CorruptBlock(f"{path}: truncated store header.")
        magic, version, page_size, block_count, current_epoch = struct.unpack_from(HEADER_FORMAT, raw)
        if magic != MAGIC:
            raise CorruptBlock(f"{path}: bad magic {magic!r}.")
        if version != FORMAT_VERSION:
            raise CorruptBlock(f"{path}: unsupported format version {version}.")
        if page_size < MIN_PAGE_SIZE or page_size > MAX_PAGE_SIZE or page_size & (page_size - 1):
            raise CorruptBlock(f"{path}: bad page size {page_size} in header.")
        store = cls(path, handle, page_size, block_count, current_epoch, cache_pages=cache_pages)
        store._load_stamps()
        return store

    @staticmethod
    def _pack_header(page_size: int, block_count: int, current_epoch: int) -> bytes:
        header = struct.pack(HEADER_FORMAT, MAGIC, FORMAT_VERSION, page_size, block_count, current_epoch)
        return header.ljust(HEADER_SIZE, b"\x00")

    @staticmethod
    def _roll_back(handle, journal: Path):
        """Restores the pre-flush image recorded in a leftover journal."""
        logger.warning(f"Rolling back interrupted flush from {journal}")
        data = journal.read_bytes()
        if len(data) < HEADER_SIZE:
            # The journal never became durable, so the file was never touched.
            journal.unlink()
            return
        header = data[:HEADER_SIZE]
        _, _, page_size, block_count, _ = struct.unpack_from(HEADER_FORMAT, header)
        position = HEADER_SIZE
        entry_size = 8 + page_size
        while position + entry_size <= len(data):
            (block_no,) = struct.unpack_from("<Q", data, position)
            handle.seek(HEADER_SIZE + block_no * page_size)
            handle.write(data[position + 8:position + entry_size])
            position += entry_size
        handle.seek(0)
        handle.write(header)
        handle.truncate(HEADER_SIZE + block_count * page_size)
        handle.flush()
        os.fsync(handle.fileno())
        journal.unlink()

    def _load_stamps(self):
        stamps = []
        try:
            for block_no in range(self.block_count):
                self._file.seek(HEADER_SIZE + block_no * self.page_size)
                raw = self._file.read(8)
                if len(raw) < 8:
                    raise CorruptBlock(f"{self.path}: file shorter than its {self.block_count} blocks.")
                stamps.append(struct.unpack("<Q", raw)[0])
        except OSError as e:
            raise IoError(f"Cannot scan {self.path}: {e}")
        self._sealed_stamps = stamps

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    # --- page access ---

    @property
    def max_record_size(self) -> int:
        # Room is kept for the home reference a relocated copy carries.
        return self.page_size - PAGE_HEADER_SIZE - SLOT_SIZE - RECORD_ID_SIZE

    def _sealed_page(self, block_no: int) -> SlottedPage:
        page = self._clean.get(block_no)
        if page is not None:
            self._clean.move_to_end(block_no)
            return page
        if block_no >= len(self._sealed_stamps):
            raise BadBlockNo(f"Block {block_no} has never been sealed.")
        try:
            self._file.seek(HEADER_SIZE + block_no * self.page_size)
            raw = self._file.read(self.page_size)
        except OSError as e:
            raise IoError(f"Cannot read block {block_no}: {e}")
        if len(raw) != self.page_size:
            raise CorruptBlock(f"Block {block_no} is truncated.")
        page = SlottedPage(raw)
        page.check(block_no)
        self._clean[block_no] = page
        if len(self._clean) > self._cache_pages:
            self._clean.popitem(last=False)
        return page

    def _page(self, block_no: int) -> SlottedPage:
        page = self._dirty.get(block_no)
        if page is not None:
            return page
        return self._sealed_page(block_no)

    def _writable(self, block_no: int) -> SlottedPage:
        page = self._dirty.get(block_no)
        if page is None:
            page = SlottedPage(self._sealed_page(block_no).data)
            self._dirty[block_no] = page
        page.epoch_stamp = self.current_epoch
        return page

    def _new_block(self) -> int:
        block_no = self.block_count
        self._dirty[block_no] = SlottedPage.blank(self.page_size, self.current_epoch)
        self.block_count += 1
        return block_no

    # --- records ---

    def insert_record(self, data: bytes) -> RecordId:
        if len(data) > self.max_record_size:
            raise RecordTooLarge(f"Record of {len(data)} octets exceeds {self.max_record_size}.")
        return self._place(data)

    def _place(self, data: bytes, home: Optional[RecordId] = None) -> RecordId:
        fill = self._fill_block
        if fill is not None and fill in self._dirty and self._dirty[fill].epoch_stamp == self.current_epoch:
            slot_no = self._dirty[fill].add(data, home)
            if slot_no is not None:
                return RecordId(fill, slot_no)
        fill = self._new_block()
        self._fill_block = fill
        slot_no = self._dirty[fill].add(data, home)
        return RecordId(fill, slot_no)

    def _resolve(self, rid: RecordId):
        """Follows forwarding tombstones to the live slot; returns (rid, page, contents)."""
        for _ in range(MAX_FORWARD_HOPS + 1):
            if not 0 <= rid.block_no < self.block_count:
                raise BadRecordId(f"{rid} is outside the store ({self.block_count} blocks).")
            page = self._page(rid.block_no)
            if rid.slot_no >= page.slot_count:
                raise BadRecordId(f"{rid} is not an allocated slot.")
            contents = page.get(rid.slot_no)
            if isinstance(contents, RecordId):
                rid = contents
                continue
            return rid, page, contents
        raise CorruptBlock(f"Forwarding chain from {rid} does not terminate.")

    def read_record(self, rid: RecordId) -> bytes:
        return self._resolve(rid)[2]

    def locate(self, rid: RecordId) -> RecordId:
        """The live RecordId behind any forwarding tombstones."""
        return self._resolve(rid)[0]

    def update_record(self, rid: RecordId, data: bytes) -> RecordId:
        if len(data) > self.max_record_size:
            raise RecordTooLarge(f"Record of {len(data)} octets exceeds {self.max_record_size}.")
        rid, _, _ = self._resolve(rid)
        page = self._writable(rid.block_no)
        if page.put(rid.slot_no, data):
            return rid
        home = page.home(rid.slot_no)
        if home is None:
            new_rid = self._place(data, rid)
            page.mark_moved(rid.slot_no, new_rid)
        else:
            new_rid = self._place(data, home)
            page.mark_moved(rid.slot_no, home)
            self._writable(home.block_no).mark_moved(home.slot_no, new_rid)
        logger.debug(f"Record {rid} relocated to {new_rid}")
        return new_rid

    # --- epochs and blocks ---

    def set_current_epoch(self, snapshot_id: int):
        if snapshot_id < self.current_epoch:
            raise EpochRegression(f"Epoch {snapshot_id} precedes current epoch {self.current_epoch}.")
        self.current_epoch = snapshot_id

    def _stamp(self, block_no: int, sealed: bool) -> int:
        if not sealed and block_no in self._dirty:
            return self._dirty[block_no].epoch_stamp
        return self._sealed_stamps[block_no]

    def blocks_of_epoch(self, snapshot_id: int, sealed: bool = False) -> List[int]:
        count = len(self._sealed_stamps) if sealed else self.block_count
        return [b for b in range(count) if self._stamp(b, sealed) == snapshot_id]

    def read_block(self, block_no: int, sealed: bool = False) -> BlockImage:
        limit = len(self._sealed_stamps) if sealed else self.block_count
        if not 0 <= block_no < limit:
            raise BadBlockNo(f"Block {block_no} does not exist.")
        page = self._sealed_page(block_no) if sealed else self._page(block_no)
        return BlockImage(block_no, page.epoch_stamp, bytes(page.data))

    def write_block(self, block_no: int, image: BlockImage):
        if self._session is None:
            raise NotInUpdateSession("write_block is only legal inside a binary-update session.")
        if block_no < 0:
            raise BadBlockNo(f"Block {block_no} does not exist.")
        if len(image.payload) != self.page_size:
            raise CorruptBlock(f"Block {block_no}: image of {len(image.payload)} octets, page size is {self.page_size}.")
        page = SlottedPage(image.payload)
        if page.epoch_stamp != image.epoch_stamp:
            raise CorruptBlock(f"Block {block_no}: image stamp {image.epoch_stamp} disagrees with its payload.")
        page.check(block_no)
        while self.block_count <= block_no:
            self._dirty[self.block_count] = SlottedPage.blank(self.page_size, 0)
            self.block_count += 1
        self._dirty[block_no] = page

    # --- sessions and durability ---

    @property
    def in_session(self) -> bool:
        return self._session is not None

    @property
    def has_pending_writes(self) -> bool:
        return bool(self._dirty)

    @property
    def session_start(self) -> Optional[int]:
        """First snapshot of the open binary update."""
        return self._session

    def begin_update(self, snapshot_id: int):
        if self._dirty:
            raise StoreError("Cannot start a binary update with unsealed mutations pending.")
        self._session = snapshot_id

    def commit_update(self, last_snapshot: Optional[int] = None):
        """Flushes the session's pages as snapshots session_start..last_snapshot."""
        if self._session is None:
            raise NotInUpdateSession("No binary-update session is open.")
        last_snapshot = self._session if last_snapshot is None else last_snapshot
        if last_snapshot < self._session:
            raise EpochRegression(f"Session started at snapshot {self._session}, cannot end at {last_snapshot}.")
        self.current_epoch = last_snapshot + 1
        self._session = None
        self.flush()

    def abort_update(self):
        self._session = None
        self.discard()

    def discard(self):
        """Drops every unflushed mutation, returning to the last sealed image."""
        self._dirty.clear()
        self.block_count = self._durable_block_count
        self._fill_block = None

    def flush(self):
        """Writes dirty pages and the header, journalled and followed by a full fsync."""
        journal = self._journal_path(self.path)
        overwritten = sorted(b for b in self._dirty if b < self._durable_block_count)
        try:
            with open(journal, "wb") as j:
                self._file.seek(0)
                j.write(self._file.read(HEADER_SIZE))
                for block_no in overwritten:
                    self._file.seek(HEADER_SIZE + block_no * self.page_size)
                    j.write(struct.pack("<Q", block_no))
                    j.write(self._file.read(self.page_size))
                j.flush()
                os.fsync(j.fileno())
            for block_no in sorted(self._dirty):
                self._file.seek(HEADER_SIZE + block_no * self.page_size)
                self._file.write(self._dirty[block_no].data)
            self._file.seek(0)
            self._file.write(self._pack_header(self.page_size, self.block_count, self.current_epoch))
            self._file.flush()
            os.fsync(self._file.fileno())
            journal.unlink()
        except OSError as e:
            raise IoError(f"Flush of {self.path} failed: {e}")

        while len(self._sealed_stamps) < self.block_count:
            self._sealed_stamps.append(0)
        for block_no, page in self._dirty.items():
            self._sealed_stamps[block_no] = page.epoch_stamp
            self._clean[block_no] = page
            self._clean.move_to_end(block_no)
        while len(self._clean) > self._cache_pages:
            self._clean.popitem(last=False)
        logger.debug(f"Flushed {len(self._dirty)} pages of {self.path} at epoch {self.current_epoch}")
        self._dirty = {}
        self._durable_block_count = self.block_count
        self._fill_block = None

    def stats(self) -> dict:
        stamps = Counter(self._stamp(b, False) for b in range(self.block_count))
        return {
            "path": str(self.path),
            "file_size": self.path.stat().st_size,
            "page_size": self.page_size,
            "block_count": self.block_count,
            "current_epoch": self.current_epoch,
            "blocks_per_epoch": dict(sorted(stamps.items())),
        }
