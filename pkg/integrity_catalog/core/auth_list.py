"""
Authenticated append-only skip list holding one SnapshotRecord per sealed epoch.

Element i links back to i - 2**l for every level l with 2**l dividing i, so any
element is reachable from the head in O(log n) hops, and its authenticator

    E_i = H("E" || LE64(i) || H(record_i) || E_{i-1} || E_{i-2} || E_{i-4} || ...)

commits to the whole prefix. The head authenticator is the list authenticator (LA).
"""
import logging
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

from integrity_catalog.core.hashing import DIGEST_SIZE, ELEMENT_TAG, NIL_DIGEST, SNAPSHOT_TAG, Hasher, le64
from integrity_catalog.core.record_store import RECORD_ID_SIZE, RecordId, RecordStore, encode_record_id
from integrity_catalog.errors import CorruptData, NonSequentialAppend, ProofMismatch, UnknownSnapshot

logger = logging.getLogger(__name__)


def link_levels(index: int) -> int:
    """Number of back links of element `index` (levels 0..v2(index))."""
    return ((index & -index).bit_length() - 1) + 1


@dataclass(frozen=True)
class SnapshotRecord:
    snapshot_id: int
    root: Optional[RecordId]
    pra: bytes
    timestamp: int

    def encode(self) -> bytes:
        return le64(self.snapshot_id) + encode_record_id(self.root) + self.pra + le64(self.timestamp)

    @classmethod
    def decode(cls, raw: bytes) -> "SnapshotRecord":
        snapshot_id, = struct.unpack_from("<Q", raw, 0)
        root = RecordId.decode(raw[8:16])
        pra = raw[16:16 + DIGEST_SIZE]
        timestamp, = struct.unpack_from("<Q", raw, 16 + DIGEST_SIZE)
        return cls(snapshot_id, root, bytes(pra), timestamp)

    def digest(self, hasher: Hasher) -> bytes:
        return hasher.digest(SNAPSHOT_TAG, self.encode())


SNAPSHOT_RECORD_SIZE = 8 + RECORD_ID_SIZE + DIGEST_SIZE + 8


def element_digest(hasher: Hasher, index: int, record_digest: bytes, links) -> bytes:
    return hasher.digest(ELEMENT_TAG, le64(index), record_digest, *links)


@dataclass
class ListElement:
    index: int
    record: SnapshotRecord
    link_ids: List[Optional[RecordId]]
    link_digests: List[bytes]
    authenticator: bytes

    def encode(self) -> bytes:
        parts = [self.record.encode(), struct.pack("<B", len(self.link_ids))]
        for rid, digest in zip(self.link_ids, self.link_digests):
            parts.append(encode_record_id(rid))
            parts.append(digest)
        parts.append(self.authenticator)
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> "ListElement":
        try:
            record = SnapshotRecord.decode(raw[:SNAPSHOT_RECORD_SIZE])
            position = SNAPSHOT_RECORD_SIZE
            (levels,) = struct.unpack_from("<B", raw, position)
            position += 1
            link_ids, link_digests = [], []
            for _ in range(levels):
                link_ids.append(RecordId.decode(raw[position:position + RECORD_ID_SIZE]))
                position += RECORD_ID_SIZE
                link_digests.append(bytes(raw[position:position + DIGEST_SIZE]))
                position += DIGEST_SIZE
            authenticator = bytes(raw[position:position + DIGEST_SIZE])
            position += DIGEST_SIZE
        except struct.error as e:
            raise CorruptData(f"Unreadable list element: {e}")
        if position != len(raw) or levels != link_levels(record.snapshot_id) or len(authenticator) != DIGEST_SIZE:
            raise CorruptData(f"Malformed list element for snapshot {record.snapshot_id}.")
        return cls(record.snapshot_id, record, link_ids, link_digests, authenticator)


@dataclass(frozen=True)
class ListProofStep:
    """One element on the chain; the followed link is None (recomputed by the verifier)."""
    index: int
    record_digest: bytes
    links: Tuple[Optional[bytes], ...]


@dataclass(frozen=True)
class ListProof:
    target: SnapshotRecord
    chain: Tuple[ListProofStep, ...]


class AuthList:
    def __init__(self, store: RecordStore, hasher: Hasher, head: Optional[RecordId] = None, length: int = 0):
        self.store = store
        self.hasher = hasher
        self.head = head
        self.length = length

    @property
    def la(self) -> bytes:
        if self.length == 0:
            return NIL_DIGEST
        return self._read(self.head).authenticator

    def _read(self, rid: RecordId) -> ListElement:
        element = ListElement.decode(self.store.read_record(rid))
        return element

    def _walk(self, target: int, upto: Optional[int] = None) -> Iterator[Tuple[RecordId, ListElement]]:
        """Yields the elements visited from element `upto` (default: the head) down to `target`."""
        upto = self.length if upto is None else upto
        if not 1 <= target <= upto <= self.length:
            raise UnknownSnapshot(f"Snapshot {target} is not in the list (length {upto}).")
        if upto == self.length:
            rid, element = self.head, self._read(self.head)
        else:
            rid, element = self.element(upto)
        while True:
            if element.index < target or element.index > upto:
                raise CorruptData(f"List navigation overshot to element {element.index} looking for {target}.")
            yield rid, element
            if element.index == target:
                return
            level = len(element.link_ids) - 1
            while element.index - (1 << level) < target:
                level -= 1
            rid = element.link_ids[level]
            if rid is None:
                raise CorruptData(f"Element {element.index} has a nil link at level {level}.")
            next_element = self._read(rid)
            if next_element.index != element.index - (1 << level):
                raise CorruptData(f"Element {element.index} links to {next_element.index} at level {level}.")
            element = next_element

    def element(self, index: int) -> Tuple[RecordId, ListElement]:
        for rid, element in self._walk(index):
            pass
        return rid, element

    def record(self, snapshot_id: int) -> SnapshotRecord:
        """Unverified read of a stored snapshot record."""
        return self.element(snapshot_id)[1].record

    def list_authenticator(self, snapshot_id: int) -> bytes:
        """The LA as it stood right after `snapshot_id` was appended."""
        if snapshot_id == 0:
            return NIL_DIGEST
        return self.element(snapshot_id)[1].authenticator

    def append(self, record: SnapshotRecord) -> bytes:
        index = self.length + 1
        if record.snapshot_id != index:
            raise NonSequentialAppend(f"Expected snapshot {index}, got {record.snapshot_id}.")
        link_ids: List[Optional[RecordId]] = []
        link_digests: List[bytes] = []
        for level in range(link_levels(index)):
            predecessor = index - (1 << level)
            if predecessor < 1:
                link_ids.append(None)
                link_digests.append(NIL_DIGEST)
            else:
                rid, element = self.element(predecessor)
                link_ids.append(rid)
                link_digests.append(element.authenticator)
        authenticator = element_digest(self.hasher, index, record.digest(self.hasher), link_digests)
        element = ListElement(index, record, link_ids, link_digests, authenticator)
        self.head = self.store.insert_record(element.encode())
        self.length = index
        logger.debug(f"Appended snapshot {index} to the authenticated list")
        return authenticator

    def prove(self, snapshot_id: int, upto: Optional[int] = None) -> ListProof:
        """Proof of `snapshot_id` against the LA published when the list ended at `upto`."""
        path = [element for _, element in self._walk(snapshot_id, upto)]
        path.reverse()
        target = path[0]
        chain = [ListProofStep(target.index, target.record.digest(self.hasher), tuple(target.link_digests))]
        previous = target.index
        for element in path[1:]:
            level = (element.index - previous).bit_length() - 1
            links = list(element.link_digests)
            links[level] = None
            chain.append(ListProofStep(element.index, element.record.digest(self.hasher), tuple(links)))
            previous = element.index
        return ListProof(target.record, tuple(chain))

    def elements(self) -> List[ListElement]:
        """Every element in index order (reads each one once per walk)."""
        return [self.element(i)[1] for i in range(1, self.length + 1)]


def verify_list_proof(proof: ListProof, expected_la: bytes, hasher: Hasher) -> SnapshotRecord:
    """Folds the chain back to the head; returns the authenticated record or raises ProofMismatch."""
    if not proof.chain:
        raise ProofMismatch("Empty list proof.")
    first = proof.chain[0]
    target = proof.target
    if first.index != target.snapshot_id or first.index < 1:
        raise ProofMismatch("List proof does not start at its target.")
    if len(first.links) != link_levels(first.index) or any(link is None for link in first.links):
        raise ProofMismatch("Malformed target element in list proof.")
    if first.record_digest != target.digest(hasher):
        raise ProofMismatch("Target record does not match its digest.")
    current = element_digest(hasher, first.index, first.record_digest, first.links)
    previous = first.index
    for step in proof.chain[1:]:
        gap = step.index - previous
        if gap <= 0 or gap & (gap - 1):
            raise ProofMismatch(f"Element {step.index} cannot link to {previous}.")
        level = gap.bit_length() - 1
        if len(step.links) != link_levels(step.index) or level >= len(step.links):
            raise ProofMismatch(f"Element {step.index} has no link at level {level}.")
        if step.links[level] is not None or sum(link is None for link in step.links) != 1:
            raise ProofMismatch(f"Element {step.index} carries a bad link placeholder.")
        links = list(step.links)
        links[level] = current
        current = element_digest(hasher, step.index, step.record_digest, links)
        previous = step.index
    if current != expected_la:
        raise ProofMismatch(f"List proof for snapshot {target.snapshot_id} does not reproduce the LA.")
    return target


def refold(elements: List[ListElement], hasher: Hasher) -> bytes:
    """Recomputes the LA from every stored record, ignoring stored link digests."""
    digests = [NIL_DIGEST]
    for position, element in enumerate(elements, start=1):
        if element.index != position or element.record.snapshot_id != position:
            raise CorruptData(f"List element {position} claims index {element.index}.")
        links = []
        for level in range(link_levels(position)):
            predecessor = position - (1 << level)
            links.append(digests[predecessor] if predecessor >= 1 else NIL_DIGEST)
        digests.append(element_digest(hasher, position, element.record.digest(hasher), links))
    return digests[-1]
