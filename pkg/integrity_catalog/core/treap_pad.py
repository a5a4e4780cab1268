"""
TreapPAD: a persistent authenticated dictionary over a deterministic treap.

Every key's priority is H(key), so the tree shape depends only on the key set.
Nodes are bounded fat nodes: each keeps a version log of (snapshot, left, right,
value) entries and a small cache of authenticators, and is copied into a fresh
record (with the parent path fixed up) once the log outgrows a store record.
"""
import logging
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

from integrity_catalog.core.auth_list import AuthList, SnapshotRecord, refold
from integrity_catalog.core.hashing import NIL_DIGEST, NODE_TAG, Hasher, le64
from integrity_catalog.core.record_store import (
    DEFAULT_PAGE_SIZE,
    BlockImage,
    RecordId,
    RecordStore,
    encode_record_id,
)
from integrity_catalog.errors import (
    CatalogError,
    CorruptData,
    IoError,
    KeyExists,
    KeyNotFound,
    KeyTooLarge,
    NotInUpdateSession,
    ProofMismatch,
    RecordTooLarge,
    ReplicationVerifyFailed,
    SnapshotGap,
    StoreError,
    UnknownSnapshot,
)

logger = logging.getLogger(__name__)

MAX_TREE_DEPTH = 400

FLAG_LEFT = 0x01
FLAG_RIGHT = 0x02
FLAG_VALUE = 0x04

ENTRY_HEADER_FORMAT = "<QB8s8sH"  # snapshot_id, flags, left, right, value_len
ENTRY_HEADER_SIZE = struct.calcsize(ENTRY_HEADER_FORMAT)
AUTH_FORMAT = "<Q32s"
AUTH_SIZE = struct.calcsize(AUTH_FORMAT)

SUPERBLOCK_ID = RecordId(0, 0)
SUPERBLOCK_MAGIC = b"TPAD"
SUPERBLOCK_FORMAT = "<4sB16sH8sQ"  # magic, version, hash algorithm, skip_no, list head, list length
SUPERBLOCK_VERSION = 1


def should_cache(depth: int, snapshot_id: int, skip_no: int) -> bool:
    """Whether the authenticator computed at `depth` during `snapshot_id` is stored."""
    if skip_no == 0:
        return True
    return depth % skip_no == (snapshot_id - 1) % skip_no


def node_size(key_len: int, value_lens: List[int], auth_count: int) -> int:
    return 2 + key_len + 2 + sum(ENTRY_HEADER_SIZE + n for n in value_lens) + 2 + auth_count * AUTH_SIZE


@dataclass
class VersionEntry:
    snapshot_id: int
    left: Optional[RecordId]
    right: Optional[RecordId]
    value: Optional[bytes] = None


@dataclass
class NodeRecord:
    key: bytes
    entries: List[VersionEntry]
    auths: List[Tuple[int, bytes]] = field(default_factory=list)
    rid: Optional[RecordId] = None
    priority: bytes = b""

    def entry_at(self, snapshot_id: int) -> Optional[VersionEntry]:
        for entry in reversed(self.entries):
            if entry.snapshot_id <= snapshot_id:
                return entry
        return None

    def value_at(self, snapshot_id: int) -> Optional[Tuple[bytes, int]]:
        for entry in reversed(self.entries):
            if entry.snapshot_id <= snapshot_id and entry.value is not None:
                return entry.value, entry.snapshot_id
        return None

    def cached_auth(self, snapshot_id: int) -> Optional[bytes]:
        for sid, digest in reversed(self.auths):
            if sid == snapshot_id:
                return digest
            if sid < snapshot_id:
                break
        return None

    def encode(self) -> bytes:
        parts = [struct.pack("<H", len(self.key)), self.key, struct.pack("<H", len(self.entries))]
        for entry in self.entries:
            flags = (
                (FLAG_LEFT if entry.left is not None else 0)
                | (FLAG_RIGHT if entry.right is not None else 0)
                | (FLAG_VALUE if entry.value is not None else 0)
            )
            value = entry.value or b""
            parts.append(struct.pack(
                ENTRY_HEADER_FORMAT, entry.snapshot_id, flags,
                encode_record_id(entry.left), encode_record_id(entry.right), len(value),
            ))
            parts.append(value)
        parts.append(struct.pack("<H", len(self.auths)))
        for sid, digest in self.auths:
            parts.append(struct.pack(AUTH_FORMAT, sid, digest))
        return b"".join(parts)

    @classmethod
    def decode(cls, raw: bytes) -> "NodeRecord":
        try:
            (key_len,) = struct.unpack_from("<H", raw, 0)
            position = 2
            key = bytes(raw[position:position + key_len])
            position += key_len
            (entry_count,) = struct.unpack_from("<H", raw, position)
            position += 2
            entries = []
            for _ in range(entry_count):
                sid, flags, left, right, value_len = struct.unpack_from(ENTRY_HEADER_FORMAT, raw, position)
                position += ENTRY_HEADER_SIZE
                value = bytes(raw[position:position + value_len])
                position += value_len
                entries.append(VersionEntry(
                    sid,
                    RecordId.decode(left) if flags & FLAG_LEFT else None,
                    RecordId.decode(right) if flags & FLAG_RIGHT else None,
                    value if flags & FLAG_VALUE else None,
                ))
            (auth_count,) = struct.unpack_from("<H", raw, position)
            position += 2
            auths = []
            for _ in range(auth_count):
                sid, digest = struct.unpack_from(AUTH_FORMAT, raw, position)
                position += AUTH_SIZE
                auths.append((sid, digest))
        except struct.error as e:
            raise CorruptData(f"Unreadable node record: {e}")
        if position != len(raw) or len(key) != key_len:
            raise CorruptData("Node record length disagrees with its contents.")
        if not entries or entries[0].value is None:
            raise CorruptData(f"Node {key!r} has no initial value.")
        sids = [e.snapshot_id for e in entries]
        if any(a >= b for a, b in zip(sids, sids[1:])):
            raise CorruptData(f"Node {key!r} has an unordered version log.")
        return cls(key, entries, auths)


@dataclass(frozen=True)
class SnapshotView:
    snapshot_id: int
    root: Optional[RecordId]
    pra: bytes


class ProofStep(NamedTuple):
    key_digest: bytes
    value_digest: bytes
    value_snapshot_id: int
    side: str  # "self" for the target, else which child of this node the path came from
    siblings: Tuple[bytes, ...]


_SIDE_CODES = {"self": 0, "left": 1, "right": 2}


@dataclass(frozen=True)
class MembershipProof:
    snapshot_id: int
    path: Tuple[ProofStep, ...]
    target_value: bytes
    value_snapshot_id: int

    def encode(self) -> bytes:
        parts = [
            struct.pack("<QQI", self.snapshot_id, self.value_snapshot_id, len(self.target_value)),
            self.target_value,
            struct.pack("<H", len(self.path)),
        ]
        for step in self.path:
            parts.append(step.key_digest + step.value_digest)
            parts.append(struct.pack("<QB", step.value_snapshot_id, _SIDE_CODES[step.side]))
            parts.extend(step.siblings)
        return b"".join(parts)


class AbsenceStep(NamedTuple):
    key: bytes
    value_digest: bytes
    value_snapshot_id: int
    direction: str  # child the search for the missing key followed
    sibling: bytes


@dataclass(frozen=True)
class AbsenceProof:
    snapshot_id: int
    path: Tuple[AbsenceStep, ...]  # root first


def node_authenticator(hasher: Hasher, key_digest: bytes, value_digest: bytes, value_snapshot_id: int,
                       left: bytes, right: bytes) -> bytes:
    return hasher.digest(NODE_TAG, key_digest, value_digest, le64(value_snapshot_id), left, right)


def verify_proof(proof: MembershipProof, expected_pra: bytes, hasher: Hasher) -> Tuple[bytes, bytes, int]:
    """Folds a membership proof; returns (key_digest, value, value_snapshot_id) or raises ProofMismatch."""
    if not proof.path:
        raise ProofMismatch("Empty membership proof.")
    target = proof.path[0]
    if target.side != "self" or len(target.siblings) != 2:
        raise ProofMismatch("Membership proof does not start at its target.")
    value_digest = hasher.digest(proof.target_value)
    if target.value_digest != value_digest or target.value_snapshot_id != proof.value_snapshot_id:
        raise ProofMismatch("Target value does not match the proof.")
    current = node_authenticator(hasher, target.key_digest, value_digest, proof.value_snapshot_id, *target.siblings)
    for step in proof.path[1:]:
        if len(step.siblings) != 1:
            raise ProofMismatch("Malformed membership proof step.")
        if step.side == "left":
            left, right = current, step.siblings[0]
        elif step.side == "right":
            left, right = step.siblings[0], current
        else:
            raise ProofMismatch(f"Bad step side {step.side!r}.")
        current = node_authenticator(hasher, step.key_digest, step.value_digest, step.value_snapshot_id, left, right)
    if current != expected_pra:
        raise ProofMismatch(f"Membership proof does not reproduce the PRA of snapshot {proof.snapshot_id}.")
    return target.key_digest, proof.target_value, proof.value_snapshot_id


def verify_absence(proof: AbsenceProof, key: bytes, expected_pra: bytes, hasher: Hasher):
    """Raises ProofMismatch unless `key` is provably absent under `expected_pra`."""
    current = NIL_DIGEST
    for step in reversed(proof.path):
        if step.direction == "left" and key < step.key:
            left, right = current, step.sibling
        elif step.direction == "right" and key > step.key:
            left, right = step.sibling, current
        else:
            raise ProofMismatch(f"Search for {key!r} cannot go {step.direction} at {step.key!r}.")
        current = node_authenticator(hasher, hasher.digest(step.key), step.value_digest,
                                     step.value_snapshot_id, left, right)
    if current != expected_pra:
        raise ProofMismatch(f"Absence proof does not reproduce the PRA of snapshot {proof.snapshot_id}.")


class TreapPAD:
    def __init__(self, store: RecordStore, hasher: Hasher, skip_no: int = 0, cache_nodes: int = 100_000):
        self.store = store
        self.hasher = hasher
        self.skip_no = skip_no
        self.aasl = AuthList(store, hasher)
        self.open_root: Optional[RecordId] = None
        self._nodes: "OrderedDict[RecordId, NodeRecord]" = OrderedDict()
        self._cache_nodes = cache_nodes

    # --- lifecycle ---

    @classmethod
    def create(cls, path: Union[str, Path], page_size: int = DEFAULT_PAGE_SIZE, skip_no: int = 0,
               hash_algorithm: str = "sha256", cache_nodes: int = 100_000) -> "TreapPAD":
        store = RecordStore.create(path, page_size)
        return cls(store, Hasher(hash_algorithm), skip_no, cache_nodes)

    @classmethod
    def open(cls, path: Union[str, Path], skip_no: int = 0, hash_algorithm: str = "sha256",
             cache_nodes: int = 100_000) -> "TreapPAD":
        pad = cls(RecordStore.open(path), Hasher(hash_algorithm), skip_no, cache_nodes)
        pad._load_superblock(strict=True)
        return pad

    @classmethod
    def open_or_create(cls, path: Union[str, Path], page_size: int = DEFAULT_PAGE_SIZE, **kwargs) -> "TreapPAD":
        if Path(path).exists():
            return cls.open(path, **kwargs)
        return cls.create(path, page_size, **kwargs)

    def close(self):
        self.store.close()

    @property
    def open_epoch(self) -> int:
        return self.store.current_epoch

    @property
    def latest_snapshot(self) -> int:
        return self.store.current_epoch - 1

    @property
    def la(self) -> bytes:
        return self.aasl.la

    def _superblock(self) -> bytes:
        raw = struct.pack(
            SUPERBLOCK_FORMAT, SUPERBLOCK_MAGIC, SUPERBLOCK_VERSION,
            self.hasher.algorithm.encode("ascii"), self.skip_no,
            encode_record_id(self.aasl.head), self.aasl.length,
        )
        return raw.ljust(self.store.max_record_size, b"\x00")

    def _ensure_superblock(self):
        if self.store.block_count == 0:
            rid = self.store.insert_record(self._superblock())
            assert rid == SUPERBLOCK_ID

    def _load_superblock(self, strict: bool):
        self._nodes.clear()
        self.aasl.head, self.aasl.length = None, 0
        self.open_root = None
        if self.store.block_count == 0:
            return
        try:
            raw = self.store.read_record(SUPERBLOCK_ID)
            magic, version, algorithm, skip_no, head, length = struct.unpack_from(SUPERBLOCK_FORMAT, raw)
            if magic != SUPERBLOCK_MAGIC or version != SUPERBLOCK_VERSION:
                raise CorruptData(f"Bad superblock magic {magic!r} / version {version}.")
            algorithm = algorithm.rstrip(b"\x00").decode("ascii")
            if algorithm != self.hasher.algorithm:
                logger.warning(f"Catalog was built with {algorithm}; using it instead of {self.hasher.algorithm}")
                self.hasher = Hasher(algorithm)
                self.aasl.hasher = self.hasher
            if skip_no != self.skip_no:
                logger.info(f"Catalog skip factor is {skip_no} (configured {self.skip_no})")
                self.skip_no = skip_no
            self.aasl.head, self.aasl.length = RecordId.decode(head), length
            if length:
                self.open_root = self.aasl.record(length).root
        except (StoreError, CorruptData, struct.error, UnicodeDecodeError) as e:
            if strict:
                raise CorruptData(f"Unreadable superblock in {self.store.path}: {e}") from e
            logger.debug(f"No usable superblock yet: {e}")
            self.aasl.head, self.aasl.length = None, 0
            self.open_root = None

    def discard(self):
        """Drops all unsealed mutations."""
        self.store.discard()
        self._load_superblock(strict=False)

    # --- node access ---

    def _load(self, rid: RecordId) -> NodeRecord:
        node = self._nodes.get(rid)
        if node is not None:
            self._nodes.move_to_end(rid)
            return node
        try:
            live = self.store.locate(rid)
            node = self._nodes.get(live)
            if node is None:
                node = NodeRecord.decode(self.store.read_record(live))
                node.rid = live
                node.priority = self.hasher.digest(node.key)
        except IoError:
            raise
        except StoreError as e:
            raise CorruptData(f"Cannot read node {rid}: {e}") from e
        self._remember(node)
        return node

    def _remember(self, node: NodeRecord):
        self._nodes[node.rid] = node
        self._nodes.move_to_end(node.rid)
        while len(self._nodes) > self._cache_nodes:
            self._nodes.popitem(last=False)

    def _store(self, node: NodeRecord) -> RecordId:
        data = node.encode()
        if node.rid is None:
            node.rid = self.store.insert_record(data)
            self._remember(node)
            return node.rid
        try:
            rid = self.store.update_record(node.rid, data)
        except RecordTooLarge:
            return self._copy(node)
        if rid != node.rid:
            self._nodes.pop(node.rid, None)
            node.rid = rid
            self._remember(node)
        return rid

    def _copy(self, node: NodeRecord) -> RecordId:
        """Moves the node's current state into a fresh record; the old one keeps the history."""
        self._nodes.pop(node.rid, None)
        latest = node.entries[-1]
        value, value_sid = node.value_at(latest.snapshot_id)
        if value_sid == latest.snapshot_id:
            entries = [VersionEntry(latest.snapshot_id, latest.left, latest.right, value)]
        else:
            entries = [
                VersionEntry(value_sid, latest.left, latest.right, value),
                VersionEntry(latest.snapshot_id, latest.left, latest.right),
            ]
        auths = [(sid, digest) for sid, digest in node.auths if sid == self.open_epoch]
        copy = NodeRecord(node.key, entries, auths, priority=node.priority)
        copy.rid = self.store.insert_record(copy.encode())
        self._remember(copy)
        logger.debug(f"Node {node.key!r} outgrew its record; copied {node.rid} -> {copy.rid}")
        return copy.rid

    def _touch(self, node: NodeRecord, left: Optional[RecordId], right: Optional[RecordId],
               value: Optional[bytes] = None):
        """Gives the node a version entry at the open epoch."""
        latest = node.entries[-1]
        if latest.snapshot_id == self.open_epoch:
            latest.left, latest.right = left, right
            if value is not None:
                latest.value = value
        else:
            node.entries.append(VersionEntry(self.open_epoch, left, right, value))

    def _precedes(self, key: bytes, priority: bytes, node: NodeRecord) -> bool:
        """Whether `key` belongs above `node` in heap order."""
        return (priority, key) > (node.priority, node.key)

    @staticmethod
    def _check_depth(depth: int):
        if depth > MAX_TREE_DEPTH:
            raise CorruptData(f"Tree deeper than {MAX_TREE_DEPTH}; the node graph is damaged.")

    # --- mutation ---

    def insert(self, key: bytes, value: bytes):
        if node_size(len(key), [len(value), 0], 1) > self.store.max_record_size:
            raise KeyTooLarge(f"A {len(key)}-octet key with a {len(value)}-octet value cannot fit in one node.")
        self._ensure_superblock()
        self.open_root = self._insert(self.open_root, key, self.hasher.digest(key), value, 0)

    def _insert(self, rid: Optional[RecordId], key: bytes, priority: bytes, value: bytes, depth: int) -> RecordId:
        self._check_depth(depth)
        if rid is None:
            node = NodeRecord(key, [VersionEntry(self.open_epoch, None, None, value)], priority=priority)
            return self._store(node)
        node = self._load(rid)
        if self._precedes(key, priority, node):
            left, right = self._split(rid, key, depth)
            fresh = NodeRecord(key, [VersionEntry(self.open_epoch, left, right, value)], priority=priority)
            return self._store(fresh)
        latest = node.entries[-1]
        if key == node.key:
            raise KeyExists(f"Key {key!r} is already in the catalog.")
        if key < node.key:
            left = self._insert(latest.left, key, priority, value, depth + 1)
            self._touch(node, left, latest.right)
        else:
            right = self._insert(latest.right, key, priority, value, depth + 1)
            self._touch(node, latest.left, right)
        return self._store(node)

    def _split(self, rid: Optional[RecordId], key: bytes, depth: int) -> Tuple[Optional[RecordId], Optional[RecordId]]:
        if rid is None:
            return None, None
        self._check_depth(depth)
        node = self._load(rid)
        latest = node.entries[-1]
        if node.key == key:
            raise KeyExists(f"Key {key!r} is already in the catalog.")
        if node.key < key:
            smaller, larger = self._split(latest.right, key, depth + 1)
            self._touch(node, latest.left, smaller)
            return self._store(node), larger
        smaller, larger = self._split(latest.left, key, depth + 1)
        self._touch(node, larger, latest.right)
        return smaller, self._store(node)

    def amend(self, key: bytes, suffix: bytes):
        self.open_root = self._amend(self.open_root, key, suffix, 0)

    def _amend(self, rid: Optional[RecordId], key: bytes, suffix: bytes, depth: int) -> RecordId:
        self._check_depth(depth)
        if rid is None:
            raise KeyNotFound(f"Key {key!r} is not in the catalog.")
        node = self._load(rid)
        latest = node.entries[-1]
        if key == node.key:
            value = node.value_at(latest.snapshot_id)[0] + suffix
            if node_size(len(key), [len(value), 0], 1) > self.store.max_record_size:
                raise RecordTooLarge(f"Amended value of {len(value)} octets cannot fit in one node.")
            self._touch(node, latest.left, latest.right, value)
        elif key < node.key:
            self._touch(node, self._amend(latest.left, key, suffix, depth + 1), latest.right)
        else:
            self._touch(node, latest.left, self._amend(latest.right, key, suffix, depth + 1))
        return self._store(node)

    # --- authenticators ---

    def _digest_of(self, node: NodeRecord, snapshot_id: int, left: bytes, right: bytes) -> bytes:
        value, value_sid = node.value_at(snapshot_id)
        return node_authenticator(self.hasher, node.priority, self.hasher.digest(value), value_sid, left, right)

    def _authenticator(self, rid: Optional[RecordId], snapshot_id: int, depth: int = 0,
                       use_cache: bool = True, check: bool = False, memo: Optional[dict] = None) -> bytes:
        if rid is None:
            return NIL_DIGEST
        self._check_depth(depth)
        if memo is not None and rid in memo:
            return memo[rid]
        node = self._load(rid)
        entry = node.entry_at(snapshot_id)
        if entry is None:
            raise CorruptData(f"Node {node.key!r} is reachable at snapshot {snapshot_id} before it existed.")
        cached = node.cached_auth(entry.snapshot_id)
        if use_cache and cached is not None:
            return cached
        left = self._authenticator(entry.left, snapshot_id, depth + 1, use_cache, check, memo)
        right = self._authenticator(entry.right, snapshot_id, depth + 1, use_cache, check, memo)
        digest = self._digest_of(node, snapshot_id, left, right)
        if check and cached is not None and cached != digest:
            raise CorruptData(f"Cached authenticator of {node.key!r} at snapshot {entry.snapshot_id} is wrong.")
        if memo is not None:
            memo[rid] = digest
        return digest

    def snapshot(self, timestamp: Optional[int] = None) -> SnapshotView:
        """Seals the open epoch: computes the PRA, appends to the list and flushes."""
        epoch = self.open_epoch
        self._ensure_superblock()
        memo: dict = {}
        if self.open_root is None:
            pra, root = NIL_DIGEST, None
        else:
            pra, root = self._seal(self.open_root, epoch, 0, memo)
        record_ts = int(time.time()) if timestamp is None else timestamp
        la = self.aasl.append(SnapshotRecord(epoch, root, pra, record_ts))
        self.store.update_record(SUPERBLOCK_ID, self._superblock())
        self.open_root = root
        self.store.set_current_epoch(epoch + 1)
        self.store.flush()
        logger.info(f"Sealed snapshot {epoch}: PRA {pra.hex()[:16]}…, LA {la.hex()[:16]}…")
        return SnapshotView(epoch, root, pra)

    def _seal(self, rid: RecordId, epoch: int, depth: int, memo: dict) -> Tuple[bytes, RecordId]:
        self._check_depth(depth)
        node = self._load(rid)
        latest = node.entries[-1]
        if latest.snapshot_id != epoch:
            return self._authenticator(rid, epoch, depth, memo=memo), rid
        left_digest, left = self._seal(latest.left, epoch, depth + 1, memo) if latest.left is not None else (NIL_DIGEST, None)
        right_digest, right = self._seal(latest.right, epoch, depth + 1, memo) if latest.right is not None else (NIL_DIGEST, None)
        changed = (left, right) != (latest.left, latest.right)
        latest.left, latest.right = left, right
        digest = self._digest_of(node, epoch, left_digest, right_digest)
        if should_cache(depth, epoch, self.skip_no):
            node.auths.append((epoch, digest))
            changed = True
        if changed:
            rid = self._store(node)
        return digest, rid

    def audit(self, snapshot_id: int) -> bytes:
        """Recomputes the PRA of a sealed snapshot from scratch, checking every cached authenticator."""
        root = self._root_of(snapshot_id)
        return self._authenticator(root, snapshot_id, use_cache=False, check=True, memo={})

    def list_authenticator(self, snapshot_id: int) -> bytes:
        return self.aasl.list_authenticator(snapshot_id)

    # --- queries ---

    def _root_of(self, snapshot_id: int, view: Optional[SnapshotView] = None) -> Optional[RecordId]:
        if view is not None:
            if view.snapshot_id != snapshot_id:
                raise UnknownSnapshot(f"View is for snapshot {view.snapshot_id}, not {snapshot_id}.")
            return view.root
        if snapshot_id == 0:
            return None
        if snapshot_id == self.open_epoch:
            return self.open_root
        if not 0 < snapshot_id <= self.latest_snapshot:
            raise UnknownSnapshot(f"Snapshot {snapshot_id} is not sealed (latest is {self.latest_snapshot}).")
        return self.aasl.record(snapshot_id).root

    def _search(self, key: bytes, snapshot_id: int, root: Optional[RecordId]):
        """Returns the search path [(node, entry)] and whether its last node holds `key`."""
        path = []
        rid = root
        while rid is not None:
            self._check_depth(len(path))
            node = self._load(rid)
            entry = node.entry_at(snapshot_id)
            if entry is None:
                raise CorruptData(f"Node {node.key!r} is reachable at snapshot {snapshot_id} before it existed.")
            path.append((node, entry))
            if key == node.key:
                return path, True
            rid = entry.left if key < node.key else entry.right
        return path, False

    def get(self, key: bytes, snapshot_id: int) -> Optional[Tuple[bytes, int]]:
        """Unverified lookup of `key` as of a snapshot (or the open epoch)."""
        path, found = self._search(key, snapshot_id, self._root_of(snapshot_id))
        if not found:
            return None
        return path[-1][0].value_at(snapshot_id)

    def _membership(self, path, snapshot_id: int) -> MembershipProof:
        node, entry = path[-1]
        value, value_sid = node.value_at(snapshot_id)
        steps = [ProofStep(
            node.priority, self.hasher.digest(value), value_sid, "self",
            (self._authenticator(entry.left, snapshot_id), self._authenticator(entry.right, snapshot_id)),
        )]
        child = node
        for node, entry in reversed(path[:-1]):
            node_value, node_value_sid = node.value_at(snapshot_id)
            if child.key < node.key:
                side, sibling = "left", entry.right
            else:
                side, sibling = "right", entry.left
            steps.append(ProofStep(
                node.priority, self.hasher.digest(node_value), node_value_sid, side,
                (self._authenticator(sibling, snapshot_id),),
            ))
            child = node
        return MembershipProof(snapshot_id, tuple(steps), value, value_sid)

    def _absence(self, path, key: bytes, snapshot_id: int) -> AbsenceProof:
        steps = []
        for node, entry in path:
            value, value_sid = node.value_at(snapshot_id)
            if key < node.key:
                direction, sibling = "left", entry.right
            else:
                direction, sibling = "right", entry.left
            steps.append(AbsenceStep(
                node.key, self.hasher.digest(value), value_sid, direction,
                self._authenticator(sibling, snapshot_id),
            ))
        return AbsenceProof(snapshot_id, tuple(steps))

    def prove(self, key: bytes, snapshot_id: int, view: Optional[SnapshotView] = None) -> MembershipProof:
        path, found = self._search(key, snapshot_id, self._root_of(snapshot_id, view))
        if not found:
            raise KeyNotFound(f"Key {key!r} is not present at snapshot {snapshot_id}.")
        return self._membership(path, snapshot_id)

    def prove_absence(self, key: bytes, snapshot_id: int, view: Optional[SnapshotView] = None) -> AbsenceProof:
        path, found = self._search(key, snapshot_id, self._root_of(snapshot_id, view))
        if found:
            raise KeyExists(f"Key {key!r} is present at snapshot {snapshot_id}.")
        return self._absence(path, key, snapshot_id)

    def lookup_proof(self, key: bytes, snapshot_id: int,
                     view: Optional[SnapshotView] = None) -> Union[MembershipProof, AbsenceProof]:
        """A membership proof when `key` is present at the snapshot, an absence proof otherwise."""
        path, found = self._search(key, snapshot_id, self._root_of(snapshot_id, view))
        if found:
            return self._membership(path, snapshot_id)
        return self._absence(path, key, snapshot_id)

    # --- binary replication ---

    def _check_sealed(self, snapshot_id: int):
        if not 1 <= snapshot_id <= self.latest_snapshot:
            raise UnknownSnapshot(f"Snapshot {snapshot_id} is not sealed (latest is {self.latest_snapshot}).")

    def get_first_block_of_snapshot(self, snapshot_id: int) -> Optional[BlockImage]:
        self._check_sealed(snapshot_id)
        blocks = self.store.blocks_of_epoch(snapshot_id, sealed=True)
        if not blocks:
            return None
        return self.store.read_block(blocks[0], sealed=True)

    def get_next_block_of_snapshot(self, snapshot_id: int, block_no: int) -> Optional[BlockImage]:
        self._check_sealed(snapshot_id)
        for candidate in self.store.blocks_of_epoch(snapshot_id, sealed=True):
            if candidate > block_no:
                return self.store.read_block(candidate, sealed=True)
        return None

    def binary_update_begin(self, snapshot_id: int):
        """
        Opens a binary update that applies the pages of snapshot_id and any later snapshots.

        A page is streamed with its current stamp, so pages of earlier snapshots that were
        rewritten later arrive with the later snapshot: a session is only consistent once it
        reaches the source's latest snapshot.
        """
        if self.store.in_session:
            raise SnapshotGap("A binary update is already in progress.")
        if snapshot_id != self.latest_snapshot + 1:
            raise SnapshotGap(f"Cannot replicate snapshot {snapshot_id} onto snapshot {self.latest_snapshot}.")
        if self.store.has_pending_writes:
            self.discard()
        self.store.begin_update(snapshot_id)
        logger.debug(f"Binary update from snapshot {snapshot_id} started on {self.store.path}")

    def _check_session(self, snapshot_id: int):
        if not self.store.in_session or snapshot_id < self.store.session_start:
            raise NotInUpdateSession(f"No binary update covering snapshot {snapshot_id} is open.")

    def binary_update_block(self, snapshot_id: int, block_no: int, image: BlockImage):
        self._check_session(snapshot_id)
        if image.block_no != block_no or image.epoch_stamp != snapshot_id:
            raise ReplicationVerifyFailed(
                f"Block {image.block_no} stamped {image.epoch_stamp} offered as block {block_no} of {snapshot_id}."
            )
        self.store.write_block(block_no, image)

    def binary_update_commit(self, snapshot_id: int, expected_la: Optional[bytes] = None,
                             audit_from: Optional[int] = None, la_snapshot: Optional[int] = None):
        """
        Makes the received pages durable as snapshots up to snapshot_id.

        The list must refold to its head and the trees of snapshots audit_from..snapshot_id
        (by default every snapshot of the session) must reproduce their PRAs. With
        `expected_la`, element `la_snapshot` (default snapshot_id) must also carry it. A
        failed check rolls the session back.
        """
        self._check_session(snapshot_id)
        start = self.store.session_start
        try:
            self._verify_replica(snapshot_id, expected_la, la_snapshot or snapshot_id, audit_from or start)
        except (CatalogError, struct.error) as e:
            self.store.abort_update()
            self._load_superblock(strict=False)
            logger.error(f"Replicated snapshots {start}..{snapshot_id} failed verification: {e}")
            raise ReplicationVerifyFailed(f"Snapshot {snapshot_id} failed verification: {e}") from e
        self.store.commit_update(snapshot_id)
        self._load_superblock(strict=True)
        logger.info(f"Replicated snapshots {start}..{snapshot_id} into {self.store.path}")

    def binary_update_abort(self):
        """Abandons an open binary update; the pad stays at its last committed snapshot."""
        if self.store.in_session:
            logger.warning(f"Binary update from snapshot {self.store.session_start} on {self.store.path} aborted")
        self.store.abort_update()
        self._load_superblock(strict=False)

    def _verify_replica(self, snapshot_id: int, expected_la: Optional[bytes], la_snapshot: int, audit_from: int):
        self._load_superblock(strict=True)
        if self.aasl.length != snapshot_id:
            raise CorruptData(f"Replica list holds {self.aasl.length} snapshots, expected {snapshot_id}.")
        elements = self.aasl.elements()
        if refold(elements, self.hasher) != elements[-1].authenticator:
            raise ProofMismatch(f"Replica list does not refold to its head at snapshot {snapshot_id}.")
        if not 1 <= la_snapshot <= snapshot_id:
            raise UnknownSnapshot(f"Token snapshot {la_snapshot} is outside the replicated range.")
        if expected_la is not None and refold(elements[:la_snapshot], self.hasher) != expected_la:
            raise ProofMismatch(f"Replica LA for snapshot {la_snapshot} differs from the published token.")
        for sid in range(max(audit_from, 1), snapshot_id + 1):
            record = elements[sid - 1].record
            pra = self._authenticator(record.root, sid, use_cache=False, check=True, memo={})
            if pra != record.pra:
                raise ProofMismatch(f"Replica tree of snapshot {sid} does not reproduce its PRA.")

    def stats(self) -> dict:
        stats = self.store.stats()
        stats.update({
            "snapshots": self.latest_snapshot,
            "skip_no": self.skip_no,
            "hash_algorithm": self.hasher.algorithm,
            "cached_nodes": len(self._nodes),
        })
        return stats
