import json
import logging
import os
import re
import threading
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Callable, Collection, Deque, Dict, List, Optional, Tuple

from integrity_catalog.core.record_store import DEFAULT_PAGE_SIZE
from integrity_catalog.core.treap_pad import TreapPAD
from integrity_catalog.errors import (
    CatalogError,
    CorruptData,
    IoError,
    NoReplica,
    OriginUnreachable,
    ProtocolError,
    ReplicationVerifyFailed,
    StaleToken,
    StoreError,
    TransportError,
    Unauthorized,
    UnknownSnapshot,
)
from integrity_catalog.network.messages import (
    BEGIN_MESSAGES,
    MessageType,
    PeerMessage,
    Status,
    end_of_data,
)
from integrity_catalog.network.transport import Connection, Transport
from integrity_catalog.policy import CatalogToken

logger = logging.getLogger(__name__)

SAFE_NODE_ID = re.compile(r"^[A-Za-z0-9_.\-]+$")

UPDATE_KINDS = (MessageType.UPDATE_BEGIN, MessageType.UPDATE_GET_NEXT,
                MessageType.UPDATE_DATA, MessageType.UPDATE_END_OF_DATA)
RECOVER_KINDS = (MessageType.RECOVER_BEGIN, MessageType.RECOVER_GET_NEXT,
                 MessageType.RECOVER_DATA, MessageType.RECOVER_END_OF_DATA)


class Role(str, Enum):
    VERIFIER = "verifier"
    PRESERVER = "preserver"


# --- schedulers ---

class ManualScheduler:
    """Queues background work until run_pending() is called; deterministic for simulations."""

    def __init__(self):
        self.pending: Deque = deque()

    def submit(self, fn: Callable, *args):
        self.pending.append((fn, args))

    def run_pending(self) -> int:
        ran = 0
        while self.pending:
            fn, args = self.pending.popleft()
            ran += 1
            try:
                fn(*args)
            except CatalogError as e:
                logger.warning(f"Background task {getattr(fn, '__name__', fn)} failed: {e}")
        return ran

    def close(self):
        self.pending.clear()


class ThreadScheduler:
    def __init__(self, workers: int = 2):
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="preserve")

    def submit(self, fn: Callable, *args):
        future = self._executor.submit(fn, *args)
        future.add_done_callback(self._report)

    @staticmethod
    def _report(future):
        error = future.exception()
        if error is not None:
            logger.warning(f"Background preservation failed: {error}")

    def close(self):
        self._executor.shutdown(wait=True)


# --- token registry ---

class TokenRegistry:
    """Per-origin history of published tokens, optionally persisted as JSON."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.tokens: Dict[str, List[CatalogToken]] = defaultdict(list)
        self.reset_counters: Dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        data = json.loads(self.path.read_text())
        for origin, entry in data.items():
            self.tokens[origin] = [CatalogToken(sid, bytes.fromhex(la)) for sid, la in entry["tokens"]]
            self.reset_counters[origin] = entry.get("reset_counter", 0)
        logger.info(f"Loaded token registry for {len(data)} origin(s) from {self.path}")

    def _save(self):
        if self.path is None:
            return
        data = {
            origin: {
                "tokens": [[t.snapshot_id, t.authenticator.hex()] for t in tokens],
                "reset_counter": self.reset_counters.get(origin, 0),
            }
            for origin, tokens in self.tokens.items()
        }
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(data, indent=2))
        os.replace(tmp, self.path)

    def latest(self, origin_id: str) -> Optional[CatalogToken]:
        tokens = self.tokens.get(origin_id)
        return tokens[-1] if tokens else None

    def store(self, origin_id: str, token: CatalogToken):
        with self._lock:
            latest = self.latest(origin_id)
            if latest == token:
                return
            if latest is not None and token.snapshot_id <= latest.snapshot_id:
                raise StaleToken(f"Token {token} from '{origin_id}' is not newer than {latest}.")
            self.tokens[origin_id].append(token)
            self._save()

    def reset(self, origin_id: str, token: CatalogToken, counter: int):
        """Makes `token` the latest for the origin, dropping everything after it."""
        with self._lock:
            if counter <= self.reset_counters.get(origin_id, 0):
                raise Unauthorized(f"Reset counter {counter} from '{origin_id}' was already used.")
            kept = [t for t in self.tokens.get(origin_id, []) if t.snapshot_id < token.snapshot_id]
            self.tokens[origin_id] = kept + [token]
            self.reset_counters[origin_id] = counter
            self._save()


# --- block streaming shared by update and recover ---

def serve_blocks(pad: TreapPAD, message: PeerMessage, node_id: str, recover: bool) -> PeerMessage:
    """Answers a Begin/GetNext request with the next page of the snapshot, or EndOfData."""
    _, _, data_kind, end_kind = RECOVER_KINDS if recover else UPDATE_KINDS
    snapshot_id = message.snapshot_id
    try:
        if message.type in BEGIN_MESSAGES:
            image = pad.get_first_block_of_snapshot(snapshot_id)
        else:
            image = pad.get_next_block_of_snapshot(snapshot_id, message.block_no)
    except UnknownSnapshot:
        return end_of_data(end_kind, node_id, snapshot_id, Status.UNKNOWN_SNAPSHOT)
    except CatalogError as e:
        logger.error(f"Cannot serve snapshot {snapshot_id} to '{message.origin_id}': {e}")
        return end_of_data(end_kind, node_id, snapshot_id, Status.ERROR)
    if image is None:
        return end_of_data(end_kind, node_id, snapshot_id)
    return PeerMessage(data_kind, node_id, snapshot_id=snapshot_id, block_no=image.block_no, block=image)


def origin_handle_update(pad: TreapPAD, message: PeerMessage, node_id: str,
                         preservers: Optional[Collection[str]] = None) -> PeerMessage:
    if message.type not in (MessageType.UPDATE_BEGIN, MessageType.UPDATE_GET_NEXT):
        raise ProtocolError(f"Origin does not handle {message.type.name}.")
    if preservers is not None and message.origin_id not in preservers:
        logger.warning(f"Update request from unknown preserver '{message.origin_id}'")
        return end_of_data(MessageType.UPDATE_END_OF_DATA, node_id, message.snapshot_id, Status.UNAUTHORIZED)
    return serve_blocks(pad, message, node_id, recover=False)


def stream_snapshot(conn: Connection, pad: TreapPAD, node_id: str, snapshot_id: int, recover: bool,
                    timeout: Optional[float] = None) -> int:
    """Streams one snapshot's pages from a peer into the open binary update; returns the page count."""
    begin_kind, next_kind, data_kind, end_kind = RECOVER_KINDS if recover else UPDATE_KINDS
    reply = conn.request(PeerMessage(begin_kind, node_id, snapshot_id=snapshot_id), timeout)
    pages = 0
    while reply.type == data_kind:
        if reply.snapshot_id != snapshot_id or reply.block is None:
            raise ProtocolError(f"Page for snapshot {reply.snapshot_id} received while pulling {snapshot_id}.")
        pad.binary_update_block(snapshot_id, reply.block.block_no, reply.block)
        pages += 1
        request = PeerMessage(next_kind, node_id, snapshot_id=snapshot_id, block_no=reply.block.block_no)
        reply = conn.request(request, timeout)
    if reply.type != end_kind:
        raise ProtocolError(f"Unexpected {reply.type.name} while pulling snapshot {snapshot_id}.")
    if reply.status == Status.UNKNOWN_SNAPSHOT:
        raise UnknownSnapshot(f"Peer '{reply.origin_id}' does not hold snapshot {snapshot_id}.")
    if not reply.ok:
        raise ProtocolError(f"Peer '{reply.origin_id}' refused snapshot {snapshot_id}: {reply.status.name}.")
    return pages


def pull_snapshots(conn: Connection, pad: TreapPAD, node_id: str, token: CatalogToken, recover: bool,
                   timeout: Optional[float] = None, follow: bool = False) -> Tuple[int, int]:
    """
    Streams every snapshot the pad lacks up to `token` as one binary update, committed only
    after the list proves `token` and the new trees pass their audit.

    With `follow`, snapshots the peer sealed after `token` are pulled too, since their
    pages may carry rewritten pages of earlier ones. Returns (pages, last snapshot).
    """
    first = pad.latest_snapshot + 1
    pad.binary_update_begin(first)
    try:
        pages = 0
        snapshot_id = first
        while True:
            try:
                pages += stream_snapshot(conn, pad, node_id, snapshot_id, recover, timeout)
            except UnknownSnapshot:
                if snapshot_id <= token.snapshot_id:
                    raise
                snapshot_id -= 1
                break
            if snapshot_id >= token.snapshot_id and not follow:
                break
            snapshot_id += 1
        pad.binary_update_commit(snapshot_id, token.authenticator, la_snapshot=token.snapshot_id)
    except BaseException:
        pad.binary_update_abort()
        raise
    return pages, snapshot_id


# --- verifier / preserver node ---

class PeerNode:
    """A verifier, optionally also a preserver keeping block-level replicas of its origins."""

    def __init__(self, node_id: str, role: Role, data_dir: Path, transport: Transport,
                 scheduler=None, allowlist: Optional[Collection[str]] = None,
                 page_size: int = DEFAULT_PAGE_SIZE, hash_algorithm: str = "sha256",
                 reply_timeout: float = 5.0):
        self.node_id = node_id
        self.role = Role(role)
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.transport = transport
        self.scheduler = scheduler or ManualScheduler()
        self.allowlist = set(allowlist) if allowlist is not None else None
        self.page_size = page_size
        self.hash_algorithm = hash_algorithm
        self.reply_timeout = reply_timeout
        self.registry = TokenRegistry(self.data_dir / f"{node_id}.registry.json")
        self.replicas: Dict[str, TreapPAD] = {}
        self._locks: Dict[str, threading.RLock] = defaultdict(threading.RLock)
        self._locks_guard = threading.Lock()

    @property
    def is_preserver(self) -> bool:
        return self.role == Role.PRESERVER

    def _lock(self, origin_id: str) -> threading.RLock:
        with self._locks_guard:
            return self._locks[origin_id]

    def close(self):
        self.scheduler.close()
        for pad in self.replicas.values():
            pad.close()
        self.replicas.clear()

    # --- dispatch ---

    def handle(self, message: PeerMessage) -> PeerMessage:
        kind = message.type
        if not self._authorized(message.origin_id):
            logger.warning(f"Rejecting {kind.name} from unlisted origin '{message.origin_id}'")
            return self._refusal(message, Status.UNAUTHORIZED)
        if kind in (MessageType.STORE, MessageType.STORED_VERSION_REQUEST, MessageType.VERSION_RESET):
            return self.verifier_handle(message)
        if kind in (MessageType.RECOVER_VERSION_REQUEST, MessageType.RECOVER_BEGIN, MessageType.RECOVER_GET_NEXT):
            if not self.is_preserver:
                return self._refusal(message, Status.NO_REPLICA)
            return self.preserver_handle_recover(message)
        raise ProtocolError(f"{self.role.value} '{self.node_id}' does not handle {kind.name}.")

    def _authorized(self, origin_id: str) -> bool:
        if not SAFE_NODE_ID.match(origin_id):
            return False
        return self.allowlist is None or origin_id in self.allowlist

    def _refusal(self, message: PeerMessage, status: Status) -> PeerMessage:
        kind = message.type
        if kind in (MessageType.STORE, MessageType.VERSION_RESET):
            return PeerMessage(MessageType.STORE_REPLY, self.node_id, status=status)
        if kind == MessageType.STORED_VERSION_REQUEST:
            return PeerMessage(MessageType.STORED_VERSION_REPLY, self.node_id, status=status)
        if kind == MessageType.RECOVER_VERSION_REQUEST:
            return PeerMessage(MessageType.RECOVER_VERSION_REPLY, self.node_id, status=status)
        if kind in (MessageType.RECOVER_BEGIN, MessageType.RECOVER_GET_NEXT):
            return end_of_data(MessageType.RECOVER_END_OF_DATA, self.node_id, message.snapshot_id, status)
        raise ProtocolError(f"Cannot refuse {kind.name}.")

    # --- verifier role ---

    def verifier_handle(self, message: PeerMessage) -> PeerMessage:
        origin = message.origin_id
        if message.type == MessageType.STORE:
            try:
                self.registry.store(origin, message.token)
            except StaleToken as e:
                logger.warning(str(e))
                return PeerMessage(MessageType.STORE_REPLY, self.node_id, token=self.registry.latest(origin),
                                   status=Status.STALE_TOKEN)
            logger.info(f"Stored token {message.token} for '{origin}'")
            if self.is_preserver:
                self.scheduler.submit(self.preserver_sync, origin, message.token)
            return PeerMessage(MessageType.STORE_REPLY, self.node_id, token=message.token)

        if message.type == MessageType.STORED_VERSION_REQUEST:
            latest = self.registry.latest(origin)
            if latest is None:
                return PeerMessage(MessageType.STORED_VERSION_REPLY, self.node_id, status=Status.NO_TOKEN)
            return PeerMessage(MessageType.STORED_VERSION_REPLY, self.node_id, token=latest)

        if message.type == MessageType.VERSION_RESET:
            try:
                self.registry.reset(origin, message.token, message.reset_counter)
            except Unauthorized as e:
                logger.warning(str(e))
                return PeerMessage(MessageType.STORE_REPLY, self.node_id, token=self.registry.latest(origin),
                                   status=Status.UNAUTHORIZED)
            logger.info(f"'{origin}' reset its latest version to {message.token}")
            if self.is_preserver:
                self._reconcile_replica(origin, message.token)
            return PeerMessage(MessageType.STORE_REPLY, self.node_id, token=message.token)

        raise ProtocolError(f"Verifier does not handle {message.type.name}.")

    # --- preserver role ---

    def _replica_path(self, origin_id: str) -> Path:
        return self.data_dir / f"{origin_id}.icat"

    def _replica(self, origin_id: str, create: bool = True) -> Optional[TreapPAD]:
        pad = self.replicas.get(origin_id)
        if pad is not None:
            return pad
        path = self._replica_path(origin_id)
        if not path.exists() and not create:
            return None
        try:
            pad = TreapPAD.open_or_create(path, page_size=self.page_size, hash_algorithm=self.hash_algorithm)
        except IoError:
            raise
        except (CorruptData, StoreError) as e:
            logger.warning(f"Replica of '{origin_id}' cannot be opened ({e}); starting a new one")
            self.drop_replica(origin_id)
            if not create:
                return None
            pad = TreapPAD.create(path, self.page_size, hash_algorithm=self.hash_algorithm)
        self.replicas[origin_id] = pad
        return pad

    def drop_replica(self, origin_id: str):
        with self._lock(origin_id):
            pad = self.replicas.pop(origin_id, None)
            if pad is not None:
                pad.close()
            path = self._replica_path(origin_id)
            for leftover in (path, Path(str(path) + ".journal")):
                if leftover.exists():
                    leftover.unlink()
            logger.warning(f"Dropped replica of '{origin_id}'")

    def preserver_sync(self, origin_id: str, token: Optional[CatalogToken] = None) -> int:
        """Pulls every snapshot the replica lacks up to `token`; returns how many were replicated."""
        token = token or self.registry.latest(origin_id)
        if token is None:
            return 0
        with self._lock(origin_id):
            pad = self._replica(origin_id)
            if pad.latest_snapshot >= token.snapshot_id:
                if self._agrees(pad, token):
                    return 0
                logger.warning(f"Replica of '{origin_id}' disagrees with {token}; rebuilding it")
                self.drop_replica(origin_id)
                pad = self._replica(origin_id)
            try:
                return self._catch_up(origin_id, pad, token)
            except ReplicationVerifyFailed as e:
                logger.warning(f"Replica of '{origin_id}' failed verification ({e}); rebuilding it")
                self.drop_replica(origin_id)
                return self._catch_up(origin_id, self._replica(origin_id), token)

    @staticmethod
    def _agrees(pad: TreapPAD, token: CatalogToken) -> bool:
        try:
            return pad.list_authenticator(token.snapshot_id) == token.authenticator
        except CatalogError:
            return False

    def _catch_up(self, origin_id: str, pad: TreapPAD, token: CatalogToken) -> int:
        start = pad.latest_snapshot + 1
        try:
            with self.transport.connect(origin_id) as conn:
                pages, last = pull_snapshots(conn, pad, self.node_id, token, recover=False,
                                             timeout=self.reply_timeout, follow=True)
        except TransportError as e:
            raise OriginUnreachable(f"Preservation of '{origin_id}' interrupted: {e}") from e
        logger.info(f"Preserved snapshots {start}..{last} of '{origin_id}' ({pages} pages)")
        return last - start + 1

    def _reconcile_replica(self, origin_id: str, token: CatalogToken):
        with self._lock(origin_id):
            pad = self._replica(origin_id, create=False)
            if pad is None:
                return
            if pad.latest_snapshot >= token.snapshot_id:
                if pad.latest_snapshot != token.snapshot_id or not self._agrees(pad, token):
                    self.drop_replica(origin_id)
                return
        self.scheduler.submit(self.preserver_sync, origin_id, token)

    def preserver_handle_recover(self, message: PeerMessage) -> PeerMessage:
        origin = message.origin_id
        with self._lock(origin):
            pad = self._replica(origin, create=False)
            if message.type == MessageType.RECOVER_VERSION_REQUEST:
                try:
                    if pad is None or pad.latest_snapshot == 0:
                        raise NoReplica(f"No replica of '{origin}'.")
                    token = CatalogToken(pad.latest_snapshot, pad.list_authenticator(pad.latest_snapshot))
                except CatalogError as e:
                    logger.warning(f"Cannot offer a version of '{origin}': {e}")
                    return PeerMessage(MessageType.RECOVER_VERSION_REPLY, self.node_id, status=Status.NO_REPLICA)
                return PeerMessage(MessageType.RECOVER_VERSION_REPLY, self.node_id, token=token)
            if pad is None:
                return end_of_data(MessageType.RECOVER_END_OF_DATA, self.node_id, message.snapshot_id,
                                   Status.NO_REPLICA)
            return serve_blocks(pad, message, self.node_id, recover=True)
