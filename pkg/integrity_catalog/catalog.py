import json
import logging
import os
import random
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from integrity_catalog.config import CatalogConfig
from integrity_catalog.core.auth_list import SnapshotRecord, verify_list_proof
from integrity_catalog.core.hashing import NIL_DIGEST, Hasher
from integrity_catalog.core.record_store import RecordId
from integrity_catalog.core.treap_pad import (
    MembershipProof,
    SnapshotView,
    TreapPAD,
    verify_absence,
    verify_proof,
)
from integrity_catalog.errors import (
    CatalogError,
    ConfigError,
    IntegrityViolation,
    IoError,
    KeyNotFound,
    ListProofFailed,
    PadError,
    ProofMismatch,
    ProtocolError,
    RecoverQuorumFailed,
    RecoverTransferFailed,
    RecoverVerifyFailed,
    ReplicationVerifyFailed,
    SealQuorumFailed,
    StoreError,
    TransportError,
    UnknownSnapshot,
    VerifyMismatch,
    VerifyQuorumFailed,
)
from integrity_catalog.network.messages import MessageType, PeerMessage, Status
from integrity_catalog.network.peer import origin_handle_update, pull_snapshots
from integrity_catalog.network.transport import TcpTransport, Transport
from integrity_catalog.policy import EMPTY_TOKEN, CatalogToken, Policy, VoteTally

logger = logging.getLogger(__name__)

# Failures of on-disk state met while reading; transport and config errors are not among them
DISK_ERRORS = (PadError, StoreError, struct.error, IndexError, ValueError)


@dataclass(frozen=True)
class VerifiedContext:
    """Snapshot coordinates attested by the verifier network; required by every verified read."""
    snapshot_id: int
    la: bytes
    pra: bytes
    root: Optional[RecordId]

    @property
    def token(self) -> CatalogToken:
        return CatalogToken(self.snapshot_id, self.la)


class HistoryEntry(NamedTuple):
    snapshot_id: int
    value: bytes
    timestamp: int


class PendingLog:
    """
    JSON-lines log of the put/amend calls made since the last seal.

    The catalog file only ever holds sealed snapshots, so unsealed mutations are
    replayed from here when another process opens the catalog.
    """

    def __init__(self, path: Path):
        self.path = path

    def append(self, op: str, key: bytes, data: bytes, epoch: int):
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps({"op": op, "key": key.hex(), "data": data.hex(), "epoch": epoch}) + "\n")

    def entries(self) -> List[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def replay(self, pad: TreapPAD) -> int:
        replayed = 0
        for entry in self.entries():
            if entry["epoch"] != pad.open_epoch:
                logger.warning(f"Skipping pending {entry['op']} recorded for epoch {entry['epoch']}")
                continue
            key, data = bytes.fromhex(entry["key"]), bytes.fromhex(entry["data"])
            if entry["op"] == "put":
                pad.insert(key, data)
            else:
                pad.amend(key, data)
            replayed += 1
        if replayed:
            logger.info(f"Replayed {replayed} unsealed mutation(s) from {self.path}")
        return replayed

    def clear(self):
        if self.path.exists():
            self.path.unlink()


class Catalog:
    """
    The fixity catalog of one origin.

    Mutations go to the local TreapPAD; seal publishes the new token to the
    verifiers, verify asks them which token is current, and every verified read
    checks a proof against what they attested. recover rebuilds the local file
    from a preserver's replica.
    """

    def __init__(self, config: CatalogConfig, transport: Optional[Transport] = None,
                 policy: Optional[Policy] = None, rng: Optional[random.Random] = None):
        self.config = config
        self.path = Path(config.catalog_path)
        self.hasher = Hasher(config.hash_algorithm)
        self.policy = policy or Policy(config.policy)
        self.transport = transport or TcpTransport(
            config.peer_addresses(), config.psk, config.policy.reply_timeout, node_id=config.node_id
        )
        self.rng = rng or random.Random(config.seed)
        self.pending = PendingLog(Path(str(self.path) + ".pending"))
        self.sealed_context: Optional[VerifiedContext] = None
        self._pad: Optional[TreapPAD] = None
        self._lock = threading.RLock()

    @classmethod
    def init(cls, config: CatalogConfig, force: bool = False, **kwargs) -> "Catalog":
        path = Path(config.catalog_path)
        if path.exists():
            if not force:
                raise IoError(f"Catalog already exists: {path}")
            for leftover in (path, Path(str(path) + ".journal"), Path(str(path) + ".pending")):
                if leftover.exists():
                    leftover.unlink()
        pad = TreapPAD.create(path, config.page_size, config.skip_no, config.hash_algorithm, config.cache_nodes)
        pad.close()
        logger.info(f"Created catalog {path} (page size {config.page_size}, skip {config.skip_no})")
        return cls(config, **kwargs)

    @property
    def pad(self) -> TreapPAD:
        """Opened on first use so that recover works on a file that no longer opens."""
        with self._lock:
            if self._pad is None:
                pad = TreapPAD.open(self.path, self.config.skip_no, self.config.hash_algorithm,
                                    self.config.cache_nodes)
                try:
                    self.pending.replay(pad)
                except CatalogError:
                    pad.close()
                    raise
                self._pad = pad
            return self._pad

    def close(self):
        with self._lock:
            if self._pad is not None:
                self._pad.close()
                self._pad = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- ingestion ---

    def put(self, key: bytes, value: bytes):
        with self._lock:
            self.pad.insert(key, value)
            self.pending.append("put", key, value, self.pad.open_epoch)

    def amend(self, key: bytes, suffix: bytes):
        with self._lock:
            self.pad.amend(key, suffix)
            self.pending.append("amend", key, suffix, self.pad.open_epoch)

    def latest_token(self) -> CatalogToken:
        """The token of the latest local snapshot, read from disk without verification."""
        return CatalogToken(self.pad.latest_snapshot, self.pad.la)

    # --- peer traffic ---

    def _poll(self, peers: Sequence[str], message: PeerMessage) -> Dict[str, PeerMessage]:
        """Sends `message` to each peer in turn; replies that miss the shared deadline count as absent."""
        deadline = time.monotonic() + self.config.policy.reply_timeout
        replies = {}
        for peer_id in peers:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                logger.warning(f"Reply deadline passed before contacting '{peer_id}'")
                continue
            try:
                with self.transport.connect(peer_id) as conn:
                    replies[peer_id] = conn.request(message, remaining)
            except (TransportError, ProtocolError) as e:
                logger.warning(f"No reply from '{peer_id}': {e}")
        return replies

    def handle(self, message: PeerMessage) -> PeerMessage:
        """Serves preservers pulling sealed pages."""
        with self._lock:
            return origin_handle_update(self.pad, message, self.config.node_id, self.config.preservers)

    # --- seal ---

    def seal(self, timestamp: Optional[int] = None) -> CatalogToken:
        """
        Seals the open epoch and publishes its token.

        The snapshot is committed locally even when the quorum is missed; the
        next seal publishes a newer token that supersedes it.
        """
        verifiers = self.config.verifier_ids
        if not verifiers:
            raise ConfigError("No verifiers configured; cannot seal.")
        with self._lock:
            view = self.pad.snapshot(timestamp)
            token = CatalogToken(view.snapshot_id, self.pad.la)
            self.pending.clear()
        self.sealed_context = VerifiedContext(view.snapshot_id, token.authenticator, view.pra, view.root)

        replies = self._poll(verifiers, PeerMessage(MessageType.STORE, self.config.node_id, token=token))
        positive = 0
        for peer_id, reply in replies.items():
            if reply.type == MessageType.STORE_REPLY and reply.ok:
                positive += 1
            else:
                logger.warning(f"'{peer_id}' refused token {token}: {reply.status.name}")
        logger.info(f"Seal of snapshot {token.snapshot_id}: {positive}/{len(verifiers)} verifiers stored the token")
        if not self.policy.accept_seal(positive, len(verifiers)):
            raise SealQuorumFailed(
                f"Only {positive} of {len(verifiers)} verifiers stored token {token}; "
                f"snapshot {token.snapshot_id} is kept locally."
            )
        return token

    # --- verify ---

    def _tally(self, verifiers: Sequence[str]) -> VoteTally:
        replies = self._poll(verifiers, PeerMessage(MessageType.STORED_VERSION_REQUEST, self.config.node_id))
        votes = []
        for peer_id, reply in replies.items():
            if reply.type != MessageType.STORED_VERSION_REPLY:
                logger.warning(f"'{peer_id}' answered with {reply.type.name}")
            elif reply.status == Status.OK:
                votes.append(reply.token)
            elif reply.status == Status.NO_TOKEN:
                votes.append(EMPTY_TOKEN)
            else:
                logger.warning(f"'{peer_id}' declined to vote: {reply.status.name}")
        return VoteTally.from_votes(votes, len(verifiers))

    def verify(self) -> VerifiedContext:
        verifiers = self.config.verifier_ids
        if not verifiers:
            raise ConfigError("No verifiers configured; cannot verify.")
        tally = self._tally(verifiers)
        logger.info(f"Verify: {tally.participant_count}/{tally.verifier_count} verifiers replied, "
                    f"{len(tally.votes)} distinct token(s)")
        if not self.policy.quorum_met(tally):
            raise VerifyQuorumFailed(f"Only {tally.participant_count} of {tally.verifier_count} verifiers replied.")

        try:
            with self._lock:
                local = self.latest_token()
        except IoError:
            raise
        except DISK_ERRORS as e:
            raise ListProofFailed(f"Local snapshot list is unreadable: {e}") from e

        if not self.policy.accept_verify(tally, local):
            leader = tally.leader()
            raise VerifyMismatch(
                f"Local token {local} has {tally.votes[local]} of {tally.participant_count} votes; "
                f"the network favours {leader[0]} with {leader[1]}."
            )
        context = self._context(local)
        logger.info(f"Catalog verified at snapshot {context.snapshot_id}")
        return context

    def _context(self, token: CatalogToken) -> VerifiedContext:
        if token.snapshot_id == 0:
            return VerifiedContext(0, token.authenticator, NIL_DIGEST, None)
        try:
            with self._lock:
                proof = self.pad.aasl.prove(token.snapshot_id)
            record = verify_list_proof(proof, token.authenticator, self.hasher)
        except IoError:
            raise
        except DISK_ERRORS as e:
            raise ListProofFailed(f"Snapshot {token.snapshot_id} cannot be proven against {token}: {e}") from e
        return VerifiedContext(token.snapshot_id, token.authenticator, record.pra, record.root)

    # --- verified reads ---

    def verified_get(self, ctx: VerifiedContext, key: bytes) -> Optional[Tuple[bytes, int]]:
        """(value, value_snapshot_id) taken from a proof checked against ctx.pra; None if provably absent."""
        view = SnapshotView(ctx.snapshot_id, ctx.root, ctx.pra)
        try:
            with self._lock:
                proof = self.pad.lookup_proof(key, ctx.snapshot_id, view)
            if isinstance(proof, MembershipProof):
                key_digest, value, value_snapshot_id = verify_proof(proof, ctx.pra, self.hasher)
                if key_digest != self.hasher.digest(key):
                    raise ProofMismatch(f"Proof is for another key than {key!r}.")
                if value_snapshot_id > ctx.snapshot_id:
                    raise ProofMismatch(f"Value of {key!r} is stamped after snapshot {ctx.snapshot_id}.")
                return value, value_snapshot_id
            verify_absence(proof, key, ctx.pra, self.hasher)
            return None
        except IoError:
            raise
        except DISK_ERRORS as e:
            logger.error(f"Lookup of {key!r} at snapshot {ctx.snapshot_id} failed verification: {e}")
            raise IntegrityViolation(f"Lookup of {key!r} at snapshot {ctx.snapshot_id} failed: {e}") from e

    def _verified_record(self, ctx: VerifiedContext, snapshot_id: int) -> SnapshotRecord:
        try:
            with self._lock:
                proof = self.pad.aasl.prove(snapshot_id, upto=ctx.snapshot_id)
            return verify_list_proof(proof, ctx.la, self.hasher)
        except IoError:
            raise
        except DISK_ERRORS as e:
            raise IntegrityViolation(f"Snapshot record {snapshot_id} failed verification: {e}") from e

    def snapshot_context(self, ctx: VerifiedContext, snapshot_id: int) -> VerifiedContext:
        """A context for an earlier snapshot, proven through the list against ctx.la."""
        if not 1 <= snapshot_id <= ctx.snapshot_id:
            raise UnknownSnapshot(f"Snapshot {snapshot_id} is not covered by a context at {ctx.snapshot_id}.")
        record = self._verified_record(ctx, snapshot_id)
        return VerifiedContext(record.snapshot_id, ctx.la, record.pra, record.root)

    def history(self, ctx: VerifiedContext, key: bytes) -> List[HistoryEntry]:
        """Every version of `key` up to ctx, newest first, one entry per snapshot that changed it."""
        found = self.verified_get(ctx, key)
        if found is None:
            raise KeyNotFound(f"Key {key!r} is not present at snapshot {ctx.snapshot_id}.")
        entries = []
        while found is not None:
            value, value_snapshot_id = found
            if entries and value_snapshot_id >= entries[-1].snapshot_id:
                raise IntegrityViolation(f"History of {key!r} does not move backwards at {value_snapshot_id}.")
            record = self._verified_record(ctx, value_snapshot_id)
            entries.append(HistoryEntry(value_snapshot_id, value, record.timestamp))
            if value_snapshot_id <= 1:
                break
            found = self.verified_get(self.snapshot_context(ctx, value_snapshot_id - 1), key)
        return entries

    # --- recover ---

    def recover(self) -> VerifiedContext:
        preservers = self.config.preservers
        if not preservers:
            raise ConfigError("No preservers configured; cannot recover.")
        replies = self._poll(preservers, PeerMessage(MessageType.RECOVER_VERSION_REQUEST, self.config.node_id))
        offers = {
            peer_id: reply.token for peer_id, reply in replies.items()
            if reply.type == MessageType.RECOVER_VERSION_REPLY and reply.ok
        }
        tally = VoteTally.from_votes(offers.values(), len(preservers))
        token = self.policy.choose_recovery(tally)
        if token is None:
            raise RecoverQuorumFailed(
                f"{tally.participant_count} of {len(preservers)} preservers offered a replica; no version won."
            )
        logger.info(f"Recovering to {token} ({tally.votes[token]}/{tally.participant_count} preservers agree)")

        holders = [peer_id for peer_id, offered in offers.items() if offered == token]
        self.rng.shuffle(holders)
        with self._lock:
            self.close()
            last_error: Optional[CatalogError] = None
            for holder in holders:
                try:
                    self._rebuild_from(holder, token)
                    break
                except (RecoverTransferFailed, RecoverVerifyFailed) as e:
                    logger.warning(f"Rebuild from '{holder}' failed: {e}")
                    last_error = e
            else:
                raise last_error
            self.pending.clear()
        self._reset_verifiers(token)
        return self._context(token)

    def _rebuild_from(self, holder: str, token: CatalogToken):
        target = Path(str(self.path) + ".recover")
        for leftover in (target, Path(str(target) + ".journal")):
            if leftover.exists():
                leftover.unlink()
        pad = TreapPAD.create(target, self.config.page_size, self.config.skip_no, self.config.hash_algorithm,
                              self.config.cache_nodes)
        try:
            with self.transport.connect(holder) as conn:
                pull_snapshots(conn, pad, self.config.node_id, token, recover=True,
                               timeout=self.config.policy.reply_timeout)
        except ReplicationVerifyFailed as e:
            raise RecoverVerifyFailed(f"Replica from '{holder}' does not match {token}: {e}") from e
        except (TransportError, ProtocolError, PadError, StoreError) as e:
            raise RecoverTransferFailed(f"Transfer from '{holder}' failed: {e}") from e
        finally:
            pad.close()

        journal = Path(str(self.path) + ".journal")
        if journal.exists():
            journal.unlink()
        os.replace(target, self.path)
        logger.info(f"Rebuilt {self.path} from '{holder}' at snapshot {token.snapshot_id}")

    def _reset_verifiers(self, token: CatalogToken):
        counter = int(time.time() * 1000)
        message = PeerMessage(MessageType.VERSION_RESET, self.config.node_id, token=token, reset_counter=counter)
        replies = self._poll(self.config.verifier_ids, message)
        acknowledged = sum(1 for reply in replies.values() if reply.ok)
        logger.info(f"Version reset to {token} acknowledged by {acknowledged}/{len(self.config.verifier_ids)} verifiers")

    def stats(self, audit: bool = False) -> dict:
        with self._lock:
            stats = self.pad.stats()
            if audit:
                stats["audited_snapshots"] = [
                    sid for sid in range(1, self.pad.latest_snapshot + 1)
                    if self.pad.audit(sid) == self.pad.aasl.record(sid).pra
                ]
        return stats
