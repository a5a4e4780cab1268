class CatalogError(Exception):
    """Base class for every error raised by integrity_catalog."""


class ConfigError(CatalogError, ValueError):
    pass


# --- record store ---

class StoreError(CatalogError):
    pass


class IoError(StoreError):
    pass


class InvalidPageSize(StoreError):
    pass


class RecordTooLarge(StoreError):
    pass


class BadRecordId(StoreError):
    pass


class CorruptBlock(StoreError):
    pass


class EpochRegression(StoreError):
    pass


class BadBlockNo(StoreError):
    pass


class NotInUpdateSession(StoreError):
    pass


# --- treap PAD ---

class PadError(CatalogError):
    pass


class KeyExists(PadError):
    pass


class KeyNotFound(PadError):
    pass


class KeyTooLarge(PadError):
    pass


class CorruptData(PadError):
    pass


class ProofMismatch(PadError):
    pass


class UnknownSnapshot(PadError):
    pass


class SnapshotGap(PadError):
    pass


class ReplicationVerifyFailed(PadError):
    pass


# --- authenticated list ---

class NonSequentialAppend(PadError):
    pass


class ListProofFailed(PadError):
    pass


# --- catalog flows ---

class QuorumError(CatalogError):
    """Any failure of the peer voting policy."""


class SealQuorumFailed(QuorumError):
    pass


class VerifyQuorumFailed(QuorumError):
    pass


class VerifyMismatch(QuorumError):
    pass


class RecoverQuorumFailed(QuorumError):
    pass


class IntegrityViolation(CatalogError):
    pass


class RecoverTransferFailed(CatalogError):
    pass


class RecoverVerifyFailed(CatalogError):
    pass


# --- peer protocol ---

class ProtocolError(CatalogError):
    pass


class TransportError(CatalogError):
    pass


class OriginUnreachable(TransportError):
    pass


class StaleToken(ProtocolError):
    pass


class Unauthorized(ProtocolError):
    pass


class NoReplica(ProtocolError):
    pass
