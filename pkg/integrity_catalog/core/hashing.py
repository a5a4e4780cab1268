import hashlib
import struct
from functools import partial
from typing import Callable

from integrity_catalog.errors import ConfigError

DIGEST_SIZE = 32
NIL_DIGEST = b"\x00" * DIGEST_SIZE

# Domain-separation tags
NODE_TAG = b"N"
ELEMENT_TAG = b"E"
SNAPSHOT_TAG = b"S"


def le64(n: int) -> bytes:
    return struct.pack("<Q", n)


class Hasher:
    """Pluggable 32-octet hash function, named as in hashlib."""

    def __init__(self, algorithm: str = "sha256"):
        try:
            sample = hashlib.new(algorithm)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"Unknown hash algorithm '{algorithm}': {e}")
        if sample.digest_size != DIGEST_SIZE:
            raise ConfigError(
                f"Hash algorithm '{algorithm}' produces {sample.digest_size}-octet digests; "
                f"{DIGEST_SIZE} required."
            )
        self.algorithm = algorithm
        self._new: Callable = getattr(hashlib, algorithm, None) or partial(hashlib.new, algorithm)

    def digest(self, *parts: bytes) -> bytes:
        h = self._new()
        for part in parts:
            h.update(part)
        return h.digest()

    def __repr__(self) -> str:
        return f"Hasher({self.algorithm!r})"
