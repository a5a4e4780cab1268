import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional, Tuple

from integrity_catalog.core.hashing import DIGEST_SIZE, NIL_DIGEST
from integrity_catalog.errors import ConfigError

logger = logging.getLogger(__name__)

TOKEN_FORMAT = f"<Q{DIGEST_SIZE}s"
TOKEN_SIZE = struct.calcsize(TOKEN_FORMAT)


class CatalogToken(NamedTuple):
    """<snapshot_id, LA>: what the origin publishes at each seal."""
    snapshot_id: int
    authenticator: bytes

    def encode(self) -> bytes:
        return struct.pack(TOKEN_FORMAT, self.snapshot_id, self.authenticator)

    @classmethod
    def decode(cls, raw: bytes) -> "CatalogToken":
        return cls(*struct.unpack(TOKEN_FORMAT, raw))

    def __str__(self) -> str:
        return f"<{self.snapshot_id}, {self.authenticator.hex()[:16]}…>"


EMPTY_TOKEN = CatalogToken(0, NIL_DIGEST)


@dataclass(frozen=True)
class PolicyConfig:
    quorum_percent: float = 0.50
    winning_percent: float = 0.70
    recover_quorum_percent: float = 0.50
    recover_winning_percent: float = 0.70
    reply_timeout: float = 5.0

    def validate(self):
        for name in ("quorum_percent", "winning_percent", "recover_quorum_percent", "recover_winning_percent"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {value}.")
        if self.reply_timeout <= 0:
            raise ConfigError(f"reply_timeout must be positive, got {self.reply_timeout}.")


@dataclass
class VoteTally:
    verifier_count: int
    votes: Counter = field(default_factory=Counter)

    @classmethod
    def from_votes(cls, votes: Iterable[CatalogToken], verifier_count: int) -> "VoteTally":
        tally = cls(verifier_count, Counter(votes))
        if tally.participant_count > verifier_count:
            raise ValueError(f"{tally.participant_count} votes from {verifier_count} verifiers.")
        return tally

    @property
    def participant_count(self) -> int:
        return sum(self.votes.values())

    @property
    def absentees(self) -> int:
        return self.verifier_count - self.participant_count

    def leader(self) -> Optional[Tuple[CatalogToken, int]]:
        """The most voted token; ties go to the higher snapshot id."""
        if not self.votes:
            return None
        return max(self.votes.items(), key=lambda item: (item[1], item[0].snapshot_id, item[0].authenticator))


def _ratio(percent: float) -> Fraction:
    # str() keeps 0.7 exact instead of its binary expansion
    return Fraction(str(percent))


class Policy:
    """
    Default decision functions for seal, verify and recover.

    Hosts replace any of them by subclassing and passing the subclass to Catalog.
    """

    def __init__(self, config: Optional[PolicyConfig] = None):
        self.config = config or PolicyConfig()

    def accept_seal(self, positive_replies: int, verifier_count: int) -> bool:
        if verifier_count == 0:
            return False
        return Fraction(positive_replies, verifier_count) > _ratio(self.config.quorum_percent)

    def quorum_met(self, tally: VoteTally) -> bool:
        if tally.verifier_count == 0:
            return False
        return Fraction(tally.participant_count, tally.verifier_count) > _ratio(self.config.quorum_percent)

    def accept_verify(self, tally: VoteTally, token: CatalogToken) -> bool:
        if not self.quorum_met(tally):
            return False
        return tally.votes[token] >= _ratio(self.config.winning_percent) * tally.participant_count

    def choose_recovery(self, tally: VoteTally) -> Optional[CatalogToken]:
        """The version to restore: strictly more than the winning share of a strict quorum of preservers."""
        if tally.verifier_count == 0:
            return None
        if Fraction(tally.participant_count, tally.verifier_count) <= _ratio(self.config.recover_quorum_percent):
            return None
        leader = tally.leader()
        if leader is None:
            return None
        token, votes = leader
        if votes > _ratio(self.config.recover_winning_percent) * tally.participant_count:
            return token
        return None
