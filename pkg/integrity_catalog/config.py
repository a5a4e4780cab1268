import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

from dotenv import dotenv_values, load_dotenv

from integrity_catalog.core.hashing import Hasher
from integrity_catalog.core.record_store import DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE, MIN_PAGE_SIZE
from integrity_catalog.errors import ConfigError
from integrity_catalog.policy import PolicyConfig

# Load ICAT_* overrides from a .env file in the working directory
load_dotenv()

ENV_PREFIX = "ICAT_"
NODE_ID_SIZE = 16


class PeerAddress(NamedTuple):
    node_id: str
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.node_id}@{self.host}:{self.port}"


def parse_host_port(text: str) -> tuple:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError(f"Expected host:port, got '{text}'.")
    return host, int(port)


def parse_peer(text: str) -> PeerAddress:
    node_id, sep, address = text.strip().partition("@")
    if not sep or not node_id:
        raise ConfigError(f"Expected id@host:port, got '{text}'.")
    return PeerAddress(node_id, *parse_host_port(address))


def parse_peer_list(text: Optional[str]) -> List[PeerAddress]:
    return [parse_peer(item) for item in (text or "").split(",") if item.strip()]


def parse_allowlist(path: Union[str, Path]) -> Dict[str, tuple]:
    """Reads `origin_id host:port` lines; blank lines and # comments are ignored."""
    origins = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"Bad allowlist line '{line}' in {path}.")
        origins[parts[0]] = parse_host_port(parts[1])
    return origins


@dataclass
class CatalogConfig:
    node_id: str = "origin"
    listen: str = "127.0.0.1:7400"
    catalog_path: Path = Path("catalog.icat")
    verifiers: List[PeerAddress] = field(default_factory=list)
    preservers: List[str] = field(default_factory=list)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    page_size: int = DEFAULT_PAGE_SIZE
    skip_no: int = 0
    hash_algorithm: str = "sha256"
    cache_nodes: int = 100_000
    psk: Optional[bytes] = None
    seed: Optional[int] = None

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "CatalogConfig":
        """Reads a dotenv-format document; ICAT_<KEY> environment variables override it."""
        values: Dict[str, Optional[str]] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"Configuration file not found: {path}")
            values.update(dotenv_values(path))
        for name, value in os.environ.items():
            if name.startswith(ENV_PREFIX):
                values[name[len(ENV_PREFIX):]] = value
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: Dict[str, Optional[str]]) -> "CatalogConfig":
        def get(name: str, default=None):
            value = values.get(name)
            return default if value is None or value == "" else value

        try:
            policy = PolicyConfig(
                quorum_percent=float(get("QUORUM_PERCENT", 0.5)),
                winning_percent=float(get("WINNING_PERCENT", 0.7)),
                recover_quorum_percent=float(get("RECOVER_QUORUM_PERCENT", 0.5)),
                recover_winning_percent=float(get("RECOVER_WINNING_PERCENT", 0.7)),
                reply_timeout=float(get("REPLY_TIMEOUT", 5.0)),
            )
            psk = get("PSK")
            seed = get("SEED")
            config = cls(
                node_id=get("NODE_ID", "origin"),
                listen=get("LISTEN", "127.0.0.1:7400"),
                catalog_path=Path(get("CATALOG_PATH", "catalog.icat")),
                verifiers=parse_peer_list(get("VERIFIERS")),
                preservers=[p.strip() for p in get("PRESERVERS", "").split(",") if p.strip()],
                policy=policy,
                page_size=int(get("PAGE_SIZE", DEFAULT_PAGE_SIZE)),
                skip_no=int(get("SKIP_NO", 0)),
                hash_algorithm=get("HASH_ALGORITHM", "sha256"),
                cache_nodes=int(get("CACHE_NODES", 100_000)),
                psk=bytes.fromhex(psk) if psk else None,
                seed=int(seed) if seed is not None else None,
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid configuration value: {e}") from e
        return config

    @property
    def verifier_ids(self) -> List[str]:
        return [peer.node_id for peer in self.verifiers]

    def peer_addresses(self) -> Dict[str, tuple]:
        return {peer.node_id: (peer.host, peer.port) for peer in self.verifiers}

    def validate(self):
        if not self.node_id or len(self.node_id.encode("utf-8")) > NODE_ID_SIZE:
            raise ConfigError(f"NODE_ID must be 1..{NODE_ID_SIZE} octets, got '{self.node_id}'.")
        parse_host_port(self.listen)
        self.policy.validate()
        if self.page_size < MIN_PAGE_SIZE or self.page_size > MAX_PAGE_SIZE or self.page_size & (self.page_size - 1):
            raise ConfigError(f"PAGE_SIZE must be a power of two in [{MIN_PAGE_SIZE}, {MAX_PAGE_SIZE}].")
        if self.skip_no < 0:
            raise ConfigError("SKIP_NO must not be negative.")
        ids = self.verifier_ids
        if len(set(ids)) != len(ids):
            raise ConfigError("VERIFIERS contains duplicate ids.")
        for peer_id in ids:
            if len(peer_id.encode("utf-8")) > NODE_ID_SIZE:
                raise ConfigError(f"Verifier id '{peer_id}' is longer than {NODE_ID_SIZE} octets.")
        unknown = sorted(set(self.preservers) - set(ids))
        if unknown:
            raise ConfigError(f"PRESERVERS must be a subset of VERIFIERS; unknown: {', '.join(unknown)}.")
        Hasher(self.hash_algorithm)
