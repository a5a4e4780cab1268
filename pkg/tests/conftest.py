import pytest
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

# Add project root to path to ensure modules are found
sys.path.append(str(Path(__file__).parent.parent))

from integrity_catalog.catalog import Catalog
from integrity_catalog.config import CatalogConfig, PeerAddress
from integrity_catalog.core.record_store import MIN_PAGE_SIZE, BlockImage
from integrity_catalog.core.treap_pad import TreapPAD
from integrity_catalog.network.peer import ManualScheduler, PeerNode, Role
from integrity_catalog.network.transport import SimulatedNetwork
from integrity_catalog.policy import PolicyConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run acceptance-scale tests.")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def pad(tmp_path):
    """A fresh TreapPAD on small pages, closed after the test."""
    pad = TreapPAD.create(tmp_path / "pad.icat", page_size=MIN_PAGE_SIZE)
    yield pad
    pad.close()


@dataclass
class Deployment:
    """An origin catalog plus verifier/preserver peers wired over a SimulatedNetwork."""
    network: SimulatedNetwork
    catalog: Catalog
    peers: Dict[str, PeerNode]
    scheduler: ManualScheduler
    config: CatalogConfig

    def preserve(self) -> int:
        """Runs the preservation work queued by the last seal."""
        return self.scheduler.run_pending()

    def seal(self, timestamp=None):
        token = self.catalog.seal(timestamp)
        self.preserve()
        return token

    def reopen(self) -> Catalog:
        """Closes the origin catalog and opens a new instance on the same file."""
        self.catalog.close()
        self.catalog = Catalog(self.config, transport=self.network.transport(self.config.node_id))
        self.network.register(self.config.node_id, self.catalog.handle)
        return self.catalog

    def restart_peer(self, peer_id: str) -> PeerNode:
        """Closes a peer and starts a new node on the same data directory."""
        old = self.peers[peer_id]
        old.close()
        node = PeerNode(peer_id, old.role, old.data_dir, self.network.transport(peer_id),
                        scheduler=self.scheduler, page_size=MIN_PAGE_SIZE)
        self.network.register(peer_id, node.handle)
        self.peers[peer_id] = node
        return node


@pytest.fixture
def deployment(tmp_path):
    """Factory: deployment(verifiers=3, preservers=0, **policy) -> Deployment."""
    built = []

    def make(verifiers: int = 3, preservers: int = 0, seed: int = 7, **policy) -> Deployment:
        network = SimulatedNetwork()
        scheduler = ManualScheduler()
        ids = [f"v{i}" for i in range(1, verifiers + 1)]
        config = CatalogConfig(
            node_id="origin",
            catalog_path=tmp_path / "origin.icat",
            verifiers=[PeerAddress(peer_id, "127.0.0.1", 0) for peer_id in ids],
            preservers=ids[:preservers],
            policy=PolicyConfig(**policy),
            page_size=MIN_PAGE_SIZE,
            seed=seed,
        )
        catalog = Catalog.init(config, transport=network.transport("origin"))
        network.register("origin", catalog.handle)
        peers = {}
        for index, peer_id in enumerate(ids):
            role = Role.PRESERVER if index < preservers else Role.VERIFIER
            node = PeerNode(peer_id, role, tmp_path / peer_id, network.transport(peer_id),
                            scheduler=scheduler, page_size=MIN_PAGE_SIZE)
            network.register(peer_id, node.handle)
            peers[peer_id] = node
        built.append(Deployment(network, catalog, peers, scheduler, config))
        return built[-1]

    yield make
    for made in built:
        made.catalog.close()
        for node in made.peers.values():
            node.close()


@pytest.fixture
def flip_octet():
    """Inverts one octet of a file in place."""
    def flip(path: Path, offset: int):
        with open(path, "r+b") as handle:
            handle.seek(offset)
            original = handle.read(1)
            handle.seek(offset)
            handle.write(bytes([original[0] ^ 0xFF]))
    return flip


@pytest.fixture
def scramble_heap():
    """Returns a function that garbles the used heap of a page image."""
    def scramble(image: BlockImage) -> BlockImage:
        payload = bytearray(image.payload)
        (free_offset,) = struct.unpack_from("<H", payload, 10)
        for i in range(free_offset, len(payload)):
            payload[i] ^= 0x5A
        return BlockImage(image.block_no, image.epoch_stamp, bytes(payload))
    return scramble
