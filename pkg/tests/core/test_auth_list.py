import pytest
from dataclasses import replace

from integrity_catalog.core.auth_list import AuthList, ListProof, SnapshotRecord, link_levels, refold, verify_list_proof
from integrity_catalog.core.hashing import NIL_DIGEST, Hasher
from integrity_catalog.core.record_store import MIN_PAGE_SIZE, RecordId, RecordStore
from integrity_catalog.errors import NonSequentialAppend, ProofMismatch, UnknownSnapshot


@pytest.fixture
def hasher():
    return Hasher()


@pytest.fixture
def aasl(tmp_path, hasher):
    store = RecordStore.create(tmp_path / "list.icat", MIN_PAGE_SIZE)
    yield AuthList(store, hasher)
    store.close()


def record(hasher, sid):
    return SnapshotRecord(sid, RecordId(sid, 0), hasher.digest(b"pra", bytes([sid % 256])), 1_700_000_000 + sid)


def fill(aasl, hasher, count):
    return [aasl.append(record(hasher, sid)) for sid in range(1, count + 1)]


class TestAppend:

    @pytest.mark.parametrize("index,levels", [(1, 1), (2, 2), (3, 1), (4, 3), (6, 2), (8, 4), (12, 3)])
    def test_link_levels(self, index, levels):
        """Element i links back 2**l for every power of two dividing i."""
        assert link_levels(index) == levels

    def test_empty_list(self, aasl):
        """An empty list has the nil authenticator."""
        assert aasl.la == NIL_DIGEST
        assert aasl.list_authenticator(0) == NIL_DIGEST

    def test_append_must_be_sequential(self, aasl, hasher):
        """Snapshot ids are appended 1, 2, 3, ... without gaps."""
        aasl.append(record(hasher, 1))
        with pytest.raises(NonSequentialAppend):
            aasl.append(record(hasher, 3))

    def test_la_tracks_head(self, aasl, hasher):
        """Each append returns the new LA, also kept per element."""
        las = fill(aasl, hasher, 10)
        assert aasl.la == las[-1]
        assert len(set(las)) == 10
        for sid, la in enumerate(las, start=1):
            assert aasl.list_authenticator(sid) == la
            assert aasl.record(sid) == record(hasher, sid)

    def test_unknown_element(self, aasl, hasher):
        """Elements outside 1..length do not exist."""
        fill(aasl, hasher, 3)
        with pytest.raises(UnknownSnapshot):
            aasl.record(4)


class TestProofs:

    def test_every_element_proves_against_the_head(self, aasl, hasher):
        """A year of daily snapshots: every record proves, and refolding equals the LA."""
        fill(aasl, hasher, 365)
        for sid in range(1, 366):
            proof = aasl.prove(sid)
            assert verify_list_proof(proof, aasl.la, hasher) == record(hasher, sid)
            assert len(proof.chain) <= 2 * 365 .bit_length()
        assert refold(aasl.elements(), hasher) == aasl.la

    def test_proof_against_an_older_head(self, aasl, hasher):
        """upto= proves against the LA published when the list was shorter."""
        las = fill(aasl, hasher, 20)
        for target in (1, 3, 7, 10):
            proof = aasl.prove(target, upto=10)
            assert verify_list_proof(proof, las[9], hasher).snapshot_id == target
            with pytest.raises(ProofMismatch):
                verify_list_proof(proof, aasl.la, hasher)

    def test_wrong_la(self, aasl, hasher):
        """A proof does not verify against an unrelated authenticator."""
        fill(aasl, hasher, 8)
        with pytest.raises(ProofMismatch):
            verify_list_proof(aasl.prove(5), hasher.digest(b"other"), hasher)

    def test_forged_record(self, aasl, hasher):
        """Swapping in a different record invalidates the proof."""
        fill(aasl, hasher, 8)
        proof = aasl.prove(5)
        forged = ListProof(replace(proof.target, pra=hasher.digest(b"forged")), proof.chain)
        with pytest.raises(ProofMismatch):
            verify_list_proof(forged, aasl.la, hasher)

    @pytest.mark.parametrize("sid", [1, 5, 8])
    def test_forged_timestamp(self, aasl, hasher, sid):
        """Backdating a snapshot's seal time invalidates its proof."""
        fill(aasl, hasher, 8)
        proof = aasl.prove(sid)
        forged = ListProof(replace(proof.target, timestamp=proof.target.timestamp - 86_400), proof.chain)
        with pytest.raises(ProofMismatch):
            verify_list_proof(forged, aasl.la, hasher)

    def test_empty_chain(self, aasl, hasher):
        """A proof without elements is rejected."""
        fill(aasl, hasher, 2)
        with pytest.raises(ProofMismatch):
            verify_list_proof(ListProof(record(hasher, 1), ()), aasl.la, hasher)
