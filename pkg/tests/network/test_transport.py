import io
import pytest
import threading

from integrity_catalog.core.record_store import MIN_PAGE_SIZE
from integrity_catalog.core.treap_pad import TreapPAD
from integrity_catalog.errors import KeyNotFound, TransportError
from integrity_catalog.network.messages import MessageType, PeerMessage, Status, decode_frame, encode_frame
from integrity_catalog.network.peer import ManualScheduler, PeerNode, Role, origin_handle_update
from integrity_catalog.network.transport import DROP, PeerServer, SimulatedNetwork, TcpTransport, _FrameHandler
from integrity_catalog.policy import CatalogToken

TOKEN = CatalogToken(1, b"\x11" * 32)


def ack(message):
    return PeerMessage(MessageType.STORE_REPLY, "v1", token=message.token)


@pytest.fixture
def network():
    network = SimulatedNetwork()
    network.register("v1", ack)
    return network


class TestSimulatedNetwork:

    def test_request_reply(self, network):
        """A request reaches the handler and its reply comes back."""
        with network.transport("origin").connect("v1") as conn:
            reply = conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN))
        assert reply.type == MessageType.STORE_REPLY and reply.token == TOKEN

    def test_trace_counts_octets(self, network):
        """Every frame is traced with its size; bytes_sent is their sum."""
        with network.transport("origin").connect("v1") as conn:
            conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN))
        assert [(t.source, t.destination, t.type) for t in network.trace] == [
            ("origin", "v1", MessageType.STORE), ("v1", "origin", MessageType.STORE_REPLY),
        ]
        assert network.bytes_sent == sum(t.size for t in network.trace)
        network.reset_counters()
        assert network.bytes_sent == 0 and not network.trace

    def test_down_node(self, network):
        """A node marked down cannot be reached."""
        network.down.add("v1")
        with pytest.raises(TransportError):
            network.transport("origin").connect("v1")

    def test_unknown_node(self, network):
        """Unregistered nodes are unreachable."""
        with pytest.raises(TransportError):
            network.transport("origin").connect("v9")

    def test_dropped_frame(self, network):
        """A script can drop frames; the caller sees a missing reply."""
        network.script(lambda src, dst, frame: DROP if dst == "origin" else frame)
        with network.transport("origin").connect("v1") as conn:
            with pytest.raises(TransportError, match="No reply"):
                conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN))

    def test_rewritten_frame(self, network):
        """A script can rewrite frames in flight."""
        def refuse(src, dst, frame):
            message = decode_frame(frame)
            if message.type != MessageType.STORE_REPLY:
                return frame
            return encode_frame(PeerMessage(message.type, message.origin_id, status=Status.STALE_TOKEN))

        network.script(refuse)
        with network.transport("origin").connect("v1") as conn:
            reply = conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN))
        assert reply.status == Status.STALE_TOKEN

    def test_failing_handler(self, network, mocker):
        """A handler error means no reply, not a crash of the caller."""
        handler = mocker.Mock(side_effect=KeyNotFound("boom"))
        network.register("v2", handler)
        with network.transport("origin").connect("v2") as conn:
            with pytest.raises(TransportError):
                conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN))
        handler.assert_called_once()

    def test_closed_connection(self, network):
        """Sending on a closed connection fails."""
        conn = network.transport("origin").connect("v1")
        conn.close()
        with pytest.raises(TransportError):
            conn.send(PeerMessage(MessageType.STORE, "origin", token=TOKEN))


@pytest.fixture
def tcp_server():
    """Starts PeerServers on ephemeral ports; yields a factory."""
    servers = []

    def start(handler, psk=None):
        server = PeerServer(("127.0.0.1", 0), handler, psk)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return server.server_address

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


class TestTcpTransport:

    def test_request_reply(self, tcp_server):
        """Frames travel over a real socket, several per connection."""
        address = tcp_server(ack)
        transport = TcpTransport({"v1": address})
        with transport.connect("v1") as conn:
            for sid in (1, 2):
                token = CatalogToken(sid, b"\x22" * 32)
                reply = conn.request(PeerMessage(MessageType.STORE, "origin", token=token), timeout=5)
                assert reply.token == token

    def test_psk_authenticates_frames(self, tcp_server):
        """With a shared key frames carry a MAC; a wrong key gets no answer."""
        address = tcp_server(ack, psk=b"secret")
        good = TcpTransport({"v1": address}, psk=b"secret")
        with good.connect("v1") as conn:
            assert conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN), timeout=5).ok

        bad = TcpTransport({"v1": address}, psk=b"wrong")
        with bad.connect("v1") as conn:
            with pytest.raises(TransportError):
                conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN), timeout=5)

    def test_unknown_peer(self):
        """Peers without a configured address are unreachable."""
        with pytest.raises(TransportError):
            TcpTransport({}).connect("v1")

    def test_refused_connection(self, tcp_server):
        """A port nobody listens on any more surfaces as a TransportError."""
        address = tcp_server(ack)
        transport = TcpTransport({"v1": address}, connect_timeout=1)
        with transport.connect("v1"):
            pass
        transport.addresses["v1"] = ("127.0.0.1", 1)
        with pytest.raises(TransportError):
            transport.connect("v1")


def exchange(origin_side, preserver_side):
    """Stores a token at v1, reads it back, then pulls snapshot 1 from the origin page by page."""
    with origin_side.connect("v1") as conn:
        assert conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN), timeout=5).ok
        assert conn.request(PeerMessage(MessageType.STORED_VERSION_REQUEST, "origin"), timeout=5).token == TOKEN
    with preserver_side.connect("origin") as conn:
        reply = conn.request(PeerMessage(MessageType.UPDATE_BEGIN, "v1", snapshot_id=1), timeout=5)
        while reply.type == MessageType.UPDATE_DATA:
            request = PeerMessage(MessageType.UPDATE_GET_NEXT, "v1", snapshot_id=1, block_no=reply.block_no)
            reply = conn.request(request, timeout=5)
        assert reply.type == MessageType.UPDATE_END_OF_DATA and reply.ok


class TestTraces:

    @pytest.fixture
    def origin_pad(self, tmp_path):
        pad = TreapPAD.create(tmp_path / "origin.icat", MIN_PAGE_SIZE)
        for i in range(50):
            pad.insert(f"urn:obj/{i}".encode(), b"sha256:" + bytes([i]) * 8)
        pad.snapshot(timestamp=1)
        yield pad
        pad.close()

    def verifier(self, path):
        return PeerNode("v1", Role.VERIFIER, path, SimulatedNetwork().transport("v1"), scheduler=ManualScheduler())

    def test_tcp_trace_matches_simulated_trace(self, tmp_path, tcp_server, origin_pad):
        """The same exchange logs the same frames, directions and sizes over both transports."""
        def serve_updates(message):
            return origin_handle_update(origin_pad, message, "origin")

        network = SimulatedNetwork()
        network.register("v1", self.verifier(tmp_path / "sim").handle)
        network.register("origin", serve_updates)
        exchange(network.transport("origin"), network.transport("v1"))

        trace = []
        v1 = tcp_server(self.verifier(tmp_path / "tcp").handle)
        origin = tcp_server(serve_updates)
        exchange(TcpTransport({"v1": v1}, node_id="origin", trace=trace),
                 TcpTransport({"origin": origin}, node_id="v1", trace=trace))

        assert any(entry.type == MessageType.UPDATE_DATA for entry in trace)
        assert trace == network.trace

    def test_untraced_transport_keeps_no_log(self, tcp_server):
        """Without a trace list nothing is recorded."""
        transport = TcpTransport({"v1": tcp_server(ack)})
        with transport.connect("v1") as conn:
            conn.request(PeerMessage(MessageType.STORE, "origin", token=TOKEN), timeout=5)
            assert conn.trace is None


class TestFrameHandler:

    def test_reset_connection_ends_quietly(self, mocker):
        """A peer resetting the socket mid-read closes the session without an error."""
        sock = mocker.Mock()
        sock.recv.side_effect = ConnectionResetError("reset by peer")
        server = mocker.Mock(psk=None)
        _FrameHandler(sock, ("127.0.0.1", 40000), server)
        server.handler.assert_not_called()

    def test_failed_reply_write_ends_quietly(self, mocker):
        """A peer gone before the reply is written ends the session without an error."""
        sock = mocker.Mock()
        request = encode_frame(PeerMessage(MessageType.STORE, "origin", token=TOKEN))
        sock.recv.side_effect = io.BytesIO(request).read
        sock.sendall.side_effect = BrokenPipeError("gone")
        server = mocker.Mock(psk=None, handler=ack)
        _FrameHandler(sock, ("127.0.0.1", 40000), server)
        sock.sendall.assert_called_once()
