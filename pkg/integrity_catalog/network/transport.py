"""
Transports carrying PeerMessages between nodes.

SimulatedNetwork dispatches frames synchronously between registered handlers and
counts every octet it carries; scripts can rewrite or DROP frames in flight.
TcpTransport/PeerServer speak the same frames over sockets, optionally followed by
an HMAC-SHA256 of the message under a pre-shared key.
"""
import hashlib
import hmac
import logging
import socket
import socketserver
import struct
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from integrity_catalog.errors import CatalogError, ProtocolError, TransportError, Unauthorized
from integrity_catalog.network.messages import (
    LENGTH_FORMAT,
    LENGTH_SIZE,
    MAX_FRAME_SIZE,
    MessageType,
    PeerMessage,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    frame,
)

logger = logging.getLogger(__name__)

Handler = Callable[[PeerMessage], PeerMessage]
Script = Callable[[str, str, bytes], object]

DROP = object()
MAC_SIZE = hashlib.sha256().digest_size


class Connection(ABC):
    @abstractmethod
    def send(self, message: PeerMessage):
        ...

    @abstractmethod
    def receive(self, timeout: Optional[float] = None) -> PeerMessage:
        ...

    def request(self, message: PeerMessage, timeout: Optional[float] = None) -> PeerMessage:
        self.send(message)
        return self.receive(timeout)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Transport(ABC):
    @abstractmethod
    def connect(self, peer_id: str) -> Connection:
        ...


# --- simulated network ---

@dataclass
class TraceEntry:
    source: str
    destination: str
    type: MessageType
    size: int


@dataclass
class SimulatedNetwork:
    handlers: Dict[str, Handler] = field(default_factory=dict)
    down: Set[str] = field(default_factory=set)
    scripts: List[Script] = field(default_factory=list)
    trace: List[TraceEntry] = field(default_factory=list)
    bytes_sent: int = 0

    def register(self, node_id: str, handler: Handler):
        self.handlers[node_id] = handler

    def transport(self, node_id: str) -> "SimulatedTransport":
        return SimulatedTransport(self, node_id)

    def script(self, action: Script):
        """action(source, destination, frame) -> frame | DROP, applied to every frame in flight."""
        self.scripts.append(action)

    def reset_counters(self):
        self.bytes_sent = 0
        self.trace.clear()

    def _carry(self, source: str, destination: str, data: bytes) -> Optional[PeerMessage]:
        for action in self.scripts:
            data = action(source, destination, data)
            if data is DROP:
                logger.debug(f"Frame {source} -> {destination} dropped")
                return None
        self.bytes_sent += len(data)
        message = decode_frame(data)
        self.trace.append(TraceEntry(source, destination, message.type, len(data)))
        return message

    def deliver(self, source: str, destination: str, message: PeerMessage) -> Optional[PeerMessage]:
        if destination in self.down or destination not in self.handlers:
            raise TransportError(f"Node '{destination}' is unreachable.")
        request = self._carry(source, destination, encode_frame(message))
        if request is None:
            return None
        try:
            reply = self.handlers[destination](request)
        except CatalogError as e:
            logger.warning(f"Node '{destination}' failed on {request.type.name}: {e}")
            return None
        if reply is None:
            return None
        return self._carry(destination, source, encode_frame(reply))


class SimulatedConnection(Connection):
    def __init__(self, network: SimulatedNetwork, source: str, destination: str):
        self.network = network
        self.source = source
        self.destination = destination
        self._inbox: Deque[PeerMessage] = deque()
        self._closed = False

    def send(self, message: PeerMessage):
        if self._closed:
            raise TransportError(f"Connection to '{self.destination}' is closed.")
        reply = self.network.deliver(self.source, self.destination, message)
        if reply is not None:
            self._inbox.append(reply)

    def receive(self, timeout: Optional[float] = None) -> PeerMessage:
        if not self._inbox:
            raise TransportError(f"No reply from '{self.destination}'.")
        return self._inbox.popleft()

    def close(self):
        self._closed = True


class SimulatedTransport(Transport):
    def __init__(self, network: SimulatedNetwork, node_id: str):
        self.network = network
        self.node_id = node_id

    def connect(self, peer_id: str) -> Connection:
        if peer_id in self.network.down or peer_id not in self.network.handlers:
            raise TransportError(f"Node '{peer_id}' is unreachable.")
        return SimulatedConnection(self.network, self.node_id, peer_id)


# --- TCP ---

def _read_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    while size:
        chunk = sock.recv(size)
        if not chunk:
            raise TransportError("Connection closed by peer.")
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


def _seal_payload(payload: bytes, psk: Optional[bytes]) -> bytes:
    if psk is None:
        return payload
    return payload + hmac.new(psk, payload, hashlib.sha256).digest()


def _open_payload(payload: bytes, psk: Optional[bytes]) -> bytes:
    if psk is None:
        return payload
    body, mac = payload[:-MAC_SIZE], payload[-MAC_SIZE:]
    if len(payload) < MAC_SIZE or not hmac.compare_digest(mac, hmac.new(psk, body, hashlib.sha256).digest()):
        raise Unauthorized("Frame MAC does not verify.")
    return body


def write_message(sock: socket.socket, message: PeerMessage, psk: Optional[bytes] = None) -> int:
    """Sends one framed message; returns the octets written."""
    data = frame(_seal_payload(encode_message(message), psk))
    sock.sendall(data)
    return len(data)


def _read_frame(sock: socket.socket, psk: Optional[bytes]) -> Tuple[PeerMessage, int]:
    (length,) = struct.unpack(LENGTH_FORMAT, _read_exact(sock, LENGTH_SIZE))
    if length > MAX_FRAME_SIZE:
        raise ProtocolError(f"Frame of {length} octets exceeds {MAX_FRAME_SIZE}.")
    return decode_message(_open_payload(_read_exact(sock, length), psk)), LENGTH_SIZE + length


def read_message(sock: socket.socket, psk: Optional[bytes] = None) -> PeerMessage:
    return _read_frame(sock, psk)[0]


class TcpConnection(Connection):
    """A socket to one peer; with a `trace` list, every frame is logged as it is sent or received."""

    def __init__(self, sock: socket.socket, peer_id: str, psk: Optional[bytes] = None,
                 node_id: str = "", trace: Optional[List[TraceEntry]] = None):
        self.sock = sock
        self.peer_id = peer_id
        self.psk = psk
        self.node_id = node_id
        self.trace = trace

    def send(self, message: PeerMessage):
        try:
            size = write_message(self.sock, message, self.psk)
        except OSError as e:
            raise TransportError(f"Send to '{self.peer_id}' failed: {e}")
        if self.trace is not None:
            self.trace.append(TraceEntry(self.node_id, self.peer_id, message.type, size))

    def receive(self, timeout: Optional[float] = None) -> PeerMessage:
        try:
            self.sock.settimeout(timeout)
            message, size = _read_frame(self.sock, self.psk)
        except OSError as e:
            raise TransportError(f"Receive from '{self.peer_id}' failed: {e}")
        if self.trace is not None:
            self.trace.append(TraceEntry(self.peer_id, self.node_id, message.type, size))
        return message

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class TcpTransport(Transport):
    def __init__(self, addresses: Dict[str, Tuple[str, int]], psk: Optional[bytes] = None,
                 connect_timeout: float = 5.0, node_id: str = "",
                 trace: Optional[List[TraceEntry]] = None):
        self.addresses = addresses
        self.psk = psk
        self.connect_timeout = connect_timeout
        self.node_id = node_id
        self.trace = trace

    def connect(self, peer_id: str) -> Connection:
        address = self.addresses.get(peer_id)
        if address is None:
            raise TransportError(f"No address known for '{peer_id}'.")
        try:
            sock = socket.create_connection(address, timeout=self.connect_timeout)
        except OSError as e:
            raise TransportError(f"Cannot reach '{peer_id}' at {address[0]}:{address[1]}: {e}")
        return TcpConnection(sock, peer_id, self.psk, self.node_id, self.trace)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: PeerServer = self.server
        while True:
            try:
                request = read_message(self.request, server.psk)
            except (TransportError, OSError):
                return
            except (ProtocolError, Unauthorized) as e:
                logger.warning(f"Dropping connection from {self.client_address}: {e}")
                return
            try:
                reply = server.handler(request)
            except CatalogError as e:
                logger.error(f"Handler failed on {request.type.name} from '{request.origin_id}': {e}")
                return
            if reply is None:
                continue
            try:
                write_message(self.request, reply, server.psk)
            except OSError:
                return


class PeerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], handler: Handler, psk: Optional[bytes] = None):
        self.handler = handler
        self.psk = psk
        super().__init__(address, _FrameHandler)
