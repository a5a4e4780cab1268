"""
Peer wire protocol.

A frame is a u32 big-endian length followed by the message: type u8, the
sender's node id (16 octets, UTF-8, zero padded) and a type-specific body.
Data frames carry exactly one catalog page.
"""
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from integrity_catalog.core.record_store import BlockImage
from integrity_catalog.errors import ProtocolError
from integrity_catalog.policy import EMPTY_TOKEN, TOKEN_SIZE, CatalogToken

NODE_ID_SIZE = 16
LENGTH_FORMAT = ">I"
LENGTH_SIZE = struct.calcsize(LENGTH_FORMAT)
HEADER_FORMAT = f">B{NODE_ID_SIZE}s"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
MAX_FRAME_SIZE = 1 << 20


class MessageType(IntEnum):
    STORE = 1
    STORE_REPLY = 2
    STORED_VERSION_REQUEST = 3
    STORED_VERSION_REPLY = 4
    RECOVER_VERSION_REQUEST = 5
    RECOVER_VERSION_REPLY = 6
    RECOVER_BEGIN = 7
    RECOVER_DATA = 8
    RECOVER_GET_NEXT = 9
    RECOVER_END_OF_DATA = 10
    VERSION_RESET = 11
    UPDATE_BEGIN = 12
    UPDATE_DATA = 13
    UPDATE_GET_NEXT = 14
    UPDATE_END_OF_DATA = 15


class Status(IntEnum):
    OK = 0
    STALE_TOKEN = 1
    UNAUTHORIZED = 2
    UNKNOWN_SNAPSHOT = 3
    NO_REPLICA = 4
    NO_TOKEN = 5
    ERROR = 6


@dataclass(frozen=True)
class PeerMessage:
    type: MessageType
    origin_id: str
    token: Optional[CatalogToken] = None
    snapshot_id: int = 0
    block_no: int = 0
    block: Optional[BlockImage] = None
    status: Status = Status.OK
    reset_counter: int = 0

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


TOKEN_MESSAGES = {MessageType.STORE}
STATUS_TOKEN_MESSAGES = {
    MessageType.STORE_REPLY, MessageType.STORED_VERSION_REPLY, MessageType.RECOVER_VERSION_REPLY,
}
EMPTY_MESSAGES = {MessageType.STORED_VERSION_REQUEST, MessageType.RECOVER_VERSION_REQUEST}
BEGIN_MESSAGES = {MessageType.RECOVER_BEGIN, MessageType.UPDATE_BEGIN}
DATA_MESSAGES = {MessageType.RECOVER_DATA, MessageType.UPDATE_DATA}
GET_NEXT_MESSAGES = {MessageType.RECOVER_GET_NEXT, MessageType.UPDATE_GET_NEXT}
END_MESSAGES = {MessageType.RECOVER_END_OF_DATA, MessageType.UPDATE_END_OF_DATA}


def _encode_body(message: PeerMessage) -> bytes:
    kind = message.type
    if kind in TOKEN_MESSAGES:
        return message.token.encode()
    if kind in STATUS_TOKEN_MESSAGES:
        token = message.token or EMPTY_TOKEN
        return struct.pack(">B", message.status) + token.encode()
    if kind in EMPTY_MESSAGES:
        return b""
    if kind in BEGIN_MESSAGES:
        return struct.pack(">Q", message.snapshot_id)
    if kind in DATA_MESSAGES:
        block = message.block
        return struct.pack(">QQQ", message.snapshot_id, block.block_no, block.epoch_stamp) + block.payload
    if kind in GET_NEXT_MESSAGES:
        return struct.pack(">QQ", message.snapshot_id, message.block_no)
    if kind in END_MESSAGES:
        return struct.pack(">QB", message.snapshot_id, message.status)
    if kind == MessageType.VERSION_RESET:
        return message.token.encode() + struct.pack(">Q", message.reset_counter)
    raise ProtocolError(f"Cannot encode message type {kind!r}.")


def encode_message(message: PeerMessage) -> bytes:
    """The message without its length prefix."""
    origin = message.origin_id.encode("utf-8")
    if len(origin) > NODE_ID_SIZE:
        raise ProtocolError(f"Node id '{message.origin_id}' exceeds {NODE_ID_SIZE} octets.")
    return struct.pack(HEADER_FORMAT, message.type, origin) + _encode_body(message)


def decode_message(data: bytes) -> PeerMessage:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"Truncated message of {len(data)} octets.")
    code, origin = struct.unpack_from(HEADER_FORMAT, data)
    try:
        kind = MessageType(code)
    except ValueError:
        raise ProtocolError(f"Unknown message type {code}.")
    origin_id = origin.rstrip(b"\x00").decode("utf-8", errors="replace")
    body = data[HEADER_SIZE:]
    try:
        if kind in TOKEN_MESSAGES:
            _expect(body, TOKEN_SIZE, kind)
            return PeerMessage(kind, origin_id, token=CatalogToken.decode(body))
        if kind in STATUS_TOKEN_MESSAGES:
            _expect(body, 1 + TOKEN_SIZE, kind)
            return PeerMessage(kind, origin_id, token=CatalogToken.decode(body[1:]), status=Status(body[0]))
        if kind in EMPTY_MESSAGES:
            _expect(body, 0, kind)
            return PeerMessage(kind, origin_id)
        if kind in BEGIN_MESSAGES:
            _expect(body, 8, kind)
            return PeerMessage(kind, origin_id, snapshot_id=struct.unpack(">Q", body)[0])
        if kind in DATA_MESSAGES:
            snapshot_id, block_no, stamp = struct.unpack_from(">QQQ", body)
            block = BlockImage(block_no, stamp, bytes(body[24:]))
            return PeerMessage(kind, origin_id, snapshot_id=snapshot_id, block_no=block_no, block=block)
        if kind in GET_NEXT_MESSAGES:
            _expect(body, 16, kind)
            snapshot_id, block_no = struct.unpack(">QQ", body)
            return PeerMessage(kind, origin_id, snapshot_id=snapshot_id, block_no=block_no)
        if kind in END_MESSAGES:
            _expect(body, 9, kind)
            snapshot_id, status = struct.unpack(">QB", body)
            return PeerMessage(kind, origin_id, snapshot_id=snapshot_id, status=Status(status))
        _expect(body, TOKEN_SIZE + 8, kind)
        (counter,) = struct.unpack_from(">Q", body, TOKEN_SIZE)
        return PeerMessage(kind, origin_id, token=CatalogToken.decode(body[:TOKEN_SIZE]), reset_counter=counter)
    except (struct.error, ValueError) as e:
        raise ProtocolError(f"Malformed {kind.name} body: {e}")


def _expect(body: bytes, size: int, kind: MessageType):
    if len(body) != size:
        raise ProtocolError(f"{kind.name} body is {len(body)} octets, expected {size}.")


def frame(payload: bytes) -> bytes:
    return struct.pack(LENGTH_FORMAT, len(payload)) + payload


def encode_frame(message: PeerMessage) -> bytes:
    return frame(encode_message(message))


def decode_frame(data: bytes) -> PeerMessage:
    if len(data) < LENGTH_SIZE:
        raise ProtocolError("Frame shorter than its length prefix.")
    (length,) = struct.unpack_from(LENGTH_FORMAT, data)
    if length != len(data) - LENGTH_SIZE:
        raise ProtocolError(f"Frame announces {length} octets but carries {len(data) - LENGTH_SIZE}.")
    return decode_message(data[LENGTH_SIZE:])


def end_of_data(kind: MessageType, origin_id: str, snapshot_id: int, status: Status = Status.OK) -> PeerMessage:
    return PeerMessage(kind, origin_id, snapshot_id=snapshot_id, status=status)
