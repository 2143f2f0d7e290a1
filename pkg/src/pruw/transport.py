"""Message framing and the in-process / stream-socket channels.

Wire format, per frame: 4-byte big-endian payload byte count, 1-byte tag,
4-byte big-endian round id, 4-byte big-endian region id, then the payload
as 8-byte little-endian unsigned field elements.  The element width is
fixed regardless of the modulus; the modulus itself travels inside the
storage-provisioning handshake, whose payload is therefore exempt from
the element bound check.

Both channels speak strict request-response per database and produce
byte-identical transcripts for identical message flows, which is what the
transport-equivalence checks compare.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from typing import Callable, Optional, Sequence

from .errors import FrameError, ProtocolError, PruwError

_HEADER = struct.Struct(">IBII")
HEADER_SIZE = _HEADER.size  # 13 bytes
_ELEMENT = struct.Struct("<Q")
ELEMENT_SIZE = _ELEMENT.size
MAX_PAYLOAD_BYTES = 1 << 28  # guards fuzz-sized allocations


class MessageTag(IntEnum):
    INIT_STORAGE = 1
    READ_QUERY = 2
    READ_ANSWER = 3
    WRITE_QUERY = 4
    UPDATE_SYMBOLS = 5
    COMMIT = 6
    ABORT = 7
    ACK = 8
    ERROR = 9


class ErrorCode(IntEnum):
    PROTOCOL = 1
    CORRUPTION = 2
    FRAME = 3
    INTERNAL = 4


@dataclass
class Message:
    tag: MessageTag
    round_id: int
    region_id: int
    payload: list[int] = dc_field(default_factory=list)


def frame(message: Message, q: Optional[int] = None) -> bytes:
    """Serialize one message; elements must fit 8 bytes and, when a
    modulus is given, lie below it (handshake excepted)."""
    check_bound = q is not None and message.tag != MessageTag.INIT_STORAGE
    chunks = [b""] * len(message.payload)
    for i, value in enumerate(message.payload):
        if value < 0 or value >= (1 << 64) or (check_bound and value >= q):
            raise FrameError(f"payload element {value} out of range")
        chunks[i] = _ELEMENT.pack(value)
    body = b"".join(chunks)
    header = _HEADER.pack(len(body), int(message.tag), message.round_id, message.region_id)
    return header + body


def unframe(data: bytes, q: Optional[int] = None) -> Message:
    """Parse exactly one frame; inverse of :func:`frame`."""
    if len(data) < HEADER_SIZE:
        raise FrameError(f"truncated header: {len(data)} bytes")
    length, tag_byte, round_id, region_id = _HEADER.unpack_from(data)
    if length > MAX_PAYLOAD_BYTES:
        raise FrameError(f"payload length {length} exceeds the limit")
    if length % ELEMENT_SIZE:
        raise FrameError(f"payload length {length} not a whole element count")
    if len(data) != HEADER_SIZE + length:
        raise FrameError(
            f"frame size mismatch: header says {length} payload bytes, "
            f"got {len(data) - HEADER_SIZE}"
        )
    try:
        tag = MessageTag(tag_byte)
    except ValueError:
        raise FrameError(f"unknown tag byte {tag_byte}") from None
    payload = [
        _ELEMENT.unpack_from(data, HEADER_SIZE + i * ELEMENT_SIZE)[0]
        for i in range(length // ELEMENT_SIZE)
    ]
    if q is not None and tag != MessageTag.INIT_STORAGE:
        for value in payload:
            if value >= q:
                raise FrameError(f"payload element {value} not below modulus {q}")
    return Message(tag, round_id, region_id, payload)


def error_message(exc: PruwError, request: Message) -> Message:
    """Map a library error onto an ERROR reply for the failed request."""
    from .errors import CorruptionError  # local to avoid cycle noise

    if isinstance(exc, CorruptionError):
        code = ErrorCode.CORRUPTION
    elif isinstance(exc, FrameError):
        code = ErrorCode.FRAME
    elif isinstance(exc, ProtocolError):
        code = ErrorCode.PROTOCOL
    else:
        code = ErrorCode.INTERNAL
    return Message(MessageTag.ERROR, request.round_id, request.region_id, [int(code)])


Dispatcher = Callable[[Message], Message]


def safe_dispatch(dispatcher: Dispatcher, request: Message) -> Message:
    """Run a node dispatcher, turning library errors into ERROR replies."""
    try:
        return dispatcher(request)
    except PruwError as exc:
        return error_message(exc, request)


class Transcript:
    """Ordered record of framed bytes per direction, for equivalence checks."""

    def __init__(self):
        self.entries: list[tuple[int, str, bytes]] = []

    def record(self, db_index: int, direction: str, data: bytes) -> None:
        self.entries.append((db_index, direction, data))

    def digest(self) -> list[tuple[int, str, bytes]]:
        return list(self.entries)


class InProcChannel:
    """Direct in-process request-response against node dispatchers."""

    def __init__(
        self,
        dispatchers: dict[int, Dispatcher],
        q: int,
        record_bytes: bool = False,
    ):
        self._dispatchers = dispatchers
        self.q = q
        self.transcript = Transcript() if record_bytes else None

    @property
    def db_indices(self) -> list[int]:
        return sorted(self._dispatchers)

    def send(self, db_index: int, message: Message) -> Message:
        if db_index not in self._dispatchers:
            raise ProtocolError(f"unknown database {db_index}")
        if self.transcript is not None:
            self.transcript.record(db_index, "send", frame(message, self.q))
        response = safe_dispatch(self._dispatchers[db_index], message)
        if self.transcript is not None:
            self.transcript.record(db_index, "recv", frame(response, self.q))
        return response

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, count: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame_bytes(sock: socket.socket) -> Optional[bytes]:
    """Read one whole frame off a socket; None on clean EOF."""
    header = _recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    (length,) = struct.unpack_from(">I", header)
    if length > MAX_PAYLOAD_BYTES:
        raise FrameError(f"payload length {length} exceeds the limit")
    body = _recv_exact(sock, length) if length else b""
    if length and body is None:
        raise FrameError("connection closed mid-frame")
    return header + (body or b"")


class SocketChannel:
    """Request-response client over one TCP connection per database."""

    def __init__(
        self,
        addresses: dict[int, tuple[str, int]],
        q: int,
        record_bytes: bool = False,
        timeout: float = 30.0,
    ):
        self._addresses = addresses
        self.q = q
        self.timeout = timeout
        self._sockets: dict[int, socket.socket] = {}
        self.transcript = Transcript() if record_bytes else None

    @property
    def db_indices(self) -> list[int]:
        return sorted(self._addresses)

    def _socket_for(self, db_index: int) -> socket.socket:
        if db_index not in self._sockets:
            try:
                host, port = self._addresses[db_index]
            except KeyError:
                raise ProtocolError(f"unknown database {db_index}") from None
            sock = socket.create_connection((host, port), timeout=self.timeout)
            self._sockets[db_index] = sock
        return self._sockets[db_index]

    def send(self, db_index: int, message: Message) -> Message:
        sock = self._socket_for(db_index)
        data = frame(message, self.q)
        if self.transcript is not None:
            self.transcript.record(db_index, "send", data)
        try:
            sock.sendall(data)
            reply = read_frame_bytes(sock)
        except OSError as exc:
            raise ProtocolError(f"database {db_index} transport failure: {exc}")
        if reply is None:
            raise ProtocolError(f"database {db_index} closed the connection")
        if self.transcript is not None:
            self.transcript.record(db_index, "recv", reply)
        return unframe(reply, self.q)

    def close(self) -> None:
        for sock in self._sockets.values():
            try:
                sock.close()
            except OSError:
                pass
        self._sockets.clear()


class NodeServer:
    """Socket daemon for one database node.

    Serves one connection at a time, one in-flight request per
    connection.  Malformed frames produce an ERROR reply (when a header
    could be read) or drop the connection; the accept loop survives
    either way.
    """

    def __init__(self, dispatcher: Dispatcher, q: int, host: str = "127.0.0.1", port: int = 0):
        self.dispatcher = dispatcher
        self.q = q
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._listener.accept()
                except socket.timeout:
                    continue
                with conn:
                    self._serve_connection(conn)
        finally:
            self._listener.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        conn.settimeout(5.0)
        while not self._stop.is_set():
            try:
                data = read_frame_bytes(conn)
            except (FrameError, OSError, socket.timeout):
                return  # unreadable stream: drop the connection
            if data is None:
                return
            try:
                request = unframe(data, self.q)
            except FrameError as exc:
                reply = Message(MessageTag.ERROR, 0, 0, [int(ErrorCode.FRAME)])
                try:
                    conn.sendall(frame(reply, self.q))
                except OSError:
                    return
                continue
            response = safe_dispatch(self.dispatcher, request)
            try:
                conn.sendall(frame(response, self.q))
            except OSError:
                return


def start_server_thread(server: NodeServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
