"""Round communication: framed messages over loopback or TCP.

Wire format: each frame is a u32 big-endian payload length, one msg_type
byte, then the payload. Payload integers are little-endian; parameters travel
as raw little-endian f64, so wire and in-memory values are bit-identical.

Message payloads:
  HELLO         client_id u32
  GLOBAL_MODEL  round u32, param_count u64, params f64[param_count]
  CLIENT_UPDATE client_id u32, round u32, discrimination_loss f64,
                param_count u64, params f64[param_count]
  ROUND_DONE    round u32
  ERROR         code u16, utf-8 text

A session starts with HELLO from the client. Every round the server sends
GLOBAL_MODEL to all clients, blocks until each CLIENT_UPDATE for that round
arrives (aggregation never proceeds with a partial set), then sends
ROUND_DONE. Clients stop at end-of-stream.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

MSG_HELLO = 1
MSG_GLOBAL_MODEL = 2
MSG_CLIENT_UPDATE = 3
MSG_ROUND_DONE = 4
MSG_ERROR = 5


class ProtocolError(RuntimeError):
    pass


class ConnectionClosed(ProtocolError):
    """The peer closed the stream."""


@dataclass
class Hello:
    client_id: int


@dataclass
class GlobalModel:
    round_index: int
    params: np.ndarray


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    discrimination_loss: float
    params: np.ndarray


@dataclass
class RoundDone:
    round_index: int


@dataclass
class ErrorMessage:
    code: int
    text: str


def _params_bytes(params: np.ndarray) -> bytes:
    return np.ascontiguousarray(params, dtype="<f8").tobytes()


def encode_message(msg) -> bytes:
    if isinstance(msg, Hello):
        msg_type, payload = MSG_HELLO, struct.pack("<I", msg.client_id)
    elif isinstance(msg, GlobalModel):
        msg_type = MSG_GLOBAL_MODEL
        payload = struct.pack("<IQ", msg.round_index, len(msg.params)) + _params_bytes(msg.params)
    elif isinstance(msg, ClientUpdate):
        msg_type = MSG_CLIENT_UPDATE
        payload = (
            struct.pack("<IIdQ", msg.client_id, msg.round_index, msg.discrimination_loss, len(msg.params))
            + _params_bytes(msg.params)
        )
    elif isinstance(msg, RoundDone):
        msg_type, payload = MSG_ROUND_DONE, struct.pack("<I", msg.round_index)
    elif isinstance(msg, ErrorMessage):
        msg_type, payload = MSG_ERROR, struct.pack("<H", msg.code) + msg.text.encode("utf-8")
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return struct.pack("!I", len(payload)) + bytes([msg_type]) + payload


def _take_params(payload: bytes, offset: int, count: int, what: str) -> np.ndarray:
    expected = offset + 8 * count
    if len(payload) != expected:
        raise ProtocolError(
            f"{what}: parameter count mismatch (declared {count}, "
            f"payload holds {(len(payload) - offset) // 8})"
        )
    return np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()


def decode_message(data: bytes):
    """Decode exactly one frame; inverse of ``encode_message``."""
    if len(data) < 5:
        raise ProtocolError("truncated frame header")
    (length,) = struct.unpack("!I", data[:4])
    msg_type = data[4]
    payload = data[5:]
    if len(payload) != length:
        raise ProtocolError(f"truncated frame: declared {length} bytes, got {len(payload)}")

    if msg_type == MSG_HELLO:
        if length != 4:
            raise ProtocolError("bad HELLO payload size")
        return Hello(*struct.unpack("<I", payload))
    if msg_type == MSG_GLOBAL_MODEL:
        if length < 12:
            raise ProtocolError("bad GLOBAL_MODEL payload size")
        round_index, count = struct.unpack("<IQ", payload[:12])
        return GlobalModel(round_index, _take_params(payload, 12, count, "GLOBAL_MODEL"))
    if msg_type == MSG_CLIENT_UPDATE:
        if length < 24:
            raise ProtocolError("bad CLIENT_UPDATE payload size")
        client_id, round_index, loss, count = struct.unpack("<IIdQ", payload[:24])
        return ClientUpdate(client_id, round_index, loss, _take_params(payload, 24, count, "CLIENT_UPDATE"))
    if msg_type == MSG_ROUND_DONE:
        if length != 4:
            raise ProtocolError("bad ROUND_DONE payload size")
        return RoundDone(*struct.unpack("<I", payload))
    if msg_type == MSG_ERROR:
        if length < 2:
            raise ProtocolError("bad ERROR payload size")
        (code,) = struct.unpack("<H", payload[:2])
        return ErrorMessage(code, payload[2:].decode("utf-8"))
    raise ProtocolError(f"unknown message type {msg_type}")


# ---------------------------------------------------------------------------
# Connections
# ---------------------------------------------------------------------------

class LoopbackConnection:
    """In-process backend: sending GLOBAL_MODEL runs the client immediately."""

    def __init__(self, client_id: int, round_handler):
        self.client_id = client_id
        self._handler = round_handler
        self._outbox: list = []

    def send_message(self, msg) -> None:
        if isinstance(msg, GlobalModel):
            params, loss = self._handler(msg.round_index, msg.params)
            self._outbox.append(ClientUpdate(self.client_id, msg.round_index, loss, params))
        elif isinstance(msg, (RoundDone, ErrorMessage)):
            pass
        else:
            raise ProtocolError(f"unexpected message to client: {type(msg).__name__}")

    def recv_message(self, timeout: float | None = None):
        if not self._outbox:
            raise ProtocolError(f"no pending reply from client {self.client_id}")
        return self._outbox.pop(0)

    def close(self) -> None:
        self._outbox.clear()


def _recv_exact(sock: socket.socket, size: int, who: str) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        try:
            chunk = sock.recv(size - len(buf))
        except socket.timeout as exc:
            raise TimeoutError(f"timeout waiting for {who}") from exc
        if not chunk:
            raise ConnectionClosed(f"connection closed by {who}")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket, who: str = "peer") -> bytes:
    header = _recv_exact(sock, 4, who)
    (length,) = struct.unpack("!I", header)
    rest = _recv_exact(sock, 1 + length, who)
    return header + rest


class TcpConnection:
    """Server-side view of one connected client."""

    def __init__(self, sock: socket.socket, client_id: int):
        self.sock = sock
        self.client_id = client_id

    def send_message(self, msg) -> None:
        self.sock.sendall(encode_message(msg))

    def recv_message(self, timeout: float | None = None):
        self.sock.settimeout(timeout)
        return decode_message(read_frame(self.sock, f"client {self.client_id}"))

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def accept_clients(listener: socket.socket, expected_clients: int, accept_timeout: float = 30.0):
    """Accept HELLOs from the expected number of clients on an open listener.

    Returns connections sorted by client id; closing all of them later signals
    end-of-training to the clients.
    """
    listener.settimeout(accept_timeout)
    connections = []
    try:
        while len(connections) < expected_clients:
            sock, _ = listener.accept()
            sock.settimeout(accept_timeout)
            hello = decode_message(read_frame(sock, "connecting client"))
            if not isinstance(hello, Hello):
                raise ProtocolError(f"expected HELLO, got {type(hello).__name__}")
            if any(c.client_id == hello.client_id for c in connections):
                raise ProtocolError(f"duplicate HELLO from client {hello.client_id}")
            connections.append(TcpConnection(sock, hello.client_id))
    except Exception:
        for conn in connections:
            conn.close()
        raise
    connections.sort(key=lambda c: c.client_id)
    return connections


def serve_clients(host: str, port: int, expected_clients: int, accept_timeout: float = 30.0):
    """Listen and accept the expected clients; returns (listener, connections)."""
    listener = socket.create_server((host, port))
    try:
        connections = accept_clients(listener, expected_clients, accept_timeout)
    except Exception:
        listener.close()
        raise
    return listener, connections


def server_round_broadcast_and_collect(connections, round_index: int, params: np.ndarray, timeout: float | None = None):
    """Send the global parameters to every client and gather all updates.

    Blocks until every client's CLIENT_UPDATE for this round arrives; a
    timeout or closed connection aborts the round naming the client. Returns
    (client_id, params, discrimination_loss) triples sorted by client id.
    """
    message = GlobalModel(round_index, params)
    for conn in connections:
        conn.send_message(message)

    results = []
    for conn in connections:
        reply = conn.recv_message(timeout)
        if isinstance(reply, ErrorMessage):
            raise ProtocolError(f"client {conn.client_id} reported error {reply.code}: {reply.text}")
        if not isinstance(reply, ClientUpdate):
            raise ProtocolError(
                f"client {conn.client_id} sent {type(reply).__name__}, expected CLIENT_UPDATE"
            )
        if reply.round_index != round_index:
            raise ProtocolError(
                f"client {conn.client_id} replied for round {reply.round_index}, expected {round_index}"
            )
        if len(reply.params) != len(params):
            raise ProtocolError(
                f"client {conn.client_id} sent {len(reply.params)} parameters, expected {len(params)}"
            )
        results.append((reply.client_id, reply.params, reply.discrimination_loss))
    results.sort(key=lambda item: item[0])
    return results


def broadcast_round_done(connections, round_index: int) -> None:
    for conn in connections:
        conn.send_message(RoundDone(round_index))


def run_tcp_client(host: str, port: int, client_id: int, round_handler, timeout: float = 60.0) -> None:
    """Connect, HELLO, then serve rounds until the server closes the stream."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall(encode_message(Hello(client_id)))
        while True:
            try:
                frame = read_frame(sock, "server")
            except ConnectionClosed:
                return  # end of training
            msg = decode_message(frame)
            if isinstance(msg, GlobalModel):
                params, loss = round_handler(msg.round_index, msg.params)
                sock.sendall(encode_message(ClientUpdate(client_id, msg.round_index, loss, params)))
            elif isinstance(msg, RoundDone):
                continue
            elif isinstance(msg, ErrorMessage):
                raise ProtocolError(f"server error {msg.code}: {msg.text}")
            else:
                raise ProtocolError(f"unexpected message {type(msg).__name__}")
