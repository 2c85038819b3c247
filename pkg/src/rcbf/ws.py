"""Minimal RFC 6455 WebSocket transport (server and test client).

Only what the streaming protocol needs: the HTTP upgrade handshake,
text/binary frames with client masking, ping/pong and close. No
extensions, no TLS. Browsers connect directly; the client half exists
for scripted viewers and tests.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import socketserver
import struct
import threading
from typing import Callable, Optional

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


class WsError(Exception):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        buf += chunk
    return buf


def _encode_frame(opcode: int, payload: bytes, mask: bool) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head += bytes([mask_bit | n])
    elif n < 1 << 16:
        head += bytes([mask_bit | 126]) + struct.pack(">H", n)
    else:
        head += bytes([mask_bit | 127]) + struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        masked = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return head + key + masked
    return head + payload


def _read_frame(sock: socket.socket) -> tuple[int, bool, bytes]:
    b0, b1 = _recv_exact(sock, 2)
    fin = bool(b0 & 0x80)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", _recv_exact(sock, 2))
    elif n == 127:
        (n,) = struct.unpack(">Q", _recv_exact(sock, 8))
    key = _recv_exact(sock, 4) if masked else None
    payload = _recv_exact(sock, n) if n else b""
    if key:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return opcode, fin, payload


class WsChannel:
    """Full-duplex message channel over an upgraded socket."""

    def __init__(self, sock: socket.socket, mask_outgoing: bool):
        self._sock = sock
        self._mask = mask_outgoing
        self._send_lock = threading.Lock()
        self._closed = False

    def send_text(self, text: str) -> None:
        self._send(OP_TEXT, text.encode("utf-8"))

    def send_binary(self, payload: bytes) -> None:
        self._send(OP_BINARY, payload)

    def _send(self, opcode: int, payload: bytes) -> None:
        with self._send_lock:
            if self._closed:
                raise ConnectionError("channel closed")
            self._sock.sendall(_encode_frame(opcode, payload, self._mask))

    def recv(self, timeout: Optional[float] = None):
        """Next ('text', str) or ('binary', bytes); None once closed."""
        if self._closed:
            return None
        self._sock.settimeout(timeout)
        parts: list[bytes] = []
        opcode_in = None
        try:
            while True:
                opcode, fin, payload = _read_frame(self._sock)
                if opcode == OP_PING:
                    self._send(OP_PONG, payload)
                    continue
                if opcode == OP_PONG:
                    continue
                if opcode == OP_CLOSE:
                    try:
                        self._send(OP_CLOSE, b"")
                    except OSError:
                        pass
                    self.close()
                    return None
                if opcode in (OP_TEXT, OP_BINARY):
                    opcode_in = opcode
                    parts = [payload]
                elif opcode == OP_CONT:
                    parts.append(payload)
                else:
                    raise WsError(f"unexpected opcode {opcode}")
                if fin:
                    data = b"".join(parts)
                    if opcode_in == OP_TEXT:
                        return ("text", data.decode("utf-8"))
                    return ("binary", data)
        except socket.timeout:
            raise
        except (ConnectionError, OSError):
            self.close()
            return None

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


def _accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def _read_http_head(sock: socket.socket) -> dict:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("client closed during handshake")
        data += chunk
        if len(data) > 65536:
            raise WsError("handshake too large")
    head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    headers = {"_request": lines[0]}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    return headers


def server_handshake(sock: socket.socket) -> WsChannel:
    headers = _read_http_head(sock)
    key = headers.get("sec-websocket-key")
    if not key or "websocket" not in headers.get("upgrade", "").lower():
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise WsError("not a websocket upgrade request")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {_accept_key(key)}\r\n\r\n"
    )
    sock.sendall(response.encode("latin-1"))
    return WsChannel(sock, mask_outgoing=False)


def connect(host: str, port: int, timeout: float = 5.0) -> WsChannel:
    """Client connect + handshake; outgoing frames are masked per the RFC."""
    sock = socket.create_connection((host, port), timeout=timeout)
    key = base64.b64encode(os.urandom(16)).decode()
    request = (
        f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
        "Upgrade: websocket\r\nConnection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
    )
    sock.sendall(request.encode("latin-1"))
    head = _read_http_head(sock)
    if "101" not in head["_request"]:
        raise WsError(f"handshake rejected: {head['_request']}")
    if head.get("sec-websocket-accept") != _accept_key(key):
        raise WsError("bad Sec-WebSocket-Accept")
    sock.settimeout(None)
    return WsChannel(sock, mask_outgoing=True)


class WebSocketServer:
    """Threaded acceptor: one handler thread per upgraded client."""

    def __init__(self, host: str, port: int, on_client: Callable[[WsChannel], None]):
        self.on_client = on_client
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                try:
                    channel = server_handshake(self.request)
                except (WsError, ConnectionError, OSError):
                    return
                outer.on_client(channel)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _Handler)
        self.host, self.port = self._server.server_address
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=2)
