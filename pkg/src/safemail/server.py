"""TCP front end for a Provider, plus an optional JSON debug endpoint."""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import wire
from .client import parse_endpoint
from .provider import Provider

log = logging.getLogger(__name__)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        provider: Provider = self.server.provider
        sock = self.request
        while True:
            try:
                request = wire.read_frame(lambda n: _recv_exact(sock, n))
            except (wire.DecodeError, OSError) as exc:
                log.info("dropping connection: %s", exc)
                return
            if request is None:
                return
            try:
                sock.sendall(wire.frame(provider.handle(request)))
            except OSError:
                return


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


class ProviderServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, provider: Provider, address: tuple[str, int]):
        self.provider = provider
        super().__init__(address, _FrameHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class _DebugHandler(BaseHTTPRequestHandler):
    def _reply(self, code: int, payload) -> None:
        body = json.dumps(payload, sort_keys=True, indent=2).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/schema":
            self._reply(200, wire.schema_description())
        elif self.path == "/stats":
            self._reply(200, dict(self.server.provider.stats))
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self) -> None:
        if self.path != "/echo":
            self._reply(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", 0))
        data = self.rfile.read(min(length, wire.MAX_FRAME_BYTES))
        try:
            env = wire.decode(wire.RequestEnvelope, data)
        except wire.DecodeError as exc:
            self._reply(400, {"error": exc.code, "detail": str(exc)})
            return
        self._reply(200, wire.envelope_to_json(env))

    def log_message(self, fmt, *args) -> None:
        log.debug("debug endpoint: " + fmt, *args)


def start_debug_server(provider: Provider, host: str, port: int) -> ThreadingHTTPServer:
    httpd = ThreadingHTTPServer((host, port), _DebugHandler)
    httpd.provider = provider
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    return httpd


def serve_in_thread(provider: Provider, endpoint: str = "127.0.0.1:0") -> ProviderServer:
    server = ProviderServer(provider, parse_endpoint(endpoint))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
