"""Minimal JSON-over-HTTP plumbing on top of the standard library."""

from __future__ import annotations

import http.client
import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)


class HttpError(Exception):
    def __init__(self, status: int, message: str, code: str | None = None) -> None:
        super().__init__(f"{status} {code or ''} {message}".strip())
        self.status = status
        self.message = message
        self.code = code


class Unreachable(Exception):
    """The service could not be contacted at all."""


# (method, path, query, body, headers) -> (status, json-able)
Handler = Callable[[str, str, dict, object, dict], tuple]


def _make_handler(app: Handler):
    class RequestHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # route through logging, not stderr
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _dispatch(self, method: str) -> None:
            parts = urlsplit(self.path)
            query = {k: v[-1] for k, v in parse_qs(parts.query).items()}
            body = None
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw)
                except ValueError:
                    return self._send(400, {"error": "BAD_REQUEST", "message": "body is not JSON"})
            try:
                status, payload = app(method, parts.path, query, body, dict(self.headers))
            except HttpError as exc:
                status, payload = exc.status, {"error": exc.code or "ERROR", "message": exc.message}
            except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the server
                logger.exception("handler failed")
                status, payload = 500, {"error": "INTERNAL", "message": str(exc)}
            self._send(status, payload)

        def _send(self, status: int, payload) -> None:
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    return RequestHandler


class JsonServer:
    def __init__(self, app: Handler, host: str = "127.0.0.1", port: int = 0) -> None:
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(app))
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None
        self._serving = False

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "JsonServer":
        self._serving = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._serving = True
        self.httpd.serve_forever()

    def stop(self) -> None:
        # shutdown() blocks until serve_forever notices, so skip it if never served
        if self._serving:
            self.httpd.shutdown()
            self._serving = False
        self.httpd.server_close()


def bearer_token(headers: dict) -> str | None:
    value = headers.get("Authorization") or headers.get("authorization") or ""
    if value.startswith("Bearer "):
        return value[len("Bearer "):].strip()
    return None


class JsonClient:
    def __init__(self, base_url: str, token: str | None = None, timeout: float = 10.0) -> None:
        if "://" not in base_url:
            base_url = "http://" + base_url
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def request(self, method: str, path: str, body=None):
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.base_url + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read() or b"null")
        except urllib.error.HTTPError as exc:
            try:
                payload = json.loads(exc.read())
            except ValueError:
                payload = {}
            raise HttpError(exc.code, payload.get("message", exc.reason), payload.get("error")) from None
        except (urllib.error.URLError, http.client.HTTPException, OSError) as exc:
            raise Unreachable(f"{self.base_url}: {exc}") from None

    def get(self, path: str):
        return self.request("GET", path)

    def post(self, path: str, body):
        return self.request("POST", path, body)
