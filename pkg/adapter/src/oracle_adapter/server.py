"""Request loops for both transports.

Requests are answered strictly in the order received; callers correlate on
the echoed ``id``, never on arrival order.  A malformed request yields an
error document and the loop keeps serving.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .models import resolve_model
from .protocol import (WireError, decode_pixels, dumps, error_doc,
                       handshake_doc, probs_doc)


@dataclass(frozen=True)
class AdapterConfig:
    """What to serve and over which transport."""

    model_source: str
    shape: tuple | None = None
    num_classes: int | None = None
    transport: str = "stdio"  # "stdio" | "http"
    port: int = 0

    def __post_init__(self):
        if self.transport not in ("stdio", "http"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not 0 <= int(self.port) <= 65535:
            raise ValueError(f"port out of range: {self.port}")


def answer(model, doc) -> dict:
    """One request document -> one response document (never raises)."""
    req_id = doc.get("id") if isinstance(doc, dict) else None
    if not isinstance(doc, dict) or "pixels" not in doc:
        return error_doc(req_id, "malformed request: expected {id, pixels}")
    try:
        image = decode_pixels(doc["pixels"], model.shape)
        probs = np.asarray(model.predict(image[None]))[0]
    except WireError as exc:
        return error_doc(req_id, str(exc))
    except Exception as exc:
        return error_doc(req_id, f"model failure: {exc}")
    return probs_doc(req_id, probs)


def answer_line(model, line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError:
        return error_doc(None, "malformed request line")
    return answer(model, doc)


def serve_stdio(model, inp=None, out=None) -> None:
    """Blocking loop: handshake line first, then one response per request."""
    inp = sys.stdin if inp is None else inp
    out = sys.stdout if out is None else out
    out.write(dumps(handshake_doc(model.shape, model.num_classes)) + "\n")
    out.flush()
    for line in inp:
        line = line.strip()
        if not line:
            continue
        out.write(dumps(answer_line(model, line)) + "\n")
        out.flush()


def _make_handler(model):
    meta = dumps(handshake_doc(model.shape, model.num_classes)).encode()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code: int, payload: bytes):
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _missing(self):
            self._send(404, dumps({"error": f"no such path {self.path}"}).encode())

        def do_GET(self):
            if self.path == "/meta":
                self._send(200, meta)
            else:
                self._missing()

        def do_POST(self):
            if self.path != "/classify":
                self._missing()
                return
            length = int(self.headers.get("Content-Length", 0))
            try:
                doc = json.loads(self.rfile.read(length))
                images = doc["images"]
                if not isinstance(images, list):
                    raise TypeError("images must be a list")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                self._send(400, dumps({"error": f"bad request body: {exc}"}).encode())
                return
            results = [answer(model, item) for item in images]
            self._send(200, dumps({"results": results}).encode())

    return Handler


def serve_http(model, port: int) -> None:
    """Announce ``LISTENING <url>`` on stdout, then serve until killed."""
    server = ThreadingHTTPServer(("127.0.0.1", int(port)), _make_handler(model))
    host, bound = server.server_address[:2]
    print(f"LISTENING http://{host}:{bound}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def serve(cfg: AdapterConfig) -> None:
    """Resolve the configured model and run its transport until EOF/signal."""
    model = resolve_model(cfg.model_source, cfg.shape, cfg.num_classes)
    if cfg.transport == "http":
        serve_http(model, cfg.port)
    else:
        serve_stdio(model)
