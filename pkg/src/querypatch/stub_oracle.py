"""Reference oracle process for exercising the wire protocols.

Serves one of three classifiers over JSON lines on stdio (default) or
over HTTP (``--http PORT``):

* ``uniform``      -- 1/K for every class; needs --shape and --classes
* ``brightness``   -- two classes, P(class 1) = mean pixel; needs --shape
* a model file     -- anything written by ``querypatch train-oracle``

Testing knobs: ``--latency`` sleeps per request, ``--fail-after N``
switches to error responses after N images, ``--reorder N`` buffers N
stdio requests and answers them in reverse (exercises out-of-order
delivery).  Malformed requests get an error response; the process keeps
serving.
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .oracle import PROTO_VERSION, decode_pixels, load_model


class _StubModel:
    """Shape, class count, and a batch->probs function for the chosen mode."""

    def __init__(self, args):
        if args.model == "uniform":
            if args.shape is None or args.classes is None:
                raise SystemExit("uniform mode needs --shape and --classes")
            self.shape = tuple(args.shape)
            self.num_classes = args.classes
            self._fn = lambda b: np.full(
                (len(b), self.num_classes), 1.0 / self.num_classes)
        elif args.model == "brightness":
            if args.shape is None:
                raise SystemExit("brightness mode needs --shape")
            self.shape = tuple(args.shape)
            self.num_classes = 2
            def _fn(b):
                p1 = np.clip(b.reshape(len(b), -1).mean(axis=1), 0.0, 1.0)
                return np.stack([1.0 - p1, p1], axis=1)
            self._fn = _fn
        else:
            model = load_model(args.model)
            self.shape = model.input_shape
            self.num_classes = model.num_classes
            self._fn = model.forward

    def probs(self, image: np.ndarray) -> list:
        return self._fn(image[None])[0].tolist()

    def handshake(self) -> dict:
        return {"proto": PROTO_VERSION, "shape": list(self.shape),
                "num_classes": self.num_classes}


class _Server:
    def __init__(self, model: _StubModel, latency: float, fail_after: int | None):
        self.model = model
        self.latency = latency
        self.fail_after = fail_after
        self.served = 0

    def answer(self, req_id, b64: str) -> dict:
        """One request -> one response dict (ok or error)."""
        if self.latency > 0:
            time.sleep(self.latency)
        if self.fail_after is not None and self.served >= self.fail_after:
            return {"id": req_id, "error": "induced failure (--fail-after)"}
        try:
            image = decode_pixels(b64, self.model.shape)
        except Exception as exc:
            return {"id": req_id, "error": f"bad pixels: {exc}"}
        self.served += 1
        return {"id": req_id, "probs": self.model.probs(image)}

    def answer_line(self, line: str) -> dict:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"id": None, "error": f"not JSON: {exc}"}
        if not isinstance(req, dict) or "id" not in req:
            return {"id": None, "error": "request must be an object with an 'id'"}
        if not isinstance(req.get("pixels"), str):
            return {"id": req["id"], "error": "request is missing 'pixels'"}
        return self.answer(req["id"], req["pixels"])


def _serve_stdio(server: _Server, reorder: int) -> None:
    out = sys.stdout
    out.write(json.dumps(server.model.handshake()) + "\n")
    out.flush()
    pending: list[dict] = []
    for line in sys.stdin:
        if not line.strip():
            continue
        pending.append(server.answer_line(line))
        if len(pending) >= max(1, reorder):
            for resp in reversed(pending):
                out.write(json.dumps(resp) + "\n")
            out.flush()
            pending = []
    for resp in reversed(pending):
        out.write(json.dumps(resp) + "\n")
    out.flush()


def _serve_http(server: _Server, port: int) -> None:
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep stderr quiet under test
            pass

        def _send(self, code: int, doc: dict):
            body = json.dumps(doc).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/meta":
                self._send(200, server.model.handshake())
            else:
                self._send(404, {"error": f"no such path {self.path}"})

        def do_POST(self):
            if self.path != "/classify":
                self._send(404, {"error": f"no such path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length))
                items = doc["images"]
            except Exception as exc:
                self._send(400, {"error": f"bad request: {exc}"})
                return
            results = []
            for item in items:
                resp = server.answer(item.get("id"), item.get("pixels", ""))
                if "error" in resp:
                    self._send(500, resp)
                    return
                results.append(resp)
            self._send(200, {"results": results})

    httpd = ThreadingHTTPServer(("127.0.0.1", port), Handler)
    host, bound = httpd.server_address[:2]
    print(f"LISTENING http://{host}:{bound}", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="querypatch-stub", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", required=True,
                    help="'uniform', 'brightness', or a path to a model file")
    ap.add_argument("--shape", type=int, nargs=3, metavar=("H", "W", "C"))
    ap.add_argument("--classes", type=int)
    ap.add_argument("--http", type=int, metavar="PORT",
                    help="serve HTTP on 127.0.0.1:PORT (0 picks a free port)")
    ap.add_argument("--latency", type=float, default=0.0,
                    help="seconds to sleep per request")
    ap.add_argument("--fail-after", type=int, default=None,
                    help="answer errors after this many images")
    ap.add_argument("--reorder", type=int, default=1,
                    help="stdio only: buffer N requests, answer in reverse")
    args = ap.parse_args(argv)

    model = _StubModel(args)
    server = _Server(model, args.latency, args.fail_after)
    if args.http is not None:
        _serve_http(server, args.http)
    else:
        _serve_stdio(server, args.reorder)
    return 0


if __name__ == "__main__":
    sys.exit(main())
