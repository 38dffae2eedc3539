"""JSON-lines wire codec shared by both transports.

Pixels travel as base64-wrapped little-endian float32 bytes in HWC order.
Outgoing documents are rendered canonically — insertion-ordered keys,
compact separators, floats rounded to 9 significant digits — so a fixed
request sequence produces byte-identical output everywhere.
"""
from __future__ import annotations

import base64
import json

import numpy as np

PROTO_VERSION = 1


class WireError(ValueError):
    """A request could not be decoded; the connection survives it."""


def encode_pixels(image: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(b64: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise WireError(f"bad pixels: {exc}") from exc
    h, w, c = (int(v) for v in shape)
    if len(raw) != h * w * c * 4:
        raise WireError(
            f"bad pixels: payload is {len(raw)} bytes, expected {h * w * c * 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)


def _round9(x) -> float:
    return float(f"{float(x):.9g}")


def handshake_doc(shape, num_classes: int) -> dict:
    return {"proto": PROTO_VERSION,
            "shape": [int(v) for v in shape],
            "num_classes": int(num_classes)}


def probs_doc(req_id, probs) -> dict:
    return {"id": req_id,
            "probs": [_round9(p) for p in np.asarray(probs).ravel()]}


def error_doc(req_id, message) -> dict:
    return {"id": req_id, "error": str(message)}


def dumps(doc: dict) -> str:
    """Canonical one-line rendering of a protocol document."""
    return json.dumps(doc, separators=(",", ":"))
