"""Out-of-process oracle adapter: serve classifiers to query-only clients."""

__version__ = "0.1.0"

from .models import BrightnessStub, UniformStub, load_user_model, resolve_model
from .protocol import (PROTO_VERSION, WireError, decode_pixels, dumps,
                       encode_pixels, error_doc, handshake_doc, probs_doc)
from .server import (AdapterConfig, answer, answer_line, serve, serve_http,
                     serve_stdio)

__all__ = [
    "__version__", "PROTO_VERSION", "WireError", "AdapterConfig",
    "UniformStub", "BrightnessStub", "load_user_model", "resolve_model",
    "encode_pixels", "decode_pixels", "handshake_doc", "probs_doc",
    "error_doc", "dumps",
    "answer", "answer_line", "serve", "serve_stdio", "serve_http",
]
