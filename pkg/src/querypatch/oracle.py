"""Query-only classifiers: the black-box boundary of the toolkit.

An :class:`Oracle` maps a batch of images to class-probability vectors and
counts every image it is asked about.  Nothing on this side ever exposes
gradients or parameters; attacks see probabilities only.

Three families live here:

* deterministic in-process oracles (uniform stub, brightness stub, and
  numpy-trained linear/MLP models) used for desk-scale experiments,
* a subprocess transport speaking a JSON-lines protocol over stdin/stdout,
* an HTTP transport with the same handshake semantics.

Every response path enforces the simplex invariant: entries >= 0 and sum
1 within 1e-5 (renormalized silently inside tolerance, rejected as a
protocol violation beyond it).
"""
from __future__ import annotations

import base64
import json
import queue
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, FormatError, ProtocolError, TrainingError, TransportError
from .rng import Rng

SIMPLEX_TOL = 1e-5
PROTO_VERSION = 1


def encode_pixels(image: np.ndarray) -> str:
    """Image -> base64 of little-endian float32 bytes in HWC order."""
    return base64.b64encode(np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(b64: str, shape: tuple[int, int, int]) -> np.ndarray:
    raw = base64.b64decode(b64)
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(raw) != expected:
        raise ProtocolError(f"pixel payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


class Oracle:
    """Base class: batched classification with query accounting.

    Subclasses implement ``_infer(batch) -> (N, K) array``; this class owns
    shape validation, the simplex check, and the (thread-safe) counter.
    """

    def __init__(self, oracle_id: str, num_classes: int, input_shape: tuple,
                 max_in_flight: int = 8):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {max_in_flight}")
        self.id = oracle_id
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.max_in_flight = int(max_in_flight)
        self._query_count = 0
        self._count_lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._query_count

    def classify_batch(self, images) -> np.ndarray:
        """Classify a batch; returns one probability vector per image, in order."""
        batch = self._as_batch(images)
        if len(batch) == 0:
            return np.zeros((0, self.num_classes), dtype=np.float64)
        probs = self._infer(batch)
        probs = self._validate_probs(probs, len(batch))
        with self._count_lock:
            self._query_count += len(batch)
        return probs

    def _as_batch(self, images) -> np.ndarray:
        if isinstance(images, np.ndarray) and images.ndim == 4:
            batch = images
        else:
            batch = np.stack([np.asarray(im) for im in images]) if len(images) else \
                np.zeros((0,) + self.input_shape)
        if batch.shape[1:] != self.input_shape:
            raise ValueError(
                f"oracle {self.id!r} expects images of shape {self.input_shape}, "
                f"got {batch.shape[1:]}"
            )
        return batch

    def _validate_probs(self, probs, n: int) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (n, self.num_classes):
            raise ProtocolError(
                f"oracle {self.id!r} returned shape {probs.shape}, "
                f"expected ({n}, {self.num_classes})"
            )
        if not np.isfinite(probs).all():
            raise ProtocolError(f"oracle {self.id!r} returned non-finite probabilities")
        if (probs < -SIMPLEX_TOL).any():
            raise ProtocolError(f"oracle {self.id!r} returned negative probabilities")
        probs = np.clip(probs, 0.0, None)
        sums = probs.sum(axis=1)
        if (np.abs(sums - 1.0) > SIMPLEX_TOL).any():
            bad = float(sums[np.argmax(np.abs(sums - 1.0))])
            raise ProtocolError(
                f"oracle {self.id!r} probabilities sum to {bad}, outside 1±{SIMPLEX_TOL}"
            )
        return probs / sums[:, None]

    def _infer(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        """Release any transport resources; in-process oracles have none."""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class UniformOracle(Oracle):
    """Answers 1/K for every class regardless of input."""

    def __init__(self, num_classes: int, input_shape: tuple, oracle_id: str = "uniform"):
        super().__init__(oracle_id, num_classes, input_shape)

    def _infer(self, batch):
        n = len(batch)
        return np.full((n, self.num_classes), 1.0 / self.num_classes)


class BrightnessOracle(Oracle):
    """Two classes; P(class 1) is the mean pixel value of the image.

    Analytically transparent, which makes targeted-attack behaviour
    hand-checkable: brightening the patched region raises P(class 1).
    """

    def __init__(self, input_shape: tuple, oracle_id: str = "brightness"):
        super().__init__(oracle_id, 2, input_shape)

    def _infer(self, batch):
        p1 = np.clip(batch.reshape(len(batch), -1).mean(axis=1), 0.0, 1.0)
        return np.stack([1.0 - p1, p1], axis=1)


# ---------------------------------------------------------------------------
# Built-in trainable models (numpy only; they exist to be attacked)
# ---------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class BuiltinModel:
    """Softmax-linear or ReLU-MLP classifier with explicit numpy weights."""

    kind: str  # "linear" | "mlp"
    input_shape: tuple
    num_classes: int
    hidden: tuple
    weights: list  # [W1, b1, W2, b2, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.kind == "linear" and self.hidden:
            raise ValueError("linear model cannot have hidden layers")
        dims = self._dims()
        expect = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            expect += [(d_in, d_out), (d_out,)]
        got = [w.shape for w in self.weights]
        if got != expect:
            raise ValueError(f"weight shapes {got} do not chain {dims}")

    def _dims(self):
        h, w, c = self.input_shape
        return [h * w * c, *self.hidden, self.num_classes]

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Batch of images -> (N, K) probabilities."""
        x = batch.reshape(len(batch), -1).astype(np.float64)
        n_layers = len(self.weights) // 2
        for i in range(n_layers):
            w, b = self.weights[2 * i], self.weights[2 * i + 1]
            x = x @ w + b
            if i < n_layers - 1:
                x = np.maximum(x, 0.0)
        return _softmax(x)


class BuiltinOracle(Oracle):
    """Wraps a BuiltinModel behind the query-only interface."""

    def __init__(self, model: BuiltinModel, oracle_id: str, max_in_flight: int = 8):
        super().__init__(oracle_id, model.num_classes, model.input_shape, max_in_flight)
        self.model = model

    def _infer(self, batch):
        return self.model.forward(batch)


def init_builtin(input_shape, num_classes: int, kind: str = "linear",
                 hidden: tuple = (), rng: Rng | None = None) -> BuiltinModel:
    """Fresh model: zero weights for linear, seeded He-style init for MLP."""
    hidden = tuple(hidden) if kind == "mlp" else ()
    dims = [int(np.prod(input_shape)), *hidden, num_classes]
    weights = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        if kind == "linear" or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.gen.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        weights += [w, np.zeros(d_out)]
    return BuiltinModel(kind=kind, input_shape=tuple(input_shape),
                        num_classes=num_classes, hidden=hidden, weights=weights)


def _cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    return float(-np.log(p).mean())


def train_builtin(d: LabeledDataset, kind: str = "linear", hidden: tuple = (64,),
                  epochs: int = 5, lr: float = 0.1, batch_size: int = 32,
                  rng: Rng | None = None) -> BuiltinModel:
    """Plain minibatch SGD on softmax cross-entropy.

    Not meant to be competitive, just attackable and deterministic.  After
    at least one epoch the trained model must beat the zero-weight model's
    cross-entropy (log K), otherwise TrainingError.
    """
    if len(d) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = rng or Rng(0)
    model = init_builtin(d.image_shape, d.num_classes, kind=kind, hidden=hidden,
                         rng=rng.spawn("init"))
    if epochs == 0:
        return model

    x_all = d.images.reshape(len(d), -1).astype(np.float64)
    y_all = d.labels
    n_layers = len(model.weights) // 2
    order_rng = rng.spawn("shuffle")

    for epoch in range(epochs):
        perm = order_rng.gen.permutation(len(d))
        for start in range(0, len(d), batch_size):
            idx = perm[start:start + batch_size]
            x, y = x_all[idx], y_all[idx]
            # Forward, keeping activations for the backward pass.
            acts = [x]
            z = x
            for i in range(n_layers):
                w, b = model.weights[2 * i], model.weights[2 * i + 1]
                z = z @ w + b
                if i < n_layers - 1:
                    z = np.maximum(z, 0.0)
                acts.append(z)
            probs = _softmax(acts[-1])
            if not np.isfinite(probs).all():
                raise TrainingError(f"training diverged at epoch {epoch}")
            delta = probs
            delta[np.arange(len(y)), y] -= 1.0
            delta /= len(y)
            for i in reversed(range(n_layers)):
                w = model.weights[2 * i]
                grad_w = acts[i].T @ delta
                grad_b = delta.sum(axis=0)
                if i > 0:
                    delta = (delta @ w.T) * (acts[i] > 0)
                model.weights[2 * i] = w - lr * grad_w
                model.weights[2 * i + 1] = model.weights[2 * i + 1] - lr * grad_b

    probs = model.forward(d.images)
    final_ce = _cross_entropy(probs, y_all)
    if not np.isfinite(final_ce):
        raise TrainingError("final training loss is non-finite")
    baseline_ce = float(np.log(d.num_classes))
    if final_ce >= baseline_ce:
        raise TrainingError(
            f"training failed to improve on the zero-weight model "
            f"(CE {final_ce:.4f} >= {baseline_ce:.4f})"
        )
    accuracy = float((probs.argmax(axis=1) == y_all).mean())
    model.metadata = {
        "train_accuracy": accuracy,
        "train_cross_entropy": final_ce,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
        "n_train": len(d),
        "seed": rng.seed,
    }
    return model


def save_model(model: BuiltinModel, path) -> None:
    """Serialize as JSON: header fields plus base64 little-endian float64 blobs."""
    blobs = []
    for i, w in enumerate(model.weights):
        blobs.append({
            "name": f"w{i}",
            "shape": list(w.shape),
            "data": base64.b64encode(np.ascontiguousarray(w, dtype="<f8").tobytes()).decode("ascii"),
        })
    doc = {
        "format": "querypatch-model-v1",
        "kind": model.kind,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "hidden": list(model.hidden),
        "metadata": model.metadata,
        "weights": blobs,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_model(path) -> BuiltinModel:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not a model file: {exc}") from exc
    if doc.get("format") != "querypatch-model-v1":
        raise FormatError(f"{path}: unknown model format {doc.get('format')!r}")
    weights = []
    for blob in doc["weights"]:
        arr = np.frombuffer(base64.b64decode(blob["data"]), dtype="<f8")
        weights.append(arr.reshape(blob["shape"]).copy())
    return BuiltinModel(
        kind=doc["kind"],
        input_shape=tuple(doc["input_shape"]),
        num_classes=int(doc["num_classes"]),
        hidden=tuple(doc["hidden"]),
        weights=weights,
        metadata=doc.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# Remote transports
# ---------------------------------------------------------------------------


class SubprocessOracle(Oracle):
    """Oracle behind a child process speaking JSON lines on stdin/stdout.

    The child must emit a handshake line first; a shape or class-count
    mismatch against the local configuration is a ConfigError.  Responses
    may arrive out of order; ids correlate them.
    """

    def __init__(self, command: list, shape: tuple, num_classes: int,
                 oracle_id: str | None = None, max_in_flight: int = 8,
                 timeout: float = 30.0):
        super().__init__(oracle_id or f"cmd:{command[0]}", num_classes, shape,
                         max_in_flight)
        self._timeout = timeout
        self._next_id = 0
        self._io_lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"cannot spawn oracle command {command!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

        hello = self._next_message()
        if hello.get("proto") != PROTO_VERSION:
            raise ConfigError(f"unsupported protocol version {hello.get('proto')!r}")
        if tuple(hello.get("shape", ())) != self.input_shape:
            raise ConfigError(
                f"oracle speaks shape {hello.get('shape')}, configured {list(self.input_shape)}"
            )
        if hello.get("num_classes") != self.num_classes:
            raise ConfigError(
                f"oracle has {hello.get('num_classes')} classes, configured {self.num_classes}"
            )

    def _read_loop(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF sentinel

    def _next_message(self, request_id=None) -> dict:
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(
                f"oracle {self.id!r} timed out after {self._timeout}s",
                request_id=request_id,
            ) from None
        if line is None:
            code = self._proc.poll()
            raise TransportError(
                f"oracle process exited (code {code})", request_id=request_id
            )
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise TransportError(
                f"oracle sent undecodable line {line!r}", request_id=request_id
            ) from exc

    def _infer(self, batch):
        out = np.empty((len(batch), self.num_classes), dtype=np.float64)
        with self._io_lock:
            pending: dict[int, int] = {}  # request id -> batch index
            sent = 0
            received = 0
            while received < len(batch):
                while sent < len(batch) and len(pending) < self.max_in_flight:
                    req_id = self._next_id
                    self._next_id += 1
                    msg = {"id": req_id, "pixels": encode_pixels(batch[sent])}
                    try:
                        self._proc.stdin.write(json.dumps(msg) + "\n")
                        self._proc.stdin.flush()
                    except (BrokenPipeError, OSError) as exc:
                        raise TransportError(
                            f"oracle pipe closed: {exc}", request_id=req_id
                        ) from exc
                    pending[req_id] = sent
                    sent += 1
                resp = self._next_message()
                resp_id = resp.get("id")
                if resp_id not in pending:
                    raise TransportError(
                        f"oracle answered unknown request id {resp_id!r}",
                        request_id=resp_id,
                    )
                if "error" in resp:
                    raise TransportError(
                        f"oracle error for request {resp_id}: {resp['error']}",
                        request_id=resp_id,
                    )
                out[pending.pop(resp_id)] = np.asarray(resp["probs"], dtype=np.float64)
                received += 1
        return out

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class HttpOracle(Oracle):
    """Oracle behind an HTTP endpoint (GET /meta, POST /classify).

    Batches are split into fixed-size chunks; up to ``max_in_flight``
    requests run concurrently.
    """

    def __init__(self, base_url: str, shape: tuple, num_classes: int,
                 oracle_id: str | None = None, max_in_flight: int = 4,
                 timeout: float = 30.0, chunk_size: int = 16):
        import requests  # deferred so offline users of builtins never need it

        super().__init__(oracle_id or base_url, num_classes, shape, max_in_flight)
        self._requests = requests
        self._base = base_url.rstrip("/")
        self._timeout = timeout
        self._chunk = int(chunk_size)
        try:
            resp = requests.get(self._base + "/meta", timeout=timeout)
        except requests.RequestException as exc:
            raise TransportError(f"cannot reach oracle at {base_url}: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(
                f"/meta returned HTTP {resp.status_code}", status=resp.status_code
            )
        hello = resp.json()
        if hello.get("proto") != PROTO_VERSION:
            raise ConfigError(f"unsupported protocol version {hello.get('proto')!r}")
        if tuple(hello.get("shape", ())) != self.input_shape:
            raise ConfigError(
                f"oracle speaks shape {hello.get('shape')}, configured {list(self.input_shape)}"
            )
        if hello.get("num_classes") != self.num_classes:
            raise ConfigError(
                f"oracle has {hello.get('num_classes')} classes, configured {self.num_classes}"
            )

    def _post_chunk(self, ids, images):
        payload = {
            "images": [
                {"id": int(i), "pixels": encode_pixels(im)} for i, im in zip(ids, images)
            ]
        }
        try:
            resp = self._requests.post(
                self._base + "/classify", json=payload, timeout=self._timeout
            )
        except self._requests.RequestException as exc:
            raise TransportError(
                f"classify request failed: {exc}", request_id=int(ids[0])
            ) from exc
        if resp.status_code != 200:
            raise TransportError(
                f"/classify returned HTTP {resp.status_code}",
                request_id=int(ids[0]), status=resp.status_code,
            )
        return resp.json()["results"]

    def _infer(self, batch):
        out = np.empty((len(batch), self.num_classes), dtype=np.float64)
        chunks = []
        for start in range(0, len(batch), self._chunk):
            ids = list(range(start, min(start + self._chunk, len(batch))))
            chunks.append((ids, batch[ids[0]:ids[-1] + 1]))
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            for results in pool.map(lambda c: self._post_chunk(*c), chunks):
                for item in results:
                    idx = int(item["id"])
                    if not 0 <= idx < len(batch):
                        raise TransportError(
                            f"oracle answered unknown request id {idx}", request_id=idx
                        )
                    out[idx] = np.asarray(item["probs"], dtype=np.float64)
        return out
