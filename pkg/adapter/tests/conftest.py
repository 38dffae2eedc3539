"""Harness helpers for driving the adapter (and its clients) as black boxes.

Everything here talks to external processes through pipes, sockets and
files only; nothing imports the attack toolkit.
"""
import base64
import json
import shutil
import struct
import subprocess

import numpy as np
import pytest


def wire_pixels(image) -> str:
    """Image -> base64 little-endian float32 HWC, as the protocol demands."""
    return base64.b64encode(
        np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def write_idx_pair(images, labels, image_path, label_path) -> None:
    """Big-endian IDX files: uint8 pixels (round(x*255)) and uint8 labels."""
    arr = np.round(np.asarray(images, dtype=np.float64) * 255).astype(np.uint8)
    n, h, w = arr.shape[:3]
    with open(image_path, "wb") as f:
        f.write(struct.pack(">iiii", 0x803, n, h, w))
        f.write(arr.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">ii", 0x801, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def tool(name: str) -> str:
    path = shutil.which(name)
    if path is None:
        pytest.fail(f"console script {name!r} not on PATH; install the packages")
    return path


def adapter_argv(*args) -> list:
    return [tool("oracle-adapter"), *args]


class StdioClient:
    """Minimal protocol client: spawn, read handshake, query in lockstep."""

    def __init__(self, argv):
        self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE,
                                     stderr=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline()
        if not line:
            raise AssertionError(
                f"no handshake from {argv}: {self.proc.stderr.read()}")
        self.handshake = json.loads(line)

    def send_line(self, line: str) -> dict:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()
        return json.loads(self.proc.stdout.readline())

    def ask(self, images) -> np.ndarray:
        """Classify a batch one request at a time; rows follow input order."""
        got = {}
        for i, image in enumerate(images):
            resp = self.send_line(json.dumps({"id": i, "pixels": wire_pixels(image)}))
            assert "probs" in resp, f"oracle error: {resp}"
            got[resp["id"]] = resp["probs"]
        return np.array([got[i] for i in range(len(images))], dtype=np.float64)

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def pytest_terminal_summary(terminalreporter):
    import adapter_report

    if adapter_report.LINES:
        terminalreporter.section("adapter conformance")
        for line in adapter_report.LINES:
            terminalreporter.write_line(line)
