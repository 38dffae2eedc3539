import io
import json
import subprocess
import time

import numpy as np
import pytest
import requests

from oracle_adapter import BrightnessStub, serve_stdio

from conftest import StdioClient, adapter_argv, wire_pixels


def test_serve_stdio_in_process():
    """Handshake first, then one response per line, EOF terminates."""
    reqs = "\n".join([
        json.dumps({"id": 1, "pixels": wire_pixels(np.full((2, 2, 1), 0.25))}),
        "",  # blank lines are skipped
        "garbage",
        json.dumps({"id": 2, "pixels": wire_pixels(np.zeros((2, 2, 1)))}),
    ]) + "\n"
    out = io.StringIO()
    serve_stdio(BrightnessStub((2, 2, 1)), inp=io.StringIO(reqs), out=out)
    lines = out.getvalue().splitlines()
    assert json.loads(lines[0]) == {"proto": 1, "shape": [2, 2, 1],
                                    "num_classes": 2}
    assert json.loads(lines[1]) == {"id": 1, "probs": [0.75, 0.25]}
    assert json.loads(lines[2])["error"] == "malformed request line"
    assert json.loads(lines[3]) == {"id": 2, "probs": [1.0, 0.0]}
    assert len(lines) == 4


def test_stdio_subprocess_survives_malformed_requests():
    with StdioClient(adapter_argv("--model", "stub-uniform", "--shape",
                                  "3", "3", "1", "--classes", "5")) as client:
        assert client.handshake["num_classes"] == 5
        assert "error" in client.send_line("}{")
        probs = client.ask(np.zeros((2, 3, 3, 1)))
        assert np.allclose(probs, 0.2)


def test_stdio_subprocess_user_module(tmp_path):
    mod = tmp_path / "toy.py"
    mod.write_text(
        "import numpy as np\n"
        "class M:\n"
        "    shape = (2, 2, 1)\n"
        "    num_classes = 2\n"
        "    def predict(self, batch):\n"
        "        hot = batch.reshape(len(batch), -1).max(axis=1) > 0.5\n"
        "        return np.stack([1.0 - hot, hot * 1.0], axis=1)\n"
        "def build():\n"
        "    return M()\n")
    with StdioClient(adapter_argv("--model", str(mod))) as client:
        assert client.handshake["shape"] == [2, 2, 1]
        probs = client.ask(np.stack([np.zeros((2, 2, 1)),
                                     np.full((2, 2, 1), 0.9)]))
        assert np.allclose(probs, [[1.0, 0.0], [0.0, 1.0]])


def test_cli_rejects_bad_config():
    proc = subprocess.run(adapter_argv("--model", "stub-uniform"),
                          capture_output=True, text=True, timeout=30)
    assert proc.returncode == 2
    assert "--shape" in proc.stderr


@pytest.fixture()
def http_adapter():
    proc = subprocess.Popen(
        adapter_argv("--model", "stub-brightness", "--shape", "2", "2", "1",
                     "--port", "0"),
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()
    assert line.startswith("LISTENING "), proc.stderr.read()
    yield line.split(" ", 1)[1]
    proc.terminate()
    proc.wait(timeout=10)


def test_http_meta_and_classify(http_adapter):
    meta = requests.get(http_adapter + "/meta", timeout=10).json()
    assert meta == {"proto": 1, "shape": [2, 2, 1], "num_classes": 2}

    body = {"images": [
        {"id": 0, "pixels": wire_pixels(np.full((2, 2, 1), 0.25))},
        {"id": 1, "pixels": "junk-b64"},
    ]}
    r = requests.post(http_adapter + "/classify", json=body, timeout=10)
    assert r.status_code == 200
    results = r.json()["results"]
    assert results[0] == {"id": 0, "probs": [0.75, 0.25]}
    assert results[1]["id"] == 1 and "error" in results[1]


def test_http_error_codes(http_adapter):
    assert requests.get(http_adapter + "/nope", timeout=10).status_code == 404
    r = requests.post(http_adapter + "/classify", data=b"{]",
                      timeout=10)
    assert r.status_code == 400
    r = requests.post(http_adapter + "/classify", json={"wrong": 1}, timeout=10)
    assert r.status_code == 400


def test_http_serves_repeatedly(http_adapter):
    payload = {"images": [{"id": 7,
                           "pixels": wire_pixels(np.zeros((2, 2, 1)))}]}
    for _ in range(3):
        r = requests.post(http_adapter + "/classify", json=payload, timeout=10)
        assert r.json()["results"][0]["probs"] == [1.0, 0.0]
    time.sleep(0)  # loop stays healthy between posts
