"""Session fixtures: tiny model on disk, live server on a local port."""
from __future__ import annotations

import socket
import threading
import time

import pytest
import requests
import uvicorn

from trace_sidecar.server import create_app
from trace_sidecar.tinymodel import build_tiny_model
from trace_sidecar.tracing import SidecarConfig, TraceGenerator


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny_model")
    build_tiny_model(str(path))
    return str(path)


@pytest.fixture(scope="session")
def generator(tiny_model_dir):
    return TraceGenerator(SidecarConfig(model_path=tiny_model_dir))


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="session")
def server_url(generator):
    port = _free_port()
    config = uvicorn.Config(create_app(generator), host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    for _ in range(100):
        try:
            if requests.get(url + "/health", timeout=1).status_code == 200:
                break
        except requests.ConnectionError:
            time.sleep(0.05)
    else:
        raise RuntimeError("sidecar server did not come up")
    yield url
    server.should_exit = True
    thread.join(timeout=5)
