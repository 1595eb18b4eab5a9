import json
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from graphedit.datasets import SyntheticSpec, generate_synthetic
from graphedit.graph import NodeRecord, build_graph


def make_graph(labels, edges, categories=None, texts=None):
    """Small graph helper: one node per label, text defaults to the class name."""
    categories = categories or [f"Class {c}" for c in range(max(labels) + 1)]
    nodes = []
    for i, c in enumerate(labels):
        title, abstract = texts[i] if texts else (f"paper {i}", f"about {categories[c]}")
        nodes.append(NodeRecord(i, title, abstract, c))
    return build_graph(nodes, edges, categories)


def random_graph(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = [(int(i), int(j)) for i, j in zip(*np.nonzero(upper))]
    labels = [int(x) for x in rng.integers(0, 3, n)]
    labels[:3] = [0, 1, 2]
    return make_graph(labels, edges)


@contextmanager
def json_server(handler_fn):
    """Serve POST requests on localhost; ``handler_fn(body) -> (status, payload)``."""
    calls = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            calls.append((body, dict(self.headers)))
            status, payload = handler_fn(body)
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}/embed", calls
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture(scope="session")
def sbm():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def small_sbm():
    return generate_synthetic(SyntheticSpec(n=60, p_in=0.2, p_out=0.02, seed=3))


# Filled by test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
