import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

REQUIRED_KEYS = {"utterance_id", "classes", "temperature", "sample_index"}


class StubLalmServer:
    """Local teacher service speaking the JSON wire protocol.

    ``answer(body) -> dict`` builds the ``probs`` table. ``fail_first`` makes
    the first n requests return HTTP 503. Every request body is recorded.
    """

    def __init__(self, answer, token=None, fail_first=0):
        self.answer = answer
        self.token = token
        self.fail_first = fail_first
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                body = json.loads(raw)
                stub.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                if self.path != "/v1/predict" or set(body) != REQUIRED_KEYS:
                    return self._send(400, {"error": "bad request"})
                if stub.token and self.headers.get("Authorization") != f"Bearer {stub.token}":
                    return self._send(401, {"error": "unauthorized"})
                if len(stub.requests) <= stub.fail_first:
                    return self._send(503, {"error": "busy"})
                self._send(200, {"probs": stub.answer(body)})

            def _send(self, code, obj):
                data = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(answer, **kwargs):
        s = StubLalmServer(answer, **kwargs).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__()


# --- acceptance reporting

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one PASS/FAIL line and returns ``ok``."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
