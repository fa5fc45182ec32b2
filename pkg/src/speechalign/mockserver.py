"""Local stand-in for a chat-completions endpoint.

Replies are deterministic functions of the request body. A seeded fraction
of requests can be answered with HTTP 500 to exercise client retries.

    python -m speechalign.mockserver --port 8799 --failure-rate 0.3
"""
from __future__ import annotations

import argparse
import hashlib
import json
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable


def default_reply(body: dict) -> str:
    """Deterministic caption (or Q/A block when the prompt asks for pairs)."""
    user = [m["content"] for m in body["messages"] if m["role"] == "user"][-1]
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:8]
    first_line = user.splitlines()[0] if user else ""
    if "question-answer pair" in user:
        k = next((int(w) for w in user.split() if w.isdigit()), 1)
        return "\n".join(
            f"Q: Question {i + 1} about the audio ({digest})?\nA: Answer {i + 1} from {first_line}"
            for i in range(k)
        )
    return f"The audio contains: {first_line} [{digest}]"


class MockChatServer:
    """Threaded HTTP server; use as a context manager.

    ``failure_rate`` of POSTs (drawn from a seeded RNG in arrival order) get
    a 500. ``max_consecutive_failures`` caps failures per distinct body so a
    bounded retry budget always succeeds. ``latency`` seconds are slept per
    request so concurrency is observable.
    """

    def __init__(
        self,
        reply: Callable[[dict], str] = default_reply,
        failure_rate: float = 0.0,
        seed: int = 0,
        latency: float = 0.0,
        max_consecutive_failures: int | None = None,
        port: int = 0,
    ):
        self.reply = reply
        self.failure_rate = failure_rate
        self.latency = latency
        self.max_consecutive_failures = max_consecutive_failures
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.requests = 0
        self.failures = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._streak: dict[str, int] = {}
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                code, payload = server._handle(raw)
                data = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def _handle(self, raw: bytes):
        with self._lock:
            self.requests += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            key = hashlib.sha256(raw).hexdigest()
            fail = self._rng.random() < self.failure_rate
            streak = self._streak.get(key, 0)
            if fail and self.max_consecutive_failures is not None and streak >= self.max_consecutive_failures:
                fail = False
            self._streak[key] = streak + 1 if fail else 0
            if fail:
                self.failures += 1
        try:
            if self.latency:
                time.sleep(self.latency)
            if fail:
                return 500, {"error": {"message": "injected failure"}}
            body = json.loads(raw)
            text = self.reply(body)
            return 200, {
                "id": "mock-" + hashlib.sha256(raw).hexdigest()[:12],
                "object": "chat.completion",
                "model": body.get("model", "mock"),
                "choices": [{"index": 0, "finish_reason": "stop",
                             "message": {"role": "assistant", "content": text}}],
            }
        finally:
            with self._lock:
                self.in_flight -= 1

    def start(self) -> "MockChatServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--port", type=int, default=8799)
    ap.add_argument("--failure-rate", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--latency", type=float, default=0.0)
    args = ap.parse_args(argv)
    srv = MockChatServer(failure_rate=args.failure_rate, seed=args.seed,
                         latency=args.latency, port=args.port)
    print(f"serving on {srv.url}", flush=True)
    try:
        srv.httpd.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
