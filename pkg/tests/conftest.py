"""Shared builders for synthetic items, datasets and transports."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from ta_audit.backends import Backend, BackendSpec, RetryableBackendError
from ta_audit.corpus import AnswerKey, Dataset, QAItem, item_to_record

# Distinct single-word option texts so containment matching in tests never
# collides across options.
PALETTE = (
    "crimson", "azure", "emerald", "amber", "violet", "indigo", "ochre",
    "teal", "maroon", "cobalt", "sienna", "plum",
)


def mcq_item(
    item_id: str = "q1",
    gold: int = 0,
    n_options: int = 4,
    modality: str = "video",
    question: str | None = None,
    options: tuple[str, ...] | None = None,
) -> QAItem:
    opts = options if options is not None else PALETTE[:n_options]
    return QAItem(
        id=item_id,
        question=question or f"What color is shown in {item_id}?",
        options=tuple(opts),
        gold=AnswerKey.option(gold),
        modality=modality,
        media_ref=f"media/{item_id}.mp4",
        source="synthetic",
    )


def open_item(
    item_id: str = "q1",
    answer: str = "three",
    modality: str = "video",
    question: str | None = None,
) -> QAItem:
    return QAItem(
        id=item_id,
        question=question or f"How many are there in {item_id}?",
        options=(),
        gold=AnswerKey.free(answer),
        modality=modality,
        media_ref=f"media/{item_id}.mp4",
        source="synthetic",
    )


def make_dataset(items) -> Dataset:
    return Dataset(name="synthetic", items=list(items))


def write_dataset(path: Path, items) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item_to_record(item), ensure_ascii=False) + "\n")
    return path


class CountingTransport:
    """Wraps a transport (or a fixed reply) and counts invocations."""

    def __init__(self, inner=None, text: str = "Answer: A", finish: str = "stop"):
        self.inner = inner
        self.text = text
        self.finish = finish
        self.calls = 0

    def __call__(self, prompt: str, sample_index: int):
        self.calls += 1
        if self.inner is not None:
            return self.inner(prompt, sample_index)
        return self.text, self.finish


class FlakyTransport:
    """Fails with retryable errors a set number of times, then succeeds."""

    def __init__(self, failures: int, text: str = "Answer: A"):
        self.failures = failures
        self.text = text
        self.calls = 0

    def __call__(self, prompt: str, sample_index: int):
        self.calls += 1
        if self.calls <= self.failures:
            raise RetryableBackendError(f"injected failure {self.calls}")
        return self.text, "stop"


class ScriptedHttpHandler(BaseHTTPRequestHandler):
    """POST handler replaying a scripted list of (status, headers, body)."""

    script: list[tuple[int, dict, str]] = []
    seen: list[dict] = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        type(self).seen.append(
            {
                "path": self.path,
                "auth": self.headers.get("Authorization"),
                "body": json.loads(body) if body else None,
            }
        )
        status, headers, payload = (
            type(self).script.pop(0) if type(self).script else (200, {}, ok_chat_body("fallback"))
        )
        data = payload.encode("utf-8")
        self.send_response(status)
        for name, value in headers.items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):
        pass


def ok_chat_body(text: str) -> str:
    return json.dumps(
        {"choices": [{"message": {"content": text}, "finish_reason": "stop"}]}
    )


@pytest.fixture()
def http_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), ScriptedHttpHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    ScriptedHttpHandler.script = []
    ScriptedHttpHandler.seen = []
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    finally:
        server.shutdown()
        server.server_close()


def quick_backend(
    transport,
    backend_id: str = "test",
    cache=None,
    max_retries: int = 4,
    backoff_base: float = 0.001,
    rate_limit: float = 0.0,
    sleeps: list | None = None,
) -> Backend:
    """A Backend with fast retries, no pacing, and optional sleep recording."""
    spec = BackendSpec(
        id=backend_id,
        kind="scripted",
        model_name="test-model",
        rate_limit=rate_limit,
        max_retries=max_retries,
        backoff_base=backoff_base,
    )
    recorded = sleeps if sleeps is not None else []
    return Backend(spec, transport, cache=cache, sleep=recorded.append)
