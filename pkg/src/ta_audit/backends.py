"""Model backends: HTTP chat endpoints and scripted oracles for tests.

Every completion goes through the same pipeline: content-addressed cache
lookup, token-bucket rate limiting, bounded exponential-backoff retries.
Scripted backends sit behind the identical machinery so protocol code paths
are exercised end to end without a network.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

import requests

from .corpus import Dataset, QAItem
from .prompting import TemplateSet, option_letter, permute_options, render_prompt

log = logging.getLogger(__name__)

BACKEND_KINDS = ("http-chat", "scripted")


class BackendError(Exception):
    """Base for completion failures that protocols may treat as coverage gaps."""


class RetryableBackendError(BackendError):
    """Transient failure: 408/429/5xx or a transport-level error."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class PermanentBackendError(BackendError):
    """Non-retryable failure (e.g. a 4xx other than 408/429)."""


class RetriesExhaustedError(BackendError):
    """All attempts failed with retryable errors."""


class ScriptError(Exception):
    """A scripted oracle was asked something it was not scripted for.

    Deliberately not a BackendError: this is a harness bug and must surface,
    not be absorbed as an uncovered item.
    """


@dataclass(frozen=True)
class BackendSpec:
    """Static description of one backend, as written in config."""

    id: str
    kind: str
    model_name: str = ""
    endpoint: str = ""
    temperature: float = 1.0
    max_tokens: int = 1024
    rate_limit: float = 8.0  # requests per second; <= 0 disables pacing
    max_retries: int = 4
    timeout: float = 60.0
    backoff_base: float = 0.5  # seconds; first retry delay, doubled per attempt
    behavior: str = "answer-gold"  # scripted backends only
    api_key: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("backend id must be non-empty")
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "http-chat" and not self.endpoint:
            raise ValueError(f"backend {self.id!r}: http-chat requires an endpoint")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class RawResponse:
    """What a completion call produced, with transport bookkeeping."""

    text: str
    finish_reason: str
    latency_s: float
    attempt: int  # 1-based attempt that succeeded; 0 for a cache hit
    cached: bool


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cache_key(spec: BackendSpec, prompt: str, sample_index: int) -> str:
    """Content address of one completion request.

    Depends on everything that determines the response distribution: backend
    identity, model, prompt text, temperature, and which sample is wanted.
    """
    payload = json.dumps(
        [spec.id, spec.model_name, prompt, spec.temperature, sample_index],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return sha256_hex(payload)


@dataclass
class CachedResponse:
    prompt_digest: str
    text: str
    finish_reason: str
    timestamp: str


class ResponseCache:
    """One JSON file per cache key, sharded by the first two digest chars.

    Writes go to a temp file in the final directory and are renamed into
    place, so a crash mid-write never leaves a half-readable entry.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> CachedResponse | None:
        path = self._path(key)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            # A torn file from a crashed run reads as a miss and is rewritten.
            return None
        return CachedResponse(
            prompt_digest=data["prompt_digest"],
            text=data["text"],
            finish_reason=data["finish_reason"],
            timestamp=data["timestamp"],
        )

    def put(self, key: str, prompt: str, text: str, finish_reason: str) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "prompt_digest": sha256_hex(prompt),
            "text": text,
            "finish_reason": finish_reason,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        tmp.replace(path)


class TokenBucket:
    """Paces calls to at most `rate` per second (capacity one token).

    acquire() reserves the next free slot under a lock and sleeps outside it,
    so concurrent workers queue up fairly.
    """

    def __init__(self, rate: float):
        self.interval = 1.0 / rate if rate > 0 else 0.0
        self._lock = threading.Lock()
        self._next_free = 0.0

    def acquire(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_free)
            self._next_free = start + self.interval
            wait = start - now
        if wait > 0:
            time.sleep(wait)


class Transport(Protocol):
    def __call__(self, prompt: str, sample_index: int) -> tuple[str, str]:
        """Return (text, finish_reason) or raise a BackendError."""
        ...


def _redact(text: str, secret: str | None) -> str:
    if secret and secret in text:
        return text.replace(secret, "***")
    return text


class HttpChatTransport:
    """OpenAI-style chat completions over POST."""

    def __init__(
        self,
        spec: BackendSpec,
        api_key: str | None = None,
        session: requests.Session | None = None,
    ):
        self.spec = spec
        self.api_key = api_key
        self.session = session or requests.Session()

    def __call__(self, prompt: str, sample_index: int) -> tuple[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.spec.temperature,
            "max_tokens": self.spec.max_tokens,
        }
        try:
            resp = self.session.post(
                self.spec.endpoint, json=body, headers=headers, timeout=self.spec.timeout
            )
        except requests.RequestException as exc:
            raise RetryableBackendError(f"transport error: {exc}") from exc

        if resp.status_code in (408, 429) or resp.status_code >= 500:
            retry_after = None
            header = resp.headers.get("Retry-After")
            if header:
                try:
                    retry_after = float(header)
                except ValueError:
                    retry_after = None
            raise RetryableBackendError(
                f"HTTP {resp.status_code}: {_redact(resp.text[:200], self.api_key)}",
                retry_after=retry_after,
            )
        if resp.status_code != 200:
            raise PermanentBackendError(
                f"HTTP {resp.status_code}: {_redact(resp.text[:200], self.api_key)}"
            )
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            # Truncated or proxy-mangled body; worth another attempt.
            raise RetryableBackendError(f"malformed response body: {exc}") from exc
        if not isinstance(text, str):
            raise RetryableBackendError("response content is not a string")
        return text, finish


# --- scripted oracle -------------------------------------------------------

REFUSAL_TEXT = "I cannot answer this question without seeing the video."
_GARBAGE_WORDS = ("zxqv mumble", "glorp static", "unrelated noise output")


def _scripted_text(item: QAItem, behavior: str, template_name: str, sample_index: int) -> tuple[str, str]:
    """Produce one scripted reply. Behaviors:

    answer-gold               always answers the (permuted) gold
    answer-fixed-letter:<L>   always answers letter L regardless of content
    answer-gold-at:<i,j,...>  gold at the listed sample indices, garbage elsewhere
    refuse                    refusal text every time
    refuse-unless-enhanced    refuses under "default", answers gold under "enhanced"
    garbage                   free text that no extraction rule can parse
    fail                      raises a permanent backend error
    """
    name, _, arg = behavior.partition(":")

    def gold_reply() -> str:
        if item.is_mcq:
            assert item.gold.index is not None
            return f"Considering the phrasing alone.\nAnswer: {option_letter(item.gold.index)}"
        assert item.gold.text is not None
        return f"My best guess follows.\n{item.gold.text}"

    def garbage_reply() -> str:
        tag = sha256_hex(f"{item.id}/{sample_index}")[:6]
        words = _GARBAGE_WORDS[sample_index % len(_GARBAGE_WORDS)]
        return f"{words} {tag} nothing conclusive here"

    if name == "answer-gold":
        return gold_reply(), "stop"
    if name == "answer-fixed-letter":
        if len(arg) != 1 or not arg.isalpha():
            raise ScriptError(f"bad fixed letter in behavior {behavior!r}")
        if item.is_mcq:
            return f"Answer: {arg.upper()}", "stop"
        return arg.upper(), "stop"
    if name == "answer-gold-at":
        try:
            hits = {int(p) for p in arg.split(",") if p.strip() != ""}
        except ValueError:
            raise ScriptError(f"bad sample list in behavior {behavior!r}") from None
        if sample_index in hits:
            return gold_reply(), "stop"
        return garbage_reply(), "stop"
    if name == "refuse":
        return REFUSAL_TEXT, "stop"
    if name == "refuse-unless-enhanced":
        if template_name == "enhanced":
            return gold_reply(), "stop"
        return REFUSAL_TEXT, "stop"
    if name == "garbage":
        return garbage_reply(), "stop"
    if name == "fail":
        raise PermanentBackendError(f"scripted hard failure for item {item.id!r}")
    raise ScriptError(f"unknown scripted behavior: {behavior!r}")


class ScriptedOracle:
    """Maps every prompt this run can legally render to a scripted reply.

    The index covers each item under both templates and every option
    rotation; any other prompt raises ScriptError so a drifting prompt
    renderer fails tests loudly instead of silently answering garbage.
    """

    def __init__(
        self,
        dataset: Dataset,
        templates: TemplateSet | None = None,
        behaviors: Mapping[str, str] | None = None,
        default_behavior: str | None = None,
    ):
        self.templates = templates or TemplateSet.builtin()
        self.behaviors = dict(behaviors or {})
        self.default_behavior = default_behavior
        self._index: dict[str, tuple[QAItem, str]] = {}
        for item in dataset:
            variants = (
                [permute_options(item, k) for k in range(len(item.options))]
                if item.is_mcq
                else [item]
            )
            for template_name in ("default", "enhanced"):
                template = self.templates.get(template_name)
                for variant in variants:
                    prompt = render_prompt(variant, template)
                    self._index[sha256_hex(prompt)] = (variant, template_name)

    def _behavior_for(self, item_id: str) -> str:
        behavior = self.behaviors.get(item_id, self.default_behavior)
        if behavior is None:
            raise ScriptError(f"no scripted behavior for item {item_id!r}")
        return behavior

    def transport(self, spec: BackendSpec) -> Transport:
        """A Transport answering with this oracle under the given backend spec.

        The spec-level `behavior` acts as the default when no per-item
        behavior was registered.
        """
        default = self.default_behavior or spec.behavior

        def call(prompt: str, sample_index: int) -> tuple[str, str]:
            entry = self._index.get(sha256_hex(prompt))
            if entry is None:
                raise ScriptError(
                    f"backend {spec.id!r}: unscripted prompt (digest "
                    f"{sha256_hex(prompt)[:12]})"
                )
            variant, template_name = entry
            behavior = self.behaviors.get(variant.id, default)
            return _scripted_text(variant, behavior, template_name, sample_index)

        return call


# --- the backend proper ----------------------------------------------------

_BACKOFF_CAP = 30.0  # seconds


class Backend:
    """A completion source with caching, pacing and retries."""

    def __init__(
        self,
        spec: BackendSpec,
        transport: Transport,
        cache: ResponseCache | None = None,
        limiter: TokenBucket | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.spec = spec
        self.transport = transport
        self.cache = cache
        self.limiter = limiter or TokenBucket(spec.rate_limit)
        self._sleep = sleep

    def complete(self, prompt: str, sample_index: int = 0) -> RawResponse:
        key = cache_key(self.spec, prompt, sample_index)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                log.debug("%s: cache hit %s", self.spec.id, key[:12])
                return RawResponse(
                    text=hit.text,
                    finish_reason=hit.finish_reason,
                    latency_s=0.0,
                    attempt=0,
                    cached=True,
                )

        last_error: RetryableBackendError | None = None
        attempts = self.spec.max_retries + 1
        for attempt in range(1, attempts + 1):
            self.limiter.acquire()
            started = time.monotonic()
            try:
                text, finish = self.transport(prompt, sample_index)
            except RetryableBackendError as exc:
                last_error = exc
                log.debug(
                    "%s: attempt %d/%d failed: %s", self.spec.id, attempt, attempts, exc
                )
                if attempt < attempts:
                    delay = exc.retry_after
                    if delay is None:
                        delay = self.spec.backoff_base * (2 ** (attempt - 1))
                    self._sleep(min(delay, _BACKOFF_CAP))
                continue
            latency = time.monotonic() - started
            if self.cache is not None:
                self.cache.put(key, prompt, text, finish)
            return RawResponse(
                text=text,
                finish_reason=finish,
                latency_s=latency,
                attempt=attempt,
                cached=False,
            )
        raise RetriesExhaustedError(
            f"backend {self.spec.id!r}: {attempts} attempt(s) failed; last: {last_error}"
        )


API_KEY_ENV = "TA_AUDIT_API_KEY"


def resolve_api_key(spec: BackendSpec, env: Mapping[str, str] | None = None) -> str | None:
    """Per-backend env override, then the shared env var, then config."""
    env = os.environ if env is None else env
    suffix = "".join(c if c.isalnum() else "_" for c in spec.id.upper())
    return env.get(f"{API_KEY_ENV}_{suffix}") or env.get(API_KEY_ENV) or spec.api_key


def make_backend(
    spec: BackendSpec,
    cache_root: str | Path | None = None,
    oracle: ScriptedOracle | None = None,
    api_key: str | None = None,
    limiter: TokenBucket | None = None,
) -> Backend:
    """Wire a Backend from its spec.

    cache_root is the run-level cache directory; the backend gets its own
    subtree under it. Scripted specs need an oracle bound to the dataset.
    """
    if spec.kind == "scripted":
        if oracle is None:
            raise ValueError(f"backend {spec.id!r} is scripted but no oracle was provided")
        transport: Transport = oracle.transport(spec)
    else:
        key = api_key if api_key is not None else resolve_api_key(spec)
        transport = HttpChatTransport(spec, api_key=key)
    cache = ResponseCache(Path(cache_root) / spec.id) if cache_root is not None else None
    return Backend(spec, transport, cache=cache, limiter=limiter)
