"""Service clients for model inference.

All LLM and multimodal-LLM traffic goes through :class:`ChatBackend`, which
enforces the profile's capability set, in-flight cap, request rate and retry
policy, and writes one audit JSON file per request. Concrete transports:

* :class:`HTTPChatBackend` speaks the common chat-completion JSON shape
  (``messages`` array, base64 PNG data URLs for images).
* :class:`MockChatBackend` answers from fixtures keyed by request hash. It
  also replays audit directories, which is how ``--replay`` works.
* :class:`ScriptedBackend` answers with a Python callable; used to author
  fixtures and in tests.

Request hashes are computed over pixel digests rather than encoded image
bytes so they do not depend on the PNG encoder.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np
from PIL import Image

from .quality import RawScoreBatch, read_score_file

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
CAPABILITIES = frozenset({"text", "image", "video"})
ENV_URL = "T2V_BACKEND_URL"
ENV_KEY = "T2V_BACKEND_KEY"


class BackendError(RuntimeError):
    pass


class CapabilityError(BackendError):
    pass


class TransientError(BackendError):
    """Retryable failure (rate limit, 5xx, transport)."""

    def __init__(self, msg: str, retry_after: float | None = None):
        super().__init__(msg)
        self.retry_after = retry_after


# --------------------------------------------------------------------------
# request model

@dataclass(frozen=True)
class TextPart:
    text: str

    def canonical(self) -> dict:
        return {"type": "text", "text": self.text}


@dataclass(frozen=True, eq=False)
class ImagePart:
    pixels: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"expected HxWx3 image, got shape {a.shape}")
        object.__setattr__(self, "pixels", a)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.pixels.shape).encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return isinstance(other, ImagePart) and self.digest() == other.digest()

    def __hash__(self):
        return hash(self.digest())

    def canonical(self) -> dict:
        h, w, _ = self.pixels.shape
        return {"type": "image", "sha256": self.digest(), "size": [w, h]}

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels).save(buf, format="PNG")
        return buf.getvalue()

    def data_url(self) -> str:
        return "data:image/png;base64," + base64.b64encode(self.to_png()).decode("ascii")


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if isinstance(self.parts, str):
            object.__setattr__(self, "parts", (TextPart(self.parts),))
        else:
            object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    model_id: str = ""
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")

    @property
    def has_images(self) -> bool:
        return any(isinstance(p, ImagePart) for m in self.messages for p in m.parts)

    @property
    def text(self) -> str:
        return "\n".join(m.text for m in self.messages)

    def images(self) -> list[ImagePart]:
        return [p for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def canonical(self) -> dict:
        return {
            "model": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {"role": m.role, "content": [p.canonical() for p in m.parts]}
                for m in self.messages
            ],
        }

    def request_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_wire(self) -> dict:
        messages = []
        for m in self.messages:
            content = []
            for p in m.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
            messages.append({"role": m.role, "content": content})
        return {
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


def user_request(text: str, *, system: str | None = None, model_id: str = "", max_tokens: int = 1024,
                 history: Sequence[Message] = ()) -> ChatRequest:
    msgs = []
    if system:
        msgs.append(Message("system", (TextPart(system),)))
    msgs.extend(history)
    msgs.append(Message("user", (TextPart(text),)))
    return ChatRequest(tuple(msgs), model_id=model_id, max_tokens=max_tokens)


# --------------------------------------------------------------------------
# profile

@dataclass
class BackendProfile:
    name: str = "default"
    endpoint: str = ""
    model_id: str = ""
    capabilities: frozenset = frozenset({"text"})
    max_in_flight: int = 4
    requests_per_minute: float | None = None
    max_attempts: int = 4
    backoff_base: float = 0.5
    timeout: float = 120.0
    api_key: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.capabilities = frozenset(self.capabilities)
        unknown = self.capabilities - CAPABILITIES
        if unknown:
            raise ValueError(f"unknown capabilities: {sorted(unknown)}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @property
    def accepts_images(self) -> bool:
        return bool(self.capabilities & {"image", "video"})

    @classmethod
    def from_dict(cls, d: dict, name: str = "default") -> "BackendProfile":
        d = dict(d)
        d.setdefault("name", name)
        d["capabilities"] = frozenset(d.get("capabilities", ["text"]))
        if d.get("endpoint") is None:
            d["endpoint"] = os.environ.get(ENV_URL, "")
        if d.get("api_key") is None:
            d["api_key"] = os.environ.get(ENV_KEY)
        return cls(**d)

    @classmethod
    def from_env(cls, **overrides) -> "BackendProfile":
        return cls.from_dict({"endpoint": os.environ.get(ENV_URL, ""), **overrides})


def load_profiles(path) -> dict[str, BackendProfile]:
    """Load ``{"llm": {...}, "mllm": {...}}`` or a single profile used for both roles."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if "llm" in raw or "mllm" in raw:
        base = raw.get("llm") or raw.get("mllm")
        return {
            "llm": BackendProfile.from_dict(raw.get("llm", base), "llm"),
            "mllm": BackendProfile.from_dict(raw.get("mllm", base), "mllm"),
        }
    p = BackendProfile.from_dict(raw)
    return {"llm": p, "mllm": p}


# --------------------------------------------------------------------------
# audit trail

class AuditLog:
    """One JSON file per distinct request, named by request hash."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, req: ChatRequest, response: str, *, profile: str, attempts: list[dict],
               usage: dict | None, started: float, finished: float) -> Path:
        h = req.request_hash()
        entry = {
            "request_hash": h,
            "profile": profile,
            "request": req.canonical(),
            "response": response,
            "attempts": attempts,
            "usage": usage,
            "started_at": started,
            "finished_at": finished,
        }
        path = self.directory / f"{h}.json"
        with self._lock:
            path.write_text(json.dumps(entry, indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path

    @staticmethod
    def load_responses(directory) -> dict[str, str]:
        out = {}
        for p in sorted(Path(directory).glob("*.json")):
            try:
                entry = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                continue
            if isinstance(entry, dict) and "request_hash" in entry and "response" in entry:
                out[entry["request_hash"]] = entry["response"]
        return out


# --------------------------------------------------------------------------
# rate limiting

class TokenBucket:
    """Requests-per-minute limiter. ``rate=None`` disables it."""

    def __init__(self, rate_per_minute: float | None, clock=time.monotonic, sleep=time.sleep):
        self.rate = None if rate_per_minute is None else rate_per_minute / 60.0
        self.capacity = 1.0 if self.rate is None else max(1.0, rate_per_minute / 60.0)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate is None:
            return
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


# --------------------------------------------------------------------------
# backends

class ChatBackend:
    """Base client. Subclasses implement :meth:`_send`."""

    def __init__(self, profile: BackendProfile, audit: AuditLog | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.profile = profile
        self.audit = audit
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._bucket = TokenBucket(profile.requests_per_minute, sleep=sleep)
        self.calls = 0
        self._calls_lock = threading.Lock()

    def _send(self, req: ChatRequest) -> tuple[str, dict | None]:
        raise NotImplementedError

    def check_capabilities(self, req: ChatRequest) -> None:
        if req.has_images and not self.profile.accepts_images:
            raise CapabilityError(
                f"profile {self.profile.name!r} is text-only but the request carries images")

    def complete(self, req: ChatRequest) -> str:
        self.check_capabilities(req)
        attempts: list[dict] = []
        started = time.time()
        with self._slots:
            for attempt in range(1, self.profile.max_attempts + 1):
                self._bucket.acquire()
                with self._calls_lock:
                    self.calls += 1
                try:
                    text, usage = self._send(req)
                except TransientError as exc:
                    attempts.append({"attempt": attempt, "error": str(exc)})
                    if attempt == self.profile.max_attempts:
                        raise BackendError(
                            f"{self.profile.name}: giving up after {attempt} attempts: {exc}") from exc
                    delay = self.profile.backoff_base * 2 ** (attempt - 1)
                    if exc.retry_after is not None:
                        delay = max(delay, exc.retry_after)
                    log.warning("%s: attempt %d failed (%s); retrying in %.2fs",
                                self.profile.name, attempt, exc, delay)
                    self.sleep(delay)
                    continue
                attempts.append({"attempt": attempt, "error": None})
                break
        if self.audit is not None:
            self.audit.record(req, text, profile=self.profile.name, attempts=attempts,
                              usage=usage, started=started, finished=time.time())
        return text


class HTTPChatBackend(ChatBackend):
    def __init__(self, profile: BackendProfile, audit: AuditLog | None = None,
                 client: httpx.Client | None = None, sleep=time.sleep):
        super().__init__(profile, audit, sleep)
        if not profile.endpoint:
            raise BackendError(f"profile {profile.name!r} has no endpoint (set {ENV_URL})")
        self.client = client or httpx.Client(timeout=profile.timeout)

    def _send(self, req: ChatRequest) -> tuple[str, dict | None]:
        headers = {"Content-Type": "application/json"}
        if self.profile.api_key:
            headers["Authorization"] = f"Bearer {self.profile.api_key}"
        body = req.to_wire()
        if not body["model"]:
            body["model"] = self.profile.model_id
        try:
            resp = self.client.post(self.profile.endpoint, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            retry_after = resp.headers.get("Retry-After")
            try:
                ra = float(retry_after) if retry_after is not None else None
            except ValueError:
                ra = None
            raise TransientError(f"HTTP {resp.status_code}", retry_after=ra)
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        return content, payload.get("usage")


class MockChatBackend(ChatBackend):
    """Deterministic backend: response = fixtures[request_hash]."""

    def __init__(self, fixtures: dict[str, str], profile: BackendProfile | None = None,
                 audit: AuditLog | None = None):
        super().__init__(profile or BackendProfile(name="mock", capabilities={"text", "image"}), audit)
        self.fixtures = dict(fixtures)

    def _send(self, req: ChatRequest) -> tuple[str, dict | None]:
        h = req.request_hash()
        try:
            return self.fixtures[h], None
        except KeyError:
            snippet = req.text[-120:].replace("\n", " ")
            raise BackendError(f"no mock fixture for request {h[:16]} ({snippet!r})") from None

    @staticmethod
    def read_fixtures(path) -> dict[str, str]:
        """Fixture JSON: ``{hash: text}`` or ``{hash: {"response": text, ...}}``.

        ``path`` may be a file or a directory of such files.
        """
        path = Path(path)
        files = sorted(path.glob("*.json")) if path.is_dir() else [path]
        out: dict[str, str] = {}
        for f in files:
            raw = json.loads(f.read_text(encoding="utf-8"))
            for h, v in raw.items():
                out[h] = v["response"] if isinstance(v, dict) else v
        return out

    @classmethod
    def from_path(cls, path, profile=None, audit=None) -> "MockChatBackend":
        return cls(cls.read_fixtures(path), profile, audit)

    @classmethod
    def from_audit_dir(cls, directory, profile=None, audit=None) -> "MockChatBackend":
        return cls(AuditLog.load_responses(directory), profile, audit)


class ScriptedBackend(ChatBackend):
    """Backend driven by ``responder(request) -> text``; remembers every exchange."""

    def __init__(self, responder: Callable[[ChatRequest], str], profile: BackendProfile | None = None,
                 audit: AuditLog | None = None):
        super().__init__(profile or BackendProfile(name="scripted", capabilities={"text", "image"}), audit)
        self.responder = responder
        self.transcript: dict[str, str] = {}
        self._t_lock = threading.Lock()

    def _send(self, req: ChatRequest) -> tuple[str, dict | None]:
        text = self.responder(req)
        with self._t_lock:
            self.transcript[req.request_hash()] = text
        return text, None


# --------------------------------------------------------------------------
# score providers

def fetch_scores(video_ids: Iterable[str], provider, provider_id: str = "technical",
                 client: httpx.Client | None = None) -> RawScoreBatch:
    """Fetch one finite raw score per video from a TSV file or a scoring service.

    Service contract: ``POST <url>`` with ``{"video_ids": [...], "provider_id": ...}``
    returning ``{"scores": {video_id: score}}``.
    """
    ids = list(video_ids)
    src = str(provider)
    if src.startswith(("http://", "https://")):
        client = client or httpx.Client(timeout=120.0)
        try:
            resp = client.post(src, json={"video_ids": ids, "provider_id": provider_id})
        except httpx.TransportError as exc:
            raise BackendError(f"scoring service unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise BackendError(f"scoring service HTTP {resp.status_code}")
        try:
            scores = {str(k): v for k, v in resp.json()["scores"].items()}
        except (ValueError, KeyError, AttributeError) as exc:
            raise BackendError(f"malformed scoring payload: {exc}") from exc
    else:
        scores = read_score_file(src)

    missing = [v for v in ids if v not in scores]
    if missing:
        raise KeyError(f"{provider_id} scores missing for: {', '.join(missing)}")
    entries = []
    for v in ids:
        try:
            s = float(scores[v])
        except (TypeError, ValueError):
            raise ValueError(f"non-numeric {provider_id} score for {v!r}") from None
        if not math.isfinite(s):
            raise ValueError(f"non-finite {provider_id} score for {v!r}: {scores[v]!r}")
        entries.append((v, s))
    return RawScoreBatch(tuple(entries), provider_id)
