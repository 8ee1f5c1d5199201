"""Provider-agnostic model invocation.

Responsibilities: deterministic on-disk response caching, a scriptable mock
backend for offline runs, bounded retries with backoff, per-provider rate
limiting, and an append-only audit log of every request. All pipeline calls
run at temperature 0; the audit log makes that assertable after the fact.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .jsontree import (
    canonical_equal,
    dumps_canonical,
    enumerate_leaves,
    parse_json,
    resolve,
    utc_now_iso,
)


class GatewayError(Exception):
    pass


class UnknownModel(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class ParseFailure(GatewayError):
    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class Attachment:
    data: bytes
    media_type: str = "application/pdf"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    prompt: str
    attachment: Optional[Attachment] = None
    temperature: float = 0.0
    response_format: str = "json_object"  # or "free_text"

    def cache_key(self) -> str:
        payload = dumps_canonical({
            "model_id": self.model_id,
            "prompt": self.prompt,
            "attachment": self.attachment.sha256 if self.attachment else None,
            "temperature": format(self.temperature, ".6f"),
            "response_format": self.response_format,
        })
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ModelResponse:
    text: str
    parsed: Optional[Any]
    usage: Optional[dict]
    latency_ms: int
    from_cache: bool
    created_at: str


_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n(.*?)\n\s*```[\s.]*$", re.S)


def strip_code_fences(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1) if m else text


def parse_response_json(text: str) -> Any:
    """Parse a model's JSON reply, tolerating fenced code blocks."""
    body = strip_code_fences(text).strip()
    try:
        return parse_json(body)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"model reply is not valid JSON: {exc}", text) from exc


_TOKEN = re.compile(r"\w+|[^\w\s]")


def estimate_tokens(prompt: str, attachment: Optional[bytes] = None) -> int:
    """Deterministic character-class token heuristic (not a provider tokenizer)."""
    count = len(_TOKEN.findall(prompt))
    if attachment:
        count += len(_TOKEN.findall(attachment.decode("latin-1")))
    return count


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class Backend:
    name = "abstract"

    def invoke(self, request: ModelRequest) -> tuple[str, Optional[dict]]:
        raise NotImplementedError


class MockBackend(Backend):
    """Scriptable offline backend.

    A script is a JSON document with ordered matching rules plus optional
    automatic behaviors for reflection and judging prompts, so full pipeline
    runs need no canned response per judge call.
    """

    name = "mock"

    def __init__(self, script: Optional[dict] = None, base_dir: Optional[Path] = None):
        script = script or {}
        self.rules = script.get("rules", [])
        self.behaviors = set(script.get("behaviors", []))
        self.default_response = script.get("default_response")
        self.base_dir = base_dir or Path(".")

    @classmethod
    def from_file(cls, path: Path) -> "MockBackend":
        return cls(json.loads(Path(path).read_text("utf-8")), base_dir=Path(path).parent)

    def invoke(self, request: ModelRequest) -> tuple[str, Optional[dict]]:
        for rule in self.rules:
            if self._matches(rule, request):
                return self._response_of(rule), None
        if "auto_reflect" in self.behaviors and \
                "Self-Reflection and Reevaluation Steps" in request.prompt:
            return '{"status": "No corrections needed", "pdf_status": "Processed"}', None
        if "auto_judge" in self.behaviors and \
                "## GT FIELDS (Ground Truth)" in request.prompt:
            return self._auto_judge(request.prompt), None
        if self.default_response is not None:
            return self.default_response, None
        raise BackendTimeout(
            f"mock backend has no scripted response for model {request.model_id}")

    def _matches(self, rule: dict, request: ModelRequest) -> bool:
        if "model_id" in rule and rule["model_id"] != request.model_id:
            return False
        if "prompt_contains" in rule and rule["prompt_contains"] not in request.prompt:
            return False
        if "attachment_sha256" in rule:
            if request.attachment is None or \
                    request.attachment.sha256 != rule["attachment_sha256"]:
                return False
        return True

    def _response_of(self, rule: dict) -> str:
        if "response_file" in rule:
            return (self.base_dir / rule["response_file"]).read_text("utf-8")
        return rule["response"]

    def _auto_judge(self, prompt: str) -> str:
        gt_block = _between(prompt, "## GT FIELDS (Ground Truth)",
                            "## EXT FIELDS (Extracted)")
        ext_block = prompt.split("## EXT FIELDS (Extracted)", 1)[1]
        gt = parse_json(gt_block.strip())
        ext = parse_json(ext_block.strip())
        verdicts = []
        for path, gt_leaf in enumerate_leaves(gt, skip_meta=True):
            found, ext_leaf = resolve(ext, path)
            if not found:
                verdicts.append({
                    "field_name": path.render(),
                    "status": "Missing",
                    "error_type": "Missing field",
                    "explanation": "field absent from extracted output",
                })
            elif canonical_equal(gt_leaf, ext_leaf):
                verdicts.append({"field_name": path.render(), "status": "Correct"})
            else:
                verdicts.append({
                    "field_name": path.render(),
                    "status": "Hallucinated",
                    "error_type": "Incorrect value",
                    "explanation": "extracted value differs from ground truth",
                })
        return dumps_canonical(verdicts)


def _between(text: str, start: str, end: str) -> str:
    return text.split(start, 1)[1].split(end, 1)[0]


class HttpBackend(Backend):
    """Minimal OpenAI-compatible chat-completions backend."""

    name = "http"

    def __init__(self, base_url: str, credential_env: str,
                 timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.credential_env = credential_env
        self.timeout_s = timeout_s

    def invoke(self, request: ModelRequest) -> tuple[str, Optional[dict]]:
        import base64

        import httpx

        api_key = os.environ.get(self.credential_env)
        if not api_key:
            raise GatewayError(f"credential env var {self.credential_env} not set")
        content: Any = request.prompt
        if request.attachment is not None:
            content = [
                {"type": "text", "text": request.prompt},
                {"type": "file", "file": {
                    "file_data": "data:%s;base64,%s" % (
                        request.attachment.media_type,
                        base64.b64encode(request.attachment.data).decode()),
                }},
            ]
        body = {
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": content}],
        }
        if request.response_format == "json_object":
            body["response_format"] = {"type": "json_object"}
        try:
            reply = httpx.post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {api_key}"},
                json=body,
                timeout=self.timeout_s,
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        if reply.status_code == 429:
            raise RateLimited(reply.text)
        reply.raise_for_status()
        data = reply.json()
        return data["choices"][0]["message"]["content"], data.get("usage")


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------

class TokenBucket:
    def __init__(self, rate_per_s: float = 50.0, burst: int = 50):
        self.rate = rate_per_s
        self.capacity = float(burst)
        self.tokens = float(burst)
        self.updated = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.tokens = min(self.capacity,
                                  self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

@dataclass
class Gateway:
    backends: dict[str, Backend]
    cache_dir: Path
    audit_log_path: Optional[Path] = None
    max_attempts: int = 3
    backoff_base_s: float = 0.5
    rate_limits: dict[str, TokenBucket] = field(default_factory=dict)
    _audit_lock: threading.Lock = field(default_factory=threading.Lock)
    backend_calls: int = 0

    def __post_init__(self) -> None:
        self.cache_dir = Path(self.cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def complete(self, request: ModelRequest) -> ModelResponse:
        backend = self.backends.get(request.model_id)
        if backend is None:
            raise UnknownModel(f"model {request.model_id!r} not registered")
        key = request.cache_key()
        cache_file = self.cache_dir / f"{key}.json"
        cached = self._read_cache(cache_file)
        if cached is not None:
            response = ModelResponse(
                text=cached["text"],
                parsed=None,
                usage=cached.get("usage"),
                latency_ms=cached.get("latency_ms", 0),
                from_cache=True,
                created_at=cached["created_at"],
            )
        else:
            response = self._invoke_with_retries(backend, request)
            self._write_cache(cache_file, response)
        self._audit(request, backend, response.from_cache)
        if request.response_format == "json_object":
            response.parsed = parse_response_json(response.text)
        return response

    def _invoke_with_retries(self, backend: Backend,
                             request: ModelRequest) -> ModelResponse:
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            limiter = self.rate_limits.get(backend.name)
            if limiter is not None:
                limiter.acquire()
            started = time.monotonic()
            try:
                self.backend_calls += 1
                text, usage = backend.invoke(request)
                latency = int((time.monotonic() - started) * 1000)
                return ModelResponse(
                    text=text, parsed=None, usage=usage, latency_ms=latency,
                    from_cache=False, created_at=utc_now_iso())
            except (BackendTimeout, RateLimited) as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff_base_s * (2 ** attempt)
                    time.sleep(delay * (0.5 + random.random() / 2))
        assert last_error is not None
        raise last_error

    def _read_cache(self, path: Path) -> Optional[dict]:
        if not path.exists():
            return None
        return json.loads(path.read_text("utf-8"))

    def _write_cache(self, path: Path, response: ModelResponse) -> None:
        entry = {
            "text": response.text,
            "usage": response.usage,
            "latency_ms": response.latency_ms,
            "created_at": response.created_at,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(entry, ensure_ascii=False), "utf-8")
        os.replace(tmp, path)

    def _audit(self, request: ModelRequest, backend: Backend,
               from_cache: bool) -> None:
        if self.audit_log_path is None:
            return
        entry = {
            "ts": utc_now_iso(),
            "model_id": request.model_id,
            "backend": backend.name,
            "temperature": request.temperature,
            "response_format": request.response_format,
            "attachment_sha256": request.attachment.sha256 if request.attachment else None,
            "prompt": request.prompt,
            "from_cache": from_cache,
        }
        line = json.dumps(entry, ensure_ascii=False) + "\n"
        with self._audit_lock:
            with open(self.audit_log_path, "a", encoding="utf-8") as fh:
                fh.write(line)
