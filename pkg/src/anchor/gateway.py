"""Single boundary to external models: chat completions and embeddings.

Everything that talks to a model goes through :class:`Gateway`, which keeps a
thread-safe cost ledger and performs structured-output extraction with a
bounded retry budget.  Offline doubles (fixture replay and a rule-driven
scripted provider) live in :mod:`anchor.mock`.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, TypeVar

import numpy as np
import requests

from .domain import FactorLabel
from .errors import ConfigError, DimensionMismatch, ParseError, TransportError
from .prompts import PromptTemplate

ENV_CHAT_URL = "ANCHOR_CHAT_URL"
ENV_CHAT_MODEL = "ANCHOR_CHAT_MODEL"
ENV_API_KEY = "ANCHOR_API_KEY"
ENV_EMBED_URL = "ANCHOR_EMBED_URL"
ENV_EMBED_MODEL = "ANCHOR_EMBED_MODEL"

_MOCK_EMBED_RE = re.compile(r"^mock:hash-(\d+)$")

T = TypeVar("T")
R = TypeVar("R")


class Tag(Enum):
    """Prompt template identity; determines the expected response schema."""

    SENTENCE_GEN = "SentenceGen"
    FACTOR_EXTRACT = "FactorExtract"
    LABEL_VOTE = "LabelVote"
    THEME = "Theme"
    MAP_VOTE = "MapVote"
    REFLECT = "Reflect"
    PHI_ELICIT = "PhiElicit"
    LATENT_DISCOVER = "LatentDiscover"
    LATENT_ELICIT = "LatentElicit"


@dataclass(frozen=True)
class ChatRequest:
    system: str
    turns: tuple[tuple[str, str], ...]
    temperature: float
    tag: Tag
    nonce: int = 0  # distinguishes repeated sampling queries; ignored by live providers


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    expected_dim: int

    def __post_init__(self) -> None:
        if not self.texts:
            raise ValueError("EmbeddingRequest.texts must be non-empty")


def build_request(template: PromptTemplate, user: str, temperature: float,
                  tag: Tag, nonce: int = 0) -> ChatRequest:
    """Assemble a request from a template's system text, few-shots, and query."""
    turns: list[tuple[str, str]] = []
    for shot_user, shot_assistant in template.examples:
        turns.append(("user", shot_user))
        turns.append(("assistant", shot_assistant))
    turns.append(("user", user))
    return ChatRequest(system=template.system, turns=tuple(turns),
                       temperature=temperature, tag=tag, nonce=nonce)


def request_digest(request: ChatRequest) -> str:
    """Canonical digest of a chat request; keys replay fixtures."""
    payload = json.dumps(
        {
            "tag": request.tag.value,
            "system": request.system,
            "turns": list(request.turns),
            "temperature": request.temperature,
            "nonce": request.nonce,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def estimate_tokens(text: str) -> int:
    """Fallback token count when the provider omits usage: ceil(chars / 4)."""
    return math.ceil(len(text) / 4)


class CostLedger:
    """Per-tag call and token counters; all updates are atomic."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls: dict[str, int] = {}
        self.tokens_in: dict[str, int] = {}
        self.tokens_out: dict[str, int] = {}
        self.started = time.time()

    def record(self, tag: Tag, tokens_in: int, tokens_out: int) -> None:
        with self._lock:
            key = tag.value
            self.calls[key] = self.calls.get(key, 0) + 1
            self.tokens_in[key] = self.tokens_in.get(key, 0) + tokens_in
            self.tokens_out[key] = self.tokens_out.get(key, 0) + tokens_out

    def total_calls(self) -> int:
        with self._lock:
            return sum(self.calls.values())

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {
                "calls": dict(self.calls),
                "tokens_in": dict(self.tokens_in),
                "tokens_out": dict(self.tokens_out),
                "total_calls": sum(self.calls.values()),
                "total_tokens": sum(self.tokens_in.values()) + sum(self.tokens_out.values()),
            }


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest) -> tuple[str, Optional[dict[str, int]]]:
        """Return (response text, usage counts or None)."""


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


# ---------------------------------------------------------------------------
# Structured-output extraction
# ---------------------------------------------------------------------------

_LABEL_WORDS = {
    "outcome1": FactorLabel.SUPPORTS_O1,
    "outcome2": FactorLabel.SUPPORTS_O2,
    "both": FactorLabel.NEUTRAL,
    "neutral": FactorLabel.NEUTRAL,
}


def _is_prob(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and 0.0 <= value <= 1.0


def _as_string_list(value: Any) -> Optional[list[str]]:
    if isinstance(value, list) and all(isinstance(item, str) for item in value):
        return list(value)
    return None


def _validate(tag: Tag, value: Any) -> Optional[Any]:
    """Convert a parsed JSON candidate into the tag's payload, or None."""
    if tag in (Tag.FACTOR_EXTRACT, Tag.REFLECT):
        return _as_string_list(value)
    if tag is Tag.MAP_VOTE:
        if isinstance(value, dict) and set(value) == {"answer"}:
            return _as_string_list(value["answer"])
        return _as_string_list(value)
    if tag is Tag.LABEL_VOTE:
        if not isinstance(value, dict) or not value:
            return None
        out: dict[str, FactorLabel] = {}
        for name, word in value.items():
            if not isinstance(name, str) or not isinstance(word, str):
                return None
            label = _LABEL_WORDS.get(word.strip().casefold())
            if label is None:
                return None
            out[name] = label
        return out
    if tag is Tag.PHI_ELICIT:
        if not isinstance(value, dict) or not value:
            return None
        if all(isinstance(k, str) and _is_prob(v) for k, v in value.items()):
            return {k: float(v) for k, v in value.items()}
        return None
    if tag is Tag.LATENT_ELICIT:
        if not isinstance(value, dict) or not value:
            return None
        out_pairs: dict[str, tuple[float, float]] = {}
        for name, pair in value.items():
            if not (isinstance(name, str) and isinstance(pair, list) and len(pair) == 2):
                return None
            if not (_is_prob(pair[0]) and _is_prob(pair[1])):
                return None
            out_pairs[name] = (float(pair[0]), float(pair[1]))
        return out_pairs
    if tag is Tag.LATENT_DISCOVER:
        if isinstance(value, dict) and set(value) == {"latents"}:
            value = value["latents"]
        if not isinstance(value, list) or not value:
            return None
        latents: list[tuple[str, list[str]]] = []
        for entry in value:
            if not isinstance(entry, dict):
                return None
            name = entry.get("name")
            factors = _as_string_list(entry.get("factors"))
            if not isinstance(name, str) or factors is None:
                return None
            latents.append((name, factors))
        return latents
    raise ValueError(f"tag {tag.value} has no structured schema")


def extract_structured(raw: str, tag: Tag) -> Any:
    """Parse the last well-formed payload matching the tag's schema.

    Prompts end with a ``Final answer:`` line, so the payload of interest is
    the last JSON value in the text; earlier chain-of-thought JSON fragments
    are skipped unless they are the only valid candidate.
    """
    if tag in (Tag.SENTENCE_GEN, Tag.THEME):
        raise ValueError(f"tag {tag.value} has no structured schema")
    decoder = json.JSONDecoder()
    best: Any = None
    found = False
    for pos, char in enumerate(raw):
        if char not in "[{":
            continue
        try:
            value, _ = decoder.raw_decode(raw, pos)
        except ValueError:
            continue
        payload = _validate(tag, value)
        if payload is not None:
            best = payload
            found = True
    if not found:
        raise ParseError(f"no {tag.value} payload found in response")
    return best


_NUMBERED_LINE_RE = re.compile(r"^\s*\d+[\.\)]\s*(.*\S)\s*$")
_ANY_LINE_RE = re.compile(r"^\s*(?:[-*]\s+)?(.*\S)\s*$")


def parse_numbered_list(raw: str) -> list[str]:
    """Items of a numbered list, formatting stripped.

    When explicit numbering is present only numbered lines count, so prose
    preamble around the list is dropped; otherwise every non-empty line
    (bullets stripped) is an item.
    """
    numbered = [m.group(1) for m in map(_NUMBERED_LINE_RE.match, raw.splitlines()) if m]
    if numbered:
        return numbered
    return [m.group(1) for m in map(_ANY_LINE_RE.match, raw.splitlines()) if m]


def parse_theme(raw: str, max_words: int = 6) -> str:
    """Take the last non-empty line as the theme; reject rambling output."""
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    if not lines:
        raise ParseError("empty theme response")
    theme = lines[-1].strip(" .\"'")
    if not theme or len(theme.split()) > max_words or len(theme) > 60:
        raise ParseError(f"theme not concise: {theme[:80]!r}")
    return theme


# ---------------------------------------------------------------------------
# Live providers (OpenAI-compatible wire protocol)
# ---------------------------------------------------------------------------


def _chat_endpoint(base_url: str) -> str:
    if "completions" in base_url:
        return base_url
    return base_url.rstrip("/") + "/chat/completions"


def _embed_endpoint(base_url: str) -> str:
    if "embeddings" in base_url:
        return base_url
    return base_url.rstrip("/") + "/embeddings"


class HttpChatProvider:
    """Chat completions over an OpenAI-compatible HTTP endpoint."""

    def __init__(self, url: str, model: str, api_key: str = "",
                 timeout: float = 60.0, max_attempts: int = 3):
        if not url or not model:
            raise ConfigError("chat provider needs both an endpoint URL and a model name")
        self.url = _chat_endpoint(url)
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts

    def complete(self, request: ChatRequest) -> tuple[str, Optional[dict[str, int]]]:
        messages = [{"role": "system", "content": request.system}]
        messages += [{"role": role, "content": text} for role, text in request.turns]
        body = {"model": self.model, "messages": messages, "temperature": request.temperature}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(0.5 * attempt)
            try:
                response = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
                if 400 <= response.status_code < 500:
                    # client errors will not heal on retry
                    raise TransportError(
                        f"chat completion rejected ({response.status_code}): "
                        f"{response.text[:200]}")
                response.raise_for_status()
                data = response.json()
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage")
                counts = None
                if isinstance(usage, dict):
                    counts = {
                        "tokens_in": int(usage.get("prompt_tokens", 0)),
                        "tokens_out": int(usage.get("completion_tokens", 0)),
                    }
                return text, counts
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_error = exc
        raise TransportError(f"chat completion failed after {self.max_attempts} attempts: {last_error}")


class HttpEmbedder:
    """Embeddings over an OpenAI-compatible HTTP endpoint."""

    def __init__(self, url: str, model: str, dim: int, api_key: str = "",
                 timeout: float = 60.0):
        if not url or not model:
            raise ConfigError("embedding provider needs both an endpoint URL and a model name")
        self.url = _embed_endpoint(url)
        self.model = model
        self.dim = dim
        self.api_key = api_key
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = requests.post(
                self.url,
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout,
            )
            response.raise_for_status()
            data = response.json()["data"]
            return [np.asarray(item["embedding"], dtype=np.float64) for item in data]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc


class HashEmbedder:
    """Deterministic offline embedder: unit-norm vectors derived from sha256."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ConfigError("hash embedder dimension must be >= 1")
        self.dim = dim

    def _vector(self, text: str) -> np.ndarray:
        values: list[float] = []
        counter = 0
        payload = text.encode("utf-8")
        while len(values) < self.dim:
            digest = hashlib.sha256(payload + b"\x00" + str(counter).encode()).digest()
            for offset in range(0, 32, 4):
                if len(values) >= self.dim:
                    break
                word = int.from_bytes(digest[offset:offset + 4], "big")
                values.append(word / 2147483648.0 - 1.0)
            counter += 1
        vector = np.array(values, dtype=np.float64)
        norm = float(np.linalg.norm(vector))
        return vector / norm if norm > 0 else vector

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._vector(text) for text in texts]


class ScriptedEmbedder:
    """Test embedder returning preset vectors per exact text."""

    def __init__(self, vectors: dict[str, Sequence[float]], dim: int):
        self.dim = dim
        self._vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self._fallback = HashEmbedder(dim)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            if text in self._vectors:
                out.append(self._vectors[text])
            else:
                out.append(self._fallback.embed([text])[0])
        return out


# ---------------------------------------------------------------------------
# Gateway facade
# ---------------------------------------------------------------------------


@dataclass
class Gateway:
    """All model traffic flows through here; the ledger sees every call."""

    chat_provider: ChatProvider
    embedder: Embedder
    ledger: CostLedger = field(default_factory=CostLedger)
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        self._embed_memo: dict[str, np.ndarray] = {}
        self._embed_lock = threading.Lock()

    def chat(self, request: ChatRequest) -> str:
        text, usage = self.chat_provider.complete(request)
        if usage is None:
            prompt_chars = len(request.system) + sum(len(t) for _, t in request.turns)
            usage = {"tokens_in": math.ceil(prompt_chars / 4),
                     "tokens_out": estimate_tokens(text)}
        self.ledger.record(request.tag, usage["tokens_in"], usage["tokens_out"])
        return text

    def chat_structured(self, request: ChatRequest, retries: int) -> Any:
        """Chat + extract; re-issues the identical request on ParseError."""
        last: ParseError | None = None
        for _ in range(max(1, retries)):
            raw = self.chat(request)
            try:
                return extract_structured(raw, request.tag)
            except ParseError as exc:
                last = exc
        raise last if last is not None else ParseError("no attempts made")

    def embed(self, texts: Sequence[str], batch_size: int = 128) -> list[np.ndarray]:
        """Embed with per-text memoization; retrieval re-queries the same
        factor texts for every condition."""
        request = EmbeddingRequest(texts=tuple(texts), expected_dim=self.embedder.dim)
        with self._embed_lock:
            missing = [t for t in dict.fromkeys(request.texts) if t not in self._embed_memo]
        fresh: list[np.ndarray] = []
        for start in range(0, len(missing), batch_size):
            fresh.extend(self.embedder.embed(missing[start:start + batch_size]))
        if len(fresh) != len(missing):
            raise DimensionMismatch(
                f"embedder returned {len(fresh)} vectors for {len(missing)} texts")
        for vector in fresh:
            if vector.shape != (request.expected_dim,):
                raise DimensionMismatch(
                    f"expected dimension {request.expected_dim}, got {vector.shape}")
            if not np.all(np.isfinite(vector)):
                raise DimensionMismatch("embedding contains non-finite values")
        with self._embed_lock:
            self._embed_memo.update(zip(missing, fresh))
            return [self._embed_memo[t] for t in request.texts]

    def map_concurrent(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Order-preserving map, threaded when concurrency allows."""
        items = list(items)
        if self.max_concurrency <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            return list(pool.map(fn, items))


def embedder_from_env() -> Embedder:
    model = os.environ.get(ENV_EMBED_MODEL, "")
    mock = _MOCK_EMBED_RE.match(model)
    if mock:
        return HashEmbedder(int(mock.group(1)))
    url = os.environ.get(ENV_EMBED_URL, "")
    if not url or not model:
        raise ConfigError(
            f"set {ENV_EMBED_URL} and {ENV_EMBED_MODEL} (or {ENV_EMBED_MODEL}=mock:hash-<d>)")
    dim = int(os.environ.get("ANCHOR_EMBED_DIM", "384"))
    return HttpEmbedder(url, model, dim, api_key=os.environ.get(ENV_API_KEY, ""))


def gateway_from_env(max_concurrency: int = 4) -> Gateway:
    """Build a live gateway from ANCHOR_* environment variables."""
    url = os.environ.get(ENV_CHAT_URL, "")
    model = os.environ.get(ENV_CHAT_MODEL, "")
    if not url or not model:
        raise ConfigError(f"set {ENV_CHAT_URL} and {ENV_CHAT_MODEL} for the live provider")
    chat = HttpChatProvider(url, model, api_key=os.environ.get(ENV_API_KEY, ""))
    return Gateway(chat_provider=chat, embedder=embedder_from_env(),
                   max_concurrency=max_concurrency)
