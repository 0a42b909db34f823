"""Chat / embedding gateway with record-replay caching.

Every LLM interaction in the pipeline goes through :class:`LLMGateway`. In
``replay`` mode nothing touches the network: responses come from an
append-only JSON-lines cache keyed by a hash of the canonical request. In
``record`` mode cache misses are served live and written to the cache before
they are returned, so a record run followed by a replay run sees the same
bytes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .errors import CacheMiss, ProviderError
from .tokenizer import count_tokens, iter_words

logger = logging.getLogger(__name__)

MODES = ("live", "record", "replay")
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not any(r == "user" for r, _ in msgs):
            raise ValueError("a chat request needs at least one user message")
        bad = [r for r, _ in msgs if r not in ROLES]
        if bad:
            raise ValueError(f"unknown role(s) {bad}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def cache_key(self) -> str:
        return _hash_payload(
            {
                "kind": "chat",
                "model": self.model_name,
                "messages": [list(m) for m in self.messages],
                "temperature": self.temperature,
            }
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "model_name": self.model_name,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "request_tag": self.request_tag,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: tuple[int, int] = (0, 0)
    provider_id: str = ""
    from_replay: bool = False


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.values)


def _hash_payload(payload: dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def embed_cache_key(model: str, text: str) -> str:
    return _hash_payload({"kind": "embed", "model": model, "text": text})


def normalize(values: Sequence[float]) -> tuple[float, ...]:
    norm = math.sqrt(math.fsum(v * v for v in values))
    if norm == 0 or not math.isfinite(norm):
        raise ProviderError("provider returned a zero or non-finite embedding")
    return tuple(v / norm for v in values)


# ---------------------------------------------------------------------------
# Replay cache
# ---------------------------------------------------------------------------


class ReplayCache:
    """Append-only JSON-lines store of ``{key_hash, request, response}``.

    Single writer (guarded by a lock), lock-free reads from the in-memory map.
    A later entry for the same key wins, matching append-only semantics.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        entry = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("%s:%d: skipping corrupt cache line", self.path, lineno)
                        continue
                    self._entries[entry["key_hash"]] = entry

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> dict[str, Any] | None:
        return self._entries.get(key)

    def put(self, key: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        entry = {"key_hash": key, "request": request, "response": response}
        with self._lock:
            self._entries[key] = entry
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
                    fh.flush()

    def compact(self) -> None:
        """Rewrite the file with one entry per key, sorted by key hash."""
        if not self.path:
            return
        with self._lock:
            lines = [json.dumps(self._entries[k], ensure_ascii=False, sort_keys=True) for k in sorted(self._entries)]
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
            os.replace(tmp, self.path)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class ChatProvider(Protocol):
    provider_id: str

    def chat(self, request: ChatRequest) -> tuple[str, tuple[int, int]]: ...


class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, texts: Sequence[str], model: str) -> tuple[list[list[float]], int]: ...


class OpenAICompatibleProvider:
    """Chat completions and embeddings over the OpenAI HTTP schema."""

    provider_id = "openai-compatible"

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        last: str = ""
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.client.post(path, json=payload)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("%s (attempt %d/%d)", last, attempt + 1, self.max_attempts)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("%s from %s (attempt %d/%d)", last, path, attempt + 1, self.max_attempts)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"non-JSON body from {path}") from exc
        raise ProviderError(f"{path} failed after {self.max_attempts} attempts ({last})")

    def chat(self, request: ChatRequest) -> tuple[str, tuple[int, int]]:
        data = self._post(
            "/chat/completions",
            {
                "model": request.model_name,
                "messages": [{"role": r, "content": c} for r, c in request.messages],
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("malformed chat completion payload") from exc
        usage = data.get("usage") or {}
        return text, (int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))

    def embed(self, texts: Sequence[str], model: str) -> tuple[list[list[float]], int]:
        data = self._post("/embeddings", {"model": model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda d: d.get("index", 0))
            vectors = [list(map(float, row["embedding"])) for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError("malformed embeddings payload") from exc
        if len(vectors) != len(texts):
            raise ProviderError(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        return vectors, int((data.get("usage") or {}).get("prompt_tokens", 0))


class HashingEmbedder:
    """Offline bag-of-words embedder (signed feature hashing, stop words dropped).

    Not a semantic model; it gives reproducible vectors for fixtures and
    air-gapped runs. Dimension 0 is reserved for texts with no content terms.
    """

    provider_id = "hashing"

    def __init__(self, dimension: int = 512):
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension

    def vector(self, text: str) -> list[float]:
        from .corpus import STOPWORDS

        vec = [0.0] * self.dimension
        counts: dict[str, int] = defaultdict(int)
        for w in iter_words(text):
            if w not in STOPWORDS:
                counts[w] += 1
        if not counts:
            vec[0] = 1.0
            return vec
        for w, n in counts.items():
            h = hashlib.blake2b(w.encode("utf-8"), digest_size=8).digest()
            idx = 1 + int.from_bytes(h[:4], "little") % (self.dimension - 1)
            sign = 1.0 if h[4] & 1 else -1.0
            vec[idx] += sign * (1.0 + math.log(n))
        return vec

    def embed(self, texts: Sequence[str], model: str) -> tuple[list[list[float]], int]:
        return [self.vector(t) for t in texts], sum(count_tokens(t) for t in texts)


class ScriptedEmbedder:
    """Embedding provider answering from a text -> vector table.

    Texts missing from the table go to ``fallback`` when one is given,
    otherwise a ProviderError is raised.
    """

    provider_id = "scripted"

    def __init__(self, table: dict[str, Sequence[float]], fallback: EmbeddingProvider | None = None):
        self.table = {k: list(v) for k, v in table.items()}
        self.fallback = fallback

    def embed(self, texts: Sequence[str], model: str) -> tuple[list[list[float]], int]:
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
            elif self.fallback is not None:
                out.append(self.fallback.embed([t], model)[0][0])
            else:
                raise ProviderError(f"no scripted embedding for {t[:60]!r}")
        return out, sum(count_tokens(t) for t in texts)


class ScriptedChat:
    """Chat provider answering from a script; used for fixtures and tests.

    ``script`` is either a callable ``request -> str`` or a sequence of strings
    consumed in order.
    """

    provider_id = "scripted"

    def __init__(self, script: Callable[[ChatRequest], str] | Iterable[str]):
        self._lock = threading.Lock()
        if callable(script):
            self._fn = script
            self._queue = None
        else:
            self._fn = None
            self._queue = list(script)
        self.requests: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> tuple[str, tuple[int, int]]:
        with self._lock:
            self.requests.append(request)
            if self._fn is None:
                if not self._queue:
                    raise ProviderError("scripted chat ran out of responses")
                text = self._queue.pop(0)
        if self._fn is not None:
            text = self._fn(request)
        prompt_tokens = sum(count_tokens(c) for _, c in request.messages)
        return text, (prompt_tokens, count_tokens(text))


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


@dataclass
class _TagUsage:
    calls: int = 0
    replay_hits: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class GatewayConfig:
    mode: str = "replay"
    chat_model: str = "gpt-4o"
    embedding_model: str = "text-embedding-3-small"
    cache_path: str | None = None
    max_concurrency: int = 4
    temperature: float = 0.0
    max_tokens: int = 1024
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    embedding_provider: str = "openai"  # or "hashing"
    hashing_dimension: int = 512
    extra: dict[str, Any] = field(default_factory=dict)


class LLMGateway:
    def __init__(
        self,
        mode: str = "replay",
        *,
        cache: ReplayCache | None = None,
        chat_provider: ChatProvider | None = None,
        embedding_provider: EmbeddingProvider | None = None,
        chat_model: str = "gpt-4o",
        embedding_model: str = "text-embedding-3-small",
        max_concurrency: int = 4,
        temperature: float = 0.0,
        max_tokens: int = 1024,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode in ("record", "replay") and cache is None:
            cache = ReplayCache()
        self.mode = mode
        self.cache = cache
        self.chat_provider = chat_provider
        self.embedding_provider = embedding_provider
        self.chat_model = chat_model
        self.embedding_model = embedding_model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._slots = threading.BoundedSemaphore(max(1, max_concurrency))
        self._usage: dict[str, _TagUsage] = defaultdict(_TagUsage)
        self._usage_lock = threading.Lock()
        self._embed_memo: dict[str, EmbeddingVector] = {}

    @classmethod
    def from_config(cls, cfg: GatewayConfig, chat_provider: ChatProvider | None = None) -> LLMGateway:
        cache = ReplayCache(cfg.cache_path) if cfg.cache_path else None
        embedder: EmbeddingProvider | None = None
        if cfg.mode != "replay":
            http = None
            if chat_provider is None or cfg.embedding_provider == "openai":
                http = OpenAICompatibleProvider(cfg.base_url, os.environ.get(cfg.api_key_env, ""))
            chat_provider = chat_provider or http
            embedder = HashingEmbedder(cfg.hashing_dimension) if cfg.embedding_provider == "hashing" else http
        return cls(
            cfg.mode,
            cache=cache,
            chat_provider=chat_provider,
            embedding_provider=embedder,
            chat_model=cfg.chat_model,
            embedding_model=cfg.embedding_model,
            max_concurrency=cfg.max_concurrency,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
        )

    def with_model(self, chat_model: str) -> LLMGateway:
        """A view on this gateway that sends chat requests to ``chat_model``.

        Cache, providers, embedding memo and usage accounting are shared.
        """
        view = copy.copy(self)
        view.chat_model = chat_model
        return view

    # -- requests ---------------------------------------------------------

    def request(self, messages: Sequence[tuple[str, str]], tag: str, model: str | None = None) -> ChatRequest:
        """Build a request with the gateway's default model and sampling settings."""
        return ChatRequest(
            model_name=model or self.chat_model,
            messages=tuple(messages),
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            request_tag=tag,
        )

    def complete(self, messages: Sequence[tuple[str, str]], tag: str, model: str | None = None) -> str:
        return self.chat(self.request(messages, tag, model)).text

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        if self.mode in ("record", "replay"):
            entry = self.cache.get(key)
            if entry is not None:
                resp = entry["response"]
                usage = tuple(resp.get("usage", (0, 0)))
                self._account(request.request_tag, usage, replay=True)
                return ChatResponse(resp["text"], usage, resp.get("provider_id", ""), from_replay=True)
            if self.mode == "replay":
                raise CacheMiss(key, request.request_tag)
        if self.chat_provider is None:
            raise ProviderError("no chat provider configured for live calls")
        with self._slots:
            text, usage = self.chat_provider.chat(request)
        pid = getattr(self.chat_provider, "provider_id", "")
        if self.mode == "record":
            self.cache.put(key, request.to_json(), {"text": text, "usage": list(usage), "provider_id": pid})
        self._account(request.request_tag, usage, replay=False)
        return ChatResponse(text, tuple(usage), pid, from_replay=False)

    def embed(self, texts: Sequence[str], tag: str = "embed") -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        out: list[EmbeddingVector | None] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, text in enumerate(texts):
            key = embed_cache_key(self.embedding_model, text)
            if key in self._embed_memo:
                out[i] = self._embed_memo[key]
                continue
            entry = self.cache.get(key) if self.mode in ("record", "replay") else None
            if entry is not None:
                vec = EmbeddingVector(normalize(entry["response"]["embedding"]))
                self._embed_memo[key] = vec
                self._account(tag, (int(entry["response"].get("tokens", 0)), 0), replay=True)
                out[i] = vec
            elif self.mode == "replay":
                raise CacheMiss(key, tag)
            else:
                missing.setdefault(text, []).append(i)
        if missing:
            if self.embedding_provider is None:
                raise ProviderError("no embedding provider configured for live calls")
            batch = list(missing)
            with self._slots:
                vectors, tokens = self.embedding_provider.embed(batch, self.embedding_model)
            self._account(tag, (tokens, 0), replay=False)
            dims = {len(v) for v in vectors}
            if len(dims) != 1:
                raise ProviderError(f"provider returned mixed embedding dimensions {sorted(dims)}")
            for text, raw in zip(batch, vectors):
                key = embed_cache_key(self.embedding_model, text)
                vec = EmbeddingVector(normalize(raw))
                if self.mode == "record":
                    self.cache.put(
                        key,
                        {"kind": "embed", "model": self.embedding_model, "text": text},
                        {"embedding": list(raw), "tokens": count_tokens(text)},
                    )
                self._embed_memo[key] = vec
                for i in missing[text]:
                    out[i] = vec
        return out  # type: ignore[return-value]

    # -- accounting -------------------------------------------------------

    def _account(self, tag: str, usage: Sequence[int], *, replay: bool) -> None:
        with self._usage_lock:
            u = self._usage[tag or "untagged"]
            u.calls += 1
            if replay:
                u.replay_hits += 1
            else:
                u.prompt_tokens += int(usage[0])
                u.completion_tokens += int(usage[1])

    def cost_report(self) -> dict[str, Any]:
        """Live token usage per request tag. Replay hits are counted but cost nothing."""
        with self._usage_lock:
            by_tag = {
                tag: {
                    "calls": u.calls,
                    "replay_hits": u.replay_hits,
                    "prompt_tokens": u.prompt_tokens,
                    "completion_tokens": u.completion_tokens,
                    "total_tokens": u.total_tokens,
                }
                for tag, u in sorted(self._usage.items())
            }
        total = {
            k: sum(row[k] for row in by_tag.values())
            for k in ("calls", "replay_hits", "prompt_tokens", "completion_tokens", "total_tokens")
        }
        return {"by_tag": by_tag, "total": total}
