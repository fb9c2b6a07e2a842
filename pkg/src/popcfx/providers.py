"""Text-generation and embedding backends: a remote HTTP client and deterministic stubs.

The remote side speaks the common /v1/chat/completions and /v1/embeddings JSON
shapes. The stubs are pure functions pinned by golden tests so every filtering
experiment can run offline and bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .data import ItemMeta
from .errors import ProviderError

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
RETRYABLE_STATUS = {429} | set(range(500, 600))


@dataclass
class ProviderConfig:
    kind: str = "stub"  # "remote" | "stub"
    endpoint: str = ""
    model_name: str = ""
    temperature: float = 0.0
    timeout_s: float = 30.0
    max_retries: int = 3
    api_key_env: str = ""  # name of the env var holding the key; never stored
    embed_dim: int = 1024
    backoff_base_s: float = 1.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("remote", "stub"):
            raise ProviderError(f"unknown provider kind {self.kind!r}")
        if self.temperature < 0:
            raise ProviderError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ProviderError("max_retries must be >= 0")

    @property
    def provider_id(self) -> str:
        if self.kind == "stub":
            return f"stub:{self.embed_dim}"
        return f"remote:{self.model_name}"

    def _api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) if self.api_key_env else None


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def stub_embed(text: str, dim: int = 1024) -> np.ndarray:
    """Hashed bag-of-tokens embedding: L2-normalized, deterministic.

    Each lowercased whitespace token hashes to a bucket (hash mod dim) with a
    sign taken from bit 63 of its hash.
    """
    tokens = text.lower().split()
    if not tokens:
        raise ProviderError("cannot embed empty text")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        h = fnv1a64(tok.encode("utf-8"))
        sign = -1.0 if (h >> 63) & 1 else 1.0
        vec[h % dim] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ProviderError("stub embedding cancelled to the zero vector")
    return vec / norm


def stub_profile(items: Sequence[ItemMeta]) -> str:
    """Canonical stand-in for an LLM-written preference profile.

    Lists the category histogram ("name:count", most frequent first, name
    tie-break) and the ten most frequent description tokens in the same order.
    """
    if not items:
        raise ProviderError("cannot build a profile from zero items")
    cat_counts = Counter(c for m in items for c in m.categories)
    tok_counts = Counter(t for m in items for t in m.description.lower().split())
    lines = ["CATEGORIES:"]
    lines += [f"{name}:{count}" for name, count in
              sorted(cat_counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    lines.append("TOKENS:")
    ranked_tokens = sorted(tok_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
    lines += [name for name, _ in ranked_tokens]
    return "\n".join(lines)


def _post_with_retries(config: ProviderConfig, url: str, payload: dict) -> dict:
    headers = {"Content-Type": "application/json"}
    api_key = config._api_key()
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last_err: str = "no attempt made"
    last_status: int | None = None
    for attempt in range(config.max_retries + 1):
        if attempt:
            delay = config.backoff_base_s * (2 ** (attempt - 1))
            time.sleep(delay + random.uniform(0, 0.1 * delay))
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=config.timeout_s)
        except requests.RequestException as exc:
            last_err, last_status = f"transport error: {exc}", None
            continue
        if resp.status_code in RETRYABLE_STATUS:
            last_err, last_status = f"HTTP {resp.status_code}", resp.status_code
            continue
        if resp.status_code != 200:
            raise ProviderError(f"{url} returned HTTP {resp.status_code}", status=resp.status_code)
        try:
            return resp.json()
        except ValueError as exc:
            raise ProviderError(f"{url} returned malformed JSON: {exc}") from exc
    raise ProviderError(f"{url} failed after {config.max_retries + 1} attempts ({last_err})",
                        status=last_status)


def chat_complete(config: ProviderConfig, system_text: str, user_text: str) -> str:
    """One chat completion round-trip against a remote endpoint."""
    if config.kind != "remote":
        raise ProviderError("chat_complete requires a remote provider")
    messages = []
    if system_text:
        messages.append({"role": "system", "content": system_text})
    messages.append({"role": "user", "content": user_text})
    body = {"model": config.model_name, "messages": messages, "temperature": config.temperature}
    data = _post_with_retries(config, config.endpoint.rstrip("/") + "/v1/chat/completions", body)
    try:
        text = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError(f"chat response missing choices[0].message.content: {data}") from exc
    if not text:
        raise ProviderError("chat completion returned empty text")
    return text


def embed_text(config: ProviderConfig, text: str) -> np.ndarray:
    """Embed text, L2-normalized. Remote hits /v1/embeddings; stub hashes tokens."""
    if not text:
        raise ProviderError("cannot embed empty text")
    if config.kind == "stub":
        return stub_embed(text, config.embed_dim)
    body = {"model": config.model_name, "input": text}
    data = _post_with_retries(config, config.endpoint.rstrip("/") + "/v1/embeddings", body)
    try:
        raw = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError(f"embedding response missing data[0].embedding: {data}") from exc
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise ProviderError("provider returned a zero embedding")
    return raw / norm


class ResponseCache:
    """Content-addressed on-disk cache with atomic write-then-rename."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(provider_id: str, kind: str, payload: str) -> str:
        blob = json.dumps({"provider": provider_id, "kind": kind, "payload": payload},
                          sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> dict | None:
        path = self.dir / f"{key}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, key: str, record: dict) -> None:
        path = self.dir / f"{key}.json"
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)


def _parse_item_line(line: str) -> ItemMeta:
    """Recover (title, categories, description) from a rendered prompt line."""
    parts = line.split(" - ", 2)
    title = parts[0].strip()
    categories = tuple(c.strip() for c in parts[1].split(",")) if len(parts) > 1 else ()
    description = parts[2].strip() if len(parts) > 2 else ""
    return ItemMeta(item_id=title, title=title, categories=categories, description=description)


class ProviderHandle:
    """Shared, cache-backed access to one chat + embedding backend.

    Counts real requests vs cache hits so run manifests can report provider
    usage, and bounds remote concurrency with a semaphore.
    """

    def __init__(self, config: ProviderConfig, cache: ResponseCache | None = None):
        self.config = config
        self.cache = cache
        self.requests_made = 0
        self.cache_hits = 0
        self._lock = threading.Lock()
        self._gate = threading.Semaphore(max(1, config.max_in_flight))

    @property
    def provider_id(self) -> str:
        return self.config.provider_id

    def _count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.cache_hits += 1
            else:
                self.requests_made += 1

    def profile_text(self, prompt) -> str:
        """Produce the textual profile for a rendered prompt (cached)."""
        text = prompt.text()
        key = ResponseCache.key(self.provider_id, "chat", text) if self.cache else None
        if key:
            cached = self.cache.get(key)
            if cached is not None:
                self._count(hit=True)
                return cached["response"]
        if self.config.kind == "stub":
            items = [_parse_item_line(line) for line in prompt.item_lines]
            response = stub_profile(items)
        else:
            with self._gate:
                response = chat_complete(self.config, "", text)
        self._count(hit=False)
        if key:
            self.cache.put(key, {"kind": "chat", "provider_id": self.provider_id,
                                 "response": response})
        return response

    def embed(self, text: str) -> np.ndarray:
        """Embed text (cached); always unit norm."""
        key = ResponseCache.key(self.provider_id, "embed", text) if self.cache else None
        if key:
            cached = self.cache.get(key)
            if cached is not None:
                self._count(hit=True)
                return np.asarray(cached["response"], dtype=np.float64)
        if self.config.kind == "stub":
            vec = stub_embed(text, self.config.embed_dim)
        else:
            with self._gate:
                vec = embed_text(self.config, text)
        self._count(hit=False)
        if key:
            self.cache.put(key, {"kind": "embed", "provider_id": self.provider_id,
                                 "response": [float(x) for x in vec]})
        return vec
