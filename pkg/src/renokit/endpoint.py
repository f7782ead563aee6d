"""Chat-completion endpoint client with retries, plus the raw-response archive.

The wire format is the common chat-completions POST: {"model", "messages",
"temperature"} against {base_url}/chat/completions with a bearer token taken
from the environment. Transports are pluggable so tests and offline replays
never touch the network.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from .errors import EndpointError, LogprobUnsupported
from .jsonl import read_json, write_json

Message = dict  # {"role": ..., "content": ...}

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    backoff: tuple[float, ...] = (1.0, 2.0, 4.0)
    concurrency_limit: int = 4
    timeout: float = 60.0

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        self.backoff = tuple(float(x) for x in self.backoff)

    @classmethod
    def from_dict(cls, obj: dict) -> "EndpointConfig":
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "EndpointConfig":
        return cls.from_dict(read_json(path))

    def to_json(self, path: str | Path) -> None:
        obj = {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "max_retries": self.max_retries,
            "backoff": list(self.backoff),
            "concurrency_limit": self.concurrency_limit,
            "timeout": self.timeout,
        }
        write_json(path, obj)


@dataclass(frozen=True)
class Completion:
    text: str
    timestamp: str


class Transport(Protocol):
    def complete(self, model: str, messages: Sequence[Message], temperature: float) -> Completion: ...


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


class HttpTransport:
    """Real HTTP transport; retries transport failures, 429 and 5xx only."""

    def __init__(
        self,
        cfg: EndpointConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.session = session or requests.Session()
        self.sleep = sleep

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _delay(self, attempt: int) -> float:
        if not self.cfg.backoff:
            return 0.0
        return self.cfg.backoff[min(attempt, len(self.cfg.backoff) - 1)]

    def complete(self, model: str, messages: Sequence[Message], temperature: float) -> Completion:
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        payload = {"model": model, "messages": list(messages), "temperature": temperature}
        last_error = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            try:
                resp = self.session.post(url, json=payload, headers=self._headers(), timeout=self.cfg.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = f"transport: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        text = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise EndpointError(f"malformed completion payload: {exc}") from None
                    if not isinstance(text, str):
                        raise EndpointError("completion content is not a string")
                    return Completion(text=text, timestamp=utc_now_iso())
                if resp.status_code not in _RETRYABLE_STATUS:
                    raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                last_error = f"HTTP {resp.status_code}"
            if attempt < self.cfg.max_retries:
                self.sleep(self._delay(attempt))
        raise EndpointError(f"gave up after {self.cfg.max_retries} retries ({last_error})")


class OfflineTransport:
    """Refuses all network work; use together with a fully populated archive."""

    def complete(self, model: str, messages: Sequence[Message], temperature: float) -> Completion:
        raise EndpointError("network disabled")


class ChatClient:
    def __init__(self, cfg: EndpointConfig, transport: Transport | None = None):
        self.cfg = cfg
        self.transport = transport or HttpTransport(cfg)

    def complete(self, messages: Sequence[Message]) -> Completion:
        return self.transport.complete(self.cfg.model_name, messages, self.cfg.temperature)

    def score_options(self, messages: Sequence[Message], options: Sequence[str]) -> dict[str, float]:
        scorer = getattr(self.transport, "score_options", None)
        if scorer is None:
            raise LogprobUnsupported(f"transport {type(self.transport).__name__} cannot score options")
        return scorer(self.cfg.model_name, messages, options)


def request_id(model: str, messages: Sequence[Message], temperature: float) -> str:
    """Deterministic id of a logical request; identical requests share one."""
    canonical = json.dumps(
        {"model": model, "messages": list(messages), "temperature": temperature},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.md5(canonical.encode("utf-8")).hexdigest()


class ResponseArchive:
    """One JSON file per request id; the replayable source of truth for runs."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, rid: str) -> Path:
        return self.root / f"{rid}.json"

    def has(self, rid: str) -> bool:
        return self._path(rid).exists()

    def load(self, rid: str) -> dict:
        return read_json(self._path(rid))

    def store(self, rid: str, entry: dict) -> None:
        write_json(self._path(rid), entry)

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))

    def __len__(self) -> int:
        return len(self.ids())
