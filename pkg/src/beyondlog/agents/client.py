"""Chat-completion clients and the on-disk response cache."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol


class LLMError(RuntimeError):
    pass


@dataclass
class DecodeOptions:
    temperature: float = 0.0
    max_tokens: int = 2048


class LLMClient(Protocol):
    def complete(self, system: str, prompt: str, options: DecodeOptions | None = None) -> str: ...


@dataclass
class AgentBudget:
    max_retries: int = 2
    cache_dir: str | None = None
    timeout: float = 60.0
    max_workers: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")


def prompt_key(template_id: str, prompt: str) -> str:
    return hashlib.sha256(f"{template_id}\x00{prompt}".encode("utf-8")).hexdigest()


class ResponseCache:
    """One file per prompt hash; writes go through a temp file and a rename."""

    def __init__(self, directory: str | Path | None):
        self.dir = Path(directory) if directory else None
        self._mem: dict[str, str] = {}
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def get(self, key: str) -> str | None:
        if key in self._mem:
            return self._mem[key]
        if self.dir:
            p = self.dir / f"{key}.txt"
            if p.exists():
                text = p.read_text(encoding="utf-8")
                self._mem[key] = text
                return text
        return None

    def put(self, key: str, text: str) -> None:
        self._mem[key] = text
        if not self.dir:
            return
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(text)
            os.replace(tmp, self.dir / f"{key}.txt")
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


class HTTPChatClient:
    """Standard chat-completion JSON over HTTP; the bearer token comes from an environment variable."""

    def __init__(self, endpoint: str, model: str, token_env: str = "LLM_API_TOKEN",
                 timeout: float = 60.0, retries: int = 2, backoff: float = 1.0):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _request(self, body: dict) -> urllib.request.Request:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return urllib.request.Request(self.endpoint, data=json.dumps(body).encode("utf-8"),
                                      headers=headers, method="POST")

    def complete(self, system: str, prompt: str, options: DecodeOptions | None = None) -> str:
        options = options or DecodeOptions()
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": prompt}],
            "temperature": options.temperature,
            "max_tokens": options.max_tokens,
        }
        last = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(self._request(body), timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode("utf-8"))
                return data["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, KeyError, IndexError, json.JSONDecodeError) as e:
                last = e
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise LLMError(f"chat completion failed after {self.retries + 1} attempts: {last}")
