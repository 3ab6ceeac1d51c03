"""HTTP client for the inference wire protocol.

The protocol is three JSON POST routes (tokenize/detokenize are cheap,
logprobs does the work):

    POST /v1/tokenize    {"text": ...}                       -> {"tokens": [...]}
    POST /v1/detokenize  {"tokens": [...]}                   -> {"text": ...}
    POST /v1/logprobs    {"tokens": [...], "positions": [...],
                          "token_ids": [...]}                -> {"logprobs": [[...]]}

Log-probs are natural-log, full-softmax values; row order follows positions,
column order follows token_ids. Transport failures and 5xx responses are
retried with exponential backoff; 4xx responses are permanent.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import httpx
import numpy as np

from ..errors import PermanentBackendError, ProtocolError, RetryableBackendError

ENV_BACKEND_URL = "ICL_DYNAMICS_BACKEND_URL"


@dataclass
class RemoteConfig:
    base_url: str
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.25
    max_in_flight: int = 4
    token_limit: int | None = None

    @classmethod
    def from_env(cls, **overrides) -> "RemoteConfig":
        # the environment variable overrides any configured URL
        url = os.environ.get(ENV_BACKEND_URL) or overrides.pop("base_url", None)
        overrides.pop("base_url", None)
        if not url:
            raise PermanentBackendError(
                f"no backend URL configured (set {ENV_BACKEND_URL} or pass base_url)"
            )
        return cls(base_url=url, **overrides)


class RemoteBackend:
    """Backend that scores through a protocol server.

    A custom ``httpx.Client`` may be injected (e.g. with an ASGI transport)
    so protocol conformance can be tested without sockets. In-flight
    requests are bounded by a semaphore; individual requests are independent,
    so concurrent use is safe.
    """

    def __init__(self, config: RemoteConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(base_url=config.base_url, timeout=config.timeout)
        self._owns_client = client is None
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)
        self._info: dict | None = None

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def _post(self, route: str, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._semaphore:
                    resp = self._client.post(route, json=payload)
            except httpx.TransportError as exc:
                last_exc = RetryableBackendError(f"transport failure on {route}: {exc}")
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{route}: response is not JSON: {exc}") from exc
                if 400 <= resp.status_code < 500:
                    raise PermanentBackendError(f"{route}: {resp.status_code} {resp.text}")
                last_exc = RetryableBackendError(f"{route}: {resp.status_code} {resp.text}")
            if attempt < self.config.max_retries:
                time.sleep(self.config.backoff * (2**attempt))
        raise last_exc  # type: ignore[misc]

    def _get_info(self) -> dict:
        if self._info is None:
            try:
                resp = self._client.get("/v1/info")
                self._info = resp.json() if resp.status_code == 200 else {}
            except (httpx.TransportError, ValueError):
                self._info = {}
        return self._info

    @property
    def vocab_size(self) -> int:
        return int(self._get_info().get("vocab_size", 0))

    @property
    def token_limit(self) -> int:
        if self.config.token_limit is not None:
            return self.config.token_limit
        return int(self._get_info().get("token_limit", 2048))

    def tokenize(self, text: str) -> list[int]:
        data = self._post("/v1/tokenize", {"text": text})
        if "tokens" not in data or not isinstance(data["tokens"], list):
            raise ProtocolError(f"tokenize: malformed response {data!r}")
        return [int(t) for t in data["tokens"]]

    def detokenize(self, token_ids: Sequence[int]) -> str:
        data = self._post("/v1/detokenize", {"tokens": [int(t) for t in token_ids]})
        if "text" not in data or not isinstance(data["text"], str):
            raise ProtocolError(f"detokenize: malformed response {data!r}")
        return data["text"]

    def logprobs(
        self,
        tokens: Sequence[int],
        positions: Sequence[int],
        token_ids: Sequence[int],
    ) -> np.ndarray:
        payload = {
            "tokens": [int(t) for t in tokens],
            "positions": [int(p) for p in positions],
            "token_ids": [int(t) for t in token_ids],
        }
        data = self._post("/v1/logprobs", payload)
        rows = data.get("logprobs")
        if not isinstance(rows, list) or len(rows) != len(positions):
            raise ProtocolError(
                f"logprobs: expected {len(positions)} rows, got "
                f"{len(rows) if isinstance(rows, list) else type(rows).__name__}"
            )
        out = np.asarray(rows, dtype=float)
        if out.size and out.shape != (len(positions), len(token_ids)):
            raise ProtocolError(f"logprobs: bad shape {out.shape}")
        if out.size and out.max() > 1e-9:
            raise ProtocolError("logprobs: positive log-probability in response")
        return out.reshape(len(positions), len(token_ids))
