"""HTTP clients for the two external services the toolkit can talk to.

Embedding service: ``POST {"texts": [...]}`` -> ``{"embeddings": [[...], ...]}``.
It is only used to fabricate a leaked dataset offline; training and attack
never hold a handle to it.

Text completion service (LLM augmentation and LLM judge): ``POST {"prompt": "..."}``
-> plain-text body.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import numpy as np

from .errors import ProtocolError, TransportError, UsageError

log = logging.getLogger(__name__)

EMBEDDING_KEY_ENV = "EMBLEAK_EMBEDDING_API_KEY"
LLM_KEY_ENV = "EMBLEAK_LLM_API_KEY"

_RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


def _headers(env_var):
    key = os.environ.get(env_var)
    return {"Authorization": f"Bearer {key}"} if key else {}


def post_with_retries(client, url, payload, *, max_retries, backoff, headers=None):
    """POST ``payload`` as JSON, retrying transient failures with exponential backoff.

    Returns the response; raises TransportError once ``max_retries`` retries are spent.
    """
    last = None
    for attempt in range(max_retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last = f"{type(exc).__name__}: {exc}"
            log.warning("POST %s failed (attempt %d): %s", url, attempt + 1, last)
            continue
        if resp.status_code in _RETRYABLE_STATUS:
            last = f"HTTP {resp.status_code}"
            log.warning("POST %s returned %s (attempt %d)", url, resp.status_code, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise ProtocolError(f"POST {url} returned HTTP {resp.status_code}: {resp.text[:200]}")
        return resp
    raise TransportError(f"POST {url} failed after {max_retries + 1} attempts ({last})")


def fetch_remote_embeddings(
    endpoint,
    texts,
    batch_size=32,
    max_retries=3,
    *,
    concurrency=4,
    backoff=0.5,
    timeout=30.0,
    client=None,
):
    """Fetch one embedding row per text, preserving order. Values are stored exactly as returned."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    if max_retries < 0:
        raise UsageError("max_retries must be >= 0")
    texts = list(texts)
    if not texts:
        raise UsageError("no texts to embed")
    batches = [texts[i : i + batch_size] for i in range(0, len(texts), batch_size)]
    headers = _headers(EMBEDDING_KEY_ENV)
    own_client = client is None
    client = client or httpx.Client(timeout=timeout)

    def run(batch):
        resp = post_with_retries(
            client, endpoint, {"texts": batch}, max_retries=max_retries, backoff=backoff, headers=headers
        )
        try:
            rows = resp.json()["embeddings"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc
        if not isinstance(rows, list) or len(rows) != len(batch):
            got = len(rows) if isinstance(rows, list) else type(rows).__name__
            raise ProtocolError(f"sent {len(batch)} texts, received {got} embeddings")
        return rows

    try:
        if concurrency <= 1 or len(batches) == 1:
            results = [run(b) for b in batches]
        else:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                results = list(pool.map(run, batches))
    finally:
        if own_client:
            client.close()

    rows = [row for chunk in results for row in chunk]
    try:
        out = np.asarray(rows, dtype=np.float64)
    except ValueError as exc:
        raise ProtocolError(f"ragged embedding rows: {exc}") from exc
    if out.ndim != 2:
        raise ProtocolError(f"expected a 2-d embedding array, got shape {out.shape}")
    return out


class HTTPTextClient:
    """Completion client for an LLM endpoint speaking the plain prompt protocol."""

    def __init__(self, endpoint, *, max_retries=3, backoff=0.5, timeout=60.0, client=None):
        self.endpoint = endpoint
        self.max_retries = max_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, prompt: str) -> str:
        resp = post_with_retries(
            self._client,
            self.endpoint,
            {"prompt": prompt},
            max_retries=self.max_retries,
            backoff=self.backoff,
            headers=_headers(LLM_KEY_ENV),
        )
        return resp.text

    def close(self):
        self._client.close()
