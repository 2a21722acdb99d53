import json

import httpx
import numpy as np
import pytest

from embleak.errors import ProtocolError, TransportError
from embleak.remote import HTTPTextClient, fetch_remote_embeddings


def embedding_server(fail_first=0, drop_row=False, status=503):
    calls = {"n": 0, "bodies": []}

    def handler(request):
        calls["n"] += 1
        body = json.loads(request.content)
        calls["bodies"].append(body)
        if calls["n"] <= fail_first:
            return httpx.Response(status)
        rows = [[float(len(t)), float(i)] for i, t in enumerate(body["texts"])]
        if drop_row:
            rows = rows[:-1]
        return httpx.Response(200, json={"embeddings": rows})

    return calls, httpx.Client(transport=httpx.MockTransport(handler))


def test_rows_follow_input_order_across_batches():
    calls, client = embedding_server()
    texts = ["a", "bb", "ccc", "dddd", "eeeee"]
    out = fetch_remote_embeddings("http://x/embed", texts, batch_size=2, client=client, concurrency=3)
    assert out.dtype == np.float64
    assert out[:, 0].tolist() == [1, 2, 3, 4, 5]
    assert sorted(len(b["texts"]) for b in calls["bodies"]) == [1, 2, 2]


def test_row_count_mismatch_is_protocol_error():
    _, client = embedding_server(drop_row=True)
    with pytest.raises(ProtocolError):
        fetch_remote_embeddings("http://x/embed", ["a", "b"], client=client)


def test_transient_failures_are_retried():
    calls, client = embedding_server(fail_first=2)
    out = fetch_remote_embeddings("http://x/embed", ["a"], max_retries=3, backoff=0.0, client=client)
    assert calls["n"] == 3
    assert out.shape == (1, 2)


def test_retries_exhausted():
    calls, client = embedding_server(fail_first=10)
    with pytest.raises(TransportError):
        fetch_remote_embeddings("http://x/embed", ["a"], max_retries=2, backoff=0.0, client=client)
    assert calls["n"] == 3


def test_client_error_not_retried():
    calls, client = embedding_server(fail_first=10, status=400)
    with pytest.raises(ProtocolError):
        fetch_remote_embeddings("http://x/embed", ["a"], backoff=0.0, client=client)
    assert calls["n"] == 1


def test_connection_error_retried():
    n = {"c": 0}

    def handler(request):
        n["c"] += 1
        if n["c"] == 1:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json={"embeddings": [[1.0]]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    assert fetch_remote_embeddings("http://x", ["a"], backoff=0.0, client=client).tolist() == [[1.0]]


def test_api_key_from_environment(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, text="0.5")

    monkeypatch.setenv("EMBLEAK_LLM_API_KEY", "secret")
    client = HTTPTextClient("http://judge", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert client.complete("hi") == "0.5"
    assert seen["auth"] == "Bearer secret"
