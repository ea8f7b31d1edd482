import json
import os
import socket
import subprocess
import time
import urllib.error
import urllib.request

import jsonschema
import pytest

import qcfuse

CLI = os.environ.get("QCFUSE_CLI")
SCHEMA_PATH = os.environ.get("QCFUSE_SCHEMA")

pytestmark = pytest.mark.skipif(not CLI or not SCHEMA_PATH, reason="needs QCFUSE_CLI and QCFUSE_SCHEMA")


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def schema():
    with open(SCHEMA_PATH) as f:
        doc = json.load(f)
    jsonschema.Draft202012Validator.check_schema(doc)
    return doc


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    port = free_port()
    proc = subprocess.Popen(
        [CLI, "serve", "--store", str(tmp_path_factory.mktemp("store")), "--port", str(port), "--replay-ms", "1"],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    base = f"http://127.0.0.1:{port}"
    for _ in range(100):
        try:
            urllib.request.urlopen(base + "/api/metrics", timeout=1)
            break
        except OSError:
            time.sleep(0.05)
    else:
        proc.kill()
        pytest.fail("server did not start")
    yield base
    proc.terminate()
    proc.wait(timeout=10)


def call(base, method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(base + path, data=data, method=method)
    try:
        with urllib.request.urlopen(req, timeout=30) as r:
            return r.status, r.read().decode(), r.headers.get("Content-Type")
    except urllib.error.HTTPError as e:
        return e.code, e.read().decode(), e.headers.get("Content-Type")


def check(schema, endpoint, payload):
    ref = schema["x-endpoints"][endpoint]
    jsonschema.validate(payload, {"$ref": ref, "$defs": schema["$defs"]},
                        cls=jsonschema.Draft202012Validator)


def test_every_endpoint_validates(server, schema):
    status, body, ctype = call(server, "GET", "/api/metrics")
    assert status == 200 and ctype.startswith("application/json")
    fresh = json.loads(body)
    check(schema, "GET /api/metrics", fresh)
    assert all(fresh[k] == 0 for k in ("cache_hits", "cache_misses", "layers_fetched", "bytes_fetched",
                                        "runs_served"))

    status, body, _ = call(server, "GET", "/api/chunks")
    assert status == 200 and json.loads(body) == []
    check(schema, "GET /api/chunks", [])

    text = "the harbor key is amber and the gate is shut. " * 3
    status, body, _ = call(server, "POST", "/api/chunks", {"name": "harbor", "text": text})
    assert status == 201
    upload = json.loads(body)
    check(schema, "POST /api/chunks", upload)
    tokens = qcfuse.tokenize(text)
    expected_ids = [qcfuse.chunk_hash(tokens[i:i + 64]) for i in range(0, len(tokens), 64)]
    assert [c["chunk_id"] for c in upload["chunks"]] == expected_ids
    assert all(c["source_name"] == "harbor" and not c["cache_hit"] for c in upload["chunks"])

    status, body, _ = call(server, "POST", "/api/chunks", {"name": "harbor", "text": text})
    assert all(c["cache_hit"] for c in json.loads(body)["chunks"])

    status, body, _ = call(server, "GET", "/api/chunks")
    listing = json.loads(body)
    check(schema, "GET /api/chunks", listing)
    assert len(listing) == len(expected_ids)

    status, body, _ = call(server, "POST", "/api/query",
                           {"query": "harbor key", "policy": "QCFuse", "ratio": 0.3, "compare_full": True})
    assert status == 200
    accepted = json.loads(body)
    check(schema, "POST /api/query", accepted)

    status, body, _ = call(server, "GET", f"/api/runs/{accepted['run_id']}")
    assert status == 200
    record = json.loads(body)
    check(schema, "GET /api/runs/{id}", record)
    result = record["result"]
    assert len(record["tokens"]) == result["n_ctx"]
    assert record["comparison"] is not None

    # One event per layer, stamped with the schedule's compute_end.
    assert len(record["events"]) == 4
    ends = [layer["compute_end"] for layer in result["schedule"]["layers"]]
    assert [e["timestamp"] for e in record["events"]] == ends
    assert ends == sorted(ends)
    selected = set(result["selection"]["indices"])
    assert all(set(e["updated"]) <= selected for e in record["events"])

    status, body, ctype = call(server, "GET", f"/api/runs/{accepted['run_id']}/events")
    assert status == 200 and ctype.startswith("application/x-ndjson")
    streamed = [json.loads(line) for line in body.splitlines() if line]
    assert streamed == record["events"]
    for event in streamed:
        check(schema, "GET /api/runs/{id}/events", event)

    status, body, ctype = call(server, "GET", f"/api/runs/{accepted['run_id']}/events?format=sse&replay_ms=1")
    assert ctype.startswith("text/event-stream")
    data = [json.loads(line[6:]) for line in body.splitlines() if line.startswith("data: ")]
    assert data[:-1] == record["events"] and data[-1] == {}

    status, body, _ = call(server, "GET", "/api/metrics")
    after = json.loads(body)
    check(schema, "GET /api/metrics", after)
    assert after["runs_served"] == 1
    assert after["cache_hits"] >= fresh["cache_hits"]


@pytest.mark.parametrize(
    "method,path,body,status",
    [
        ("POST", "/api/chunks", {"name": "x", "text": ""}, 400),
        ("POST", "/api/query", {"query": "q", "policy": "Nope", "ratio": 0.2}, 400),
        ("POST", "/api/query", {"query": "q", "policy": "QCFuse", "ratio": 1.5}, 400),
        ("POST", "/api/query", {"query": "q", "policy": "FullReuse", "ratio": 0.2}, 400),
        ("POST", "/api/query", {"query": "q", "policy": "QCFuse", "ratio": 0.2, "chunk_ids": ["f" * 64]}, 404),
        ("GET", "/api/runs/999999", None, 404),
        ("GET", "/api/runs/999999/events", None, 404),
    ],
)
def test_errors_validate(server, schema, method, path, body, status):
    got, text, _ = call(server, method, path, body)
    assert got == status
    check(schema, "error", json.loads(text))
