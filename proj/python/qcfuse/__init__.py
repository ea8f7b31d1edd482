"""Query-centric KV cache fusion on a deterministic toy decoder."""

import json

from ._qcfuse import (
    FingerprintMismatch,
    FormatError,
    NotFound,
    _Store,
    chunk_hash,
    detokenize,
    policies,
    tokenize,
)
from ._qcfuse import schedule as _schedule

__all__ = [
    "FingerprintMismatch",
    "FormatError",
    "NotFound",
    "Store",
    "chunk_hash",
    "detokenize",
    "policies",
    "schedule",
    "tokenize",
]


def schedule(fetch, compute, pre_phase=0.0, pipelined=True):
    """Per-layer fetch/compute timeline on the virtual clock."""
    return json.loads(_schedule(list(fetch), list(compute), pre_phase, pipelined))


class Store:
    """Chunk KV store; an empty `path` keeps everything in memory.

    `config` is text in the `key = value` settings format.
    """

    def __init__(self, path="", config=""):
        self._store = _Store(str(path), config)

    @property
    def fingerprint(self):
        return self._store.fingerprint

    @property
    def config(self):
        return self._store.config

    def precompute(self, text, name=""):
        return json.loads(self._store.precompute(text, name))

    def query(self, query, policy="QCFuse", ratio=0.2, top_k=4, with_oracle=False):
        return json.loads(self._store.query(query, policy, ratio, top_k, with_oracle))

    def run(self, chunk_ids, query, policy="QCFuse", ratio=0.2, with_oracle=False):
        return json.loads(self._store.run(list(chunk_ids), query, policy, ratio, with_oracle))

    def bench_suite(self, seed, n_cases, policies=("QCFuse",), ratios=(0.2,), timestamp=0):
        return json.loads(self._store.bench_suite(seed, n_cases, list(policies), list(ratios), timestamp))

    def chunk_ids(self):
        return self._store.chunk_ids()

    def counters(self):
        return json.loads(self._store.counters())

    def store_bytes(self):
        return self._store.store_bytes()
