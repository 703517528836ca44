"""Deterministic, hierarchically keyed random number streams.

Every stochastic routine in the package draws from a counter-based Philox
generator whose 128-bit key is derived by hashing a context tuple (global
seed, purpose label, per-SNP identifier, ...).  Two consequences:

* results are reproducible bit-for-bit from the seed alone, independent of
  thread count or the order in which work units are scheduled;
* per-SNP streams are keyed by ``snp_id``, so permuting the rows of a
  dataset leaves every per-SNP draw unchanged.

Fresh, non-overlapping draws for repeated visits to the same context (EM
iterations, escalation attempts) are obtained by positioning the 256-bit
Philox counter instead of re-hashing, which is cheap.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Counter stride between sub-streams of one key: each sub-stream may consume
# up to 2**128 values before colliding with the next, which is unreachable.
_SUBSTREAM_STRIDE = 1 << 128


def stream_key(*context) -> int:
    """Derive a 128-bit Philox key from an arbitrary context tuple.

    Context elements are rendered with ``repr`` and joined, then hashed with
    SHA-256.  This is stable across processes and platforms (unlike built-in
    ``hash``, which is salted).
    """
    text = "\x1f".join(repr(c) for c in context)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def generator(*context, substream: int = 0) -> np.random.Generator:
    """Create a Generator for ``context``, positioned at ``substream``."""
    bitgen = np.random.Philox(
        key=stream_key(*context), counter=substream * _SUBSTREAM_STRIDE
    )
    return np.random.Generator(bitgen)


class SnpStreams:
    """Per-SNP generator factory with cached keys.

    Hashing is done once per SNP at construction; repeated visits (one per
    EM iteration/attempt) only reposition the Philox counter.
    """

    def __init__(self, seed: int, purpose: str, snp_ids, *context):
        self._keys = [
            stream_key(seed, purpose, *context, snp_id) for snp_id in snp_ids
        ]

    def generator(self, snp_index: int, substream: int = 0) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=self._keys[snp_index], counter=substream * _SUBSTREAM_STRIDE
        )
        return np.random.Generator(bitgen)
