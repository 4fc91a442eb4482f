"""Deterministic named RNG substreams derived from one run seed.

Every random draw in the package flows from a single seed through
labelled substreams, so runs are bit-reproducible and independent
concerns (init, shuffle, synth) never share a stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _entropy(seed, labels):
    parts = [int(seed)]
    for label in labels:
        if isinstance(label, str):
            parts.append(zlib.crc32(label.encode("utf-8")))
        else:
            parts.append(int(label))
    return parts


def substream(seed, *labels):
    """A fresh Generator for (seed, labels); same arguments, same stream."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, labels)))


def derive_seed(seed, *labels):
    """A stable derived integer seed for handing to other components."""
    ss = np.random.SeedSequence(_entropy(seed, labels))
    return int(ss.generate_state(1, np.uint64)[0])
