"""Deterministic sub-seed derivation.

A single global seed fans out into independent named streams so that
changing how one stage consumes randomness never perturbs another stage.
"""
import hashlib

import numpy as np


def derive_seed(seed, *labels):
    """Return a 63-bit integer seed derived from ``seed`` and ``labels``."""
    key = ":".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels))
