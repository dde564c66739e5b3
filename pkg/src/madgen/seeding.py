"""Deterministic seed derivation.

Every run owns one root seed; all randomness (data shuffling, weight init,
condition dropout, sampling) flows through named substreams derived from it
so ablations stay reproducible when one stage is re-run.
"""

import hashlib

import numpy as np

SUBSTREAMS = ("data", "init", "dropout", "sampling")


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for a named substream of ``root_seed``."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, name))
