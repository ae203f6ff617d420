"""Small shared helpers: seed derivation and canonical JSON hashing."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(*path: int) -> int:
    """Expand a root seed along an integer path (root, run, trace, step, ...).

    Uses numpy's SeedSequence so every (root, path) pair maps to an
    independent stream; adding later runs never perturbs earlier ones.
    """
    return int(np.random.SeedSequence([int(p) for p in path]).generate_state(1)[0])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
