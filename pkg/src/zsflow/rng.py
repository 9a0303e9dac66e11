"""Deterministic random streams.

Every random draw in the package flows through a numpy ``Generator`` backed
by the Philox 4x64-10 bit generator, a counter-based generator with fixed,
published round constants. A stream is addressed by ``(seed, stream_index)``,
so independent parts of a run (weight init, shuffling, noise, per-class
generation) each get their own reproducible stream and never interact.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

# Stream indices. Per-class generation uses GENERATE_BASE + class_id so that
# classes can be produced in any order (or in parallel) with identical draws.
DATA = 0
FLOW_INIT = 1
EMBED_INIT = 2
CONTRASTIVE_INIT = 3
CONTRASTIVE_SHUFFLE = 4
FLOW_SHUFFLE = 5
PERTURB = 6
CLASSIFIER_INIT = 7
CLASSIFIER_SHUFFLE = 8
GENERATE_BASE = 1000


def stream(seed: int, index: int) -> np.random.Generator:
    """Return the generator for stream ``index`` of master seed ``seed``."""
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")
    if not isinstance(index, (int, np.integer)) or index < 0:
        raise ConfigurationError(f"stream index must be a non-negative integer, got {index!r}")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
