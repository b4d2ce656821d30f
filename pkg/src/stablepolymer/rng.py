"""Counter-based random streams keyed by (seed, purpose, replica).

Every replica of every experiment draws from its own Philox stream, so results
do not depend on how replicas are distributed over worker processes.
"""

from __future__ import annotations

import numpy as np

# stream purposes; part of the key, never reorder
PATHS = 1
CLOUD = 2
NOISE = 3
BRIDGE = 4
PROP31 = 5
AUX = 9


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
