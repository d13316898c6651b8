"""Counter-based per-path random streams.

Every path owns a Philox stream keyed by ``(seed, path index, segment)``, so
results do not depend on block size, thread count or path order, and a
patched path's later segments draw fresh, reproducible noise.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_MASK48 = (1 << 48) - 1
MAX_SEGMENTS = 1 << 16


def stream_key(seed: int, path_index: int, segment: int = 0) -> int:
    if not 0 <= segment < MAX_SEGMENTS:
        raise ValueError(f"segment must lie in [0, {MAX_SEGMENTS}), got {segment}")
    if path_index < 0:
        raise ValueError("path index must be nonnegative")
    return ((int(seed) & _MASK64) << 64) | ((int(path_index) & _MASK48) << 16) | int(segment)


def path_generator(seed: int, path_index: int, segment: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, path_index, segment)))


def path_normals(seed: int, path_indices, n_steps: int, width: int, segment: int = 0) -> np.ndarray:
    """Standard normals of shape ``(len(path_indices), n_steps, width)``, one stream per path."""
    idx = np.asarray(path_indices, dtype=np.int64).ravel()
    out = np.empty((len(idx), n_steps, width))
    for row, p in enumerate(idx):
        path_generator(seed, int(p), segment).standard_normal(out=out[row])
    return out
