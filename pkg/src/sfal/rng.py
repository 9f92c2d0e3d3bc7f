"""Counter-based random streams keyed by (seed, path, channel).

Every path owns one Philox stream per noise channel.  The stream key is the
SeedSequence hash of the triple, so a path's increments never depend on how
many other paths exist, on block layout, or on thread scheduling.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

# Noise channel ids.  Kept stable: changing them changes every stored result.
CHANNELS = {
    "W1": 1,      # slow noise
    "W2": 2,      # fast noise
    "W21": 3,     # reflected component of the coupling
    "W22": 4,     # synchronous component of the coupling
    "WBAR": 5,    # independent noise of the weak limit equation
    "AUX": 6,     # subsampling, resampling and other bookkeeping draws
}

# Paths are processed in fixed-size blocks so that the floating point work per
# block does not depend on the worker count.
BLOCK_SIZE = 512
STEP_CHUNK = 256


def stream(seed: int, path: int, channel: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path), CHANNELS[channel]))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels) -> int:
    """Deterministic child seed for a labelled sub-experiment."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(s) for s in labels)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def aux_rng(seed: int, *labels) -> np.random.Generator:
    return stream(derive_seed(seed, *labels), 0, "AUX")


class NoiseSource:
    """Standard normal draws for a block of paths on one channel.

    ``take(k)`` returns an array of shape ``(k, n_paths, dim)``; successive
    calls continue each path's sequence, so chunking does not change values.
    """

    def __init__(self, seed: int, paths: Sequence[int], channel: str, dim: int):
        self.dim = dim
        self.gens = [stream(seed, p, channel) for p in paths]
        self._buf = np.empty((0, len(self.gens), dim))
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty((k, len(self.gens), self.dim))
        for j, g in enumerate(self.gens):
            out[:, j, :] = g.standard_normal((k, self.dim))
        return out

    def next(self) -> np.ndarray:
        """One step of normals, buffered in chunks of ``STEP_CHUNK``."""
        if self._pos >= self._buf.shape[0]:
            self._buf = self.take(STEP_CHUNK)
            self._pos = 0
        row = self._buf[self._pos]
        self._pos += 1
        return row


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit argument, else ``SFAL_THREADS``, else 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("SFAL_THREADS")
    if env:
        return max(1, int(env))
    return 1


def path_blocks(n_paths: int, block: int = BLOCK_SIZE) -> list[np.ndarray]:
    return [np.arange(a, min(a + block, n_paths)) for a in range(0, n_paths, block)]


def map_blocks(fn: Callable[[np.ndarray], object], n_paths: int, threads: int | None = None) -> list:
    """Run ``fn`` on each fixed path block; results come back in block order."""
    blocks = path_blocks(n_paths)
    workers = resolve_threads(threads)
    if workers == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))
