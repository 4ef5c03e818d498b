"""Reproducible counter-based normal streams keyed by (seed, chain, step).

Draws for step ``n`` come from a Philox generator keyed by
``(seed, tag, chain, n // block)``, so any step's noise can be regenerated
without replaying earlier steps and results do not depend on how chains are
scheduled. Blocks of ``block`` steps are generated at once to keep the
per-step cost low.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError

DEFAULT_BLOCK = 512

# Tags separating independent uses of one seed.
TAG_STEP = 0
TAG_INIT = 1
TAG_SWEEP = 2
TAG_BOOT = 3
TAG_PROBE = 4


def check_seed(seed) -> int:
    if isinstance(seed, bool) or int(seed) != seed or not 0 <= int(seed) < 2 ** 64:
        raise InvalidParameterError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    return int(seed)


def generator(seed: int, *key: int) -> np.random.Generator:
    """A Philox generator for the substream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class NormalStream:
    """Standard normals of a fixed shape, one array per step index."""

    def __init__(self, seed: int, shape, *, chain: int = 0, tag: int = TAG_STEP,
                 block: int = DEFAULT_BLOCK):
        self.seed = check_seed(seed)
        self.shape = tuple(int(s) for s in np.atleast_1d(shape))
        self.chain = int(chain)
        self.tag = int(tag)
        self.block = int(block)
        self._block_index = -1
        self._buffer = None

    def draw(self, step: int) -> np.ndarray:
        b, r = divmod(int(step), self.block)
        if b != self._block_index:
            rng = generator(self.seed, self.tag, self.chain, b)
            self._buffer = rng.standard_normal((self.block,) + self.shape)
            self._block_index = b
        return self._buffer[r]
