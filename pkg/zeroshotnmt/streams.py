"""
Seedable random streams.

Every stochastic operation draws from a named stream derived from one run
seed. Streams use numpy's Philox counter-based bit generator, so a stream is a
pure function of (seed, name) and never depends on how many numbers other
streams consumed.
"""

import zlib

import numpy as np


class RandomStreams:
    """
    Factory of independent, reproducible generators keyed by name.
    """

    seed: int

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def stream(self, name: str, *counters: int) -> np.random.Generator:
        """
        Generator for the stream `name`, optionally specialised by integer
        counters (epoch, step, layer...).
        """

        key = (zlib.crc32(name.encode('utf-8')),) + tuple(int(c) for c in counters)
        sequence = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(sequence))
