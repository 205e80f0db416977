"""Random streams and size distributions shared by the workload generators."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one activity.

    Keyed by a stable hash of ``name`` so that enabling or disabling one
    activity never shifts the draws of another.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class SizeDistribution:
    """Normal sizes truncated to mean +/- 3 sd (and kept above ``floor``)."""

    mean: float
    relative_sd: float = 0.1
    floor: float = 1.0

    @property
    def sd(self) -> float:
        return self.mean * self.relative_sd

    @property
    def bounds(self) -> tuple[float, float]:
        return max(self.floor, self.mean - 3 * self.sd), self.mean + 3 * self.sd

    def sample(self, rng: np.random.Generator) -> float:
        if self.relative_sd == 0:
            return float(self.mean)
        lo, hi = self.bounds
        while True:
            x = rng.normal(self.mean, self.sd)
            if lo <= x <= hi:
                return float(x)
