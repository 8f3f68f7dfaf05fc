"""Seeded random streams.

All randomness comes from NumPy's ``Generator`` over the PCG64 bit
generator, seeded from ``SeedSequence([seed, stream_id])``. PCG64 output is
identical on every platform for a given NumPy release. One run seed feeds
three independent named streams so that, for example, changing the epoch
count never changes the split.
"""

import numpy as np

from ..errors import ConfigError

Rng = np.random.Generator

STREAMS = {
    "split": 0,
    "init": 1,
    "shuffle": 2,
}


def make_rng(seed: int, stream: str) -> Rng:
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}; expected one of {sorted(STREAMS)}")
    if int(seed) < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[stream]])))
