"""Seeded random streams.

All randomness flows from one base seed. Each consumer asks for a named stream,
optionally keyed further (for example by resample index), and gets an independent
PCG64 generator derived through numpy's SeedSequence spawn keys. The same
(seed, stream, keys) always produces the same sequence on every platform.
"""

import numpy as np

STREAMS = {
    "init": 0,
    "batches": 1,
    "bootstrap": 2,
    "pairing": 3,
    "probe": 4,
}


def named_rng(seed, stream, *keys):
    """Returns a PCG64 generator for the named sub-stream of seed."""
    if stream not in STREAMS:
        raise KeyError(f"Unknown random stream '{stream}', expected one of {sorted(STREAMS)}")
    spawn_key = (STREAMS[stream], *(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))
