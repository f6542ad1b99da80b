"""Named random streams derived from one master seed.

Every source of randomness in the package pulls from its own PCG64 stream so
that reordering work in one place (say, latent sampling) cannot perturb
another (say, batch shuffling).  Streams are identified by name; the name's
position in STREAMS fixes the spawn key, so stream contents only depend on
the master seed and the name.
"""

import numpy as np

STREAMS = (
    "data",
    "init",
    "latent",
    "patches",
    "dropout",
    "batches",
    "selftrain",
)


def stream(master_seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise ValueError(f"unknown rng stream {name!r}; expected one of {STREAMS}")
    seq = np.random.SeedSequence(master_seed, spawn_key=(STREAMS.index(name),))
    return np.random.Generator(np.random.PCG64(seq))


def streams(master_seed: int) -> dict:
    return {name: stream(master_seed, name) for name in STREAMS}
