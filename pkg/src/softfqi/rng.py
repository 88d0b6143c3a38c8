"""Reproducible random streams.

Every random draw in the package goes through :func:`stream`, which maps a
``(purpose, seed)`` pair to an independent Philox (counter-based) generator.
The purpose is encoded as an integer in the seed sequence's spawn key, so two
purposes never share a stream even for the same seed:

=============  ==
purpose        id
=============  ==
garnet         1
behavior       2
dataset        3
features       4
weight_noise   5
init           6
diagnostics    7
=============  ==
"""

import numpy as np

PURPOSES = {
    "garnet": 1,
    "behavior": 2,
    "dataset": 3,
    "features": 4,
    "weight_noise": 5,
    "init": 6,
    "diagnostics": 7,
}


def stream(purpose: str, seed: int, *sub: int) -> np.random.Generator:
    """Return the generator for ``purpose`` and ``seed``.

    Extra integers in ``sub`` select child streams (e.g. a redraw counter).
    """
    if purpose not in PURPOSES:
        raise KeyError(f"unknown RNG purpose {purpose!r}")
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(PURPOSES[purpose], *map(int, sub)))
    return np.random.Generator(np.random.Philox(ss))
