"""Per-purpose random streams derived from one master seed.

Every stream is ``numpy.random.SeedSequence(master_seed, spawn_key=(purpose, *index))``
so that streams never overlap and adding a consumer does not shift the others:

====================  =========  ==========================
purpose               id         index
====================  =========  ==========================
client batch draws    0          (client id,)
client sampling       1          (round,)
synthetic data        2          ()
partitioning          3          ()
fuzz / verification   4          (suite-specific,)
====================  =========  ==========================
"""

import numpy as np

CLIENT = 0
SAMPLING = 1
SYNTH = 2
PARTITION = 3
VERIFY = 4


def seed_sequence(master_seed, purpose, *index):
    return np.random.SeedSequence(int(master_seed), spawn_key=(purpose, *map(int, index)))


def stream(master_seed, purpose, *index):
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, purpose, *index)))


def derive_seed(master_seed, purpose, *index):
    """A 63-bit integer seed for storing alongside a shard."""
    return int(seed_sequence(master_seed, purpose, *index).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
