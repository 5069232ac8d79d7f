"""Deterministic RNG substreams.

Every stochastic component of the package draws from a `numpy.random.Generator`
keyed by a master seed plus an integer path (e.g. iteration number, block id,
square index).  Streams are independent Philox counters, so the realized draws
do not depend on evaluation order across blocks or on how work is sharded
among workers.
"""

import numpy as np

# stable block identifiers used to key per-iteration substreams
BLOCK_INIT = 0
BLOCK_BETA = 1
BLOCK_AUX = 2
BLOCK_LAMBDA = 3
BLOCK_LEVELS = 4
BLOCK_PREDICT = 5
BLOCK_SIMULATE = 6


def substream(seed, *path):
    """Return a Generator for the substream identified by ``(seed, *path)``.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    *path : int
        Integer path components (iteration, block id, sub-index, ...).

    Returns
    -------
    numpy.random.Generator
        Philox-backed generator; identical path always yields the same stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
