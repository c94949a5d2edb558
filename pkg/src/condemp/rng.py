"""Counter-based random streams keyed by ``(seed, stream, replica)``.

Every replica owns an independent Philox stream, so results do not depend
on how replicas are grouped or scheduled across workers.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

# stream tags
PATH = 0
INIT = 1
AUX = 2


def philox_key(seed, *stream):
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream)).generate_state(2, np.uint64)
    return int(state[0]) | (int(state[1]) << 64)


def stream(seed, *tags):
    """A fresh generator for the stream identified by ``tags``."""
    return np.random.Generator(np.random.Philox(key=philox_key(seed, *tags)))


def replica_map(fn, n, workers=1, chunk=64):
    """``[fn(i) for i in range(n)]`` evaluated on a thread pool, in index order."""
    if workers is None or workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n), chunksize=chunk))
