"""Counter-based random streams.

Every stochastic draw in nvlab comes from a Philox generator keyed by
``(seed, role | index)``, so a sweep point or trace window always sees the
same numbers no matter which thread evaluates it or in what order.
"""

import numpy as np

# high bits of the second key word select what the stream is used for
SWEEP_POINT = 1
TRACE_WINDOW = 2
DRIFT_PATH = 3
MONTE_CARLO = 4
TRACKER = 5

_ROLE_SHIFT = 48
_MASK64 = (1 << 64) - 1


def stream(seed, role, index=0):
    """Return an independent ``numpy.random.Generator`` for one work item."""
    seed = int(seed)
    index = int(index)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if index < 0 or index >= (1 << _ROLE_SHIFT):
        raise ValueError(f"stream index out of range: {index}")
    key = np.array([seed, (int(role) << _ROLE_SHIFT) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
