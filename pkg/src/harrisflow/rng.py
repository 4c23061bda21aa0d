"""Counter-based random streams usable inside numba kernels.

Every replica owns a 64-bit key.  Draw number ``k`` of a stream is
``mix64(key ^ mix64(k))`` where ``mix64`` is the SplitMix64 finaliser, so a
replica's numbers depend only on ``(master_seed, replica_index, k)`` and
never on which thread ran it.

Keys are derived as ``mix64(mix64(master_seed) + (index + 1) * GOLDEN)``
with all arithmetic modulo 2**64.  Indices must lie in ``[0, 2**64)``;
out-of-range values are rejected rather than wrapped.
"""

import math

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = 1.0 / 9007199254740992.0
_U64_MAX = 2**64 - 1


@nb.njit(cache=True, error_model="numpy", inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, error_model="numpy", inline="always")
def uniform(key, state):
    """Next uniform in (0, 1); ``state[0]`` is the draw counter."""
    c = state[0]
    state[0] = c + np.uint64(1)
    z = mix64(key ^ mix64(c * GOLDEN))
    return (float(z >> np.uint64(11)) + 0.5) * _TWO53


@nb.njit(cache=True, error_model="numpy", inline="always")
def normal(key, state, cache):
    """Standard normal by Box-Muller; ``cache`` holds [has_spare, spare]."""
    if cache[0] > 0.5:
        cache[0] = 0.0
        return cache[1]
    u1 = uniform(key, state)
    u2 = uniform(key, state)
    r = math.sqrt(-2.0 * math.log(u1))
    cache[0] = 1.0
    cache[1] = r * math.sin(2.0 * math.pi * u2)
    return r * math.cos(2.0 * math.pi * u2)


@nb.njit(cache=True, error_model="numpy")
def _key(master, index):
    return mix64(mix64(master) + (index + np.uint64(1)) * GOLDEN)


def _as_u64(value, name):
    v = int(value)
    if v < 0 or v > _U64_MAX:
        raise ValueError(f"{name} must lie in [0, 2**64), got {value}")
    return np.uint64(v)


def seed_stream(master_seed, replica_index):
    """Key of the stream for one replica (a 64-bit unsigned integer)."""
    # keep the uint64 type: a Python int would enter kernels as int64
    return np.uint64(_key(_as_u64(master_seed, "master_seed"), _as_u64(replica_index, "replica_index")))


def replica_keys(master_seed, n, offset=0):
    """Keys for replicas ``offset .. offset+n-1`` as a uint64 array."""
    m = _as_u64(master_seed, "master_seed")
    _as_u64(offset + max(n - 1, 0), "replica_index")
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    return _keys_vec(m, idx)


@nb.njit(cache=True, error_model="numpy")
def _keys_vec(master, idx):
    out = np.empty(idx.size, dtype=np.uint64)
    for i in range(idx.size):
        out[i] = _key(master, idx[i])
    return out


@nb.njit(cache=True, error_model="numpy")
def _draw(key, n, kind):
    state = np.zeros(1, dtype=np.uint64)
    cache = np.zeros(2)
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, state) if kind == 0 else normal(key, state, cache)
    return out


class Stream:
    """Python-side view of one counter-based stream (tests, small draws)."""

    def __init__(self, key):
        self.key = np.uint64(key)

    def uniforms(self, n):
        return _draw(self.key, int(n), 0)

    def normals(self, n):
        return _draw(self.key, int(n), 1)


AUX_COUNTER = np.uint64(1) << np.uint64(63)


@nb.njit(cache=True, error_model="numpy")
def _aux(keys, k):
    out = np.empty((keys.size, k))
    st = np.zeros(1, dtype=np.uint64)
    for r in range(keys.size):
        st[0] = AUX_COUNTER
        for j in range(k):
            out[r, j] = uniform(keys[r], st)
    return out


def aux_uniforms(master_seed, n, k, offset=0):
    """``k`` side uniforms per replica, read from counters 2**63 onward.

    Path kernels start their counters at 0, so these draws never overlap
    the ones that drive a replica's path.
    """
    return _aux(replica_keys(master_seed, n, offset), int(k))
