"""Counter-based seed derivation.

Each consumer of randomness (a tree, a permutation, a fold) gets its own
64-bit stream seed computed by hashing the master seed with a key path.
Streams never depend on how many siblings exist, so changing a tree count
leaves earlier trees untouched and work can run in any order.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

TAG_TREE = np.uint64(0x5452454553454544)
TAG_BOOT = np.uint64(0x424F4F5453545250)
TAG_NODE = np.uint64(0x4E4F444553545250)
TAG_PERM = np.uint64(0x5045524D53545250)

_MASK = (1 << 64) - 1


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def next_u64(state):
    """Advance a splitmix64 stream held in ``state[0]``."""
    state[0] = state[0] + GOLDEN
    return mix64(state[0])


@njit(cache=True, inline="always")
def rand_below(state, m):
    # 53 random bits mapped to [0, m)
    u = np.float64(next_u64(state) >> _S11) * (1.0 / 9007199254740992.0)
    k = np.int64(u * m)
    if k >= m:
        k = m - 1
    return k


@njit(cache=True)
def tree_seed(ensemble_seed, t):
    """Seed of tree ``t`` inside an ensemble seeded with ``ensemble_seed``."""
    return mix64(np.uint64(ensemble_seed) ^ mix64(np.uint64(t) * GOLDEN + TAG_TREE))


@njit(cache=True)
def perm_stream_seed(base, j, rep):
    return mix64(base ^ TAG_PERM ^ mix64((np.uint64(j) << np.uint64(20)) + np.uint64(rep) + GOLDEN))


def derive_seed(master, *keys):
    """Derive a 64-bit child seed from ``master`` and a path of string/int keys.

    Uses :class:`numpy.random.SeedSequence` so derivation is stable across
    platforms and independent of call order.
    """
    words = []
    for key in keys:
        if isinstance(key, str):
            raw = key.encode("utf-8")
            words.extend((1, len(raw)))
            raw += b"\0" * (-len(raw) % 4)
            words.extend(int.from_bytes(raw[i:i + 4], "little") for i in range(0, len(raw), 4))
        else:
            key = int(key) & _MASK
            words.extend((2, key & 0xFFFFFFFF, key >> 32))
    ss = np.random.SeedSequence(entropy=int(master) & _MASK, spawn_key=tuple(words))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
