"""Counter-based normal variates (Philox4x32-10 + Box-Muller).

Every variate is a pure function of ``(seed, stream, path, step, coord)``,
so a batch can be generated in any order, in any chunking, on any number of
threads, and come out bit-identical.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85

# stream ids used across the package; each gets an independent sequence
TRAIN = 0
VALIDATION = 1
EVALUATION = 2
STABILITY = 3


def philox4x32(counter: tuple, key: tuple, rounds: int = 10) -> tuple:
    """Vectorised Philox4x32 block function.

    ``counter`` is four broadcastable uint32-valued arrays, ``key`` two
    integers.  Returns four uint64 arrays holding 32-bit words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK
        c0, c1, c2, c3 = (
            hi1 ^ c1 ^ np.uint64(k0),
            lo1,
            hi0 ^ c3 ^ np.uint64(k1),
            lo0,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _unit(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    # 53-bit uniform in [0, 1)
    a = (hi >> np.uint64(5)).astype(np.float64)
    b = (lo >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b) * (1.0 / 9007199254740992.0)


def normals(seed: int, stream: int, path, step, coord) -> np.ndarray:
    """Standard normals indexed by broadcastable (path, step, coord) arrays."""
    path = np.asarray(path, dtype=np.uint64)
    coord = np.asarray(coord, dtype=np.uint64)
    seed = int(seed)
    if seed < 0 or not 0 <= int(stream) < 1 << 16:
        raise ValueError("seed must be non-negative and stream < 2**16")
    words = philox4x32(
        (
            path & _MASK,
            (path >> np.uint64(32)) | np.uint64(int(stream)) << np.uint64(16),
            np.asarray(step, dtype=np.uint64),
            coord >> np.uint64(1),
        ),
        (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF),
    )
    u1 = 1.0 - _unit(words[0], words[1])  # (0, 1]
    u2 = _unit(words[2], words[3])
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    odd = (coord & np.uint64(1)).astype(bool)
    return np.where(odd, radius * np.sin(angle), radius * np.cos(angle))


def sample_increments(
    seed: int,
    M: int,
    N: int,
    ell: int,
    h: float,
    stream: int = TRAIN,
    path_offset: int = 0,
    chunk: int = 1 << 14,
) -> np.ndarray:
    """Brownian increments of shape (M, N, ell), each ~ Normal(0, h)."""
    if min(M, N, ell) < 1 or h <= 0:
        raise ValueError("need M, N, ell >= 1 and h > 0")
    if not 0 <= stream < 1 << 16:
        raise ValueError("stream id out of range")
    out = np.empty((M, N, ell))
    steps = np.arange(N, dtype=np.uint64)[None, :, None]
    coords = np.arange(ell, dtype=np.uint64)[None, None, :]
    scale = np.sqrt(h)
    for start in range(0, M, chunk):
        stop = min(M, start + chunk)
        paths = np.arange(path_offset + start, path_offset + stop, dtype=np.uint64)[:, None, None]
        out[start:stop] = scale * normals(seed, stream, paths, steps, coords)
    return out
