"""Vectorized NumPy fallback for the image-source accumulation loop.

Same call signature and semantics as the compiled ``_imagesource`` module;
the acoustic simulator selects whichever is importable.  Images are
processed in exactly the compiled kernel's nesting order (lattice point
outer, mirror flips inner) so both backends produce bit-identical
responses.  Keep the two in sync.
"""

import itertools

import numpy as np

_FOUR_PI = 4.0 * np.pi

# the 8 mirror-flip combinations, last axis fastest to match the compiled
# loop nesting
_FLIPS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
_SIGNS = 1 - 2 * _FLIPS

# lattice points processed per vectorized block, bounds peak memory
_CHUNK = 1 << 16


def accumulate_images(rir, lx, ly, lz, sx, sy, sz, px, py, pz,
                      beta, n1, n2, n3, max_order, samples_per_meter):
    """Add every image-source tap of one source/mic pair to ``rir`` in place.

    Returns 0 on success, -1 when an image source within the reflection
    order cap coincides with the microphone (degenerate geometry).
    """
    n = rir.shape[0]
    dims = np.array([lx, ly, lz])
    src = np.array([sx, sy, sz])
    mic = np.array([px, py, pz])

    emax = 2 * (n1 + n2 + n3) + 3
    bpow = np.empty(emax + 1)
    bpow[0] = 1.0  # covers the anechoic direct path when beta == 0
    np.cumprod(np.full(emax, beta), out=bpow[1:])

    gx, gy, gz = np.meshgrid(np.arange(-n1, n1 + 1), np.arange(-n2, n2 + 1),
                             np.arange(-n3, n3 + 1), indexing="ij")
    lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    for start in range(0, lattice.shape[0], _CHUNK):
        idx = lattice[start:start + _CHUNK]
        rm = 2.0 * idx * dims
        delta = _SIGNS * src + rm[:, None, :] - mic
        d = np.sqrt((delta * delta).sum(axis=2)).ravel()
        if max_order >= 0:
            order = np.abs(2 * idx[:, None, :] - _FLIPS).sum(axis=2).ravel()
            keep = order <= max_order
        else:
            keep = np.ones(d.size, dtype=bool)
        if np.any(d[keep] < 1e-9):
            return -1
        # floor(x + 0.5) matches the compiled kernel's llround for x >= 0
        tap = np.floor(d * samples_per_meter + 0.5).astype(np.int64)
        keep &= tap < n
        if not np.any(keep):
            continue
        e = (np.abs(idx[:, None, :] - _FLIPS)
             + np.abs(idx)[:, None, :]).sum(axis=2).ravel()
        np.add.at(rir, tap[keep], bpow[e[keep]] / (_FOUR_PI * d[keep]))
    return 0
