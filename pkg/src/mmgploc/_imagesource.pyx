# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loop of the mirror-image room response accumulation.

Semantics are shared with ``_imagesource_np``; the acoustic simulator picks
whichever is importable.  Keep the two in sync.
"""

from libc.math cimport llround, sqrt
from libc.stdlib cimport labs

import numpy as np

DEF FOUR_PI = 12.566370614359172


def accumulate_images(double[::1] rir,
                      double lx, double ly, double lz,
                      double sx, double sy, double sz,
                      double px, double py, double pz,
                      double beta, Py_ssize_t n1, Py_ssize_t n2, Py_ssize_t n3,
                      long max_order, double samples_per_meter):
    """Add every image-source tap of one source/mic pair to ``rir`` in place.

    ``(lx, ly, lz)`` are the room dimensions, ``(sx, sy, sz)`` the source,
    ``(px, py, pz)`` the microphone, ``beta`` the uniform wall reflection
    coefficient, ``n1..n3`` the lattice half-extents per axis and
    ``max_order`` the reflection-order cap (negative disables it).
    Returns 0 on success, -1 when an image source coincides with the
    microphone (degenerate geometry).
    """
    cdef Py_ssize_t n = rir.shape[0]
    cdef Py_ssize_t ix, iy, iz
    cdef long qx, qy, qz, order, tap
    cdef long e
    cdef double rmx, rmy, rmz, dx, dy, dz, d

    # beta**e lookup; bpow[0] == 1 also covers the anechoic direct path.
    cdef Py_ssize_t emax = 2 * (n1 + n2 + n3) + 3
    bpow_arr = np.empty(emax + 1, dtype=np.float64)
    cdef double[::1] bpow = bpow_arr
    bpow[0] = 1.0
    for ix in range(1, emax + 1):
        bpow[ix] = bpow[ix - 1] * beta

    for ix in range(-n1, n1 + 1):
        rmx = 2.0 * ix * lx
        for iy in range(-n2, n2 + 1):
            rmy = 2.0 * iy * ly
            for iz in range(-n3, n3 + 1):
                rmz = 2.0 * iz * lz
                for qx in range(2):
                    dx = (1 - 2 * qx) * sx + rmx - px
                    for qy in range(2):
                        dy = (1 - 2 * qy) * sy + rmy - py
                        for qz in range(2):
                            if max_order >= 0:
                                order = (labs(2 * ix - qx) + labs(2 * iy - qy)
                                         + labs(2 * iz - qz))
                                if order > max_order:
                                    continue
                            dz = (1 - 2 * qz) * sz + rmz - pz
                            d = sqrt(dx * dx + dy * dy + dz * dz)
                            if d < 1e-9:
                                return -1
                            tap = llround(d * samples_per_meter)
                            if tap < n:
                                e = (labs(ix - qx) + labs(ix)
                                     + labs(iy - qy) + labs(iy)
                                     + labs(iz - qz) + labs(iz))
                                rir[tap] += bpow[e] / (FOUR_PI * d)
    return 0
