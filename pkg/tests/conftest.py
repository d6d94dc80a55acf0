"""Shared builders and brute-force oracles for the test suite."""

import numpy as np

from mmgploc import kernels as kn
from mmgploc import rtf_features as rf


def make_artf(rng, num_nodes, dim, pos=None):
    """Random aggregated RTF with ``num_nodes`` nodes of dimension ``dim``."""
    vecs = [rf.RtfVector(values=rng.standard_normal(dim) + 1j * rng.standard_normal(dim),
                         node_index=m + 1,
                         bin_frequencies=np.arange(dim, dtype=float))
            for m in range(num_nodes)]
    return rf.assemble_artf(vecs, true_position=pos)


def make_set(rng, n, num_nodes, dim):
    return [make_artf(rng, num_nodes, dim) for _ in range(n)]


def brute_cross_node(r, l, q, w, pool, hp):
    """Literal sum over the pool of per-node kernel products (1-based q, w)."""
    total = 0.0
    for s in pool:
        total += (kn.gaussian_kernel(r.per_node[q - 1], s.per_node[q - 1], hp.eps[q - 1])
                  * kn.gaussian_kernel(l.per_node[w - 1], s.per_node[w - 1], hp.eps[w - 1]))
    return total


def brute_mmgp(a_set, b_set, pool, hp):
    """Literal (1/M^2) double sum over node pairs; the factorization oracle."""
    m = hp.num_nodes
    out = np.zeros((len(a_set), len(b_set)))
    for i, a in enumerate(a_set):
        for j, b in enumerate(b_set):
            total = 0.0
            for q in range(1, m + 1):
                for w in range(1, m + 1):
                    total += brute_cross_node(a, b, q, w, pool, hp)
            out[i, j] = total / m**2
    return out


def conditional_gaussian_oracle(labeled, test, pool, hp, positions, diag):
    """Posterior mean/variance from the explicit joint covariance.

    Solves the linear systems directly instead of reusing any model state;
    ``diag`` is the total additive diagonal (sigma2 + jitter).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    mean = positions.mean(axis=0)
    joint = brute_mmgp(labeled + [test], labeled + [test], pool, hp)
    n_l = len(labeled)
    s_ll = joint[:n_l, :n_l] + diag * np.eye(n_l)
    s_tl = joint[n_l, :n_l]
    s_tt = joint[n_l, n_l]
    sol = np.linalg.solve(s_ll, s_tl)
    mu = sol @ (positions - mean) + mean
    var = s_tt - s_tl @ np.linalg.solve(s_ll, s_tl)
    return mu, var, s_tt
