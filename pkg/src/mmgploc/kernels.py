"""Per-node Gaussian kernels and the fused multi-node covariance.

Every localization model here rates the similarity of two source events by
comparing their per-node RTF vectors.  The fused covariance couples all
node pairs through products of kernel sums over a training pool; it is
always computed through the S*S^T factorization, which is algebraically
equal to the pairwise double sum but cheaper and positive semidefinite by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Hyperparameters:
    """Kernel widths (one per node), label-noise variance, and jitter.

    ``eps`` lives in squared-feature-distance units, ``sigma2`` in squared
    meters.  ``jitter=None`` lets the model pick a trace-scaled default at
    fit time.
    """

    eps: np.ndarray
    sigma2: float = 0.0
    jitter: float | None = None

    def __post_init__(self):
        self.eps = np.atleast_1d(np.asarray(self.eps, dtype=float))
        if self.eps.ndim != 1 or np.any(self.eps <= 0) or not np.all(np.isfinite(self.eps)):
            raise ValueError("eps must be a vector of positive finite scalars")
        if self.sigma2 < 0 or not np.isfinite(self.sigma2):
            raise ValueError("sigma2 must be finite and >= 0")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be >= 0 when given")

    @property
    def num_nodes(self) -> int:
        return self.eps.size


@dataclass
class GramStack:
    """Per-node kernel matrices over an A-set x B-set, plus their node sum."""

    per_node: np.ndarray  # (M, |A|, |B|)
    summed: np.ndarray    # (|A|, |B|), sum over the node axis

    @property
    def num_nodes(self) -> int:
        return self.per_node.shape[0]

    @property
    def shape(self) -> tuple:
        return self.per_node.shape[1:]


def stack_features(samples) -> np.ndarray:
    """Aggregated RTFs as one (n, M, D) complex array; validates consistency."""
    if isinstance(samples, np.ndarray):
        if samples.ndim != 3:
            raise ValueError("feature array must have shape (n, M, D)")
        return np.ascontiguousarray(samples, dtype=complex)
    if len(samples) == 0:
        raise ValueError("empty sample set")
    mats = [s.stack() for s in samples]
    shape0 = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape0:
            raise ValueError(f"inconsistent feature shapes: {m.shape} vs {shape0}")
    return np.ascontiguousarray(np.stack(mats))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared complex Euclidean distances between row sets."""
    xx = np.einsum("ij,ij->i", x.real, x.real) + np.einsum("ij,ij->i", x.imag, x.imag)
    yy = np.einsum("ij,ij->i", y.real, y.real) + np.einsum("ij,ij->i", y.imag, y.imag)
    cross = (x @ y.conj().T).real
    return np.clip(xx[:, None] + yy[None, :] - 2.0 * cross, 0.0, None)


def _sq_dists_symmetric(x: np.ndarray) -> np.ndarray:
    # using the product's own diagonal as the squared norms zeroes the
    # distance diagonal exactly, keeping the kernel diagonal at 1
    g = (x @ x.conj().T).real
    g = 0.5 * (g + g.T)
    nn = np.diag(g)
    return np.clip(nn[:, None] + nn[None, :] - 2.0 * g, 0.0, None)


def gaussian_kernel(h_i, h_j, eps_m: float) -> float:
    """exp(-||h_i - h_j||^2 / eps_m) for two same-node RTF vectors."""
    if eps_m <= 0:
        raise ValueError("eps_m must be positive")
    if h_i.node_index != h_j.node_index:
        raise ValueError("kernel arguments must come from the same node")
    if h_i.dim != h_j.dim:
        raise ValueError("dimension mismatch")
    delta = h_i.values - h_j.values
    return float(np.exp(-np.sum(delta.real**2 + delta.imag**2) / eps_m))


def gram_stack(a_samples, b_samples, hp: Hyperparameters) -> GramStack:
    """All M per-node Gram matrices between two sample sets and their sum.

    Pass ``b_samples=None`` for the symmetric A=A case; that path has an
    exactly-unit diagonal and exact symmetry.
    """
    a = stack_features(a_samples)
    symmetric = b_samples is None
    b = a if symmetric else stack_features(b_samples)
    if a.shape[1] != b.shape[1] or a.shape[2] != b.shape[2]:
        raise ValueError(f"inconsistent (M, D): {a.shape[1:]} vs {b.shape[1:]}")
    if a.shape[1] != hp.num_nodes:
        raise ValueError(f"features have M={a.shape[1]} nodes, hyperparameters {hp.num_nodes}")
    per_node = np.empty((a.shape[1], a.shape[0], b.shape[0]))
    for m in range(a.shape[1]):
        d2 = _sq_dists_symmetric(a[:, m, :]) if symmetric else _sq_dists(a[:, m, :], b[:, m, :])
        per_node[m] = np.exp(-d2 / hp.eps[m])
    return GramStack(per_node=per_node, summed=per_node.sum(axis=0))


def node_manifold_kernel(r, l, training_set, m: int, hp: Hyperparameters) -> float:
    """Single-node manifold covariance: sum_i k_m(h_r, h_i) k_m(h_l, h_i).

    ``m`` is the 1-based node index; the sum runs over the whole training
    pool (labelled and unlabelled alike).
    """
    return cross_node_kernel(r, l, m, m, training_set, hp)


def cross_node_kernel(r, l, q: int, w: int, training_set, hp: Hyperparameters) -> float:
    """Cross-node covariance term: sum_i k_q(h^q_r, h^q_i) k_w(h^w_l, h^w_i).

    Symmetric under swapping (r, q) with (l, w), not under (q, w) alone.
    """
    pool = stack_features(training_set)
    if pool.shape[0] == 0:
        raise ValueError("empty training set")
    if not (1 <= q <= hp.num_nodes and 1 <= w <= hp.num_nodes):
        raise ValueError("node indices are 1-based")
    kr = np.exp(-_sq_dists(r.stack()[None, q - 1], pool[:, q - 1, :]) / hp.eps[q - 1])[0]
    kl = np.exp(-_sq_dists(l.stack()[None, w - 1], pool[:, w - 1, :]) / hp.eps[w - 1])[0]
    return float(kr @ kl)


def mmgp_covariance(a_samples, b_samples, training_set, hp: Hyperparameters) -> np.ndarray:
    """Fused covariance matrix between two sample sets over a training pool.

    Equals (1/M^2) * sum_i sum_{q,w} k_q(h^q_a, h^q_i) k_w(h^w_b, h^w_i),
    computed as (1/M^2) S_AD S_BD^T with S_XD the node-summed Gram stack.
    Pass ``b_samples=None`` for the symmetric case (PSD by construction).
    """
    pool = stack_features(training_set)
    if pool.shape[0] == 0:
        raise ValueError("empty training set")
    m = hp.num_nodes
    s_ad = gram_stack(a_samples, pool, hp).summed
    if b_samples is None:
        cov = s_ad @ s_ad.T
        return 0.5 * (cov + cov.T) / m**2
    s_bd = gram_stack(b_samples, pool, hp).summed
    return (s_ad @ s_bd.T) / m**2


def median_heuristic(training_set) -> np.ndarray:
    """Per-node median of pairwise squared feature distances.

    A scale-free starting point for the kernel widths when nothing better
    is known.  Degenerate pools (all features identical in a node) fall
    back to 1.0 for that node.
    """
    pool = stack_features(training_set)
    n, num_nodes = pool.shape[0], pool.shape[1]
    if n < 2:
        raise ValueError("median heuristic needs at least two samples")
    iu = np.triu_indices(n, k=1)
    eps = np.empty(num_nodes)
    for m in range(num_nodes):
        med = float(np.median(_sq_dists_symmetric(pool[:, m, :])[iu]))
        eps[m] = med if med > 0 else 1.0
    return eps
