"""Wasserstein distances between equal-weight empirical measures.

With equal masses ``1/N`` on both sides an optimal plan can be taken to be a
permutation, so ``W_p`` reduces to a linear assignment problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .model import as_positions, second_moment

__all__ = ["TransportPlan", "optimal_plan", "wasserstein", "w2_to_dirac", "replicate", "wasserstein_mixed"]


@dataclass(frozen=True)
class TransportPlan:
    """Assignment ``i -> perm[i]`` and its transport cost ``(1/N) sum |x_i - y_perm(i)|^p``."""

    perm: np.ndarray
    cost: float
    p: int


def _cost_matrix(x, y, p):
    c = cdist(x, y, "sqeuclidean")
    return c if p == 2 else np.sqrt(c)


def optimal_plan(p: int, e, f) -> TransportPlan:
    x, y = as_positions(e), as_positions(f)
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if x.shape != y.shape:
        raise ValueError(f"ensembles differ in size: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if x.shape[1] == 1:
        # in one dimension monotone matching is optimal for every convex cost
        ix = np.argsort(x[:, 0], kind="stable")
        iy = np.argsort(y[:, 0], kind="stable")
        perm = np.empty(n, dtype=int)
        perm[ix] = iy
    else:
        rows, cols = linear_sum_assignment(_cost_matrix(x, y, p))
        perm = cols[np.argsort(rows)]
    d = np.linalg.norm(x - y[perm], axis=1)
    return TransportPlan(perm, math.fsum(d**p) / n, p)


def wasserstein(p: int, e, f) -> float:
    """Exact ``W_p`` between two ensembles with equal particle counts."""
    return optimal_plan(p, e, f).cost ** (1.0 / p)


def w2_to_dirac(e, target) -> float:
    """``W_2`` to a point mass, which is the root second moment."""
    return math.sqrt(second_moment(e, target))


def replicate(e, k: int) -> np.ndarray:
    """Split every particle into ``k`` co-located copies (same empirical measure)."""
    return np.repeat(as_positions(e), k, axis=0)


def wasserstein_mixed(p: int, e, f) -> float:
    """``W_p`` between ensembles of different sizes via replication to the lcm."""
    x, y = as_positions(e), as_positions(f)
    L = math.lcm(x.shape[0], y.shape[0])
    return wasserstein(p, replicate(x, L // x.shape[0]), replicate(y, L // y.shape[0]))
