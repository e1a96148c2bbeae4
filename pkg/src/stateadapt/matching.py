"""Source selection: pick the prior environment closest to a request in MMD.

Candidates are grouped offline with k-medoids over their pairwise MMD, so a
request costs about ``K + M/K`` MMD evaluations instead of ``M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InputError, NotFoundError
from .state_math import (DEFAULT_DELTA, KernelSpec, as_array, dkw_sample_size,
                         median_bandwidth, mmd, subsample, StateSet)

STORE_EPSILON = 0.05  # ~740 samples per stored state
CLUSTER_POINTS = 64


def optimal_cluster_count(M: int) -> int:
    """Integer minimizer of ``K + M/K``; the smaller K wins a tie."""
    if M < 1:
        raise InputError("M must be >= 1")
    a = math.isqrt(M)
    return a + 1 if M > a * (a + 1) else a


def matching_cost(K, M):
    return K + M / K


def _pam_cost(D, medoids):
    return float(D[:, medoids].min(axis=1).sum())


def kmedoids(D, K, seed=0, max_iter=200):
    """PAM over a precomputed distance matrix.

    Greedy BUILD initialization followed by best-improvement swaps until no
    swap lowers the total distance to the nearest medoid.

    Parameters
    ----------
    D : ndarray, shape (M, M)
        Symmetric with zero diagonal.
    K : int

    Returns
    -------
    medoids : ndarray of int, shape (K,)
        Indices into ``D``.
    assignment : ndarray of int, shape (M,)
        Position in ``medoids`` of each point's nearest medoid.
    """
    D = np.asarray(D, dtype=float)
    M = D.shape[0]
    if D.shape != (M, M):
        raise InputError("distance matrix must be square")
    if not 1 <= K <= M:
        raise InputError(f"K must lie in [1, {M}], got {K}")
    rng = np.random.default_rng(seed)
    # ties go to the first index in a seeded permutation
    perm = rng.permutation(M)

    first = perm[np.argmin(D[np.ix_(perm, perm)].sum(axis=0))]
    medoids = [int(first)]
    nearest = D[:, first].copy()
    while len(medoids) < K:
        cand = np.array([p for p in perm if p not in medoids])
        gain = np.maximum(nearest[:, None] - D[:, cand], 0).sum(axis=0)
        best = int(cand[np.argmax(gain)])
        medoids.append(best)
        nearest = np.minimum(nearest, D[:, best])

    medoids = np.array(medoids)
    cost = _pam_cost(D, medoids)
    for _ in range(max_iter):
        Dm = D[:, medoids]
        order = np.argsort(Dm, axis=1, kind="stable")
        near = order[:, 0]
        d1 = Dm[np.arange(M), near]
        d2 = Dm[np.arange(M), order[:, 1]] if K > 1 else np.full(M, np.inf)
        is_med = np.zeros(M, dtype=bool)
        is_med[medoids] = True
        cand = perm[~is_med[perm]]
        if len(cand) == 0:
            break
        best_cost, best_swap = cost, None
        for i in range(K):
            base = np.where(near == i, d2, d1)
            costs = np.minimum(base[:, None], D[:, cand]).sum(axis=0)
            o = int(np.argmin(costs))
            if costs[o] < best_cost - 1e-12:
                best_cost, best_swap = float(costs[o]), (i, int(cand[o]))
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        cost = best_cost
    assignment = D[:, medoids].argmin(axis=1)
    return medoids, assignment


@dataclass
class MatchResult:
    source_env_id: str
    mmd_distance: float
    medoid_cluster: int
    comparisons: int = 0
    index: int = -1


@dataclass
class Candidate:
    """A repository entry as seen by the matcher.

    ``order`` is the registration sequence number; larger is newer.
    """

    env_id: str
    samples: np.ndarray
    order: int = 0
    cluster: int = 0


def request_sample_size(epsilon=STORE_EPSILON, delta=DEFAULT_DELTA):
    return dkw_sample_size(epsilon, delta)


def match_source(target, candidates: Sequence[Candidate],
                 clusters: Optional[Dict[int, List[int]]] = None,
                 epsilon=STORE_EPSILON, delta=DEFAULT_DELTA, seed=0,
                 kernel: Optional[KernelSpec] = None) -> MatchResult:
    """Find the candidate with the smallest MMD to ``target``.

    Parameters
    ----------
    target : StateSet or array-like
        Subsampled to the DKW size for ``(epsilon, delta)``.
    candidates : sequence of Candidate
        The entries visible to the caller.
    clusters : dict, optional
        ``{medoid_position: [member positions]}`` over ``candidates``. When
        omitted every candidate is scanned.

    Notes
    -----
    One bandwidth (median heuristic over the request) is used for every
    comparison so distances stay comparable. Exact ties go to the most
    recently registered candidate.
    """
    if not candidates:
        raise NotFoundError("no visible repository entry")
    T = target if isinstance(target, StateSet) else StateSet(as_array(target))
    T = as_array(subsample(T, request_sample_size(epsilon, delta), seed))
    if kernel is None:
        kernel = KernelSpec(median_bandwidth(T, seed=seed))
    count = 0
    cache = {}

    def dist(i):
        nonlocal count
        if i not in cache:
            count += 1
            cache[i] = mmd(T, candidates[i].samples, kernel)
        return cache[i]

    def best_of(idx):
        return min(idx, key=lambda i: (round(dist(i), 12), -candidates[i].order))

    if not clusters:
        i = best_of(range(len(candidates)))
        return MatchResult(candidates[i].env_id, dist(i), candidates[i].cluster, count, i)
    medoids = sorted(clusters)
    m = best_of(medoids)
    members = clusters[m]
    i = best_of(sorted(set(members) | {m}))
    return MatchResult(candidates[i].env_id, dist(i), candidates[m].cluster, count, i)


class MedoidIndex:
    """Online k-medoids over stored states.

    New entries join their nearest medoid. The whole clustering is recomputed
    when the optimal K for the current size changes, when the largest cluster
    exceeds twice the mean size, or when a medoid is removed.
    Not thread-safe; the store serializes writers.
    """

    def __init__(self, kernel: Optional[KernelSpec] = None, points=CLUSTER_POINTS, seed=0):
        self.kernel = kernel
        self.points = points
        self.seed = seed
        self.keys: List[str] = []
        self._sketch: Dict[str, np.ndarray] = {}
        self.D = np.zeros((0, 0))
        self.medoids: List[int] = []
        self.assignment = np.zeros(0, dtype=int)

    def __len__(self):
        return len(self.keys)

    def _sketch_of(self, samples):
        X = as_array(samples)
        if len(X) > self.points:
            rng = np.random.default_rng(self.seed)
            X = X[np.sort(rng.choice(len(X), self.points, replace=False))]
        return X

    def add(self, key, samples):
        if key in self._sketch:
            self.remove(key)
        S = self._sketch_of(samples)
        if self.kernel is None:
            self.kernel = KernelSpec(median_bandwidth(S))
        row = np.array([mmd(S, self._sketch[k], self.kernel) for k in self.keys])
        M = len(self.keys)
        D = np.zeros((M + 1, M + 1))
        D[:M, :M] = self.D
        D[M, :M] = D[:M, M] = row
        self.D = D
        self.keys.append(key)
        self._sketch[key] = S
        if not self.medoids:
            self.medoids = [0]
            self.assignment = np.zeros(1, dtype=int)
        else:
            near = int(np.argmin(D[M, self.medoids]))
            self.assignment = np.append(self.assignment, near)
        if self._needs_recluster():
            self.recluster()

    def remove(self, key):
        if key not in self._sketch:
            return
        pos = self.keys.index(key)
        keep = [i for i in range(len(self.keys)) if i != pos]
        self.D = self.D[np.ix_(keep, keep)]
        del self.keys[pos]
        del self._sketch[key]
        was_medoid = pos in self.medoids
        if not self.keys:
            self.medoids, self.assignment = [], np.zeros(0, dtype=int)
            return
        remap = {old: new for new, old in enumerate(keep)}
        if was_medoid:
            self.recluster()
            return
        self.medoids = [remap[m] for m in self.medoids]
        self.assignment = np.delete(self.assignment, pos)
        if self._needs_recluster():
            self.recluster()

    def _needs_recluster(self):
        M = len(self.keys)
        if optimal_cluster_count(M) != len(self.medoids):
            return True
        sizes = np.bincount(self.assignment, minlength=len(self.medoids))
        return sizes.max() > 2 * sizes.mean() and sizes.max() > 2

    def recluster(self):
        M = len(self.keys)
        if M == 0:
            return
        med, assign = kmedoids(self.D, optimal_cluster_count(M), seed=self.seed)
        self.medoids = [int(m) for m in med]
        self.assignment = assign

    @property
    def K(self):
        return len(self.medoids)

    def cluster_of(self, key) -> int:
        return int(self.assignment[self.keys.index(key)])

    def clusters(self) -> Dict[str, List[str]]:
        """``{medoid key: [member keys]}`` (members include the medoid)."""
        out = {self.keys[m]: [] for m in self.medoids}
        for pos, c in enumerate(self.assignment):
            out[self.keys[self.medoids[c]]].append(self.keys[pos])
        return out

    def pairwise(self, keys=None):
        if keys is None:
            return self.D.copy()
        pos = [self.keys.index(k) for k in keys]
        return self.D[np.ix_(pos, pos)]
