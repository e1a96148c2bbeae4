"""Kernel and MMD primitives, DKW sample sizing and subsampling.

Everything here is pure: no module state, safe to call from any thread.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist

from .errors import InputError

DEFAULT_EPSILON = 0.02
DEFAULT_DELTA = 0.95


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-||x - y||^2 / (2 bandwidth^2))``."""

    bandwidth: float = 1.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise InputError(f"unsupported kernel kind {self.kind!r}")
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass
class StateSample:
    features: np.ndarray
    label: Optional[float] = None
    labeling_cost: float = 0.0
    sample_id: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).ravel()
        if self.labeling_cost < 0:
            raise InputError("labeling_cost must be nonnegative")


@dataclass
class StateSet:
    """A batch of samples from one environment, stored column-wise.

    ``labels`` uses NaN for "not labeled yet"; ``ids`` are stable sample
    identifiers that survive subsampling.
    """

    X: np.ndarray
    labels: np.ndarray = None
    costs: np.ndarray = None
    env_id: str = ""
    kernel: Optional[KernelSpec] = None
    ids: np.ndarray = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or len(X) == 0:
            raise InputError("a StateSet needs a nonempty (n, d) feature array")
        self.X = X
        n = len(X)
        self.labels = (np.full(n, np.nan) if self.labels is None
                       else np.asarray(self.labels, dtype=float).reshape(n))
        self.costs = (np.zeros(n) if self.costs is None
                      else np.asarray(self.costs, dtype=float).reshape(n))
        if np.any(self.costs < 0):
            raise InputError("labeling costs must be nonnegative")
        self.ids = (np.arange(n) if self.ids is None
                    else np.asarray(self.ids, dtype=np.int64).reshape(n))

    def __len__(self):
        return len(self.X)

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def labeled_mask(self):
        return ~np.isnan(self.labels)

    def __getitem__(self, i):
        lab = self.labels[i]
        return StateSample(self.X[i], None if np.isnan(lab) else float(lab),
                           float(self.costs[i]), int(self.ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples: Sequence[StateSample], env_id="", kernel=None):
        samples = list(samples)
        if not samples:
            raise InputError("cannot build a StateSet from zero samples")
        dims = {s.features.shape[0] for s in samples}
        if len(dims) != 1:
            raise InputError(f"samples disagree on dimension: {sorted(dims)}")
        X = np.stack([s.features for s in samples])
        labels = [np.nan if s.label is None else s.label for s in samples]
        costs = [s.labeling_cost for s in samples]
        return cls(X, labels, costs, env_id=env_id, kernel=kernel)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], labels=self.labels[idx],
                       costs=self.costs[idx], ids=self.ids[idx])

    def with_features(self, X):
        """Same rows and metadata, new feature block (e.g. a latent embedding)."""
        X = np.asarray(X, dtype=float)
        if len(X) != len(self):
            raise InputError("replacement features must keep the row count")
        return replace(self, X=X, labels=self.labels.copy(),
                       costs=self.costs.copy(), ids=self.ids.copy())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(self.dim)] + ["label", "cost"])
        for x, lab, c in zip(self.X, self.labels, self.costs):
            w.writerow([_fmt(v) for v in x]
                       + ["" if np.isnan(lab) else _fmt(lab), _fmt(c)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, env_id="", kernel=None):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise InputError("empty CSV")
        header = rows[0]
        if header[-2:] != ["label", "cost"]:
            raise InputError("CSV header must end with label,cost")
        d = len(header) - 2
        if header[:d] != [f"f{j}" for j in range(d)]:
            raise InputError("CSV feature columns must be f0..f{d-1}")
        body = [r for r in rows[1:] if r]
        X = np.array([[float(v) for v in r[:d]] for r in body])
        labels = [np.nan if r[d] == "" else float(r[d]) for r in body]
        costs = [float(r[d + 1]) for r in body]
        return cls(X, labels, costs, env_id=env_id, kernel=kernel)


def _fmt(v):
    return repr(float(v))


ArrayOrSet = Union[StateSet, np.ndarray]


def as_array(A: ArrayOrSet) -> np.ndarray:
    X = A.X if isinstance(A, StateSet) else np.asarray(A, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def gaussian_kernel(x, y, spec: KernelSpec) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    d2 = float(np.dot(x - y, x - y))
    return math.exp(-d2 / (2.0 * spec.bandwidth ** 2))


def kernel_matrix(A, B, spec: KernelSpec) -> np.ndarray:
    A, B = as_array(A), as_array(B)
    if A.shape[1] != B.shape[1]:
        raise InputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    D = cdist(A, B, "sqeuclidean")
    D *= -1.0 / (2.0 * spec.bandwidth ** 2)
    return np.exp(D, out=D)


def median_bandwidth(A, B=None, max_points=1000, seed=0) -> float:
    """Median pairwise Euclidean distance over the union of ``A`` and ``B``.

    At most ``max_points`` points (drawn with ``seed``) enter the median.
    Falls back to 1.0 when the median is zero.
    """
    X = as_array(A) if B is None else np.vstack([as_array(A), as_array(B)])
    if len(X) > max_points:
        rng = np.random.default_rng(seed)
        X = X[rng.choice(len(X), max_points, replace=False)]
    if len(X) < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def resolve_kernel(A, B, kernel: Optional[KernelSpec] = None) -> KernelSpec:
    if kernel is not None:
        return kernel
    ka = A.kernel if isinstance(A, StateSet) else None
    kb = B.kernel if isinstance(B, StateSet) else None
    if ka is not None and kb is not None and ka != kb:
        raise InputError("the two sets carry different kernels")
    if ka is not None or kb is not None:
        return ka or kb
    return KernelSpec(median_bandwidth(A, B))


def mmd2(A, B, kernel: Optional[KernelSpec] = None) -> float:
    """Biased (V-statistic) squared MMD, clipped at zero against round-off."""
    XA, XB = as_array(A), as_array(B)
    if len(XA) == 0 or len(XB) == 0:
        raise InputError("MMD needs two nonempty sets")
    if XA.shape[1] != XB.shape[1]:
        raise InputError(f"dimension mismatch: {XA.shape[1]} vs {XB.shape[1]}")
    spec = resolve_kernel(A, B, kernel)
    val = (kernel_matrix(XA, XA, spec).mean() + kernel_matrix(XB, XB, spec).mean()
           - 2.0 * kernel_matrix(XA, XB, spec).mean())
    return max(float(val), 0.0)


def mmd(A, B, kernel: Optional[KernelSpec] = None) -> float:
    """Empirical maximum mean discrepancy between two sample sets.

    Parameters
    ----------
    A, B : StateSet or array-like, shape (n, d)
    kernel : KernelSpec, optional
        Defaults to the sets' own kernel, else the median heuristic on the
        union.

    Returns
    -------
    float
        ``sqrt(mean K_AA + mean K_BB - 2 mean K_AB)``.
    """
    return math.sqrt(mmd2(A, B, kernel))


def dkw_sample_size(epsilon=DEFAULT_EPSILON, delta=DEFAULT_DELTA) -> int:
    """Smallest m with ``m >= -ln((1 - delta) / 2) / (2 epsilon^2)``.

    ``delta`` is the confidence level (0.95 means 95%).
    """
    if not (0 < epsilon < 1):
        raise InputError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not (0 < delta < 1):
        raise InputError(f"delta must lie in (0, 1), got {delta}")
    bound = -math.log((1.0 - delta) / 2.0) / (2.0 * epsilon ** 2)
    return max(1, math.ceil(bound))


def subsample(A: StateSet, m: int, seed: int = 0) -> StateSet:
    """Uniform subsample without replacement; ``A`` itself when ``m >= len(A)``."""
    if m < 1:
        raise InputError("subsample size must be >= 1")
    if m >= len(A):
        return A
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(A), size=m, replace=False))
    return A.take(idx)


def sup_cdf_deviation(sub, full) -> float:
    """Largest Kolmogorov distance between marginal empirical CDFs."""
    S, F = as_array(sub), as_array(full)
    return max(stats.ks_2samp(S[:, j], F[:, j]).statistic for j in range(F.shape[1]))
