"""Kernel state transformation between a source and a target environment.

The transform is transfer component analysis (TCA): both environments are
embedded in a shared latent space built from Gaussian-kernel components whose
empirical means agree across the two sets while their variance is kept.
The asymmetric objective ``min_W MMD(phi(S), W phi(T))`` is realized with a
single shared projection applied to both sides; alignment is reported as the
MMD between the two projected sets.

Fitted models are immutable and can be shared across threads.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import FitError, InputError
from .state_math import (KernelSpec, StateSet, as_array, kernel_matrix,
                         median_bandwidth, mmd)

MAGIC = b"EMA1"
FORMAT_VERSION = 1
_KIND_TRANSFORM = 1
_KIND_REGIME = 2

DEFAULT_MU = 1.0
DEFAULT_REGIMES = 4
DEFAULT_NEIGHBORS = 5


def default_latent_dims(n_ref):
    return max(1, min(8, n_ref - 1))


def _frozen(a):
    a = np.array(a, dtype=float, copy=True, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TransformModel:
    """A fitted projection.

    Attributes
    ----------
    reference : ndarray, shape (n_ref, d)
        Union of source rows (first ``n_source``) and target rows seen at fit.
    coefficients : ndarray, shape (n_ref, latent_dims)
        Eigenvectors, columns ordered by descending eigenvalue.
    """

    reference: np.ndarray
    coefficients: np.ndarray
    kernel: KernelSpec
    mu: float
    n_source: int
    eigenvalues: Optional[np.ndarray] = None

    @property
    def latent_dims(self):
        return self.coefficients.shape[1]

    @property
    def n_ref(self):
        return self.reference.shape[0]

    @property
    def dim(self):
        return self.reference.shape[1]

    def embedding(self):
        """Latent coordinates of the reference rows (the fit-time embedding)."""
        return project(self, self.reference)


@dataclass(frozen=True)
class RegimeModel:
    """Per-regime transforms plus the routing table.

    ``centroids[i]`` is target regime ``i`` in the global latent space;
    ``matched[i]`` is the source regime it was aligned to; ``transforms[i]``
    is its dedicated transform, or the global one when ``fallback[i]``.
    """

    global_transform: TransformModel
    centroids: np.ndarray
    matched: Tuple[int, ...]
    transforms: Tuple[TransformModel, ...]
    fallback: Tuple[bool, ...]
    mmd_matrix: np.ndarray

    @property
    def n_regimes(self):
        return len(self.transforms)

    @property
    def latent_dims(self):
        return self.global_transform.latent_dims


def _generalized_eigh(A, B, jitter):
    try:
        return scipy.linalg.eigh(A, B)
    except (np.linalg.LinAlgError, ValueError):
        pass
    n = A.shape[0]
    try:
        return scipy.linalg.eigh(A + jitter * np.eye(n), B + jitter * np.eye(n))
    except (np.linalg.LinAlgError, ValueError) as exc:
        diag = {}
        for name, M in (("cond_KHK", A), ("cond_KLK_mu", B)):
            try:
                diag[name] = float(np.linalg.cond(M))
            except np.linalg.LinAlgError:
                diag[name] = float("inf")
        raise FitError(f"transform eigen-solve failed: {exc}", diag) from exc


def fit_transform(source, target, latent_dims=None, mu=DEFAULT_MU,
                  kernel: Optional[KernelSpec] = None, jitter=1e-8) -> TransformModel:
    """Fit a shared latent projection aligning ``source`` and ``target``.

    Parameters
    ----------
    source, target : StateSet or array-like, shape (n_s, d) / (n_t, d)
        Callers subsample both sides beforehand; the solve is cubic in
        ``n_s + n_t``.
    latent_dims : int, optional
        Number of transfer components, default ``min(8, n - 1)``.
    mu : float
        Ridge on the MMD term; larger values favor variance over alignment.
    kernel : KernelSpec, optional
        Median heuristic over the union when omitted.

    Returns
    -------
    TransformModel
    """
    Xs, Xt = as_array(source), as_array(target)
    if Xs.shape[1] != Xt.shape[1]:
        raise InputError(f"dimension mismatch: {Xs.shape[1]} vs {Xt.shape[1]}")
    if not mu > 0:
        raise InputError("mu must be positive")
    ns, nt = len(Xs), len(Xt)
    if ns == 0 or nt == 0:
        raise InputError("fit_transform needs two nonempty sets")
    n = ns + nt
    if latent_dims is None:
        latent_dims = default_latent_dims(n)
    if not 1 <= latent_dims <= n:
        raise InputError(f"latent_dims must lie in [1, {n}], got {latent_dims}")
    X = np.vstack([Xs, Xt])
    if kernel is None:
        kernel = KernelSpec(median_bandwidth(Xs, Xt))
    K = kernel_matrix(X, X, kernel)

    e = np.concatenate([np.full(ns, 1.0 / ns), np.full(nt, -1.0 / nt)])
    Ke = K @ e
    KLK = np.outer(Ke, Ke)
    Kc = K - K.mean(axis=0, keepdims=True)  # H K
    KHK = Kc.T @ Kc  # K H H K == K H K since H is idempotent
    KHK = 0.5 * (KHK + KHK.T)
    B = KLK + mu * np.eye(n)

    vals, vecs = _generalized_eigh(KHK, B, jitter)
    order = np.argsort(vals)[::-1][:latent_dims]
    return TransformModel(reference=_frozen(X), coefficients=_frozen(vecs[:, order]),
                          kernel=kernel, mu=float(mu), n_source=ns,
                          eigenvalues=_frozen(vals[order]))


def project(model: TransformModel, samples):
    """Latent coordinates ``k(samples, reference) @ coefficients``.

    Returns an array for array input and a StateSet (same labels, costs and
    ids) for StateSet input.
    """
    X = as_array(samples)
    if X.shape[1] != model.dim:
        raise InputError(f"dimension mismatch: {X.shape[1]} vs {model.dim}")
    Z = kernel_matrix(X, model.reference, model.kernel) @ model.coefficients
    if isinstance(samples, StateSet):
        return samples.with_features(Z)
    return Z


def aligned_mmd(model: TransformModel, source, target):
    """MMD between the projected source and target sets."""
    return mmd(project(model, as_array(source)), project(model, as_array(target)))


def map_to_source(model: TransformModel, samples, k=DEFAULT_NEIGHBORS, anchors=None):
    """Carry samples into the source's input space through the latent space.

    Each sample is replaced by the mean of ``anchors`` (default: the raw
    source reference rows) belonging to its ``k`` nearest source rows in the
    latent space. Used to evaluate a source model on target inputs.
    """
    X = as_array(samples)
    Z = project(model, X)
    Zs = project(model, model.reference[:model.n_source])
    anchors = model.reference[:model.n_source] if anchors is None else np.asarray(anchors)
    k = max(1, min(k, len(Zs)))
    D = cdist(Z, Zs, "sqeuclidean")
    nn = np.argpartition(D, k - 1, axis=1)[:, :k] if k < len(Zs) else np.tile(
        np.arange(len(Zs)), (len(Z), 1))
    return anchors[nn].mean(axis=1)


def _kmeanspp(X, R, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, R):
        total = d2.sum()
        if total <= 0:
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(free))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[centers].copy()


def partition_regimes(latent, R, seed=0, max_iter=100) -> List[Tuple[np.ndarray, np.ndarray]]:
    """k-means over latent states.

    Returns ``R`` pairs ``(centroid, member_indices)``. Every point belongs to
    the regime of its nearest centroid. A cluster that empties is re-seeded
    at the point farthest from its current centroid.
    """
    Z = as_array(latent)
    n = len(Z)
    if not 1 <= R <= n:
        raise InputError(f"regime count must lie in [1, {n}], got {R}")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(Z, R, rng)
    assign = None
    for _ in range(max_iter):
        D = cdist(Z, C, "sqeuclidean")
        new = D.argmin(axis=1)
        for r in range(R):
            if not np.any(new == r):
                far = int(D[np.arange(n), new].argmax())
                new[far] = r
                C[r] = Z[far]
                D = cdist(Z, C, "sqeuclidean")
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for r in range(R):
            C[r] = Z[assign == r].mean(axis=0)
    # final assignment must agree with the returned centroids
    assign = cdist(Z, C, "sqeuclidean").argmin(axis=1)
    out = []
    for r in range(R):
        members = np.flatnonzero(assign == r)
        if len(members):
            C[r] = Z[members].mean(axis=0)
        out.append((C[r].copy(), members))
    return out


def regime_mmd_matrix(source, target, src_regimes, tgt_regimes, kernel):
    Xs, Xt = as_array(source), as_array(target)
    M = np.empty((len(tgt_regimes), len(src_regimes)))
    for i, (_, ti) in enumerate(tgt_regimes):
        for j, (_, sj) in enumerate(src_regimes):
            M[i, j] = mmd(Xt[ti], Xs[sj], kernel) if len(ti) and len(sj) else np.inf
    return M


def fit_regime_aware(source, target, R=DEFAULT_REGIMES, latent_dims=None,
                     mu=DEFAULT_MU, seed=0, kernel=None) -> RegimeModel:
    """Align each target regime to its closest source regime.

    Both sets are embedded with one global transform and clustered into
    ``R`` regimes each. Every target regime is matched to the source regime
    with the smallest input-space MMD and receives its own transform. A
    pair with fewer than ``latent_dims`` members on either side keeps the
    global transform.
    """
    Xs, Xt = as_array(source), as_array(target)
    glob = fit_transform(Xs, Xt, latent_dims=latent_dims, mu=mu, kernel=kernel)
    dims = glob.latent_dims
    Zt = project(glob, Xt)
    if R < 1:
        raise InputError("R must be >= 1")
    if R == 1:
        return RegimeModel(glob, _frozen(Zt.mean(axis=0, keepdims=True)), (0,),
                           (glob,), (False,), _frozen([[0.0]]))
    Zs = project(glob, Xs)
    src_reg = partition_regimes(Zs, min(R, len(Xs)), seed=seed)
    tgt_reg = partition_regimes(Zt, min(R, len(Xt)), seed=seed + 1)
    M = regime_mmd_matrix(Xs, Xt, src_reg, tgt_reg, glob.kernel)
    matched, transforms, fallback = [], [], []
    for i, (_, ti) in enumerate(tgt_reg):
        j = int(np.argmin(M[i]))
        sj = src_reg[j][1]
        matched.append(j)
        if min(len(ti), len(sj)) < max(dims, 2):
            transforms.append(glob)
            fallback.append(True)
            continue
        transforms.append(fit_transform(Xs[sj], Xt[ti], latent_dims=dims, mu=mu))
        fallback.append(False)
    centroids = np.stack([c for c, _ in tgt_reg])
    return RegimeModel(glob, _frozen(centroids), tuple(matched), tuple(transforms),
                       tuple(fallback), _frozen(M))


def route(model: RegimeModel, samples):
    """Index of the nearest target-regime centroid for each sample."""
    Z = project(model.global_transform, as_array(samples))
    return cdist(Z, model.centroids, "sqeuclidean").argmin(axis=1)


def apply_regime_aware(model: RegimeModel, samples):
    """Project every sample with the transform of the regime it routes to."""
    X = as_array(samples)
    if X.shape[1] != model.global_transform.dim:
        raise InputError(f"dimension mismatch: {X.shape[1]} vs {model.global_transform.dim}")
    reg = route(model, X)
    out = np.empty((len(X), model.latent_dims))
    for r in np.unique(reg):
        rows = reg == r
        out[rows] = project(model.transforms[r], X[rows])
    if isinstance(samples, StateSet):
        return samples.with_features(out)
    return out


def map_to_source_regime(model: RegimeModel, samples, k=DEFAULT_NEIGHBORS):
    """Regime-aware version of :func:`map_to_source`."""
    X = as_array(samples)
    reg = route(model, X)
    out = np.empty_like(X)
    for r in np.unique(reg):
        rows = reg == r
        out[rows] = map_to_source(model.transforms[r], X[rows], k=k)
    return out


# --- serialization --------------------------------------------------------

def _pack_array(buf, a):
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read(stream, n):
    b = stream.read(n)
    if len(b) != n:
        raise InputError("truncated transform blob")
    return b


def _read_array(stream, shape):
    count = int(np.prod(shape))
    return np.frombuffer(_read(stream, 8 * count), dtype="<f8").reshape(shape).astype(float)


def _write_transform(buf, m: TransformModel):
    buf.write(struct.pack("<ddIIII", m.kernel.bandwidth, m.mu, m.n_ref, m.dim,
                          m.latent_dims, m.n_source))
    _pack_array(buf, m.reference)
    _pack_array(buf, m.coefficients)


def _read_transform(stream) -> TransformModel:
    bw, mu, n, d, k, ns = struct.unpack("<ddIIII", _read(stream, 32))
    ref = _read_array(stream, (n, d))
    coef = _read_array(stream, (n, k))
    return TransformModel(_frozen(ref), _frozen(coef), KernelSpec(bw), mu, ns)


def to_bytes(model) -> bytes:
    """Versioned binary form (magic ``EMA1``) of a transform or regime model."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    if isinstance(model, TransformModel):
        buf.write(struct.pack("<HB", FORMAT_VERSION, _KIND_TRANSFORM))
        _write_transform(buf, model)
    elif isinstance(model, RegimeModel):
        buf.write(struct.pack("<HB", FORMAT_VERSION, _KIND_REGIME))
        _write_transform(buf, model.global_transform)
        R, k = model.centroids.shape
        buf.write(struct.pack("<III", R, k, model.mmd_matrix.shape[1]))
        _pack_array(buf, model.centroids)
        _pack_array(buf, model.mmd_matrix)
        for i in range(R):
            buf.write(struct.pack("<IB", model.matched[i], int(model.fallback[i])))
            if not model.fallback[i] and model.transforms[i] is not model.global_transform:
                buf.write(b"\x01")
                _write_transform(buf, model.transforms[i])
            else:
                buf.write(b"\x00")
    else:
        raise InputError(f"cannot serialize {type(model).__name__}")
    return buf.getvalue()


def from_bytes(blob: bytes):
    stream = io.BytesIO(blob)
    if _read(stream, 4) != MAGIC:
        raise InputError("not a transform blob (bad magic)")
    version, kind = struct.unpack("<HB", _read(stream, 3))
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported transform format version {version}")
    if kind == _KIND_TRANSFORM:
        return _read_transform(stream)
    if kind != _KIND_REGIME:
        raise InputError(f"unknown transform kind {kind}")
    glob = _read_transform(stream)
    R, k, rs = struct.unpack("<III", _read(stream, 12))
    centroids = _read_array(stream, (R, k))
    M = _read_array(stream, (R, rs))
    matched, transforms, fallback = [], [], []
    for _ in range(R):
        j, fb = struct.unpack("<IB", _read(stream, 5))
        own = _read(stream, 1) == b"\x01"
        matched.append(j)
        fallback.append(bool(fb))
        transforms.append(_read_transform(stream) if own else glob)
    return RegimeModel(glob, _frozen(centroids), tuple(matched), tuple(transforms),
                       tuple(fallback), _frozen(M))


def to_text(model) -> str:
    """Human-readable dump for debugging; not meant to be parsed back."""
    lines = []

    def dump(m: TransformModel, prefix):
        lines.append(f"{prefix}kernel=gaussian bandwidth={m.kernel.bandwidth!r} mu={m.mu!r}")
        lines.append(f"{prefix}n_ref={m.n_ref} n_source={m.n_source} dim={m.dim} "
                     f"latent_dims={m.latent_dims}")
        lines.append(f"{prefix}reference:")
        lines.extend(prefix + "  " + ",".join(repr(float(v)) for v in row) for row in m.reference)
        lines.append(f"{prefix}coefficients:")
        lines.extend(prefix + "  " + ",".join(repr(float(v)) for v in row)
                     for row in m.coefficients)

    lines.append(f"format=EMA1 version={FORMAT_VERSION}")
    if isinstance(model, TransformModel):
        dump(model, "")
    else:
        lines.append(f"regimes={model.n_regimes}")
        dump(model.global_transform, "global.")
        for i in range(model.n_regimes):
            lines.append(f"regime[{i}] matched={model.matched[i]} fallback={model.fallback[i]} "
                         "centroid=" + ",".join(repr(float(v)) for v in model.centroids[i]))
            if not model.fallback[i]:
                dump(model.transforms[i], f"regime[{i}].")
    return "\n".join(lines) + "\n"
