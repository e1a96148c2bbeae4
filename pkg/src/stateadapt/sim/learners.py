"""Reference learners for the simulator.

Both learners are small ensembles of linear models on a shared set of random
Fourier features. The features depend only on ``feature_seed``, so weights
learned in one environment are meaningful in another; that is what makes
warm starting possible.

Each member is ridge-regularized toward its own random prior weight vector
and sees its own bootstrap weighting of the labeled data, so members agree
where data exists and disagree elsewhere.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import InputError

MAGIC = b"SALRN1"
BOOT_TABLE = 1 << 16


@dataclass(frozen=True)
class LearnerConfig:
    dim: int
    task: str = "regression"
    n_classes: int = 2
    n_members: int = 5
    n_features: int = 200
    lengthscale: float = 1.0
    ridge: float = 1e-3
    prior_scale: float = 1.0
    step_scale: float = 0.5
    warm_spread: float = 0.2
    feature_seed: int = 0

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise InputError(f"unknown task {self.task!r}")
        if self.dim < 1 or self.n_members < 1 or self.n_features < 1:
            raise InputError("dim, n_members and n_features must be >= 1")
        if self.task == "classification" and self.n_classes < 2:
            raise InputError("classification needs n_classes >= 2")


_FIELDS = [("dim", "i"), ("n_classes", "i"), ("n_members", "i"), ("n_features", "i"),
           ("lengthscale", "d"), ("ridge", "d"), ("prior_scale", "d"),
           ("step_scale", "d"), ("warm_spread", "d"), ("feature_seed", "q")]


class FourierFeatures:
    """``sqrt(2/D) cos(W x + b)`` approximating a Gaussian kernel."""

    def __init__(self, dim, n_features, lengthscale, seed):
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0.0, 1.0 / lengthscale, size=(dim, n_features))
        self.b = rng.uniform(0.0, 2 * np.pi, size=n_features)
        self.scale = np.sqrt(2.0 / n_features)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.W.shape[0]:
            raise InputError(f"dimension mismatch: {X.shape[1]} vs {self.W.shape[0]}")
        return self.scale * np.cos(X @ self.W + self.b)


class EnsembleLearner:
    """Bootstrap ensemble of linear heads on shared Fourier features.

    Parameters
    ----------
    config : LearnerConfig
    seed : int
        Drives the member priors and the bootstrap weights. Two learners with the same config and seed are identical.

    Notes
    -----
    Training cost is counted in sample-epochs: ``train_step`` on ``n``
    samples for ``e`` epochs returns ``n * e``.
    """

    def __init__(self, config: LearnerConfig, seed=0):
        self.config = config
        self.seed = int(seed)
        self.features = FourierFeatures(config.dim, config.n_features,
                                        config.lengthscale, config.feature_seed)
        rng = np.random.default_rng(self.seed)
        out = 1 if config.task == "regression" else config.n_classes
        shape = (config.n_members, config.n_features, out)
        self.prior = config.prior_scale * rng.normal(size=shape)
        self.weights = self.prior.copy()
        # Bayesian bootstrap: Exp(1) weights keep every sample in every member
        self._boot = rng.exponential(1.0, size=(config.n_members, BOOT_TABLE))
        self._reset_curvature()

    def _reset_curvature(self):
        # curvature of the prior alone: what an untrained member has seen
        D = self.config.n_features
        self._curv = np.broadcast_to(self.config.ridge * np.eye(D),
                                     (self.config.n_members, D, D)).copy()
        self._scale = np.ones(self.config.n_members)

    @property
    def is_classifier(self):
        return self.config.task == "classification"

    # -- prediction ----------------------------------------------------------

    def member_outputs(self, X):
        Phi = self.features(X)
        return np.einsum("nf,mfo->mno", Phi, self.weights)

    def member_predictions(self, X):
        """Shape (n_members, n_samples) for regression."""
        return self.member_outputs(X)[..., 0]

    def predict(self, X):
        if self.config.task == "classification":
            return self.class_probs(X).argmax(axis=1).astype(float)
        return self.member_predictions(X).mean(axis=0)

    def predict_interval(self, X):
        P = self.member_predictions(X)
        return P.min(axis=0), P.max(axis=0)

    def class_probs(self, X):
        if self.config.task != "classification":
            raise AttributeError("class_probs is only defined for classifiers")
        Z = self.member_outputs(X)
        Z = Z - Z.max(axis=2, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=2, keepdims=True)
        return P.mean(axis=0)

    def score(self, X, y):
        """R^2 for regression, accuracy for classification."""
        y = np.asarray(y, dtype=float)
        if self.config.task == "classification":
            return float(np.mean(self.predict(X) == y))
        resid = np.sum((y - self.predict(X)) ** 2)
        total = np.sum((y - y.mean()) ** 2)
        return float(1.0 - resid / total) if total > 0 else 0.0

    # -- training --------------------------------------------------------------

    def _bootstrap(self, ids):
        return self._boot[:, np.asarray(ids) % BOOT_TABLE]

    def _targets(self, y):
        y = np.asarray(y, dtype=float)
        if self.config.task == "regression":
            return y[:, None]
        return np.eye(self.config.n_classes)[y.astype(int)]

    def _residual(self, m, Phi, Y):
        out = Phi @ self.weights[m]
        if self.config.task == "classification":
            out = out - out.max(axis=1, keepdims=True)
            P = np.exp(out)
            P /= P.sum(axis=1, keepdims=True)
            return P - Y
        return out - Y

    def train_step(self, X, y, epochs=1, ids=None, incremental=False):
        """Preconditioned full-batch descent; returns the cost ``len(X) * epochs``.

        Each epoch takes a step of ``step_scale`` along ``H^{-1} g`` with
        ``H`` the (Gauss-Newton) curvature of the member's weighted loss. A
        regular step treats ``(X, y)`` as the member's whole training set and
        remembers its curvature. With ``incremental=True`` the batch is an
        addition to the previously seen data: the remembered curvature is
        extended by the new rows and the gradient comes from the new rows only,
        so a few fresh labels update the model without it forgetting what it
        was fit on.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = len(X)
        if n == 0 or epochs <= 0:
            return 0.0
        if ids is None:
            ids = np.arange(n)
        Phi = self.features(X)
        Y = self._targets(y)
        B = self._bootstrap(ids)
        lam = self.config.ridge
        # softmax curvature is bounded by half the squared-loss curvature
        c = 0.5 if self.config.task == "classification" else 1.0
        eye = np.eye(self.config.n_features)
        for m in range(self.config.n_members):
            w = B[m]
            if incremental:
                s = self._scale[m]
                H = self._curv[m] + c * (Phi.T * w) @ Phi / s
            else:
                s = max(w.sum(), 1.0)
                H = c * (Phi.T * w) @ Phi / s + lam * eye
                self._curv[m], self._scale[m] = H, s
            fac = cho_factor(H)
            for _ in range(int(epochs)):
                g = Phi.T @ (w[:, None] * self._residual(m, Phi, Y)) / s
                if not incremental:
                    g += lam * (self.weights[m] - self.prior[m])
                self.weights[m] -= self.config.step_scale * cho_solve(fac, g)
        return float(n * epochs)

    def fit_closed_form(self, X, y, ids=None):
        """Exact ridge solution per member (regression only).

        Used for distillation and for the all-data oracle. Returns the number
        of samples, i.e. the cost of one epoch.
        """
        if self.config.task != "regression":
            raise InputError("closed-form fit is only available for regression")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = len(X)
        if ids is None:
            ids = np.arange(n)
        Phi = self.features(X)
        y = np.asarray(y, dtype=float)
        B = self._bootstrap(ids)
        lam = self.config.ridge
        eye = np.eye(self.config.n_features)
        for m in range(self.config.n_members):
            w = B[m]
            s = max(w.sum(), 1.0)
            A = (Phi.T * w) @ Phi / s + lam * eye
            rhs = (Phi.T * w) @ y / s + lam * self.prior[m, :, 0]
            self.weights[m, :, 0] = np.linalg.solve(A, rhs)
            self._curv[m], self._scale[m] = A, s
        return float(n)

    def distill(self, X, y, epochs=1):
        """Adopt the fit of ``y`` (e.g. pseudo-labels) as an informative prior.

        The ensemble mean of the fit becomes every member's prior center, and
        each member gets an independent perturbation of size ``warm_spread``,
        so the warm model is uncertain until real labels arrive. Costs
        ``len(X) * epochs``.
        """
        if self.config.task == "regression":
            self.fit_closed_form(X, y)
        else:
            self.train_step(X, y, epochs)
        center = self.weights.mean(axis=0, keepdims=True)
        rng = np.random.default_rng([self.seed, 7])
        noise = self.config.warm_spread * rng.normal(size=self.weights.shape)
        self.prior = center + noise
        self.weights = self.prior.copy()
        self._reset_curvature()
        return float(len(X) * epochs)

    # -- copies and serialization ------------------------------------------------

    def clone(self):
        other = EnsembleLearner.__new__(EnsembleLearner)
        other.__dict__.update(self.__dict__)
        other.weights = self.weights.copy()
        other._curv = self._curv.copy()
        other._scale = self._scale.copy()
        return other

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        c = self.config
        task = c.task.encode()
        buf.write(struct.pack("<H", len(task)) + task)
        for name, fmt in _FIELDS:
            buf.write(struct.pack("<" + fmt, getattr(c, name)))
        buf.write(struct.pack("<q", self.seed))
        buf.write(self.prior.astype("<f8").tobytes())
        buf.write(self.weights.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, seed=None):
        """Rebuild a learner; ``seed`` reseeds the bootstrap weights if given.

        Curvature from past training is not stored, so the rebuilt learner
        treats its weights as a prior fit.
        """
        view = memoryview(blob)
        if bytes(view[:len(MAGIC)]) != MAGIC:
            raise InputError("not a learner blob")
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        task = bytes(view[pos:pos + n]).decode()
        pos += n
        kw = {"task": task}
        for name, fmt in _FIELDS:
            (kw[name],) = struct.unpack_from("<" + fmt, view, pos)
            pos += struct.calcsize(fmt)
        config = LearnerConfig(**kw)
        (stored_seed,) = struct.unpack_from("<q", view, pos)
        pos += 8
        out = 1 if task == "regression" else config.n_classes
        shape = (config.n_members, config.n_features, out)
        size = int(np.prod(shape)) * 8
        if len(view) != pos + 2 * size:
            raise InputError("learner blob has the wrong length")
        prior = np.frombuffer(view[pos:pos + size], dtype="<f8").reshape(shape)
        weights = np.frombuffer(view[pos + size:pos + 2 * size], dtype="<f8").reshape(shape)
        obj = cls(config, stored_seed if seed is None else seed)
        obj.prior = prior.astype(float)
        obj.weights = weights.astype(float)
        return obj
