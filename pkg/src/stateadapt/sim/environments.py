"""Parametric synthetic environments.

An environment has ``informative`` input dimensions that drive the label and
``dim - informative`` nuisance dimensions that carry deployment-specific
offsets and scales but no signal. Shifts between environments move the
informative bulk (mean, spread, weight of a rare tail regime), move the
nuisance block, and drift the label function.

Labeling is priced by distance from the environment's own bulk, so rare
tail inputs are the expensive ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

from ..errors import InputError
from ..state_math import StateSample, StateSet

ID_STRIDE = 1_000_000
COST_AXES = ("all", "informative", "nuisance")


@dataclass(frozen=True)
class EnvironmentSpec:
    seed: int = 0
    task: str = "regression"
    dim: int = 5
    informative: int = 3
    mean_offset: Tuple[float, ...] = ()
    scale: float = 1.0
    nuisance_scale: float = 1.0
    tail_weight: float = 0.05
    tail_center: Tuple[float, ...] = ()
    tail_scale: float = 0.4
    label_drift: float = 0.0
    noise: float = 0.2
    cost_base: float = 1.0
    cost_beta: float = 1.0
    cost_power: float = 1.0
    cost_axes: str = "all"
    pool_size: int = 3000
    test_size: int = 1000
    name: str = ""

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise InputError(f"unknown task {self.task!r}")
        if not 1 <= self.informative <= self.dim:
            raise InputError("informative must lie in [1, dim]")
        if self.mean_offset and len(self.mean_offset) != self.dim:
            raise InputError("mean_offset must have length dim")
        if self.tail_center and len(self.tail_center) != self.informative:
            raise InputError("tail_center must have length informative")
        vals = [self.scale, self.nuisance_scale, self.tail_weight, self.tail_scale,
                self.label_drift, self.noise, self.cost_base, self.cost_beta,
                self.cost_power, *self.mean_offset, *self.tail_center]
        if not all(math.isfinite(v) for v in vals):
            raise InputError("shift parameters must be finite")
        if not (self.scale > 0 and self.nuisance_scale > 0 and self.tail_scale > 0):
            raise InputError("scales must be positive")
        if not 0 <= self.tail_weight < 1:
            raise InputError("tail_weight must lie in [0, 1)")
        if self.cost_axes not in COST_AXES:
            raise InputError(f"cost_axes must be one of {COST_AXES}")
        if self.cost_axes == "nuisance" and self.dim == self.informative:
            raise InputError("cost_axes='nuisance' needs at least one nuisance dimension")
        if self.cost_base <= 0 or self.cost_beta < 0:
            raise InputError("cost_base must be positive and cost_beta nonnegative")

    @property
    def offset(self):
        return np.asarray(self.mean_offset or (0.0,) * self.dim, dtype=float)

    @property
    def tail(self):
        """Tail center relative to the bulk; defaults to 2.5 along every informative axis."""
        return np.asarray(self.tail_center or (2.5,) * self.informative, dtype=float)


def label_function(Xinf, drift=0.0, task="regression"):
    """Shared ground truth over the informative block."""
    Xinf = np.atleast_2d(np.asarray(Xinf, dtype=float))
    # missing informative axes read as zero
    x0, x1, x2 = (Xinf[:, j] if j < Xinf.shape[1] else np.zeros(len(Xinf)) for j in range(3))
    f = (np.sin(1.5 * x0) + np.cos(1.5 * x1) + 0.5 * np.sin(2.0 * x2)
         + 0.3 * x0 * x2 + drift * x1)
    if task == "classification":
        return (f > 0.5).astype(float)
    return f


def draw_inputs(spec: EnvironmentSpec, n, rng):
    k = spec.informative
    off = spec.offset
    X = np.empty((n, spec.dim))
    tail = rng.random(n) < spec.tail_weight
    bulk = rng.normal(size=(n, k)) * spec.scale + off[:k]
    tails = rng.normal(size=(n, k)) * spec.tail_scale + off[:k] + spec.tail
    X[:, :k] = np.where(tail[:, None], tails, bulk)
    if spec.dim > k:
        X[:, k:] = rng.normal(size=(n, spec.dim - k)) * spec.nuisance_scale + off[k:]
    return X


def labeling_costs(spec: EnvironmentSpec, X):
    """``cost_base * (1 + cost_beta * ||u||^cost_power)``.

    ``u`` is ``X`` standardized by the environment's own bulk, so the price
    of a label does not depend on where the deployment happens to sit in
    absolute coordinates. ``spec.cost_axes`` picks the coordinates that set
    the price: all of them, only the informative block, or only the nuisance
    block (unusual operating conditions are expensive to measure even where
    the label itself is easy).
    """
    k = spec.informative
    X = np.atleast_2d(X)
    u = np.empty_like(X, dtype=float)
    u[:, :k] = (X[:, :k] - spec.offset[:k]) / spec.scale
    u[:, k:] = (X[:, k:] - spec.offset[k:]) / spec.nuisance_scale
    cols = {"all": slice(None), "informative": slice(0, k), "nuisance": slice(k, None)}
    r = np.linalg.norm(u[:, cols[spec.cost_axes]], axis=1)
    return spec.cost_base * (1.0 + spec.cost_beta * r ** spec.cost_power)


class SimOracle:
    """Ground-truth labeler that charges the declared cost of each sample."""

    def __init__(self, spec: EnvironmentSpec, seed=0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def label(self, sample: StateSample):
        k = self.spec.informative
        x = sample.features[None, :k]
        y = label_function(x, self.spec.label_drift, self.spec.task)[0]
        if self.spec.task == "regression":
            # noise keyed by sample id so relabeling is reproducible
            y += self.spec.noise * np.random.default_rng(
                [self.spec.seed, int(sample.sample_id or 0)]).normal()
        self.calls += 1
        cost = sample.labeling_cost or float(labeling_costs(self.spec, sample.features[None])[0])
        return float(y), float(cost)


@dataclass
class Environment:
    spec: EnvironmentSpec
    pool: StateSet
    test_X: np.ndarray
    test_y: np.ndarray
    oracle: SimOracle
    pool_labels: np.ndarray = field(repr=False, default=None)

    @property
    def env_id(self):
        return self.pool.env_id


def gen_environment(spec: EnvironmentSpec) -> Environment:
    """Draw an unlabeled pool, a labeled test set and an oracle for ``spec``."""
    rng = np.random.default_rng([spec.seed, 17])
    X = draw_inputs(spec, spec.pool_size, rng)
    Xt = draw_inputs(spec, spec.test_size, rng)
    k = spec.informative
    yt = label_function(Xt[:, :k], spec.label_drift, spec.task)
    if spec.task == "regression":
        yt = yt + spec.noise * rng.normal(size=len(yt))
    costs = labeling_costs(spec, X)
    env_id = spec.name or f"env{spec.seed}"
    ids = np.arange(spec.pool_size, dtype=np.int64) + (spec.seed % 1000) * ID_STRIDE
    pool = StateSet(X, costs=costs, env_id=env_id, ids=ids)
    oracle = SimOracle(spec, seed=spec.seed)
    truth = label_function(X[:, :k], spec.label_drift, spec.task)
    return Environment(spec, pool, Xt, yt, oracle, truth)


def shifted(spec: EnvironmentSpec, seed, mean_shift=None, scale=None, nuisance_shift=None,
            nuisance_scale=None, tail_weight=None, label_drift=None, name=None):
    """A copy of ``spec`` with the given shift components replaced or added."""
    off = spec.offset.copy()
    k = spec.informative
    if mean_shift is not None:
        off[:k] += np.asarray(mean_shift, dtype=float)
    if nuisance_shift is not None:
        off[k:] += np.asarray(nuisance_shift, dtype=float)
    kw = dict(seed=seed, mean_offset=tuple(float(v) for v in off))
    for key, val in (("scale", scale), ("nuisance_scale", nuisance_scale),
                     ("tail_weight", tail_weight), ("label_drift", label_drift), ("name", name)):
        if val is not None:
            kw[key] = val
    return replace(spec, **kw)
