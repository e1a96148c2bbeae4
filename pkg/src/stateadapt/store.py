"""Repository of environment states: model blobs plus a small sample subset.

Eviction is decay-aware LFU: every access adds one to a frequency that
decays geometrically per day. When the LFU candidate has a near-duplicate
(MMD below a threshold) the less accurate of the two goes instead.

One writer at a time (an ``RLock``); readers get copies.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .errors import BackPressureError, InputError, NotFoundError
from .matching import (STORE_EPSILON, Candidate, MatchResult, MedoidIndex,
                       match_source)
from .state_math import DEFAULT_DELTA, StateSet, dkw_sample_size, subsample

log = logging.getLogger(__name__)

INDEX_FORMAT = "stateadapt-store-index/1"
META_FORMAT = "stateadapt-entry-meta/1"
SAMPLES_FORMAT = "stateadapt-samples-csv/1"
MODEL_TAG = b"SAMODEL1"
PUBLIC_TAG = "public"


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    clamp: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise InputError("sigma must be nonnegative")
        if not self.clamp > 0:
            raise InputError("clamp must be positive")


@dataclass
class StorePolicy:
    capacity: int = 256
    decay_factor: float = 0.9
    similarity_threshold: Optional[float] = None  # None: 25th percentile of pairwise MMD
    sample_limit: int = field(default_factory=lambda: dkw_sample_size(STORE_EPSILON, DEFAULT_DELTA))
    noise: Optional[NoiseSpec] = None
    seed: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise InputError("capacity must be >= 1")
        if not 0 < self.decay_factor < 1:
            raise InputError("decay_factor must lie in (0, 1)")


@dataclass
class StateEntry:
    env_id: str
    model_blob: bytes
    samples: StateSet
    accuracy: float = 0.0
    decayed_freq: float = 1.0
    last_access: float = 0.0
    created: float = 0.0
    org_tag: str = PUBLIC_TAG
    medoid_cluster: int = 0
    version: int = 1
    order: int = 0
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def key(self):
        return f"{self.env_id}@v{self.version}"

    @property
    def blob_size(self):
        return len(self.model_blob)


def add_privacy_noise(samples: StateSet, spec: NoiseSpec, seed=0) -> StateSet:
    """Add zero-mean Gaussian noise, each vector rescaled to norm <= ``clamp``.

    ``sigma == 0`` returns ``samples`` untouched.
    """
    if spec.sigma == 0:
        return samples
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, spec.sigma, size=samples.X.shape)
    norms = np.linalg.norm(eta, axis=1, keepdims=True)
    scale = np.where(norms > spec.clamp, spec.clamp / np.maximum(norms, 1e-300), 1.0)
    return samples.with_features(samples.X + eta * scale)


def visible_to(org_tag, caller_tag):
    if caller_tag is None:
        return True
    return org_tag == caller_tag or org_tag == PUBLIC_TAG


_SAFE = re.compile(r"^[A-Za-z0-9_.\-]+$")


class StateStore:
    """In-memory store with optional write-through persistence under ``root``."""

    def __init__(self, policy: Optional[StorePolicy] = None, root=None):
        self.policy = policy or StorePolicy()
        self.root = None if root is None else os.fspath(root)
        self._lock = threading.RLock()
        self._entries: Dict[str, StateEntry] = {}
        self._latest: Dict[str, str] = {}  # env_id -> key of current version
        self._order = 0
        self.index = MedoidIndex(seed=self.policy.seed)
        self._tau = None
        self.evictions: List[str] = []
        if self.root is not None:
            os.makedirs(self.root, exist_ok=True)
            self._load()

    # -- basic accessors ---------------------------------------------------

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def __contains__(self, env_id):
        with self._lock:
            return env_id in self._latest

    def get(self, env_id) -> StateEntry:
        with self._lock:
            key = self._latest.get(env_id)
            if key is None:
                raise NotFoundError(f"unknown env_id {env_id!r}")
            return _copy_entry(self._entries[key])

    def entries(self) -> List[StateEntry]:
        """Copies of every stored version, oldest first."""
        with self._lock:
            return [_copy_entry(e) for e in sorted(self._entries.values(), key=lambda e: e.order)]

    def store_bytes(self):
        with self._lock:
            return sum(e.blob_size + e.samples.X.nbytes for e in self._entries.values())

    @property
    def similarity_threshold(self):
        if self.policy.similarity_threshold is not None:
            return self.policy.similarity_threshold
        return self._tau

    # -- registration --------------------------------------------------------

    def register(self, entry: StateEntry, now=0.0) -> str:
        """Persist ``entry``; an existing env_id gets a new version.

        Samples are capped at ``policy.sample_limit`` and noised per
        ``policy.noise`` before they are stored.
        """
        if not isinstance(entry.model_blob, (bytes, bytearray)):
            raise InputError("model_blob must be bytes")
        if not _SAFE.match(entry.env_id):
            raise InputError(f"env_id {entry.env_id!r} must match {_SAFE.pattern}")
        with self._lock:
            samples = subsample(entry.samples, self.policy.sample_limit, seed=self.policy.seed)
            if self.policy.noise is not None:
                samples = add_privacy_noise(samples, self.policy.noise,
                                            seed=self.policy.seed + self._order)
            prev = self._latest.get(entry.env_id)
            version = self._entries[prev].version + 1 if prev else 1
            self._order += 1
            new = replace(entry, model_blob=bytes(entry.model_blob), samples=samples,
                          decayed_freq=1.0, last_access=float(now), created=float(now),
                          version=version, order=self._order, meta=dict(entry.meta))
            if prev is not None:
                self.index.remove(prev)
            self._entries[new.key] = new
            self._latest[new.env_id] = new.key
            self.index.add(new.key, samples.X)
            self._refresh_clusters()
            self._persist(new)
            while len(self._entries) > self.policy.capacity:
                self._evict_locked(protect=new.key)
            self._write_index()
            return new.env_id

    def _refresh_clusters(self):
        for key, e in self._entries.items():
            if key in self.index.keys:
                e.medoid_cluster = self.index.cluster_of(key)
        D = self.index.pairwise()
        iu = np.triu_indices(len(D), 1)
        self._tau = float(np.percentile(D[iu], 25)) if len(iu[0]) else None

    # -- frequency bookkeeping -------------------------------------------------

    def _decay(self, e: StateEntry, now):
        days = max(float(now) - e.last_access, 0.0)
        e.decayed_freq *= self.policy.decay_factor ** days
        e.last_access = max(float(now), e.last_access)

    def touch(self, env_id, now) -> float:
        """Record one access: decay to ``now`` then add one."""
        with self._lock:
            key = self._latest.get(env_id)
            if key is None:
                raise NotFoundError(f"unknown env_id {env_id!r}")
            e = self._entries[key]
            self._decay(e, now)
            e.decayed_freq += 1.0
            self._persist_meta(e)
            return e.decayed_freq

    def decay_all(self, now):
        with self._lock:
            for e in self._entries.values():
                self._decay(e, now)

    # -- eviction ----------------------------------------------------------------

    def evict(self, now=None) -> str:
        """Evict one entry and return its env_id (see module docstring)."""
        with self._lock:
            if not self._entries:
                raise NotFoundError("store is empty")
            if now is not None:
                self.decay_all(now)
            return self._evict_locked()

    def _evict_locked(self, protect=None) -> str:
        pool = [e for k, e in self._entries.items() if k != protect]
        if not pool:
            raise BackPressureError("nothing can be evicted")
        stale = [e for e in pool if self._latest.get(e.env_id) != e.key]
        if stale:
            victim = min(stale, key=lambda e: e.order)
        else:
            cand = min(pool, key=lambda e: (e.decayed_freq, e.order))
            victim = cand
            tau = self.similarity_threshold
            others = [e for e in pool if e.key != cand.key]
            if tau is not None and others:
                d = [self.index.pairwise([cand.key, o.key])[0, 1] for o in others]
                j = int(np.argmin(d))
                if d[j] < tau and others[j].accuracy < cand.accuracy:
                    victim = others[j]
        self._remove(victim)
        self.evictions.append(victim.env_id)
        return victim.env_id

    def _remove(self, e: StateEntry):
        del self._entries[e.key]
        self.index.remove(e.key)
        if self._latest.get(e.env_id) == e.key:
            del self._latest[e.env_id]
        self._refresh_clusters()
        if self.root is not None:
            shutil.rmtree(os.path.join(self.root, e.key), ignore_errors=True)
            self._write_index()

    # -- lookup / matching -----------------------------------------------------

    def lookup_visible(self, policy_tag=None) -> List[StateEntry]:
        """Current versions visible to ``policy_tag`` (None sees everything)."""
        with self._lock:
            out = [self._entries[k] for k in self._latest.values()]
            return [_copy_entry(e) for e in sorted(out, key=lambda e: e.order)
                    if visible_to(e.org_tag, policy_tag)]

    def match(self, target, policy_tag=None, seed=0, epsilon=STORE_EPSILON,
              use_clusters=True) -> MatchResult:
        """Clustered MMD matching over the entries visible to ``policy_tag``."""
        with self._lock:
            visible = self.lookup_visible(policy_tag)
            if not visible:
                raise NotFoundError("no visible repository entry")
            pos = {e.key: i for i, e in enumerate(visible)}
            cands = [Candidate(e.env_id, e.samples.X, e.order, e.medoid_cluster)
                     for e in visible]
            clusters = None
            if use_clusters:
                clusters = {}
                for med, members in self.index.clusters().items():
                    vis = [pos[m] for m in members if m in pos]
                    if not vis:
                        continue
                    head = pos.get(med, vis[0])
                    clusters[head] = vis
        return match_source(target, cands, clusters, epsilon=epsilon, seed=seed)

    # -- persistence -------------------------------------------------------------

    def _persist(self, e: StateEntry):
        if self.root is None:
            return
        d = os.path.join(self.root, e.key)
        os.makedirs(d, exist_ok=True)
        _atomic_write(os.path.join(d, "samples.csv"),
                      (f"# format={SAMPLES_FORMAT}\n" + e.samples.to_csv()).encode())
        _atomic_write(os.path.join(d, "model.bin"), MODEL_TAG + e.model_blob)
        self._persist_meta(e)

    def _persist_meta(self, e: StateEntry):
        if self.root is None:
            return
        lines = [f"format={META_FORMAT}"]
        fields = dict(env_id=e.env_id, version=e.version, order=e.order,
                      accuracy=repr(float(e.accuracy)), decayed_freq=repr(e.decayed_freq),
                      last_access=repr(e.last_access), created=repr(e.created),
                      org_tag=e.org_tag, blob_size=e.blob_size)
        lines += [f"{k}={v}" for k, v in fields.items()]
        lines += [f"meta.{k}={v}" for k, v in sorted(e.meta.items())]
        _atomic_write(os.path.join(self.root, e.key, "meta.txt"),
                      ("\n".join(lines) + "\n").encode())

    def _write_index(self):
        if self.root is None:
            return
        lines = [f"format={INDEX_FORMAT}"]
        lines += [e.key for e in sorted(self._entries.values(), key=lambda e: e.order)]
        _atomic_write(os.path.join(self.root, "index.txt"), ("\n".join(lines) + "\n").encode())

    def _load(self):
        keys = None
        idx = os.path.join(self.root, "index.txt")
        if os.path.exists(idx):
            with open(idx) as fh:
                lines = fh.read().splitlines()
            if lines and lines[0] == f"format={INDEX_FORMAT}":
                keys = [ln for ln in lines[1:] if ln]
            else:
                log.warning("store index has an unknown format; rebuilding from directories")
        if keys is None or any(not os.path.isdir(os.path.join(self.root, k)) for k in keys):
            keys = [k for k in os.listdir(self.root)
                    if os.path.isfile(os.path.join(self.root, k, "meta.txt"))]
        loaded = []
        for key in keys:
            try:
                loaded.append(_read_entry(os.path.join(self.root, key)))
            except (OSError, ValueError) as exc:
                raise InputError(f"corrupt store entry {key}: {exc}") from exc
        loaded.sort(key=lambda e: e.order)
        for e in loaded:
            self._entries[e.key] = e
            cur = self._latest.get(e.env_id)
            if cur is None or self._entries[cur].version < e.version:
                self._latest[e.env_id] = e.key
            self._order = max(self._order, e.order)
            self.index.add(e.key, e.samples.X)
        self._refresh_clusters()
        self._write_index()


def _copy_entry(e: StateEntry) -> StateEntry:
    return replace(e, samples=e.samples.with_features(e.samples.X.copy()), meta=dict(e.meta))


def _atomic_write(path, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _read_entry(d) -> StateEntry:
    with open(os.path.join(d, "meta.txt")) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"format={META_FORMAT}":
        raise ValueError("bad meta format tag")
    kv = dict(ln.split("=", 1) for ln in lines[1:] if ln)
    with open(os.path.join(d, "samples.csv")) as fh:
        text = fh.read()
    first, _, body = text.partition("\n")
    if first != f"# format={SAMPLES_FORMAT}":
        raise ValueError("bad samples format tag")
    with open(os.path.join(d, "model.bin"), "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MODEL_TAG):
        raise ValueError("bad model blob tag")
    blob = raw[len(MODEL_TAG):]
    if int(kv["blob_size"]) != len(blob):
        raise ValueError("model blob size mismatch")
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return StateEntry(env_id=kv["env_id"], model_blob=blob,
                      samples=StateSet.from_csv(body, env_id=kv["env_id"]),
                      accuracy=float(kv["accuracy"]), decayed_freq=float(kv["decayed_freq"]),
                      last_access=float(kv["last_access"]), created=float(kv["created"]),
                      org_tag=kv["org_tag"], version=int(kv["version"]),
                      order=int(kv["order"]), meta=meta)

