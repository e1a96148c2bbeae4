import numpy as np
import pytest
from hypothesis import given, strategies as st

from stateadapt import transformer as tr
from stateadapt.errors import FitError, InputError
from stateadapt.state_math import KernelSpec, StateSet, mmd


def shifted_pair(seed, n=200, shift=3.0, d=2):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(n, d))
    T = rng.normal(size=(n, d))
    T[:, 0] += shift
    return S, T


def test_fit_reduces_discrepancy():
    S, T = shifted_pair(0)
    model = tr.fit_transform(S, T)
    assert tr.aligned_mmd(model, S, T) < 0.5 * mmd(S, T)


def test_identical_sets_align_exactly():
    S, _ = shifted_pair(1)
    model = tr.fit_transform(S, S)
    assert tr.aligned_mmd(model, S, S) <= 1e-6


def test_coefficients_solve_generalized_eigenproblem():
    # independent oracle: dense formulation with explicit H and L
    S, T = shifted_pair(2, n=30)
    model = tr.fit_transform(S, T, latent_dims=3, mu=0.7)
    X = np.vstack([S, T])
    n, ns = len(X), len(S)
    K = np.exp(-((X[:, None] - X[None]) ** 2).sum(-1) / (2 * model.kernel.bandwidth ** 2))
    e = np.r_[np.full(ns, 1 / ns), np.full(n - ns, -1 / (n - ns))]
    L = np.outer(e, e)
    H = np.eye(n) - np.ones((n, n)) / n
    A = K @ H @ K
    B = K @ L @ K + 0.7 * np.eye(n)
    for j in range(3):
        w, lam = model.coefficients[:, j], model.eigenvalues[j]
        np.testing.assert_allclose(A @ w, lam * (B @ w), rtol=1e-6, atol=1e-8)
    # leading eigenvalues, descending
    assert np.all(np.diff(model.eigenvalues) <= 1e-12)
    top = np.sort(np.real(np.linalg.eigvals(np.linalg.solve(B, A))))[::-1][:3]
    np.testing.assert_allclose(model.eigenvalues, top, rtol=1e-6)


def test_project_statesets_keep_metadata():
    S, T = shifted_pair(3, n=40)
    model = tr.fit_transform(S, T, latent_dims=4)
    ss = StateSet(S, labels=np.arange(40.0), costs=np.ones(40), ids=np.arange(40) + 7)
    Z = tr.project(model, ss)
    assert Z.X.shape == (40, 4)
    np.testing.assert_array_equal(Z.ids, ss.ids)
    np.testing.assert_array_equal(Z.labels, ss.labels)
    np.testing.assert_array_equal(tr.project(model, S), Z.X)
    np.testing.assert_allclose(model.embedding(), tr.project(model, np.vstack([S, T])))


def test_input_validation():
    S, T = shifted_pair(4, n=10)
    with pytest.raises(InputError):
        tr.fit_transform(S, T[:, :1])
    with pytest.raises(InputError):
        tr.fit_transform(S, T, mu=0)
    with pytest.raises(InputError):
        tr.fit_transform(S, T, latent_dims=50)
    model = tr.fit_transform(S, T)
    with pytest.raises(InputError):
        tr.project(model, np.zeros((3, 5)))
    with pytest.raises(InputError):
        tr.partition_regimes(np.zeros((3, 2)), 4)


def test_fit_error_carries_diagnostics(monkeypatch):
    def broken(*a, **k):
        raise np.linalg.LinAlgError("singular")
    monkeypatch.setattr(tr.scipy.linalg, "eigh", broken)
    S, T = shifted_pair(5, n=10)
    with pytest.raises(FitError) as info:
        tr.fit_transform(S, T)
    assert set(info.value.diagnostics) == {"cond_KHK", "cond_KLK_mu"}


def test_map_to_source_lands_on_source_rows():
    S, T = shifted_pair(6, n=100)
    model = tr.fit_transform(S, T)
    mapped = tr.map_to_source(model, T, k=1)
    # k=1 returns actual source rows
    src = {tuple(r) for r in S}
    assert all(tuple(r) in src for r in mapped)
    mapped5 = tr.map_to_source(model, T, k=5)
    assert mapped5.shape == T.shape
    # an average of source rows stays inside the source bounding box
    assert np.all(mapped5 >= S.min(0) - 1e-12) and np.all(mapped5 <= S.max(0) + 1e-12)


@given(st.integers(0, 1000), st.integers(1, 5))
def test_partition_regimes_is_nearest_centroid(seed, R):
    Z = np.random.default_rng(seed).normal(size=(40, 2))
    parts = tr.partition_regimes(Z, R, seed=seed)
    assert len(parts) == R
    members = np.concatenate([m for _, m in parts])
    assert sorted(members.tolist()) == list(range(40))
    C = np.stack([c for c, _ in parts])
    for r, (_, m) in enumerate(parts):
        if len(m):
            d = ((Z[m, None] - C[None]) ** 2).sum(-1)
            assert np.all(d[:, r] <= d.min(axis=1) + 1e-9)


def test_regime_aware_single_regime_is_global():
    S, T = shifted_pair(7, n=80)
    rm = tr.fit_regime_aware(S, T, R=1)
    np.testing.assert_array_equal(tr.apply_regime_aware(rm, T),
                                  tr.project(rm.global_transform, T))
    np.testing.assert_array_equal(tr.map_to_source_regime(rm, T),
                                  tr.map_to_source(rm.global_transform, T))


def test_regime_aware_two_clusters():
    rng = np.random.default_rng(8)
    S = np.vstack([rng.normal(-4, 0.5, (80, 2)), rng.normal(4, 0.5, (80, 2))])
    T = S + np.array([0.5, 0.0]) + 0.1 * rng.normal(size=S.shape)
    rm = tr.fit_regime_aware(S, T, R=2, seed=1)
    assert rm.n_regimes == 2
    assert sorted(rm.matched) == [0, 1]  # each target regime finds its own source regime
    out = tr.apply_regime_aware(rm, StateSet(T))
    assert out.X.shape == (160, rm.latent_dims)
    with pytest.raises(InputError):
        tr.apply_regime_aware(rm, np.zeros((2, 3)))


@pytest.mark.parametrize("R", [1, 3])
def test_serialization_roundtrip_is_bitwise(R):
    S, T = shifted_pair(9, n=60)
    rm = tr.fit_regime_aware(S, T, R=R, seed=2)
    blob = tr.to_bytes(rm)
    assert blob[:4] == b"EMA1"
    back = tr.from_bytes(blob)
    assert tr.to_bytes(back) == blob
    np.testing.assert_array_equal(tr.apply_regime_aware(back, T), tr.apply_regime_aware(rm, T))
    g = tr.from_bytes(tr.to_bytes(rm.global_transform))
    np.testing.assert_array_equal(tr.project(g, T), tr.project(rm.global_transform, T))
    assert tr.to_text(rm).startswith("format=EMA1")


def test_from_bytes_rejects_garbage():
    S, T = shifted_pair(10, n=10)
    blob = tr.to_bytes(tr.fit_transform(S, T))
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob[:4] + b"\x09\x00\x01" + blob[7:]):
        with pytest.raises(InputError):
            tr.from_bytes(bad)
    with pytest.raises(InputError):
        tr.to_bytes(object())


def test_models_are_immutable():
    S, T = shifted_pair(11, n=10)
    m = tr.fit_transform(S, T)
    with pytest.raises(ValueError):
        m.coefficients[0, 0] = 1.0
    assert m.reference.flags.c_contiguous
