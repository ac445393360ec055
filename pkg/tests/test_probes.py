import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.linear_model import Ridge

from trajgeom import probes
from trajgeom.archive import ResultTable
from trajgeom.lencorr import BootstrapSpec
from trajgeom.probes import DifficultyDirection, ProbeDataset, ProbeError, SteeringRequest


def dataset(X, y):
    n = X.shape[0]
    return ProbeDataset([f"i{k:03d}" for k in range(n)], X, y, np.zeros(n), False)


def planted(n=200, dim=32, noise=0.3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    return X, X @ w + noise * rng.standard_normal(n), w


def test_ridge_matches_sklearn():
    X, y, _ = planted(80, 10)
    X[:, 3] *= 50.0
    probe = probes.fit_ridge_cv(dataset(X, y), lambda_grid=(10.0,))
    Z = (X - X.mean(0)) / X.std(0)
    ref = Ridge(alpha=10.0).fit(Z, y)
    np.testing.assert_allclose(probe.weights, ref.coef_, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(probe.predict(X), ref.predict(Z), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
def test_closed_form_loo_matches_explicit_refits(lam):
    X, y, _ = planted(40, 8, 1.0, seed=1)
    Z = (X - X.mean(0)) / X.std(0)
    errs = []
    for i in range(len(y)):
        keep = np.arange(len(y)) != i
        model = Ridge(alpha=lam).fit(Z[keep], y[keep])
        errs.append((y[i] - model.predict(Z[i : i + 1])[0]) ** 2)
    assert probes.loo_errors(Z, y, [lam])[0] == pytest.approx(np.mean(errs), rel=1e-9)


def test_planted_signal_and_null():
    X, y, w = planted()
    probe = probes.fit_ridge_cv(dataset(X, y))
    assert probe.cv_r2 > 0.8
    direction = probes.extract_direction(probe, X)
    assert abs(direction.unit_vector @ w) > 0.95
    rng = np.random.default_rng(5)
    null = probes.fit_ridge_cv(dataset(X, rng.standard_normal(200)))
    assert null.cv_r2 < 0.05


def test_constant_features_are_zeroed():
    X, y, _ = planted(60, 5)
    X[:, 2] = 3.0
    probe = probes.fit_ridge_cv(dataset(X, y))
    assert probe.weights[2] == 0.0 and not probe.retained[2]
    with pytest.raises(ProbeError):
        probes.fit_ridge_cv(dataset(np.ones((20, 3)), np.arange(20.0)))


def test_probe_input_errors():
    X, y, _ = planted(10, 3)
    with pytest.raises(ProbeError):
        probes.fit_ridge_cv(dataset(X, y), folds=10)
    with pytest.raises(probes.ConstantInputError):
        probes.fit_ridge_cv(dataset(X, np.ones(10)))
    with pytest.raises(ProbeError):
        ProbeDataset(["a"], np.zeros((2, 3)), np.zeros(2), np.zeros(2))
    with pytest.raises(ProbeError):
        probes.fit_ridge_cv(dataset(X, y), lambda_grid=(0.0, 1.0))


def test_position_indices():
    assert probes.position_indices(100) == [0, 11, 22, 33, 44, 55, 66, 77, 88, 99]
    assert probes.position_indices(3, 5) == [0, 0, 1, 1, 2]
    assert probes.position_indices(7, 1) == [0]


def test_prepare_dataset_averages_runs_and_residualizes():
    runs = {
        "a": [np.arange(20.0).reshape(10, 2), np.arange(20.0).reshape(10, 2) + 2],
        "b": [np.ones((4, 2))],
        "c": [np.zeros((0, 2))],
        "d": [np.full((5, 2), 7.0)],
    }
    diffs = {"a": 1.0, "b": 2.0, "c": 0.0, "d": 3.0}
    lens = {"a": 1.0, "b": 2.0, "c": 3.0, "d": 5.0}
    ds = probes.prepare_dataset(runs, diffs, lens, position=9, residualize=False)
    assert ds.item_ids == ["a", "b", "d"] and ds.dropped == 1
    np.testing.assert_allclose(ds.X[0], [19.0, 20.0])
    res = probes.prepare_dataset(runs, diffs, lens, position=9)
    xc = ds.length_covariate - ds.length_covariate.mean()
    assert abs(res.y @ xc) < 1e-12 and np.abs(res.X.T @ xc).max() < 1e-10
    with pytest.raises(ProbeError):
        probes.prepare_dataset(runs, diffs, lens, position=10)


unit_vectors = arrays(np.float64, 6, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1)
states = arrays(np.float64, (5, 6), elements=st.floats(-100, 100))


@given(states, unit_vectors)
def test_nullspace_projection_idempotent_and_orthogonal(h, d):
    d = d / np.linalg.norm(d)
    once = probes.nullspace_project(h, d)
    np.testing.assert_allclose(probes.nullspace_project(once, d), once, atol=1e-9)
    np.testing.assert_allclose(once @ d, 0.0, atol=1e-9)


@given(states, unit_vectors, st.floats(-5, 5), st.floats(0, 10))
def test_steering_shifts_projection(h, d, alpha, sd):
    direction = DifficultyDirection(d / np.linalg.norm(d), sd)
    moved = probes.apply_steering(h, SteeringRequest(direction, alpha))
    shift = (moved - h) @ direction.unit_vector
    np.testing.assert_allclose(shift, alpha * sd, atol=1e-9)
    zero = probes.apply_steering(h, SteeringRequest(direction, 0.0))
    np.testing.assert_array_equal(zero, h)


def test_direction_and_steering_validation():
    with pytest.raises(ProbeError):
        DifficultyDirection(np.array([1.0, 1.0]), 1.0)
    with pytest.raises(ProbeError):
        SteeringRequest(DifficultyDirection(np.array([1.0, 0.0]), 1.0), float("nan"))
    with pytest.raises(ProbeError):
        probes.nullspace_project(np.zeros((2, 3)), np.array([1.0, 0.0]))


def test_random_directions_are_unit():
    r = probes.random_directions(16, 50, 3)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1.0)
    np.testing.assert_array_equal(r, probes.random_directions(16, 50, 3))


def test_nullspace_control_flags_the_true_direction():
    X, y, w = planted(300, 16, 0.1, seed=2)
    from trajgeom.stats import spearman

    def coupling(d):
        Xp = X if d is None else probes.nullspace_project(X, d)
        return spearman(Xp @ w + 0.05 * X[:, 0], y)

    out = probes.nullspace_control(coupling, w, n_random=50, seed=0)
    assert out["delta"] < -0.3 and out["p"] <= 1 / 51 + 1e-12
    assert np.abs(out["random_deltas"]).max() < abs(out["delta"])


def test_inlp_erases_planted_signal():
    X, y, _ = planted(250, 12, 0.3, seed=3)
    res = probes.inlp_erase(dataset(X, y))
    assert res.r2_history[-1] < 0.02 and res.iterations >= 1
    P = res.projector
    np.testing.assert_allclose(P @ P, P, atol=1e-10)
    np.testing.assert_allclose(P, P.T, atol=1e-12)
    D = np.array(res.directions)
    np.testing.assert_allclose(D @ D.T, np.eye(len(D)), atol=1e-10)
    assert probes.fit_ridge_cv(dataset(X @ P, y)).cv_r2 < 0.02


def test_inlp_null_needs_no_iterations():
    rng = np.random.default_rng(4)
    res = probes.inlp_erase(dataset(rng.standard_normal((100, 5)), rng.standard_normal(100)))
    assert res.iterations == 0 and res.directions == []


def test_vd_mediation_extremes():
    rng = np.random.default_rng(6)
    t = rng.standard_normal(300)
    o = 0.8 * t + 0.5 * rng.standard_normal(300)
    full = probes.vd_mediation(t, t, o, BootstrapSpec(200, 0))
    assert full.vd_ratio == pytest.approx(1.0) and full.proportion_mediated == pytest.approx(1.0)
    noise = probes.vd_mediation(rng.standard_normal(300), t, o, BootstrapSpec(200, 0))
    assert noise.vd_ratio < 0.05 and abs(noise.proportion_mediated) < 0.1
    assert noise.ci[0] <= noise.vd_ratio <= noise.ci[1]


def test_heatmap_and_peak_cell():
    X, y, _ = planted(60, 4, 0.2, seed=7)
    rng = np.random.default_rng(8)
    cells = {(2, 0): dataset(X, y), (1, 1): dataset(rng.standard_normal((60, 4)), y)}
    table = probes.probe_heatmap(cells, n_perm=9, jobs=2)
    recs = table.to_records()
    assert [(r["layer"], r["position"]) for r in recs] == [(1, 1), (2, 0)]
    assert recs[1]["perm_p"] == pytest.approx(0.1)
    assert probes.peak_cell(table) == (2, 0)
    tie = ResultTable(["layer", "position", "cv_r2"], [(3, 0, 0.5), (1, 4, 0.5), (1, 2, 0.5)])
    assert probes.peak_cell(tie) == (1, 2)
