"""Ridge difficulty probes, direction extraction, nullspace erasure and steering.

Features are standardized before fitting and the intercept is never
penalized. The ridge penalty is chosen from a fixed grid by the closed-form
leave-one-out error; generalization is reported as pooled out-of-fold R^2
over item-level folds, with the penalty re-selected inside each training
fold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from trajgeom.archive import ResultTable
from trajgeom.stats import ConstantInputError, StatsError, ols_residualize, percentile_bootstrap, r_squared

LAMBDA_GRID = (1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3, 1e4)
N_POSITIONS = 10


class ProbeError(ValueError):
    pass


class InlpStalledError(ProbeError):
    def __init__(self, history):
        super().__init__(f"INLP stalled: R^2 did not decrease over three iterations {history[-3:]}")
        self.history = list(history)


@dataclass
class ProbeDataset:
    item_ids: list[str]
    X: np.ndarray
    y: np.ndarray
    length_covariate: np.ndarray
    residualized: bool = False
    dropped: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.length_covariate = np.asarray(self.length_covariate, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ProbeError("X must be a 2-D matrix with at least one feature")
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.length_covariate.shape != (n,) or len(self.item_ids) != n:
            raise ProbeError("row counts of X, y, length covariate and item ids disagree")

    def with_features(self, X: np.ndarray) -> "ProbeDataset":
        return replace(self, X=X)


@dataclass
class RidgeProbe:
    weights: np.ndarray  # standardized space; zero for constant features
    intercept: float
    feature_means: np.ndarray
    feature_sds: np.ndarray
    lam: float
    cv_r2: float
    retained: np.ndarray = field(default=None)

    def predict(self, X) -> np.ndarray:
        z = (np.asarray(X, dtype=np.float64) - self.feature_means) / self.feature_sds
        return z @ self.weights + self.intercept


@dataclass
class DifficultyDirection:
    unit_vector: np.ndarray
    projection_sd: float

    def __post_init__(self):
        self.unit_vector = np.asarray(self.unit_vector, dtype=np.float64)
        if abs(np.linalg.norm(self.unit_vector) - 1.0) > 1e-10:
            raise ProbeError("direction must have unit norm")
        if self.projection_sd < 0:
            raise ProbeError("projection sd must be nonnegative")


@dataclass(frozen=True)
class SteeringRequest:
    direction: DifficultyDirection
    coefficient: float
    layer_index: int = 0

    def __post_init__(self):
        if not math.isfinite(self.coefficient):
            raise ProbeError("steering coefficient must be finite")


@dataclass
class InlpResult:
    projector: np.ndarray
    iterations: int
    r2_history: list[float]
    directions: list[np.ndarray]


@dataclass
class VdResult:
    vd_ratio: float
    ci: tuple[float, float]
    proportion_mediated: float


# --------------------------------------------------------------------------- datasets


def position_indices(n_states: int, n_positions: int = N_POSITIONS) -> list[int]:
    """Evenly spaced state indices including the first and last state."""
    if n_states < 1:
        raise ProbeError("need at least one state")
    if n_positions == 1:
        return [0]
    return [(j * (n_states - 1)) // (n_positions - 1) for j in range(n_positions)]


def prepare_dataset(
    runs_by_item: Mapping[str, Sequence[np.ndarray]],
    difficulties: Mapping[str, float],
    log_lengths: Mapping[str, float],
    position: int,
    n_positions: int = N_POSITIONS,
    residualize: bool = True,
) -> ProbeDataset:
    """Run-averaged hidden states at one grid position, one row per item.

    ``runs_by_item`` maps an item to its per-run ``(states, dim)`` arrays at
    a single layer. Each run contributes the state at grid ``position`` of
    its own evenly spaced grid. Items with no usable run are dropped. With
    ``residualize`` the log length is OLS-removed from every feature column
    and from the target.
    """
    if not 0 <= position < n_positions:
        raise ProbeError(f"position {position} outside grid of {n_positions}")
    ids, rows, y, lens = [], [], [], []
    dropped = 0
    for item in sorted(runs_by_item):
        if item not in difficulties or item not in log_lengths:
            dropped += 1
            continue
        picked = []
        for states in runs_by_item[item]:
            states = np.asarray(states, dtype=np.float64)
            if states.ndim != 2 or states.shape[0] == 0:
                continue
            picked.append(states[position_indices(states.shape[0], n_positions)[position]])
        if not picked:
            dropped += 1
            continue
        ids.append(item)
        rows.append(np.mean(picked, axis=0))
        y.append(float(difficulties[item]))
        lens.append(float(log_lengths[item]))
    if not rows:
        raise ProbeError("no item has a usable run")
    X = np.vstack(rows)
    y = np.asarray(y)
    lens = np.asarray(lens)
    if residualize:
        X = ols_residualize(X, lens)
        y = ols_residualize(y, lens)
    return ProbeDataset(ids, X, y, lens, residualize, dropped)


# --------------------------------------------------------------------------- ridge


def _standardize(X: np.ndarray):
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    retained = sds > 1e-12 * max(1.0, float(np.abs(X).max(initial=0.0)))
    if not retained.any():
        raise ProbeError("all features are constant")
    safe = np.where(retained, sds, 1.0)
    Z = (X - means) / safe
    Z[:, ~retained] = 0.0
    return Z, means, safe, retained


def loo_errors(Z: np.ndarray, y: np.ndarray, lambdas: Sequence[float]) -> np.ndarray:
    """Closed-form leave-one-out mean squared error per penalty.

    ``Z`` must have centred columns; the unpenalized intercept then adds
    ``1/n`` to every leverage.
    """
    n = Z.shape[0]
    yc = y - y.mean()
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    s2 = s**2
    uty = U.T @ yc
    out = np.empty(len(lambdas))
    for k, lam in enumerate(lambdas):
        shrink = s2 / (s2 + lam)
        fitted = U @ (shrink * uty)
        lev = (U**2) @ shrink + 1.0 / n
        resid = (yc - fitted) / (1.0 - lev)
        out[k] = float(np.mean(resid**2))
    return out


def _solve(Z: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    yc = y - y.mean()
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    return Vt.T @ ((s / (s**2 + lam)) * (U.T @ yc))


def _select_lambda(Z, y, grid) -> float:
    errs = loo_errors(Z, y, grid)
    return float(grid[int(np.argmin(errs))])


def _fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        ids[chunk] = f
    return ids


def _fit_fixed(X: np.ndarray, y: np.ndarray, grid) -> tuple[np.ndarray, float, np.ndarray, np.ndarray, np.ndarray, float]:
    Z, means, sds, retained = _standardize(X)
    lam = _select_lambda(Z, y, grid)
    w = _solve(Z, y, lam)
    w[~retained] = 0.0
    return w, float(y.mean()), means, sds, retained, lam


def out_of_fold_r2(X: np.ndarray, y: np.ndarray, grid=LAMBDA_GRID, folds: int = 5, seed: int = 0) -> tuple[float, np.ndarray]:
    """Pooled out-of-fold R^2 and the out-of-fold predictions."""
    n = X.shape[0]
    fold_of = _fold_ids(n, folds, seed)
    pred = np.empty(n)
    for f in range(folds):
        test = fold_of == f
        train = ~test
        w, b0, means, sds, _, _ = _fit_fixed(X[train], y[train], grid)
        pred[test] = ((X[test] - means) / sds) @ w + b0
    sst = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float(((y - pred) ** 2).sum()) / sst, pred


def fit_ridge_cv(dataset: ProbeDataset, lambda_grid=LAMBDA_GRID, folds: int = 5, seed: int = 0) -> RidgeProbe:
    X, y = dataset.X, dataset.y
    n = X.shape[0]
    if not 2 <= folds < n:
        raise ProbeError(f"need items > folds >= 2 (items={n}, folds={folds})")
    if np.ptp(y) == 0.0:
        raise ConstantInputError("difficulty target has zero variance")
    grid = tuple(sorted(float(v) for v in lambda_grid))
    if any(v <= 0 for v in grid):
        raise ProbeError("ridge penalties must be positive")
    w, b0, means, sds, retained, lam = _fit_fixed(X, y, grid)
    cv_r2, _ = out_of_fold_r2(X, y, grid, folds, seed)
    return RidgeProbe(w, b0, means, sds, lam, cv_r2, retained)


# --------------------------------------------------------------------------- directions


def extract_direction(probe: RidgeProbe, X_train) -> DifficultyDirection:
    """Unit direction ``(w / s) / |w / s|`` and the sd of the training projections."""
    raw = probe.weights / probe.feature_sds
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        raise ProbeError("probe has a zero weight vector")
    d = raw / norm
    proj = np.asarray(X_train, dtype=np.float64) @ d
    return DifficultyDirection(d, float(np.std(proj, ddof=1)) if proj.size > 1 else 0.0)


def _unit(direction) -> np.ndarray:
    d = direction.unit_vector if isinstance(direction, DifficultyDirection) else np.asarray(direction, dtype=np.float64)
    return d


def nullspace_project(states, direction) -> np.ndarray:
    """``h - (h . d) d`` for every row of ``states``."""
    h = np.asarray(states, dtype=np.float64)
    d = _unit(direction)
    if h.shape[-1] != d.shape[0]:
        raise ProbeError(f"dimension mismatch: states {h.shape[-1]} vs direction {d.shape[0]}")
    return h - np.multiply.outer(h @ d, d)


def apply_steering(states, request: SteeringRequest) -> np.ndarray:
    """``h + alpha * sigma_proj * d`` applied to stored states."""
    h = np.asarray(states, dtype=np.float64)
    d = request.direction.unit_vector
    if h.shape[-1] != d.shape[0]:
        raise ProbeError(f"dimension mismatch: states {h.shape[-1]} vs direction {d.shape[0]}")
    if request.coefficient == 0.0:
        return h.copy()
    return h + request.coefficient * request.direction.projection_sd * d


def random_directions(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """``count`` unit vectors uniform on the sphere in ``dim`` dimensions."""
    g = np.random.default_rng(seed).standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def nullspace_control(coupling_fn: Callable[[np.ndarray | None], float], direction, n_random: int = 100, seed: int = 0) -> dict:
    """Compare the coupling change from removing ``direction`` with random ones.

    ``coupling_fn(d)`` recomputes the corrected coupling after projecting
    every state onto the nullspace of ``d`` (``None`` means no projection).
    Random directions are unit vectors, matching the probe direction's norm.
    """
    d = _unit(direction)
    base = coupling_fn(None)
    delta = coupling_fn(d) - base
    rand = np.array([coupling_fn(r) - base for r in random_directions(d.shape[0], n_random, seed)])
    p = (1 + np.count_nonzero(np.abs(rand) >= abs(delta))) / (n_random + 1)
    return {"rho_base": base, "delta": float(delta), "random_deltas": rand, "p": float(p)}


# --------------------------------------------------------------------------- INLP


def inlp_erase(dataset: ProbeDataset, r2_threshold: float = 0.02, max_iters: int = 20, lambda_grid=LAMBDA_GRID, folds: int = 5, seed: int = 0) -> InlpResult:
    """Project out probe directions until the out-of-fold R^2 drops below threshold.

    ``r2_history[k]`` is the R^2 after ``k`` projections; the last entry is
    the refit that met the threshold (or the last one tried).
    """
    dim = dataset.X.shape[1]
    P = np.eye(dim)
    history: list[float] = []
    directions: list[np.ndarray] = []
    for it in range(max_iters + 1):
        Xp = dataset.X @ P
        probe = fit_ridge_cv(dataset.with_features(Xp), lambda_grid, folds, seed)
        history.append(probe.cv_r2)
        if probe.cv_r2 < r2_threshold:
            return InlpResult(P, it, history, directions)
        if len(history) >= 3 and history[-3] <= history[-2] <= history[-1]:
            raise InlpStalledError(history)
        if it == max_iters:
            break
        d = P @ extract_direction(probe, Xp).unit_vector
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            raise ProbeError("probe direction lies in the erased subspace")
        d /= norm
        directions.append(d)
        P = P - np.outer(d, d)
    return InlpResult(P, max_iters, history, directions)


# --------------------------------------------------------------------------- mediation


def _slope_partial(y, x, z) -> float:
    """Slope of ``y`` on ``x`` adjusting for ``z``; zero when ``z`` determines ``x``."""
    rx = x - x.mean()
    zc = z - z.mean()
    szz = zc @ zc
    if szz > 0.0:
        rx = rx - (zc @ rx) / szz * zc
    sxx = rx @ rx
    if sxx <= 1e-20 * max(float(x @ x), 1e-300):
        return 0.0
    return float((rx @ y) / sxx)


def vd_mediation(encoded_pred, true_difficulty, outcome, bootstrap=None) -> VdResult:
    """Variance share of ``outcome`` explained by encoded vs true difficulty.

    ``vd_ratio = R^2(outcome ~ encoded) / R^2(outcome ~ true)``. The
    proportion mediated is ``(c - c') / c`` with ``c`` the total slope on
    true difficulty and ``c'`` the slope after adjusting for the encoded
    prediction; it keeps its sign.
    """
    from trajgeom.lencorr import BootstrapSpec

    bootstrap = bootstrap or BootstrapSpec()
    e = np.asarray(encoded_pred, dtype=np.float64)
    t = np.asarray(true_difficulty, dtype=np.float64)
    o = np.asarray(outcome, dtype=np.float64)
    if not e.shape == t.shape == o.shape:
        raise ProbeError("encoded, true and outcome must cover the same items")

    def ratio(idx):
        denom = r_squared(o[idx], t[idx])
        if denom <= 0.0:
            raise StatsError("outcome is not explained by true difficulty (R^2 <= 0)")
        return r_squared(o[idx], e[idx]) / denom

    full = np.arange(o.size)
    vd = ratio(full)

    def stat(idx):
        try:
            return ratio(idx)
        except StatsError:
            return None

    ci = percentile_bootstrap(full, stat, bootstrap.n_boot, bootstrap.seed, bootstrap.level)
    c = float(np.polyfit(t, o, 1)[0])
    c_prime = _slope_partial(o, t, e)
    prop = (c - c_prime) / c if c != 0.0 else float("nan")
    return VdResult(float(vd), ci, float(prop))


# --------------------------------------------------------------------------- heatmap


def permutation_r2(dataset: ProbeDataset, observed: float, n_perm: int = 100, seed: int = 0, lambda_grid=LAMBDA_GRID, folds: int = 5) -> float:
    """One-sided permutation p of the out-of-fold R^2 with shuffled targets."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        y = dataset.y[rng.permutation(dataset.y.size)]
        r2, _ = out_of_fold_r2(dataset.X, y, lambda_grid, folds, seed)
        hits += r2 >= observed
    return (1 + hits) / (n_perm + 1)


def probe_heatmap(cells: Mapping[tuple[int, int], ProbeDataset], lambda_grid=LAMBDA_GRID, folds: int = 5, n_perm: int = 100, seed: int = 0, jobs: int = 1) -> ResultTable:
    """Probe every (layer, position) cell; rows sorted by layer then position."""

    def one(key):
        ds = cells[key]
        probe = fit_ridge_cv(ds, lambda_grid, folds, seed)
        p = permutation_r2(ds, probe.cv_r2, n_perm, seed, lambda_grid, folds) if n_perm > 0 else None
        return (int(key[0]), int(key[1]), probe.cv_r2, p, probe.lam, len(ds.item_ids))

    keys = sorted(cells)
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, keys))
    else:
        rows = [one(k) for k in keys]
    return ResultTable(["layer", "position", "cv_r2", "perm_p", "lambda", "n_items"], rows)


def peak_cell(heatmap: ResultTable) -> tuple[int, int]:
    """Cell with the highest R^2; ties go to the lower layer, then the earlier position."""
    if not heatmap.rows:
        raise ProbeError("empty heatmap")
    best = min(heatmap.to_records(), key=lambda r: (-r["cv_r2"], r["layer"], r["position"]))
    return best["layer"], best["position"]
