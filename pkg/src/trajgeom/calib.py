"""Binomial Rasch (1PL) and 2PL difficulty calibration by MAP estimation.

The objective is the binomial negative log-likelihood (without the constant
``log C(n, k)`` term) plus independent Gaussian penalties on abilities,
difficulties and, for 2PL, log-discriminations. It is minimised with Adam
from a zero initialisation. A step that raises the loss is rejected and the
learning rate halved, so the accepted-loss sequence never increases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from trajgeom.archive import ResultTable
from trajgeom.stats import kruskal_wallis, pearson, spearman


class CalibrationError(ValueError):
    pass


class FitDivergedError(CalibrationError):
    def __init__(self, epoch):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ResponseMatrix:
    items: list[str]
    models: list[str]
    k: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        self.n = np.asarray(self.n, dtype=np.int64)
        shape = (len(self.items), len(self.models))
        if self.k.shape != shape or self.n.shape != shape:
            raise CalibrationError(f"count matrices must have shape {shape}")
        if (self.n < 0).any() or (self.k < 0).any() or (self.k > self.n).any():
            raise CalibrationError("need 0 <= k <= n in every cell")

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, int, int]]) -> "ResponseMatrix":
        records = list(records)
        items = sorted({r[0] for r in records})
        models = sorted({r[1] for r in records})
        ii = {v: i for i, v in enumerate(items)}
        mm = {v: j for j, v in enumerate(models)}
        k = np.zeros((len(items), len(models)), dtype=np.int64)
        n = np.zeros_like(k)
        for item, model, kk, nn in records:
            k[ii[item], mm[model]] += kk
            n[ii[item], mm[model]] += nn
        return cls(items, models, k, n)

    def drop_model(self, j: int) -> "ResponseMatrix":
        keep = [c for c in range(len(self.models)) if c != j]
        return ResponseMatrix(self.items, [self.models[c] for c in keep], self.k[:, keep], self.n[:, keep])


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 0.05
    max_epochs: int = 2000
    patience: int = 200
    prior_sd: float = 1.0
    log_a_prior_sd: float = 1.0
    tol: float = 1e-6
    epoch_cap: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class DifficultyScale:
    items: list[str]
    models: list[str]
    difficulties: np.ndarray
    abilities: np.ndarray
    discriminations: np.ndarray | None = None
    fit_report: dict = field(default_factory=dict)

    def difficulty_map(self) -> dict[str, float]:
        return dict(zip(self.items, self.difficulties.tolist()))

    def to_table(self) -> ResultTable:
        rows = []
        for i, item in enumerate(self.items):
            a = None if self.discriminations is None else float(self.discriminations[i])
            rows.append(("item", item, float(self.difficulties[i]), a))
        for j, model in enumerate(self.models):
            rows.append(("model", model, float(self.abilities[j]), None))
        return ResultTable(["kind", "id", "value", "discrimination"], rows)


@dataclass
class BoundaryReport:
    informative: set
    floor: set
    ceiling: set


# --------------------------------------------------------------------------- objective


def map_objective(params: np.ndarray, k: np.ndarray, n: np.ndarray, two_pl: bool = False, prior_sd: float = 1.0, log_a_prior_sd: float = 1.0):
    """MAP loss and gradient for the flattened parameter vector.

    Layout: ``[theta (models), b (items), log_a (items, 2PL only)]``.
    """
    n_items, n_models = k.shape
    theta = params[:n_models]
    b = params[n_models : n_models + n_items]
    diff = theta[None, :] - b[:, None]
    if two_pl:
        log_a = params[n_models + n_items :]
        a = np.exp(log_a)[:, None]
        z = a * diff
    else:
        a = 1.0
        z = diff
    nll = float(np.sum(n * np.logaddexp(0.0, z) - k * z))
    g_z = n * (0.5 * (1.0 + np.tanh(0.5 * z))) - k  # n * sigmoid(z) - k
    inv_var = 1.0 / prior_sd**2
    loss = nll + 0.5 * inv_var * (theta @ theta + b @ b)
    g_theta = (g_z * a).sum(axis=0) + inv_var * theta
    g_b = -(g_z * a).sum(axis=1) + inv_var * b
    if not two_pl:
        return loss, np.concatenate([g_theta, g_b])
    inv_var_a = 1.0 / log_a_prior_sd**2
    loss += 0.5 * inv_var_a * (log_a @ log_a)
    g_log_a = (g_z * z).sum(axis=1) + inv_var_a * log_a
    return loss, np.concatenate([g_theta, g_b, g_log_a])


def _adam(k, n, two_pl: bool, config: FitConfig):
    n_items, n_models = k.shape
    size = n_models + n_items * (2 if two_pl else 1)
    params = np.zeros(size)
    m = np.zeros(size)
    v = np.zeros(size)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    loss, grad = map_objective(params, k, n, two_pl, config.prior_sd, config.log_a_prior_sd)
    history = [loss]
    stale = 0
    epoch = 0
    converged = False
    while epoch < config.epoch_cap:
        epoch += 1
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**epoch)
        v_hat = v / (1 - beta2**epoch)
        trial = params - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_loss, new_grad = map_objective(trial, k, n, two_pl, config.prior_sd, config.log_a_prior_sd)
        if not math.isfinite(new_loss):
            raise FitDivergedError(epoch)
        if new_loss <= loss:
            improvement = loss - new_loss
            params, loss, grad = trial, new_loss, new_grad
            history.append(loss)
            stale = 0 if improvement > config.tol else stale + 1
        else:
            lr *= 0.5
            stale += 1
        if epoch >= config.max_epochs and stale >= config.patience:
            converged = True
            break
    report = {"final_loss": float(loss), "stopped_epoch": epoch, "converged": converged, "accepted_losses": history}
    return params, report


def _prepare(matrix: ResponseMatrix):
    if not (matrix.n > 0).any():
        raise CalibrationError("no informative cells (all n = 0)")
    return matrix.k.astype(np.float64), matrix.n.astype(np.float64)


def fit_rasch(matrix: ResponseMatrix, config: FitConfig = FitConfig()) -> DifficultyScale:
    k, n = _prepare(matrix)
    params, report = _adam(k, n, False, config)
    n_models = len(matrix.models)
    return DifficultyScale(
        list(matrix.items), list(matrix.models), params[n_models:].copy(), params[:n_models].copy(), None, report
    )


def fit_2pl(matrix: ResponseMatrix, config: FitConfig = FitConfig()) -> DifficultyScale:
    if len(matrix.models) < 2:
        raise CalibrationError("discriminations unidentifiable with a single model")
    k, n = _prepare(matrix)
    params, report = _adam(k, n, True, config)
    n_models, n_items = len(matrix.models), len(matrix.items)
    return DifficultyScale(
        list(matrix.items),
        list(matrix.models),
        params[n_models : n_models + n_items].copy(),
        params[:n_models].copy(),
        np.exp(params[n_models + n_items :]),
        report,
    )


# --------------------------------------------------------------------------- diagnostics


def classify_boundary_items(matrix: ResponseMatrix) -> BoundaryReport:
    """Floor: never solved; ceiling: solved on every attempted run; else informative."""
    floor, ceiling, informative = set(), set(), set()
    for i, item in enumerate(matrix.items):
        k, n = matrix.k[i], matrix.n[i]
        attempted = n > 0
        if attempted.any() and k.sum() == 0:
            floor.add(item)
        elif attempted.any() and (k[attempted] == n[attempted]).all():
            ceiling.add(item)
        else:
            informative.add(item)
    return BoundaryReport(informative, floor, ceiling)


def loo_recalibration(matrix: ResponseMatrix, config: FitConfig = FitConfig(), jobs: int = 1) -> ResultTable:
    """Refit with each model held out and compare difficulties with the full fit."""
    if len(matrix.models) < 3:
        raise CalibrationError("LOO recalibration needs at least 3 models")
    full = fit_rasch(matrix, config)

    def fold(j):
        try:
            held = fit_rasch(matrix.drop_model(j), config)
            return matrix.models[j], spearman(held.difficulties, full.difficulties), ""
        except (CalibrationError, ValueError) as exc:
            return matrix.models[j], None, str(exc)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(fold, range(len(matrix.models))))
    else:
        folds = [fold(j) for j in range(len(matrix.models))]
    rows = [("fold", model, rho, err) for model, rho, err in folds]
    good = [r for _, r, _ in folds if r is not None]
    if good:
        rows.append(("median", None, float(np.median(good)), ""))
        rows.append(("min", None, float(np.min(good)), ""))
    return ResultTable(["row_kind", "held_out_model", "spearman", "error"], rows)


def _labels(scale: DifficultyScale, items_meta) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(items_meta, Mapping):
        labels = {k: v for k, v in items_meta.items() if v is not None}
    else:
        labels = {m.item_id: m.native_label for m in items_meta if m.native_label is not None}
    bmap = scale.difficulty_map()
    common = [i for i in scale.items if i in labels]
    return np.array([bmap[i] for i in common]), np.array([labels[i] for i in common], dtype=np.float64)


def validate_external(scale: DifficultyScale, items_meta, ordinal: bool | None = None, min_items: int = 10) -> ResultTable:
    """Agreement between fitted difficulties and native labels.

    Always reports Pearson r and Spearman rho; adds Kruskal-Wallis H and df
    across label levels when the labels are ordinal (auto-detected as at most
    ten distinct integer levels when ``ordinal`` is None).
    """
    b, labels = _labels(scale, items_meta)
    if b.size < min_items:
        raise CalibrationError(f"need at least {min_items} labelled items, got {b.size}")
    rows = [
        ("pearson_r", pearson(b, labels), None, int(b.size)),
        ("spearman_rho", spearman(b, labels), None, int(b.size)),
    ]
    levels = np.unique(labels)
    if ordinal is None:
        ordinal = bool(np.all(labels == np.round(labels)) and 2 <= levels.size <= 10)
    if ordinal:
        h, df = kruskal_wallis([b[labels == lv] for lv in levels])
        rows.append(("kruskal_wallis_h", h, df, int(b.size)))
    return ResultTable(["statistic", "value", "df", "n"], rows)


