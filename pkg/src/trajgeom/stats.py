"""Rank correlations, resampling inference, group tests and agreement coefficients."""
from __future__ import annotations

import math
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata


class StatsError(ValueError):
    """Input violates a statistic's preconditions."""


class ConstantInputError(StatsError):
    pass


class NonFiniteInputError(StatsError):
    pass


def _vector(x, name="x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if not np.isfinite(arr).all():
        raise NonFiniteInputError(f"{name} contains NaN or infinite values")
    return arr


def _paired(x, y):
    x = _vector(x, "x")
    y = _vector(y, "y")
    if x.shape != y.shape:
        raise StatsError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise StatsError("need at least two pairs")
    return x, y


def _pearson_core(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    # rescaling keeps the sums of squares clear of underflow and overflow
    sx, sy = np.abs(xc).max(), np.abs(yc).max()
    if sx == 0.0 or sy == 0.0:
        raise ConstantInputError("correlation undefined for constant input")
    xc, yc = xc / sx, yc / sy
    sxx = xc @ xc
    syy = yc @ yc
    r = (xc @ yc) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def pearson(x, y) -> float:
    x, y = _paired(x, y)
    return _pearson_core(x, y)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x, y = _paired(x, y)
    return _pearson_core(rankdata(x), rankdata(y))


# --------------------------------------------------------------------------- resampling


def percentile_bootstrap(
    sample_ids,
    statistic_fn: Callable[[np.ndarray], float | None],
    n_boot: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    max_undefined: float = 0.2,
) -> tuple[float, float]:
    """Percentile bootstrap over items.

    ``statistic_fn`` receives an array of resampled ids (drawn with
    replacement from ``sample_ids``) and returns the statistic, or ``None``
    / NaN when it is undefined on that resample.
    """
    ids = np.asarray(sample_ids)
    n = ids.shape[0]
    if n < 10:
        raise StatsError(f"bootstrap needs at least 10 items, got {n}")
    rng = np.random.default_rng(seed)
    values = []
    undefined = 0
    for _ in range(n_boot):
        draw = ids[rng.integers(0, n, size=n)]
        try:
            v = statistic_fn(draw)
        except ConstantInputError:
            v = None
        if v is None or not math.isfinite(v):
            undefined += 1
            continue
        values.append(v)
    if undefined > max_undefined * n_boot:
        raise StatsError(f"statistic undefined on {undefined}/{n_boot} resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


class PermutationResult(NamedTuple):
    observed: float
    null_quantile: float
    p: float
    null: np.ndarray


def permutation_null(
    x,
    y,
    statistic_fn: Callable[[np.ndarray, np.ndarray], float] = None,
    n_perm: int = 1000,
    seed: int = 0,
    strata=None,
) -> PermutationResult:
    """Shuffle ``y`` (within ``strata`` when given) and recompute the statistic.

    Two-sided p with the +1 correction:
    ``(1 + #{|null| >= |observed|}) / (n_perm + 1)``. ``null_quantile`` is
    the mid-rank position of the observed value in the null distribution.
    """
    if statistic_fn is None:
        statistic_fn = spearman
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise StatsError("length mismatch")
    if x.shape[0] < 10:
        raise StatsError(f"permutation test needs at least 10 items, got {x.shape[0]}")
    _vector(x, "x")
    _vector(y, "y")
    observed = float(statistic_fn(x, y))
    rng = np.random.default_rng(seed)
    groups = None
    if strata is not None:
        strata = np.asarray(strata)
        groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    null = np.empty(n_perm)
    for k in range(n_perm):
        if groups is None:
            yp = y[rng.permutation(y.shape[0])]
        else:
            yp = y.copy()
            for g in groups:
                yp[g] = y[g[rng.permutation(g.size)]]
        null[k] = statistic_fn(x, yp)
    # tolerance keeps exact ties (e.g. identical permutation) counted as extreme
    tol = 1e-12 * max(1.0, abs(observed))
    extreme = np.count_nonzero(np.abs(null) >= abs(observed) - tol)
    p = (1 + extreme) / (n_perm + 1)
    quantile = (np.count_nonzero(null < observed) + 0.5 * np.count_nonzero(null == observed)) / n_perm
    return PermutationResult(observed, float(quantile), float(p), null)


# --------------------------------------------------------------------------- group tests


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, int]:
    """Kruskal-Wallis H with tie correction; returns ``(H, df)``."""
    groups = [_vector(g, "group") for g in groups]
    if len(groups) < 2:
        raise StatsError("need at least two groups")
    if any(g.size == 0 for g in groups):
        raise StatsError("every group needs at least one value")
    pooled = np.concatenate(groups)
    n = pooled.size
    ranks = rankdata(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    tie = 1.0 - (counts**3 - counts).sum() / (n**3 - n)
    if tie == 0.0:
        raise ConstantInputError("all values identical")
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start : start + g.size]
        h += r.sum() ** 2 / g.size
        start += g.size
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    return float(h / tie), len(groups) - 1


def wilcoxon_signed_rank(pairs) -> tuple[float, float]:
    """Signed-rank test on paired differences.

    ``pairs`` is either a sequence of differences or an ``(n, 2)`` array of
    (a, b) pairs, in which case ``a - b`` is used. Zero differences are
    dropped; ``W = min(W+, W-)``; p is the two-sided tie-corrected normal
    approximation without continuity correction.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    d = arr[:, 0] - arr[:, 1] if arr.ndim == 2 else arr.ravel()
    d = _vector(d, "differences")
    d = d[d != 0.0]
    if d.size == 0:
        raise ConstantInputError("all differences are zero")
    if d.size < 6:
        raise StatsError(f"need at least 6 nonzero differences, got {d.size}")
    n = d.size
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    w = min(w_plus, w_minus)
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts**3 - counts).sum() / 48.0
    z = (w - n * (n + 1) / 4.0) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return float(w), float(min(1.0, p))


# --------------------------------------------------------------------------- agreement


def cohens_kappa(labels_a: Sequence, labels_b: Sequence) -> float:
    if len(labels_a) != len(labels_b):
        raise StatsError("label sequences differ in length")
    n = len(labels_a)
    if n < 1:
        raise StatsError("need at least one label")
    cats = sorted(set(labels_a) | set(labels_b), key=str)
    pos = {c: i for i, c in enumerate(cats)}
    table = np.zeros((len(cats), len(cats)))
    for a, b in zip(labels_a, labels_b):
        table[pos[a], pos[b]] += 1
    table /= n
    p_o = np.trace(table)
    p_e = float(table.sum(axis=1) @ table.sum(axis=0))
    if p_e >= 1.0:
        raise ConstantInputError("kappa undefined: chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


class IccResult(NamedTuple):
    icc: float
    clipped: bool  # raw value below zero; reported unclipped


def icc_1_1(groups: Mapping | Sequence) -> IccResult:
    """One-way random-effects ICC(1,1).

    ``(MSB - MSW) / (MSB + (k - 1) MSW)`` with ``k`` the mean group size,
    which reduces to the textbook form for balanced designs.
    """
    values = list(groups.values()) if isinstance(groups, Mapping) else list(groups)
    values = [_vector(v, "group") for v in values]
    values = [v for v in values if v.size > 0]
    g = len(values)
    if g < 2:
        raise StatsError("need at least two groups")
    sizes = np.array([v.size for v in values], dtype=np.float64)
    total = sizes.sum()
    if total - g < 1:
        raise StatsError("no within-group replication")
    grand = np.concatenate(values).mean()
    means = np.array([v.mean() for v in values])
    ss_between = float((sizes * (means - grand) ** 2).sum())
    ss_within = float(sum(((v - v.mean()) ** 2).sum() for v in values))
    msb = ss_between / (g - 1)
    msw = ss_within / (total - g)
    k = sizes.mean()
    denom = msb + (k - 1.0) * msw
    if denom == 0.0:
        raise ConstantInputError("ICC undefined: no variance at all")
    icc = (msb - msw) / denom
    return IccResult(float(icc), bool(icc < 0.0))


# --------------------------------------------------------------------------- OLS helpers


def ols_residualize(y, x) -> np.ndarray:
    """Residuals of ``y`` after a simple OLS fit on ``x`` with intercept.

    ``y`` may be 2-D, in which case every column is residualized.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0.0:
        raise ConstantInputError("regressor is constant")
    yc = y - y.mean(axis=0)
    beta = (xc @ yc) / sxx
    return yc - np.multiply.outer(xc, beta) if y.ndim > 1 else yc - beta * xc


def r_squared(y, x) -> float:
    """R^2 of a least-squares fit of ``y`` on the columns of ``x`` plus intercept."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    design = np.column_stack([np.ones(len(y)), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    sst = ((y - y.mean()) ** 2).sum()
    if sst == 0.0:
        raise ConstantInputError("outcome is constant")
    return float(1.0 - (resid @ resid) / sst)
