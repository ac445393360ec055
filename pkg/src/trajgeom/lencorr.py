"""Run averaging, length-correction models, residuals and corrected couplings.

Families (regressor built from the mean segment token length ``N``, or from
the mean sampled length ``T`` for the ``*T`` variants):

``logN`` / ``logT``          metric ~ log N
``inv_sqrtN`` / ``inv_sqrtT`` metric ~ N^-1/2
``loglog`` / ``loglogT``     log metric ~ log N (nonpositive metrics dropped)
``binned`` / ``binnedT``     metric centred within equal-count bins of log N
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from trajgeom.stats import ConstantInputError, StatsError, percentile_bootstrap, spearman

log = logging.getLogger(__name__)

FAMILIES = ("logN", "inv_sqrtN", "loglog", "binned", "logT", "inv_sqrtT", "loglogT", "binnedT")
OLS_FAMILIES = ("logN", "inv_sqrtN", "loglog", "logT", "inv_sqrtT", "loglogT")
METRIC_COLUMNS = {
    "directness": "directness",
    "curvature_var": "curvature_variability",
    "twonn": "twonn_dimension",
    "pca90": "pca90",
}


class LengthModelError(ValueError):
    pass


@dataclass(frozen=True)
class ItemGeometry:
    item_id: str
    model_id: str
    layer_index: int
    metric: str
    value: float
    mean_length: float  # mean raw segment tokens, N
    mean_sampled_length: float  # mean sampled states, T
    run_count: int
    log_of_mean: bool = True

    @property
    def mean_log_length(self) -> float:
        return math.log(self.mean_length)


@dataclass
class LengthModel:
    family: str
    intercept: float
    slope: float
    r_squared: float
    bins: list[tuple[float, float, float, int]] | None = None  # (lo, hi, mean, count)
    dropped: int = 0


@dataclass
class ResidualTable:
    item_ids: list[str]
    residual: np.ndarray
    fitted: np.ndarray
    regressor: np.ndarray
    family: str
    dropped: int = 0

    @property
    def observed(self) -> np.ndarray:
        return self.residual + self.fitted


@dataclass(frozen=True)
class BootstrapSpec:
    n_boot: int = 1000
    seed: int = 0
    level: float = 0.95


@dataclass
class CouplingResult:
    model_id: str
    layer: str
    metric: str
    rho_raw: float
    rho_corrected: float
    ci_low: float
    ci_high: float
    n_items: int
    family: str
    rho_corrected_min: float | None = None
    rho_corrected_max: float | None = None
    notes: str = ""

    COLUMNS = (
        "model_id",
        "layer",
        "metric",
        "family",
        "n_items",
        "rho_raw",
        "rho_corrected",
        "ci_low",
        "ci_high",
        "rho_corrected_min",
        "rho_corrected_max",
        "notes",
    )

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


# --------------------------------------------------------------------------- aggregation


def aggregate_runs(rows: Iterable[Mapping], metric: str = "directness", log_of_mean: bool = True):
    """Average per-run geometry rows into per-(item, model, layer) values.

    ``rows`` are mappings with the geometry table's columns. Runs whose
    metric is undefined are skipped; groups with no defined value are dropped
    and counted. The length columns are averaged over the same runs.

    Returns ``(items, dropped_groups)``.
    """
    column = METRIC_COLUMNS.get(metric, metric)
    groups: dict[tuple, list] = defaultdict(list)
    for r in rows:
        groups[(r["item_id"], r["model_id"], r["layer_index"])].append(r)
    out = []
    dropped = 0
    for (item, model, layer), runs in sorted(groups.items()):
        vals = [
            (float(r[column]), r.get("segment_tokens"), r.get("sample_count"))
            for r in runs
            if r.get(column) is not None
        ]
        vals = [v for v in vals if v[1] is not None and v[1] > 0]
        if not vals:
            dropped += 1
            continue
        value = sum(v[0] for v in vals) / len(vals)
        lengths = np.array([v[1] for v in vals], dtype=np.float64)
        sampled = np.array([max(v[2], 1) for v in vals], dtype=np.float64)
        if log_of_mean:
            n_bar, t_bar = lengths.mean(), sampled.mean()
        else:  # geometric mean so that log(mean_length) is the mean of logs
            n_bar, t_bar = math.exp(np.log(lengths).mean()), math.exp(np.log(sampled).mean())
        out.append(ItemGeometry(item, model, layer, metric, value, float(n_bar), float(t_bar), len(vals), log_of_mean))
    if dropped:
        log.info("aggregate_runs: dropped %d groups with no defined %s", dropped, metric)
    return out, dropped


# --------------------------------------------------------------------------- length models


def _base_family(family: str) -> tuple[str, bool]:
    """``("log" | "inv_sqrt" | "loglog" | "binned", uses_sampled_length)``."""
    if family not in FAMILIES:
        raise LengthModelError(f"unknown family {family!r}")
    base = family[:-1] if family[-1] in "NT" else family
    return base, family.endswith("T")


def regressor(items: Sequence[ItemGeometry], family: str) -> np.ndarray:
    base, use_t = _base_family(family)
    length = np.array([it.mean_sampled_length if use_t else it.mean_length for it in items], dtype=np.float64)
    if base == "inv_sqrt":
        return length**-0.5
    return np.log(length)


def _response(items: Sequence[ItemGeometry], family: str) -> tuple[np.ndarray, np.ndarray]:
    """Transformed metric and the mask of rows kept by the family."""
    base, _ = _base_family(family)
    y = np.array([it.value for it in items], dtype=np.float64)
    if base == "loglog":
        keep = y > 0
        out = np.full_like(y, np.nan)
        out[keep] = np.log(y[keep])
        return out, keep
    return y, np.ones(y.shape, dtype=bool)


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    xm, ym = x.mean(), y.mean()
    xc = x - xm
    yc = y - ym
    sxx = xc @ xc
    if sxx <= 0.0 or np.ptp(x) == 0.0:
        raise LengthModelError("degenerate regressor: all length values equal")
    slope = (xc @ yc) / sxx
    resid = yc - slope * xc
    syy = yc @ yc
    r2 = 1.0 - (resid @ resid) / syy if syy > 0 else 1.0
    return float(ym - slope * xm), float(slope), float(r2)


def _bins(x: np.ndarray, n_bins: int = 10, min_count: int = 5) -> list[np.ndarray]:
    """Equal-count bins over sorted ``x``.

    Tied values never straddle two bins, and bins smaller than
    ``min_count`` are merged into their smaller neighbour.
    """
    order = np.argsort(x, kind="stable")
    split = [list(c) for c in np.array_split(order, min(n_bins, len(order))) if len(c)]
    chunks: list[list] = []
    for c in split:
        if chunks:
            while c and x[c[0]] == x[chunks[-1][-1]]:
                chunks[-1].append(c.pop(0))
        if c:
            chunks.append(c)
    while len(chunks) > 1:
        sizes = [len(c) for c in chunks]
        i = int(np.argmin(sizes))
        if sizes[i] >= min_count:
            break
        if i == 0:
            j = 1
        elif i == len(chunks) - 1:
            j = i - 1
        else:
            j = i - 1 if sizes[i - 1] <= sizes[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        chunks[lo : hi + 1] = [chunks[lo] + chunks[hi]]
    return [np.asarray(c) for c in chunks]


def fit_length_model(items: Sequence[ItemGeometry], family: str = "logN", n_bins: int = 10, min_bin: int = 5) -> LengthModel:
    x = regressor(items, family)
    y, keep = _response(items, family)
    base, _ = _base_family(family)
    dropped = int((~keep).sum())
    if base == "loglog" and not keep.any():
        raise LengthModelError("loglog needs positive metric values")
    x, y = x[keep], y[keep]
    if base == "binned":
        if len(x) < 2 * min(min_bin, 2):
            raise LengthModelError("too few items to bin")
        if np.ptp(x) == 0.0:
            raise LengthModelError("degenerate regressor: all length values equal")
        chunks = _bins(x, n_bins, min_bin)
        if any(len(c) < 2 for c in chunks):
            raise LengthModelError("binned family needs at least 2 items per bin")
        lows = [float(x[c].min()) for c in chunks]
        highs = lows[1:] + [float(x[chunks[-1]].max())]
        bins = [(lo, hi, float(y[c].mean()), int(len(c))) for lo, hi, c in zip(lows, highs, chunks)]
        fitted = _bin_means(x, bins)
        sst = ((y - y.mean()) ** 2).sum()
        r2 = 1.0 - ((y - fitted) ** 2).sum() / sst if sst > 0 else 1.0
        return LengthModel(family, float("nan"), float("nan"), float(r2), bins, dropped)
    if len(x) < 3 or len(np.unique(x)) < 2:
        raise LengthModelError("need at least 3 items with distinct lengths")
    b0, b1, r2 = _ols(x, y)
    return LengthModel(family, b0, b1, r2, None, dropped)


def _bin_means(x: np.ndarray, bins) -> np.ndarray:
    """Bin mean for each ``x``; bins are ``[lo, hi)`` except the closed last one."""
    out = np.full(x.shape, np.nan)
    last = len(bins) - 1
    for i, (lo, hi, mean, _) in enumerate(bins):
        sel = (x >= lo) & ((x < hi) if i < last else (x <= hi))
        out[sel] = mean
    return out


def residualize(items: Sequence[ItemGeometry], model: LengthModel) -> ResidualTable:
    """``observed - fitted`` under ``model``; items the model cannot place are dropped."""
    x = regressor(items, model.family)
    y, keep = _response(items, model.family)
    if model.bins is not None:
        fitted = _bin_means(x, model.bins)
        keep &= ~np.isnan(fitted)
        resid = y - fitted
    else:
        xm = x[keep].mean()
        ym = y[keep].mean()
        xc = x - xm
        # residuals formed from centred quantities keep the orthogonality exact
        resid = (y - ym) - model.slope * xc
        fitted = y - resid
    ids = [it.item_id for it, k in zip(items, keep) if k]
    dropped = int((~keep).sum())
    return ResidualTable(ids, resid[keep], fitted[keep], x[keep], model.family, dropped)


# --------------------------------------------------------------------------- couplings


def corrected_coupling(
    residuals: ResidualTable,
    difficulties: Mapping[str, float],
    bootstrap: BootstrapSpec = BootstrapSpec(),
    model_id: str = "",
    layer="",
    metric: str = "directness",
) -> CouplingResult:
    """Spearman of residuals with difficulty, with a percentile bootstrap CI.

    Items are resampled with replacement; the length model is not refit
    within resamples. ``rho_raw`` uses the uncorrected (transformed) metric.
    """
    ids = [i for i in residuals.item_ids if i in difficulties]
    pos = {i: k for k, i in enumerate(residuals.item_ids)}
    idx = np.array([pos[i] for i in ids], dtype=np.int64)
    if idx.size < 10:
        raise StatsError(f"need at least 10 matched items, got {idx.size}")
    b = np.array([difficulties[i] for i in ids], dtype=np.float64)
    r = residuals.residual[idx]
    obs = residuals.observed[idx]
    rho = spearman(b, r)
    rho_raw = spearman(b, obs)

    def stat(draw):
        try:
            return spearman(b[draw], r[draw])
        except ConstantInputError:
            return None

    lo, hi = percentile_bootstrap(np.arange(idx.size), stat, bootstrap.n_boot, bootstrap.seed, bootstrap.level)
    notes = ""
    if not lo <= rho <= hi:
        notes = "ci_extended_to_point"
        lo, hi = min(lo, rho), max(hi, rho)
    return CouplingResult(model_id, str(layer), metric, rho_raw, rho, lo, hi, int(idx.size), residuals.family, notes=notes)


def residual_diagnostics(residuals: ResidualTable, regressor_values=None, low_n: int = 10):
    """Remaining rank association of residuals with the length regressor."""
    from trajgeom.archive import ResultTable

    x = residuals.regressor if regressor_values is None else np.asarray(regressor_values, dtype=np.float64)
    r = residuals.residual
    n = int(r.size)
    try:
        rho = spearman(r, x)
    except (ConstantInputError, StatsError):
        rho = None
    flag = "low_n" if n < low_n else ""
    rows = [("spearman_residual_length", rho, n, flag)]
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)
    if n:
        for q, v in zip(qs, np.quantile(r, qs)):
            rows.append((f"residual_q{int(q * 100):02d}", float(v), n, flag))
        for q, v in zip(qs, np.quantile(x, qs)):
            rows.append((f"regressor_q{int(q * 100):02d}", float(v), n, flag))
    return ResultTable(["statistic", "value", "n", "flag"], rows)


def layer_summary(per_layer: Sequence[CouplingResult]) -> CouplingResult:
    """Median across layers; the corrected min and max are kept."""
    if not per_layer:
        raise ValueError("need at least one layer")
    med = lambda attr: float(np.median([getattr(c, attr) for c in per_layer]))
    rhos = [c.rho_corrected for c in per_layer]
    first = per_layer[0]
    return CouplingResult(
        first.model_id,
        "median",
        first.metric,
        med("rho_raw"),
        med("rho_corrected"),
        med("ci_low"),
        med("ci_high"),
        int(np.median([c.n_items for c in per_layer])),
        first.family,
        float(min(rhos)),
        float(max(rhos)),
    )


def coupling_for_items(
    items: Sequence[ItemGeometry],
    difficulties: Mapping[str, float],
    family: str = "logN",
    bootstrap: BootstrapSpec = BootstrapSpec(),
) -> tuple[CouplingResult, ResidualTable, LengthModel]:
    """Fit, residualize and correlate one (model, layer, metric) cell."""
    items = [it for it in items if it.item_id in difficulties]
    model = fit_length_model(items, family)
    res = residualize(items, model)
    first = items[0]
    result = corrected_coupling(res, difficulties, bootstrap, first.model_id, first.layer_index, first.metric)
    return result, res, model


def with_value(item: ItemGeometry, value: float) -> ItemGeometry:
    return replace(item, value=value)
