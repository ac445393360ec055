"""Sensitivity analyses on the corrected coupling: strata, prefixes, policies, nulls, run counts."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from trajgeom import geometry
from trajgeom.archive import ResultTable
from trajgeom.lencorr import (
    BootstrapSpec,
    ItemGeometry,
    LengthModelError,
    aggregate_runs,
    coupling_for_items,
    fit_length_model,
    residualize,
)
from trajgeom.segment import prefix_length
from trajgeom.stats import StatsError, icc_1_1, permutation_null, spearman

log = logging.getLogger(__name__)

LOW_N = 10


@dataclass(frozen=True)
class CouplingSpec:
    family: str = "logN"
    bootstrap: BootstrapSpec = BootstrapSpec()
    metric: str = "directness"


def _coupling_row(items, difficulties, spec: CouplingSpec):
    """``(rho_corrected, ci_low, ci_high, n, flag)`` for one item set."""
    n = sum(1 for it in items if it.item_id in difficulties)
    if n < LOW_N:
        return None, None, None, n, "low_n"
    try:
        res, _, _ = coupling_for_items(items, difficulties, spec.family, spec.bootstrap)
    except (StatsError, LengthModelError) as exc:
        return None, None, None, n, f"undefined: {exc}"
    return res.rho_corrected, res.ci_low, res.ci_high, res.n_items, res.notes


# --------------------------------------------------------------------------- correctness strata


def majority_correct(runs: Sequence[bool]) -> bool:
    """Correct when more than half the runs are correct; ties count as incorrect."""
    runs = list(runs)
    return sum(bool(r) for r in runs) * 2 > len(runs)


def correctness_stratified(
    items: Sequence[ItemGeometry],
    difficulties: Mapping[str, float],
    correctness: Mapping[str, Sequence[bool]],
    spec: CouplingSpec = CouplingSpec(),
    min_coverage: float = 0.8,
) -> ResultTable:
    """Corrected coupling pooled and within item-level correctness strata."""
    ids = {it.item_id for it in items}
    covered = {i for i in ids if correctness.get(i)}
    if not ids or len(covered) < min_coverage * len(ids):
        raise StatsError(f"correctness covers {len(covered)}/{len(ids)} items, need {min_coverage:.0%}")
    correct = [it for it in items if it.item_id in covered and majority_correct(correctness[it.item_id])]
    incorrect = [it for it in items if it.item_id in covered and not majority_correct(correctness[it.item_id])]
    rows = []
    for name, subset in (("all", [it for it in items if it.item_id in covered]), ("correct", correct), ("incorrect", incorrect)):
        rows.append((name, *_coupling_row(subset, difficulties, spec)))
    return ResultTable(["stratum", "rho_corrected", "ci_low", "ci_high", "n_items", "flag"], rows)


# --------------------------------------------------------------------------- prefix curve


def metric_value(states: np.ndarray, metric: str) -> float | None:
    """One geometry metric on a state array; None when it is undefined."""
    try:
        if metric == "directness":
            return geometry.directness(states)[2]
        if metric == "curvature_var":
            return geometry.curvature_variability(geometry.menger_curvature_profile(states))
        if metric == "twonn":
            return geometry.twonn_dimension(states)
        if metric == "pca90":
            v = geometry.pca90(states)
            return None if v is None else float(v)
    except geometry.TooShortError:
        return None
    raise ValueError(f"unknown metric {metric!r}")


def prefix_rows(segments: Mapping[tuple, tuple[np.ndarray, int]], fraction: float, metric: str, model_id: str = "", layer: int = 0) -> tuple[list[dict], int]:
    """Geometry rows on state prefixes and the number of runs below 3 states.

    ``segments`` maps ``(item, run)`` to ``(segment states, segment tokens)``.
    The full segment length is kept as the length covariate.
    """
    rows = []
    short = 0
    for (item, run), (states, tokens) in sorted(segments.items()):
        n = states.shape[0]
        keep = prefix_length(n, fraction)
        if keep < 3:
            short += 1
        value = metric_value(states[:keep], metric) if keep >= 2 else None
        column = {"directness": "directness", "curvature_var": "curvature_variability", "twonn": "twonn_dimension", "pca90": "pca90"}[metric]
        rows.append({
            "item_id": item,
            "model_id": model_id,
            "layer_index": layer,
            "run_id": run,
            "segment_tokens": tokens,
            "sample_count": n - 1,
            column: value,
        })
    return rows, short


def prefix_curve(
    segments: Mapping[tuple, tuple[np.ndarray, int]],
    difficulties: Mapping[str, float],
    fractions: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
    spec: CouplingSpec = CouplingSpec(),
) -> ResultTable:
    """Corrected coupling on growing prefixes plus a flatness summary row.

    Flatness is ``max |rho(f) - rho(1)|`` over the computed fractions with
    ``f >= 0.1``. Fractions leaving fewer than 3 states on more than half
    the runs are skipped with a note.
    """
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    n_runs = len(segments)
    out = []
    rho_at = {}
    for f in sorted(set(fractions)):
        rows, short = prefix_rows(segments, f, spec.metric)
        if short > 0.5 * n_runs:
            out.append(("fraction", f, None, None, None, 0, f"skipped: {short}/{n_runs} runs below 3 states"))
            continue
        items, _ = aggregate_runs(rows, spec.metric)
        rho, lo, hi, n, flag = _coupling_row(items, difficulties, spec)
        out.append(("fraction", f, rho, lo, hi, n, flag))
        if rho is not None:
            rho_at[f] = rho
    flat = None
    if 1.0 in rho_at:
        deltas = [abs(r - rho_at[1.0]) for f, r in rho_at.items() if f >= 0.1]
        flat = float(max(deltas))
    out.append(("flatness", None, flat, None, None, len(rho_at), "max_abs_delta_vs_full"))
    return ResultTable(["row_kind", "fraction", "rho_corrected", "ci_low", "ci_high", "n_items", "note"], out)


# --------------------------------------------------------------------------- boundary policies


def boundary_delta(
    couplings_by_policy: Mapping[str, Mapping[str, float]],
    reference: str,
    item_sets: Mapping[str, Mapping[str, set]] | None = None,
    groups: Mapping[str, str] | None = None,
    max_mismatch: float = 0.05,
) -> ResultTable:
    """Absolute coupling change of every policy against ``reference`` per model.

    ``couplings_by_policy[policy][model]`` is the corrected coupling.
    When ``item_sets`` is given, item sets whose symmetric difference
    exceeds ``max_mismatch`` of their union raise ``StatsError``.
    """
    if len(couplings_by_policy) < 2 or reference not in couplings_by_policy:
        raise StatsError("need the reference policy and at least one other")
    groups = groups or {}
    ref = couplings_by_policy[reference]
    rows = []
    by_group: dict[tuple, list] = defaultdict(list)
    for policy in sorted(p for p in couplings_by_policy if p != reference):
        for model in sorted(couplings_by_policy[policy]):
            if model not in ref:
                continue
            if item_sets is not None:
                a, b = item_sets[policy][model], item_sets[reference][model]
                union = a | b
                if union and len(a ^ b) > max_mismatch * len(union):
                    raise StatsError(f"{policy}/{model}: item sets differ by {len(a ^ b)}/{len(union)}")
            delta = abs(couplings_by_policy[policy][model] - ref[model])
            group = groups.get(model, "")
            rows.append(("model", policy, model, group, float(delta)))
            by_group[(policy, group)].append(delta)
    for (policy, group), deltas in sorted(by_group.items()):
        rows.append(("group_mean", policy, "", group, float(np.mean(deltas))))
        rows.append(("group_max", policy, "", group, float(np.max(deltas))))
    return ResultTable(["row_kind", "policy", "model_id", "group", "delta"], rows)


# --------------------------------------------------------------------------- null labels


def null_label_battery(
    items: Sequence[ItemGeometry],
    difficulties: Mapping[str, float],
    n_shuffles: int = 1000,
    seed: int = 0,
    family: str = "logN",
    domains: Mapping[str, str] | None = None,
) -> ResultTable:
    """Null distribution of the corrected coupling with difficulties shuffled within domain."""
    items = [it for it in items if it.item_id in difficulties]
    res = residualize(items, fit_length_model(items, family))
    b = np.array([difficulties[i] for i in res.item_ids])
    strata = None if domains is None else np.array([domains.get(i, "") for i in res.item_ids])
    result = permutation_null(res.residual, b, spearman, n_shuffles, seed, strata)
    null = result.null
    rows = [
        ("observed", result.observed),
        ("null_quantile", result.null_quantile),
        ("p_two_sided", result.p),
        ("null_mean", float(null.mean())),
        ("null_sd", float(null.std(ddof=1))),
        ("null_q025", float(np.quantile(null, 0.025))),
        ("null_q975", float(np.quantile(null, 0.975))),
        ("n_shuffles", float(n_shuffles)),
    ]
    return ResultTable(["statistic", "value"], rows)


# --------------------------------------------------------------------------- run counts


def run_count_stability(
    rows: Sequence[Mapping],
    difficulties: Mapping[str, float],
    k_sub: int,
    n_resample: int = 200,
    seed: int = 0,
    spec: CouplingSpec = CouplingSpec(),
) -> ResultTable:
    """Corrected coupling when each item keeps only ``k_sub`` random runs.

    ``rows`` are per-run geometry rows of one (model, layer). Also reports
    the ICC(1,1) of the per-run metric across items.
    """
    column = {"directness": "directness", "curvature_var": "curvature_variability", "twonn": "twonn_dimension", "pca90": "pca90"}[spec.metric]
    runs_of: dict[str, list[int]] = defaultdict(list)
    for k, r in enumerate(rows):
        if r.get(column) is not None and r.get("segment_tokens"):
            runs_of[r["item_id"]].append(k)
    dropped = sum(1 for v in runs_of.values() if len(v) < k_sub)
    eligible = {i: v for i, v in sorted(runs_of.items()) if len(v) >= k_sub}
    if len(eligible) < LOW_N:
        raise StatsError(f"only {len(eligible)} items have {k_sub} runs")

    def estimate(selected: list[int]) -> float:
        items, _ = aggregate_runs([rows[k] for k in selected], spec.metric)
        model = fit_length_model(items, spec.family)
        res = residualize(items, model)
        return spearman([difficulties[i] for i in res.item_ids], res.residual)

    all_idx = sorted(k for v in eligible.values() for k in v)
    full = estimate(all_idx)
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_resample):
        chosen = []
        for item, idx in eligible.items():
            chosen.extend(idx if len(idx) == k_sub else rng.choice(idx, size=k_sub, replace=False).tolist())
        draws.append(estimate(sorted(chosen)))
    draws = np.array(draws)
    icc = icc_1_1({i: [rows[k][column] for k in v] for i, v in eligible.items()})
    out = [
        ("full_estimate", full),
        ("subsample_mean", float(draws.mean())),
        ("subsample_q025", float(np.quantile(draws, 0.025))),
        ("subsample_q975", float(np.quantile(draws, 0.975))),
        ("icc_1_1", icc.icc),
        ("items", float(len(eligible))),
        ("items_dropped", float(dropped)),
        ("k_sub", float(k_sub)),
    ]
    return ResultTable(["statistic", "value"], out)
