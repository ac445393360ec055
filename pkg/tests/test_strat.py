import numpy as np
import pytest

from trajgeom import geometry, lencorr, strat
from trajgeom.lencorr import BootstrapSpec
from trajgeom.stats import StatsError

SPEC = strat.CouplingSpec(bootstrap=BootstrapSpec(100, 0))


def per_run_rows(n_items=120, runs=4, seed=0, coupling=0.3):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n_items)
    diffs = {f"i{k:03d}": float(v) for k, v in enumerate(b)}
    rows = []
    for k, (item, bk) in enumerate(diffs.items()):
        for r in range(runs):
            log_n = 5 + 0.5 * bk + 0.5 * rng.standard_normal()
            d = -0.5 * log_n + coupling * bk + 0.2 * rng.standard_normal()
            rows.append({
                "item_id": item, "model_id": "m", "layer_index": 1, "run_id": r,
                "directness": d, "segment_tokens": float(np.exp(log_n)), "sample_count": 10,
            })
    return rows, diffs


def test_majority_correct_ties_are_incorrect():
    assert strat.majority_correct([True, True, False])
    assert not strat.majority_correct([True, False])
    assert not strat.majority_correct([])


def test_correctness_strata():
    rows, diffs = per_run_rows()
    items, _ = lencorr.aggregate_runs(rows)
    correctness = {i: [b < 0.3] * 3 for i, b in diffs.items()}
    recs = strat.correctness_stratified(items, diffs, correctness, SPEC).to_records()
    assert [r["stratum"] for r in recs] == ["all", "correct", "incorrect"]
    assert recs[1]["n_items"] + recs[2]["n_items"] == recs[0]["n_items"] == 120
    direct, _, _ = lencorr.coupling_for_items(items, diffs, "logN", SPEC.bootstrap)
    assert recs[0]["rho_corrected"] == pytest.approx(direct.rho_corrected)
    few = {i: [True] for i in list(diffs)[:5]} | {i: [False] * 3 for i in list(diffs)[5:]}
    low = strat.correctness_stratified(items, diffs, few, SPEC).to_records()
    assert low[1]["flag"] == "low_n" and low[1]["rho_corrected"] is None
    with pytest.raises(StatsError):
        strat.correctness_stratified(items, diffs, {"i000": [True]}, SPEC)


def drift_segments(n_items=60, seed=1, dim=16):
    rng = np.random.default_rng(seed)
    diffs, segs = {}, {}
    for k in range(n_items):
        item = f"i{k:03d}"
        b = rng.standard_normal()
        diffs[item] = float(b)
        for r in range(2):
            n = int(np.exp(3.5 + 0.4 * b + 0.3 * rng.standard_normal()))
            drift = 0.3 + 0.15 * b
            steps = rng.standard_normal((n, dim)) + drift * np.eye(dim)[0]
            segs[(item, r)] = (np.vstack([np.zeros(dim), np.cumsum(steps, 0)]), 10 * n)
    return segs, diffs


def test_metric_value_dispatch():
    pts = np.random.default_rng(2).standard_normal((30, 4))
    assert strat.metric_value(pts, "directness") == geometry.directness(pts)[2]
    assert strat.metric_value(pts, "pca90") == float(geometry.pca90(pts))
    assert strat.metric_value(pts[:2], "twonn") is None
    with pytest.raises(ValueError):
        strat.metric_value(pts, "volume")


def test_prefix_curve_full_fraction_matches_direct_computation():
    segs, diffs = drift_segments()
    table = strat.prefix_curve(segs, diffs, (0.05, 0.5, 1.0), SPEC).to_records()
    by_f = {r["fraction"]: r for r in table if r["row_kind"] == "fraction"}
    rows = [
        {"item_id": i, "model_id": "", "layer_index": 0, "run_id": r, "directness": geometry.directness(s)[2],
         "segment_tokens": t, "sample_count": s.shape[0] - 1}
        for (i, r), (s, t) in segs.items()
    ]
    items, _ = lencorr.aggregate_runs(rows)
    ref, _, _ = lencorr.coupling_for_items(items, diffs, "logN", SPEC.bootstrap)
    assert by_f[1.0]["rho_corrected"] == pytest.approx(ref.rho_corrected, abs=1e-12)
    assert by_f[0.05]["rho_corrected"] is not None
    short = {k: (s[:2], t) for k, s_t in segs.items() for s, t in [s_t]}
    skipped = strat.prefix_curve(short, diffs, (0.5, 1.0), SPEC).to_records()
    assert all(r["note"].startswith("skipped") for r in skipped if r["row_kind"] == "fraction")
    flat = [r for r in table if r["row_kind"] == "flatness"][0]
    assert flat["rho_corrected"] == pytest.approx(abs(by_f[0.5]["rho_corrected"] - by_f[1.0]["rho_corrected"]))
    with pytest.raises(ValueError):
        strat.prefix_curve(segs, diffs, (0.0, 1.0))


def test_prefix_rows_keep_full_length():
    segs, _ = drift_segments(5)
    rows, _ = strat.prefix_rows(segs, 0.3, "directness")
    for row in rows:
        states, tokens = segs[(row["item_id"], row["run_id"])]
        assert row["segment_tokens"] == tokens and row["sample_count"] == states.shape[0] - 1


def test_boundary_delta():
    c = {"ref": {"m1": 0.4, "m2": 0.1}, "alt": {"m1": 0.35, "m2": 0.3, "m3": 0.0}}
    recs = strat.boundary_delta(c, "ref", groups={"m1": "reasoning", "m2": "reasoning"}).to_records()
    models = [r for r in recs if r["row_kind"] == "model"]
    assert [(r["model_id"], r["delta"]) for r in models] == [("m1", pytest.approx(0.05)), ("m2", pytest.approx(0.2))]
    agg = {r["row_kind"]: r["delta"] for r in recs if r["row_kind"] != "model"}
    assert agg["group_mean"] == pytest.approx(0.125) and agg["group_max"] == pytest.approx(0.2)
    sets = {"ref": {"m1": set(range(100)), "m2": set(range(10))}, "alt": {"m1": set(range(90)), "m2": set(range(10))}}
    with pytest.raises(StatsError):
        strat.boundary_delta(c, "ref", item_sets=sets)
    with pytest.raises(StatsError):
        strat.boundary_delta({"ref": {}}, "ref")


def test_null_label_battery_centres_on_zero():
    rows, diffs = per_run_rows(200, 1, seed=3)
    items, _ = lencorr.aggregate_runs(rows)
    stats = {r["statistic"]: r["value"] for r in strat.null_label_battery(items, diffs, 300, 0).to_records()}
    assert abs(stats["null_mean"]) < 0.03
    assert stats["observed"] > stats["null_q975"] and stats["p_two_sided"] <= 1 / 301 + 1e-12
    domains = {i: "a" if k % 2 else "b" for k, i in enumerate(diffs)}
    again = strat.null_label_battery(items, diffs, 300, 0, domains=domains).to_records()
    assert again[0]["value"] == stats["observed"]


def test_run_count_stability():
    rows, diffs = per_run_rows(80, 4, seed=4)
    recs = {r["statistic"]: r["value"] for r in strat.run_count_stability(rows, diffs, 2, 30, 0, SPEC).to_records()}
    assert recs["items"] == 80 and recs["items_dropped"] == 0
    assert recs["subsample_q025"] <= recs["subsample_mean"] <= recs["subsample_q975"]
    assert abs(recs["subsample_mean"] - recs["full_estimate"]) < 0.15
    with pytest.raises(StatsError):
        strat.run_count_stability(rows, diffs, 5, 10, 0, SPEC)
