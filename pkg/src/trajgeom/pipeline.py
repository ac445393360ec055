"""Stage orchestration over a cohort directory and a report bundle directory.

Every stage reads its inputs from the cohort and from files written by
upstream stages in the bundle, and writes its own result tables there. A
stage can therefore be rerun alone once its upstream outputs exist.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from trajgeom import __version__, archive, behavior, calib, geometry, lencorr, probes, segment, strat
from trajgeom.archive import ArchiveError, ResultTable, read_result_table, write_result_table
from trajgeom.stats import StatsError, spearman

log = logging.getLogger(__name__)

METRICS = ("directness", "curvature_var", "twonn", "pca90")
STAGES = ("segment", "geometry", "calib", "correct", "couple", "strat", "probe", "behave", "summary")
VARIANTS = ("default", "full_output", "fixed_prefix")


class ConfigError(ValueError):
    """Invalid configuration; reported as a usage error."""


class StageInputError(ArchiveError):
    """A stage's upstream output is missing."""


@dataclass
class PipelineConfig:
    cohort: str
    out: str = "bundle"
    metrics: tuple[str, ...] = METRICS
    family: str = "logN"
    bootstrap_n: int = 1000
    permutation_n: int = 1000
    seed: int = 0
    boundary_variant: str = "default"
    tau: float | None = None
    tagged_models: tuple[str, ...] | None = None  # default: every reasoning model
    stages: tuple[str, ...] = STAGES
    difficulty_file: str | None = None
    calib_model: str = "1pl"
    loo: bool = False
    probe_positions: int = 10
    probe_folds: int = 5
    probe_perm: int = 20
    probe_lambda_grid: tuple[float, ...] = probes.LAMBDA_GRID
    probe_random_directions: int = 20
    prefix_fractions: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 1.0)
    run_subsample: int = 3
    run_resamples: int = 50
    jobs: int = 1

    def __post_init__(self):
        for name in ("metrics", "stages", "probe_lambda_grid", "prefix_fractions"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.tagged_models is not None:
            self.tagged_models = tuple(self.tagged_models)

    def validate(self, check_paths: bool = True) -> None:
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ConfigError(f"unknown metric(s) {bad}; choose from {list(METRICS)}")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
        if self.family not in lencorr.FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {list(lencorr.FAMILIES)}")
        if self.boundary_variant not in VARIANTS:
            raise ConfigError(f"unknown boundary variant {self.boundary_variant!r}")
        if self.boundary_variant == "fixed_prefix" and not (self.tau and 0 < self.tau <= 1):
            raise ConfigError("fixed_prefix needs tau in (0, 1]")
        if self.calib_model not in ("1pl", "2pl"):
            raise ConfigError("calib_model must be 1pl or 2pl")
        for name in ("bootstrap_n", "permutation_n", "probe_positions", "probe_folds", "run_subsample", "run_resamples", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(not 0 < f <= 1 for f in self.prefix_fractions):
            raise ConfigError("prefix fractions must lie in (0, 1]")
        if check_paths:
            if not Path(self.cohort).is_dir():
                raise ConfigError(f"cohort directory not found: {self.cohort}")
            if self.difficulty_file and not Path(self.difficulty_file).is_file():
                raise ConfigError(f"difficulty file not found: {self.difficulty_file}")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "cohort" not in raw:
            raise ConfigError("config needs a cohort path")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        """Hash of every setting that affects results (the output path excluded)."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("out", "jobs")}
        payload["cohort"] = str(Path(payload["cohort"]).name)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


class Context:
    """Lazily loaded cohort inputs shared by the stages of one run."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.cohort = Path(config.cohort)
        self.out = Path(config.out)
        self._cache: dict = {}

    def cached(self, key, loader: Callable):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    @property
    def manifest(self):
        return self.cached("manifest", lambda: archive.load_manifest(self.cohort))

    @property
    def index(self):
        return self.cached("index", lambda: archive.load_index(self.cohort))

    @property
    def traces(self):
        return self.cached("traces", lambda: {(t.item_id, t.model_id, t.run_id): t for t in archive.load_traces(self.cohort)})

    @property
    def items(self):
        return self.cached("items", lambda: archive.load_items(self.cohort) if (self.cohort / archive.ITEMS_NAME).is_file() else [])

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config.config_hash(), "seed": self.config.seed, "version": __version__}

    def write(self, table: ResultTable, name: str) -> Path:
        table.provenance = {**self.provenance, **table.provenance}
        return write_result_table(table, self.out / name)

    def read(self, name: str) -> ResultTable:
        path = self.out / name
        if not path.is_file():
            raise StageInputError(f"missing stage output {name} in {self.out}")
        return read_result_table(path)

    def policy(self, model: archive.ModelInfo) -> segment.BoundaryPolicy:
        tagged = self.config.tagged_models
        is_tagged = model.role == "reasoning" if tagged is None else model.id in tagged
        domain = self.manifest.domains[0].name if self.manifest.domains else "code"
        return segment.BoundaryPolicy(domain, "tagged" if is_tagged else "untagged", self.config.boundary_variant, self.config.tau)

    def role(self, model_id: str) -> str:
        return self.manifest.model(model_id).role

    def difficulties(self) -> dict[str, float]:
        t = self.read("difficulty.csv")
        return {r["id"]: r["value"] for r in t.to_records() if r["kind"] == "item"}

    def segments(self) -> dict[tuple, segment.SegmentedTrace]:
        def load():
            out = {}
            for r in self.read("segments.csv").to_records():
                key = (r["item_id"], r["model_id"], r["run_id"])
                out[key] = segment.SegmentedTrace(
                    self.traces[key], (r["byte_start"], r["byte_end"]), r["token_start"], r["token_count"], r["boundary_source"]
                )
            return out

        return self.cached("segments", load)


# --------------------------------------------------------------------------- stages


def stage_segment(ctx: Context) -> None:
    rows = []
    segs = []
    models = {m.id: m for m in ctx.manifest.models}
    for key in sorted(ctx.traces):
        trace = ctx.traces[key]
        if trace.model_id not in models or trace.truncated:
            continue
        s = segment.detect_boundary(trace, ctx.policy(models[trace.model_id]))
        segs.append(s)
        rows.append((*key, s.boundary_source, s.segment_char_span[0], s.segment_char_span[1], s.segment_token_start, s.segment_token_count))
    ctx.write(ResultTable(["item_id", "model_id", "run_id", "boundary_source", "byte_start", "byte_end", "token_start", "token_count"], rows), "segments.csv")
    counts = segment.boundary_counts(segs)
    ctx.write(ResultTable(["boundary_source", "count"], sorted(counts.items())), "boundary_counts.csv")


def _geometry_metrics(config) -> tuple[str, ...]:
    names = {"directness": "directness", "curvature_var": "curvature", "twonn": "twonn", "pca90": "pca90"}
    return tuple(names[m] for m in config.metrics)


def stage_geometry(ctx: Context) -> None:
    segs = ctx.segments()
    spec = segment.SamplingSpec(ctx.manifest.stride_tokens, 1.0)
    index = {k: v for k, v in ctx.index.items() if (k[0], k[1], k[2]) in segs}
    table, report, _ = geometry.geometry_for_cohort(
        ctx.manifest, spec=spec, metrics=_geometry_metrics(ctx.config), index=index, jobs=ctx.config.jobs, segments=segs
    )
    ctx.write(table, "geometry.csv")
    ctx.write(ResultTable(["statistic", "value"], sorted(report.items())), "geometry_report.csv")


def stage_calib(ctx: Context) -> None:
    cfg = ctx.config
    if cfg.difficulty_file:
        ext = read_result_table(cfg.difficulty_file)
        rows = [("item", str(r["item_id"]), float(r["difficulty"]), None) for r in ext.to_records()]
        ctx.write(ResultTable(["kind", "id", "value", "discrimination"], rows, {"source": "external"}), "difficulty.csv")
        return
    matrix = calib.ResponseMatrix.from_records(archive.iter_responses_csv(ctx.cohort / archive.RESPONSES_NAME))
    fit_config = calib.FitConfig(seed=cfg.seed)
    scale = calib.fit_2pl(matrix, fit_config) if cfg.calib_model == "2pl" else calib.fit_rasch(matrix, fit_config)
    table = scale.to_table()
    table.provenance = {"source": cfg.calib_model, "stopped_epoch": scale.fit_report["stopped_epoch"]}
    ctx.write(table, "difficulty.csv")
    bounds = calib.classify_boundary_items(matrix)
    rows = [("informative", len(bounds.informative)), ("floor", len(bounds.floor)), ("ceiling", len(bounds.ceiling))]
    ctx.write(ResultTable(["class", "count"], rows), "calib_boundary.csv")
    labelled = {m.item_id: m.native_label for m in ctx.items if m.native_label is not None}
    if len(labelled) >= 10:
        ctx.write(calib.validate_external(scale, labelled), "calib_validation.csv")
    if cfg.loo and len(matrix.models) >= 3:
        ctx.write(calib.loo_recalibration(matrix, fit_config, cfg.jobs), "calib_loo.csv")


def _geometry_rows(ctx: Context) -> list[dict]:
    return ctx.cached("geometry_rows", lambda: ctx.read("geometry.csv").to_records())


def _item_cells(ctx: Context, metric: str) -> dict[tuple, list]:
    """Run-averaged items per (model, layer) for one metric."""
    items, _ = lencorr.aggregate_runs(_geometry_rows(ctx), metric)
    cells = defaultdict(list)
    for it in items:
        cells[(it.model_id, it.layer_index)].append(it)
    return cells


RESIDUAL_COLUMNS = ["model_id", "layer_index", "metric", "family", "item_id", "mean_length", "mean_sampled_length", "run_count", "regressor", "observed", "fitted", "residual"]


def stage_correct(ctx: Context) -> None:
    cfg = ctx.config
    res_rows, model_rows, diag_rows = [], [], []
    for metric in cfg.metrics:
        for (model_id, layer), items in sorted(_item_cells(ctx, metric).items()):
            try:
                model = lencorr.fit_length_model(items, cfg.family)
                res = lencorr.residualize(items, model)
            except (lencorr.LengthModelError, StatsError) as exc:
                model_rows.append((model_id, layer, metric, cfg.family, None, None, None, len(items), str(exc)))
                continue
            model_rows.append((model_id, layer, metric, cfg.family, model.intercept if model.bins is None else None, model.slope if model.bins is None else None, model.r_squared, len(res.item_ids), ""))
            by_id = {it.item_id: it for it in items}
            for k, item_id in enumerate(res.item_ids):
                it = by_id[item_id]
                res_rows.append((model_id, layer, metric, cfg.family, item_id, it.mean_length, it.mean_sampled_length, it.run_count, float(res.regressor[k]), float(res.observed[k]), float(res.fitted[k]), float(res.residual[k])))
            for r in lencorr.residual_diagnostics(res).to_records():
                diag_rows.append((model_id, layer, metric, r["statistic"], r["value"], r["n"], r["flag"]))
    ctx.write(ResultTable(RESIDUAL_COLUMNS, res_rows), "residuals.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "metric", "family", "intercept", "slope", "r_squared", "n_items", "error"], model_rows), "length_models.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "metric", "statistic", "value", "n", "flag"], diag_rows), "residual_diagnostics.csv")


def _residual_tables(ctx: Context) -> dict[tuple, lencorr.ResidualTable]:
    def load():
        groups = defaultdict(list)
        for r in ctx.read("residuals.csv").to_records():
            groups[(r["model_id"], r["layer_index"], r["metric"])].append(r)
        out = {}
        for key, rows in sorted(groups.items()):
            out[key] = lencorr.ResidualTable(
                [r["item_id"] for r in rows],
                np.array([r["residual"] for r in rows]),
                np.array([r["fitted"] for r in rows]),
                np.array([r["regressor"] for r in rows]),
                rows[0]["family"],
            )
        return out

    return ctx.cached("residual_tables", load)


def stage_couple(ctx: Context) -> None:
    cfg = ctx.config
    b = ctx.difficulties()
    spec = lencorr.BootstrapSpec(cfg.bootstrap_n, cfg.seed)
    per_layer = defaultdict(list)
    rows, errors = [], []
    for (model_id, layer, metric), res in _residual_tables(ctx).items():
        try:
            c = lencorr.corrected_coupling(res, b, spec, model_id, layer, metric)
        except StatsError as exc:
            errors.append((model_id, layer, metric, str(exc)))
            continue
        per_layer[(model_id, metric)].append(c)
        rows.append(c.row())
    ctx.write(ResultTable(list(lencorr.CouplingResult.COLUMNS), rows), "couplings.csv")
    summary = []
    for (model_id, metric), cs in sorted(per_layer.items()):
        s = lencorr.layer_summary(cs)
        summary.append((model_id, ctx.role(model_id), *s.row()[1:]))
    ctx.write(ResultTable(["model_id", "group", *lencorr.CouplingResult.COLUMNS[1:]], summary), "coupling_summary.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "metric", "error"], errors), "coupling_errors.csv")


def _segment_states(ctx: Context, model_id: str, layer: int) -> dict[tuple, tuple[np.ndarray, int]]:
    """Segment-restricted states per (item, run) for one model and layer."""
    segs = ctx.segments()
    spec = segment.SamplingSpec(ctx.manifest.stride_tokens, 1.0)
    out = {}
    for (item, model, run), s in segs.items():
        if model != model_id or (item, model, run, layer) not in ctx.index:
            continue
        traj = archive.load_trajectory(ctx.manifest, item, model, run, layer, index=ctx.index)
        sliced = segment.slice_states(traj, s, spec)
        if sliced is not None:
            out[(item, run)] = (sliced.states, s.segment_token_count)
    return out


def stage_strat(ctx: Context) -> None:
    cfg = ctx.config
    b = ctx.difficulties()
    cspec = strat.CouplingSpec(cfg.family, lencorr.BootstrapSpec(cfg.bootstrap_n, cfg.seed), "directness")
    correctness = {m.item_id: [m.correctness[k] for k in sorted(m.correctness)] for m in ctx.items if m.correctness}
    domains = {m.item_id: m.domain for m in ctx.items}
    cells = _item_cells(ctx, "directness")
    corr_rows, null_rows, run_rows, prefix_rows = [], [], [], []
    first_layer = {}
    for (model_id, layer), items in sorted(cells.items()):
        first_layer.setdefault(model_id, layer)
        if correctness and ctx.role(model_id) == "reasoning":
            try:
                t = strat.correctness_stratified(items, b, correctness, cspec)
                corr_rows.extend((model_id, layer, *r) for r in t.rows)
            except StatsError as exc:
                corr_rows.append((model_id, layer, "all", None, None, None, 0, f"error: {exc}"))
        try:
            t = strat.null_label_battery(items, b, cfg.permutation_n, cfg.seed, cfg.family, domains or None)
            null_rows.extend((model_id, layer, *r) for r in t.rows)
        except (StatsError, lencorr.LengthModelError) as exc:
            null_rows.append((model_id, layer, "error", None))
            log.warning("null battery %s/%s: %s", model_id, layer, exc)
        rows = [r for r in _geometry_rows(ctx) if r["model_id"] == model_id and r["layer_index"] == layer]
        try:
            t = strat.run_count_stability(rows, b, cfg.run_subsample, cfg.run_resamples, cfg.seed, cspec)
            run_rows.extend((model_id, layer, *r) for r in t.rows)
        except (StatsError, lencorr.LengthModelError) as exc:
            log.warning("run-count stability %s/%s: %s", model_id, layer, exc)
    for model_id, layer in sorted(first_layer.items()):
        segs = _segment_states(ctx, model_id, layer)
        t = strat.prefix_curve(segs, b, cfg.prefix_fractions, cspec)
        prefix_rows.extend((model_id, layer, *r) for r in t.rows)
    ctx.write(ResultTable(["model_id", "layer_index", "stratum", "rho_corrected", "ci_low", "ci_high", "n_items", "flag"], corr_rows), "strat_correctness.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "statistic", "value"], null_rows), "strat_null.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "statistic", "value"], run_rows), "strat_runcount.csv")
    ctx.write(ResultTable(["model_id", "layer_index", "row_kind", "fraction", "rho_corrected", "ci_low", "ci_high", "n_items", "note"], prefix_rows), "strat_prefix.csv")


def stage_probe(ctx: Context) -> None:
    cfg = ctx.config
    b = ctx.difficulties()
    heat_rows, peak_rows, control_rows = [], [], []
    for model in ctx.manifest.models:
        cells = {}
        seg_cache = {}
        for layer in model.layer_indices:
            segs = _segment_states(ctx, model.id, layer)
            seg_cache[layer] = segs
            runs_by_item = defaultdict(list)
            lengths = defaultdict(list)
            for (item, run), (states, tokens) in sorted(segs.items()):
                runs_by_item[item].append(states)
                lengths[item].append(tokens)
            log_len = {i: math.log(np.mean(v)) for i, v in lengths.items() if np.mean(v) > 0}
            for pos in range(cfg.probe_positions):
                try:
                    cells[(layer, pos)] = probes.prepare_dataset(runs_by_item, b, log_len, pos, cfg.probe_positions, True)
                except probes.ProbeError as exc:
                    log.warning("probe cell %s/%s/%s: %s", model.id, layer, pos, exc)
        if not cells:
            continue
        heat = probes.probe_heatmap(cells, cfg.probe_lambda_grid, cfg.probe_folds, cfg.probe_perm, cfg.seed, cfg.jobs)
        heat_rows.extend((model.id, *r) for r in heat.rows)
        layer, pos = probes.peak_cell(heat)
        ds = cells[(layer, pos)]
        probe = probes.fit_ridge_cv(ds, cfg.probe_lambda_grid, cfg.probe_folds, cfg.seed)
        direction = probes.extract_direction(probe, ds.X)
        peak_rows.append((model.id, layer, pos, probe.cv_r2, probe.lam, direction.projection_sd))
        segs = seg_cache[layer]
        control = probes.nullspace_control(_projected_coupling(segs, b, cfg), direction, cfg.probe_random_directions, cfg.seed)
        control_rows.append((model.id, layer, control["rho_base"], control["delta"], control["p"], cfg.probe_random_directions))
    ctx.write(ResultTable(["model_id", "layer", "position", "cv_r2", "perm_p", "lambda", "n_items"], heat_rows), "probe_heatmap.csv")
    ctx.write(ResultTable(["model_id", "layer", "position", "cv_r2", "lambda", "projection_sd"], peak_rows), "probe_peak.csv")
    ctx.write(ResultTable(["model_id", "layer", "rho_base", "delta", "p", "n_random"], control_rows), "probe_nullspace.csv")


def _projected_coupling(segs, b, cfg):
    """Corrected directness coupling after removing a direction from every state."""

    def fn(direction):
        rows = []
        for (item, run), (states, tokens) in sorted(segs.items()):
            s = states if direction is None else probes.nullspace_project(states, direction)
            d = geometry.directness(s)[2] if s.shape[0] >= 2 else None
            rows.append({"item_id": item, "model_id": "", "layer_index": 0, "run_id": run, "segment_tokens": tokens, "sample_count": s.shape[0] - 1, "directness": d})
        items, _ = lencorr.aggregate_runs(rows, "directness")
        items = [it for it in items if it.item_id in b]
        res = lencorr.residualize(items, lencorr.fit_length_model(items, cfg.family))
        return spearman([b[i] for i in res.item_ids], res.residual)

    return fn


def stage_behave(ctx: Context) -> None:
    cfg = ctx.config
    labels_path = ctx.cohort / "labels.csv"
    if not labels_path.is_file():
        log.info("no labels.csv in cohort; behavior stage skipped")
        return
    labels = behavior.read_labels_csv(labels_path)
    counts_path = ctx.cohort / "sentence_counts.csv"
    if counts_path.is_file():
        counts = {(r["item_id"], int(r["run_id"])): int(r["sentence_count"]) for r in read_result_table(counts_path).to_records()}
    else:
        counts = None
    consensus = behavior.majority_vote(labels)
    rates = behavior.behavior_rates(consensus, counts or {(s.item_id, s.run_id): 0 for s in labels})
    ctx.write(rates.to_table(), "behavior_rates.csv")
    ctx.write(behavior.agreement_report(labels, counts), "behavior_agreement.csv")
    stripe = []
    for c in consensus:
        total = (counts or {}).get((c.item_id, c.run_id))
        if total:
            stripe.append((c.item_id, c.run_id, c.sentence_index / total, (c.sentence_index + 1) / total, c.category, c.tie))
    ctx.write(ResultTable(["item_id", "run_id", "span_start_frac", "span_end_frac", "category", "tie"], sorted(stripe)), "behavior_spans.csv")
    b = ctx.difficulties()
    reasoning = [m.id for m in ctx.manifest.models if m.role == "reasoning"]
    keys = sorted(k for k in _residual_tables(ctx) if k[2] == "directness" and (not reasoning or k[0] == reasoning[0]))
    med_rows = []
    if keys:
        key = keys[0]  # first sampled layer of the first reasoning model
        res = _residual_tables(ctx)[key]
        lengths = {
            r["item_id"]: r["mean_length"]
            for r in ctx.read("residuals.csv").to_records()
            if (r["model_id"], r["layer_index"], r["metric"]) == key
        }
        pos = {i: k for k, i in enumerate(rates.items)}
        r_of = dict(zip(res.item_ids, res.residual))
        ids = [i for i in res.item_ids if i in b and i in pos]
        spec = lencorr.BootstrapSpec(cfg.bootstrap_n, cfg.seed)
        for cat in behavior.CATEGORIES[:-1]:
            try:
                m = behavior.indirect_effect(
                    [b[i] for i in ids],
                    [rates.rates[cat][pos[i]] for i in ids],
                    [r_of[i] for i in ids],
                    [math.log(lengths[i]) for i in ids],
                    spec,
                    cat,
                )
                med_rows.append((key[0], key[1], *m.row()))
            except (behavior.BehaviorError, StatsError) as exc:
                med_rows.append((key[0], key[1], cat, len(ids), None, None, None, None, None, None, True))
                log.warning("mediation %s %s: %s", key, cat, exc)
    ctx.write(ResultTable(["model_id", "layer_index", *behavior.MediationResult.COLUMNS], med_rows), "behavior_mediation.csv")


def stage_summary(ctx: Context) -> None:
    """Medians per group and domain, raw and corrected, per metric."""
    table = ctx.read("coupling_summary.csv")
    domain = ctx.manifest.domains[0].name if ctx.manifest.domains else ""
    groups = defaultdict(list)
    for r in table.to_records():
        groups[(r["group"], r["metric"])].append(r)
    rows = []
    for (group, metric), rs in sorted(groups.items()):
        rows.append((group, domain, metric, len(rs), float(np.median([r["rho_raw"] for r in rs])), float(np.median([r["rho_corrected"] for r in rs])), float(np.median([r["ci_low"] for r in rs])), float(np.median([r["ci_high"] for r in rs]))))
    ctx.write(ResultTable(["group", "domain", "metric", "n_models", "median_rho_raw", "median_rho_corrected", "median_ci_low", "median_ci_high"], rows), "summary.csv")


STAGE_FUNCS = {
    "segment": stage_segment,
    "geometry": stage_geometry,
    "calib": stage_calib,
    "correct": stage_correct,
    "couple": stage_couple,
    "strat": stage_strat,
    "probe": stage_probe,
    "behave": stage_behave,
    "summary": stage_summary,
}
FATAL_STAGES = ("segment", "geometry", "calib", "correct", "couple")


def run_stage(config: PipelineConfig, name: str, ctx: Context | None = None) -> None:
    ctx = ctx or Context(config)
    ctx.out.mkdir(parents=True, exist_ok=True)
    STAGE_FUNCS[name](ctx)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(config: PipelineConfig) -> dict:
    """Run the configured stages in order and write ``provenance.json``.

    Failures in optional stages are recorded and the run continues; a
    failure in a fatal stage is re-raised after provenance is written.
    """
    config.validate()
    ctx = Context(config)
    ctx.out.mkdir(parents=True, exist_ok=True)
    status = {}
    fatal = None
    for name in STAGES:
        if name not in config.stages:
            continue
        try:
            STAGE_FUNCS[name](ctx)
            status[name] = "ok"
        except Exception as exc:  # noqa: BLE001 - stage isolation
            status[name] = f"failed: {type(exc).__name__}: {exc}"
            log.error("stage %s failed: %s", name, exc)
            if name in FATAL_STAGES:
                fatal = exc
                break
    outputs = {p.name: _sha256(p) for p in sorted(ctx.out.iterdir()) if p.is_file() and p.name != "provenance.json"}
    provenance = {
        "config": {k: v for k, v in config.to_dict().items() if k not in ("out", "cohort", "jobs")},
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "versions": {"trajgeom": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "stages": status,
        "outputs": outputs,
    }
    (ctx.out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if fatal is not None:
        raise fatal
    return provenance


# --------------------------------------------------------------------------- plot data

PLOT_KINDS = ("dumbbell", "prefix", "heatmap", "residual_scatter", "stripe")


class PlotDataError(ArchiveError):
    pass


def emit_plot_data(bundle, plot: str) -> ResultTable:
    """Plot-ready table for one figure kind from a report bundle.

    dumbbell: model_id, group, metric, raw, corrected, ci_lo, ci_hi
    prefix: model_id, fraction, rho, ci_lo, ci_hi
    heatmap: model_id, layer, position, cv_r2, perm_p
    residual_scatter: model_id, layer_index, item_id, log_length, residual
    stripe: item, span_start_frac, span_end_frac, category
    """
    bundle = Path(bundle)
    sources = {
        "dumbbell": "coupling_summary.csv",
        "prefix": "strat_prefix.csv",
        "heatmap": "probe_heatmap.csv",
        "residual_scatter": "residuals.csv",
        "stripe": "behavior_spans.csv",
    }
    if plot not in sources:
        raise ValueError(f"unknown plot kind {plot!r}; choose from {list(PLOT_KINDS)}")
    path = bundle / sources[plot]
    if not path.is_file():
        raise PlotDataError(f"plot {plot!r} needs stage output {sources[plot]}, not found in {bundle}")
    recs = read_result_table(path).to_records()
    if plot == "dumbbell":
        cols = ["model_id", "group", "metric", "raw", "corrected", "ci_lo", "ci_hi"]
        rows = [(r["model_id"], r["group"], r["metric"], r["rho_raw"], r["rho_corrected"], r["ci_low"], r["ci_high"]) for r in recs]
    elif plot == "prefix":
        cols = ["model_id", "fraction", "rho", "ci_lo", "ci_hi"]
        rows = [(r["model_id"], r["fraction"], r["rho_corrected"], r["ci_low"], r["ci_high"]) for r in recs if r["row_kind"] == "fraction"]
    elif plot == "heatmap":
        cols = ["model_id", "layer", "position", "cv_r2", "perm_p"]
        rows = [(r["model_id"], r["layer"], r["position"], r["cv_r2"], r["perm_p"]) for r in recs]
    elif plot == "residual_scatter":
        cols = ["model_id", "layer_index", "metric", "item_id", "log_length", "residual"]
        rows = [(r["model_id"], r["layer_index"], r["metric"], r["item_id"], math.log(r["mean_length"]), r["residual"]) for r in recs]
    else:
        cols = ["item", "span_start_frac", "span_end_frac", "category"]
        rows = [(r["item_id"], r["span_start_frac"], r["span_end_frac"], r["category"]) for r in recs if r["run_id"] == 0]
    return ResultTable(cols, rows)
