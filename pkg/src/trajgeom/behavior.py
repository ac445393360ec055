"""Sentence-level judge labels: consensus, per-item behavior rates, agreement and mediation."""
from __future__ import annotations

import csv
import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from trajgeom.archive import ArchiveError, ResultTable
from trajgeom.stats import ConstantInputError, StatsError, cohens_kappa, ols_residualize, percentile_bootstrap, spearman

CATEGORIES = ("strategy_shift", "uncertainty", "self_correct", "verify", "restate", "subgoal", "none")
LABEL_COLUMNS = ("item_id", "run_id", "sentence_index", "judge_id", "category")


class BehaviorError(ValueError):
    pass


class CollinearityError(BehaviorError):
    pass


@dataclass
class SentenceLabels:
    item_id: str
    run_id: int
    sentence_index: int
    judgments: dict[str, str]  # judge id -> category

    def __post_init__(self):
        if not self.judgments:
            raise BehaviorError("a sentence needs at least one judge")
        bad = set(self.judgments.values()) - set(CATEGORIES)
        if bad:
            raise BehaviorError(f"unknown categories {sorted(bad)}")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.item_id, self.run_id, self.sentence_index)


@dataclass(frozen=True)
class Consensus:
    item_id: str
    run_id: int
    sentence_index: int
    category: str
    tie: bool = False


@dataclass
class BehaviorTable:
    items: list[str]
    rates: dict[str, np.ndarray]  # category -> per-item rate
    dropped: int = 0

    def rate(self, item: str, category: str) -> float:
        return float(self.rates[category][self.items.index(item)])

    def to_table(self) -> ResultTable:
        rows = [tuple([item] + [float(self.rates[c][i]) for c in CATEGORIES]) for i, item in enumerate(self.items)]
        return ResultTable(["item_id", *CATEGORIES], rows)


@dataclass
class MediationResult:
    category: str
    a: float
    b: float
    c_prime: float
    indirect_proportion: float
    ci: tuple[float, float]
    n_items: int
    unstable: bool = False

    COLUMNS = ("category", "n_items", "a", "b", "c_prime", "indirect_proportion", "ci_low", "ci_high", "unstable")

    def row(self) -> tuple:
        return (self.category, self.n_items, self.a, self.b, self.c_prime, self.indirect_proportion, self.ci[0], self.ci[1], self.unstable)


# --------------------------------------------------------------------------- label I/O


def group_labels(rows: Iterable[Mapping]) -> list[SentenceLabels]:
    """Collect long-format label rows into one record per sentence."""
    by_key: dict[tuple, dict] = defaultdict(dict)
    for r in rows:
        key = (str(r["item_id"]), int(r["run_id"]), int(r["sentence_index"]))
        by_key[key][str(r["judge_id"])] = str(r["category"])
    return [SentenceLabels(k[0], k[1], k[2], v) for k, v in sorted(by_key.items())]


def read_labels_csv(path) -> list[SentenceLabels]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LABEL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ArchiveError(f"{path}: missing label columns {sorted(missing)}")
        return group_labels(reader)


def write_labels_csv(labels: Iterable[SentenceLabels], path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(LABEL_COLUMNS)
        for s in sorted(labels, key=lambda s: s.key):
            for judge in sorted(s.judgments):
                w.writerow((s.item_id, s.run_id, s.sentence_index, judge, s.judgments[judge]))


# --------------------------------------------------------------------------- aggregation


def majority_vote(labels: Iterable[SentenceLabels], min_judges: int = 2) -> list[Consensus]:
    """Modal category per sentence; a tie for the top count yields ``none`` with ``tie`` set."""
    out = []
    for s in labels:
        if len(s.judgments) < min_judges:
            raise BehaviorError(f"sentence {s.key} has {len(s.judgments)} judges, need {min_judges}")
        counts = Counter(s.judgments.values()).most_common()
        top = counts[0][1]
        winners = [c for c, n in counts if n == top]
        if len(winners) == 1:
            out.append(Consensus(s.item_id, s.run_id, s.sentence_index, winners[0]))
        else:
            out.append(Consensus(s.item_id, s.run_id, s.sentence_index, "none", True))
    return out


def behavior_rates(consensus: Iterable[Consensus], sentence_counts: Mapping[tuple[str, int], int], pooled: bool = False) -> BehaviorTable:
    """Per-item category rates over the solution segment.

    ``sentence_counts`` maps ``(item, run)`` to the number of sentences in
    that run's segment; unlabeled sentences count as ``none``. Runs are
    averaged per item, or pooled (summed counts) when ``pooled`` is set.
    Runs with no sentences are dropped and counted.
    """
    hits: dict[tuple, Counter] = defaultdict(Counter)
    for c in consensus:
        hits[(c.item_id, c.run_id)][c.category] += 1
    per_item: dict[str, list] = defaultdict(list)
    dropped = 0
    for (item, run), total in sorted(sentence_counts.items()):
        if total < 1:
            dropped += 1
            continue
        counts = hits.get((item, run), Counter())
        labelled = sum(v for k, v in counts.items() if k != "none")
        if labelled > total:
            raise BehaviorError(f"{(item, run)}: more labelled sentences than sentences")
        vec = np.array([counts.get(c, 0) for c in CATEGORIES[:-1]] + [total - labelled], dtype=np.float64)
        per_item[item].append((vec, total))
    items = sorted(per_item)
    mat = np.empty((len(items), len(CATEGORIES)))
    for i, item in enumerate(items):
        runs = per_item[item]
        if pooled:
            mat[i] = sum(v for v, _ in runs) / sum(t for _, t in runs)
        else:
            mat[i] = np.mean([v / t for v, t in runs], axis=0)
    return BehaviorTable(items, {c: mat[:, k] for k, c in enumerate(CATEGORIES)}, dropped)


def _judge_view(labels: Sequence[SentenceLabels], judge: str) -> list[Consensus]:
    return [Consensus(s.item_id, s.run_id, s.sentence_index, s.judgments[judge]) for s in labels if judge in s.judgments]


def agreement_report(labels: Sequence[SentenceLabels], sentence_counts: Mapping[tuple[str, int], int] | None = None) -> ResultTable:
    """Pairwise sentence-level Cohen's kappa and per-category rate Spearman.

    Without ``sentence_counts`` each run's sentence count is taken as its
    number of labelled sentences. Summary rows give the mean, min and max
    over the defined pairwise values.
    """
    judges = sorted({j for s in labels for j in s.judgments})
    if len(judges) < 2:
        raise BehaviorError("agreement needs at least two judges")
    if sentence_counts is None:
        sentence_counts = Counter((s.item_id, s.run_id) for s in labels)
    rates = {j: behavior_rates(_judge_view(labels, j), sentence_counts) for j in judges}
    rows = []
    kappas, rhos = [], []
    for ja, jb in itertools.combinations(judges, 2):
        both = [s for s in labels if ja in s.judgments and jb in s.judgments]
        try:
            k = cohens_kappa([s.judgments[ja] for s in both], [s.judgments[jb] for s in both])
            kappas.append(k)
        except StatsError:
            k = None
        rows.append(("cohens_kappa", "", ja, jb, k, len(both)))
        ra, rb = rates[ja], rates[jb]
        common = sorted(set(ra.items) & set(rb.items))
        ia = [ra.items.index(i) for i in common]
        ib = [rb.items.index(i) for i in common]
        for cat in CATEGORIES:
            try:
                rho = spearman(ra.rates[cat][ia], rb.rates[cat][ib])
                rhos.append(rho)
            except StatsError:
                rho = None
            rows.append(("rate_spearman", cat, ja, jb, rho, len(common)))
    for name, vals in (("cohens_kappa", kappas), ("rate_spearman", rhos)):
        if vals:
            rows.append((f"{name}_mean", "", "", "", float(np.mean(vals)), len(vals)))
            rows.append((f"{name}_min", "", "", "", float(np.min(vals)), len(vals)))
            rows.append((f"{name}_max", "", "", "", float(np.max(vals)), len(vals)))
    return ResultTable(["statistic", "category", "judge_a", "judge_b", "value", "n"], rows)


# --------------------------------------------------------------------------- mediation


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd == 0.0:
        raise ConstantInputError("variable is constant after residualization")
    return (x - x.mean()) / sd


def _paths(d: np.ndarray, m: np.ndarray, g: np.ndarray, max_condition: float) -> tuple[float, float, float]:
    design = np.column_stack([np.ones(d.size), d, m])
    cond = np.linalg.cond(design)
    if not math.isfinite(cond) or cond > max_condition:
        raise CollinearityError(f"difficulty and behavior are collinear (condition number {cond:.3g})")
    a = float(np.polyfit(d, m, 1)[0])
    coef, *_ = np.linalg.lstsq(design, g, rcond=None)
    return a, float(coef[2]), float(coef[1])


def _proportion(a: float, b: float, c_prime: float, rel_tol: float) -> float | None:
    total = a * b + c_prime
    if abs(total) <= rel_tol * (abs(a * b) + abs(c_prime)) or total == 0.0:
        return None
    return a * b / total


def indirect_effect(
    difficulty,
    behavior_rate,
    geometry_residual,
    log_length,
    bootstrap=None,
    category: str = "",
    min_items: int = 30,
    max_condition: float = 1e6,
    rel_tol: float = 1e-6,
) -> MediationResult:
    """Share of the difficulty-geometry association routed through a behavior.

    All three variables are OLS-residualized on log length and standardized.
    ``a`` is the slope of behavior on difficulty; ``b`` and ``c'`` are the
    partial slopes of geometry on behavior and on difficulty. The proportion
    ``ab / (ab + c')`` is left unclipped and is NaN with ``unstable`` set
    when the denominator vanishes. The CI resamples items.
    """
    from trajgeom.lencorr import BootstrapSpec

    bootstrap = bootstrap or BootstrapSpec()
    arrays = [np.asarray(v, dtype=np.float64) for v in (difficulty, behavior_rate, geometry_residual, log_length)]
    if len({a.shape for a in arrays}) != 1:
        raise BehaviorError("all four variables must cover the same items")
    finite = np.all([np.isfinite(a) for a in arrays], axis=0)
    d, m, g, ln = (a[finite] for a in arrays)
    if d.size < min_items:
        raise BehaviorError(f"need at least {min_items} items with all variables, got {d.size}")
    d, m, g = (_zscore(ols_residualize(v, ln)) for v in (d, m, g))
    a, b, c_prime = _paths(d, m, g, max_condition)
    prop = _proportion(a, b, c_prime, rel_tol)

    def stat(idx):
        try:
            return _proportion(*_paths(d[idx], m[idx], g[idx], max_condition), rel_tol)
        except (CollinearityError, np.linalg.LinAlgError):
            return None

    try:
        ci = percentile_bootstrap(np.arange(d.size), stat, bootstrap.n_boot, bootstrap.seed, bootstrap.level)
    except StatsError:
        ci = (float("nan"), float("nan"))
    if prop is None:
        return MediationResult(category, a, b, c_prime, float("nan"), ci, int(d.size), True)
    return MediationResult(category, a, b, c_prime, float(prop), ci, int(d.size))


def mediation_table(results: Iterable[MediationResult]) -> ResultTable:
    return ResultTable(list(MediationResult.COLUMNS), [r.row() for r in results])
