"""Seeded synthetic cohorts with planted length, geometry, response and behavior laws.

Each (item, model, run, layer) trajectory is a drift-plus-isotropic-noise
walk. Inside the solution segment the drift magnitude is solved so that the
expected directness equals the group's planted target

    D* = d0 + gamma * (log N - mean_log) + coupling * b

using ``E[D] ~ sqrt((mu^2 + 1/T) / (1 + mu^2))`` for ``T`` unit-variance
steps with drift ``mu``. A zero ``d0`` plants no drift at all, leaving the
pure random-walk length law ``E[D] ~ T^(-1/2)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from trajgeom import archive
from trajgeom.archive import CohortManifest, DomainInfo, ItemMeta, ModelInfo, TraceRecord
from trajgeom.segment import BoundaryPolicy, detect_boundary, segment_state_range

BYTES_PER_TOKEN = 5  # four-letter words plus a space


@dataclass(frozen=True)
class LengthLaw:
    mean_log: float = 6.4
    sd_log: float = 0.3
    difficulty_corr: float = 0.75
    run_sd: float = 0.05


@dataclass(frozen=True)
class GeometryLaw:
    d0: float = 0.0
    gamma: float = 0.0
    coupling: float = 0.0


@dataclass(frozen=True)
class IrtLaw:
    n_calibration: int = 40
    ability_sd: float = 1.0


@dataclass(frozen=True)
class SynthSpec:
    n_items: int = 500
    n_reasoning: int = 1
    n_baseline: int = 1
    runs: int = 5
    hidden_dim: int = 64
    stride: int = 10
    layers: tuple[int, ...] = (4, 8)
    length_law: LengthLaw = LengthLaw()
    geometry_law: dict = field(
        default_factory=lambda: {"reasoning": GeometryLaw(0.45, -0.53, 0.028), "baseline": GeometryLaw()}
    )
    irt_law: IrtLaw = IrtLaw()
    probe_signal: float = 2.0
    behavior: bool = True
    judges: int = 3
    seed: int = 0
    domain: str = "code"

    def __post_init__(self):
        for name in ("n_items", "runs", "hidden_dim", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_reasoning < 0 or self.n_baseline < 0 or self.n_reasoning + self.n_baseline < 1:
            raise ValueError("need at least one model")
        if not -1.0 < self.length_law.difficulty_corr < 1.0:
            raise ValueError("difficulty_corr must lie in (-1, 1)")
        for law in self.geometry_law.values():
            if not all(math.isfinite(v) for v in (law.d0, law.gamma, law.coupling)):
                raise ValueError("geometry coefficients must be finite")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layers"] = list(self.layers)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        raw = dict(raw)
        if "length_law" in raw:
            raw["length_law"] = LengthLaw(**raw["length_law"])
        if "irt_law" in raw:
            raw["irt_law"] = IrtLaw(**raw["irt_law"])
        if "geometry_law" in raw:
            raw["geometry_law"] = {k: GeometryLaw(**v) for k, v in raw["geometry_law"].items()}
        if "layers" in raw:
            raw["layers"] = tuple(raw["layers"])
        return cls(**raw)


def planted_drift(target: float, steps: int) -> float:
    """Drift magnitude whose expected directness over ``steps`` steps is ``target``."""
    if steps < 1:
        return 0.0
    target = min(target, 0.95)
    floor = 1.0 / steps
    if target * target <= floor:
        return 0.0
    return math.sqrt((target * target - floor) / (1.0 - target * target))


def _words(rng: np.random.Generator, count: int) -> str:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    picks = letters[rng.integers(0, 26, size=(count, 4))]
    return " ".join("".join(w) for w in picks)


def _trace_text(rng, tagged: bool, n_tokens: int, domain: str) -> str:
    body = _words(rng, n_tokens)
    if tagged:
        return f"<think>\n{body}\n</think>\n{_words(rng, 8)}"
    if domain == "code":
        return f"{body}\n```python\nprint(1)\n```\n"
    if domain == "math":
        return f"{body}\n\\boxed{{1}}"
    return f"{body}\nSATISFIABLE"


def _walk(rng, n_states: int, j0: int, j1: int, dim: int, mu: float) -> np.ndarray:
    """Walk whose segment ``[j0, j1)`` carries drift ``mu``; the rest is pure noise."""
    steps = rng.standard_normal((max(n_states - 1, 0), dim)) / math.sqrt(dim)
    if mu > 0.0 and j1 - j0 >= 2:
        u = rng.standard_normal(dim)
        steps[j0 : j1 - 1] += mu * u / np.linalg.norm(u)
    start = rng.standard_normal(dim)
    return np.vstack([start, start + np.cumsum(steps, axis=0)])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synth_cohort(spec: SynthSpec, root) -> CohortManifest:
    """Write a complete cohort under ``root`` and return its manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_items
    width = max(3, len(str(n - 1)))
    items = [f"i{k:0{width}d}" for k in range(n)]
    b = rng.standard_normal(n)
    z = rng.standard_normal(n)
    law = spec.length_law
    r = law.difficulty_corr
    item_log = law.mean_log + law.sd_log * (r * b + math.sqrt(1.0 - r * r) * z)

    models = [ModelInfo(f"reason{k}", "reasoning", tuple(spec.layers), spec.hidden_dim) for k in range(spec.n_reasoning)]
    models += [ModelInfo(f"base{k}", "baseline", tuple(spec.layers), spec.hidden_dim) for k in range(spec.n_baseline)]
    manifest = CohortManifest(archive.SCHEMA_VERSION, (DomainInfo(spec.domain, n),), tuple(models), spec.runs, spec.stride, root)
    archive.validate_manifest(manifest)

    probe_dir = rng.standard_normal(spec.hidden_dim)
    probe_dir /= np.linalg.norm(probe_dir)
    abilities = {m.id: float(rng.normal(0.0, spec.irt_law.ability_sd)) for m in models}
    calibration = {f"cal{k:02d}": float(rng.normal(0.0, spec.irt_law.ability_sd)) for k in range(spec.irt_law.n_calibration)}

    traces, index, responses, correctness = [], [], [], {}
    labels, sentence_counts = [], []
    for m_idx, model in enumerate(models):
        tagged = model.role == "reasoning"
        geo = spec.geometry_law.get(model.role, GeometryLaw())
        policy = BoundaryPolicy(spec.domain, "tagged" if tagged else "untagged")
        p_correct = _sigmoid(abilities[model.id] - b)
        for i, item in enumerate(items):
            mrng = np.random.default_rng([spec.seed, m_idx, i])
            solved = mrng.random(spec.runs) < p_correct[i]
            responses.append((item, model.id, int(solved.sum()), spec.runs))
            if m_idx == 0:
                correctness[item] = {run: bool(solved[run]) for run in range(spec.runs)}
            for run in range(spec.runs):
                n_seg = max(3 * spec.stride, int(round(math.exp(item_log[i] + law.run_sd * mrng.standard_normal()))))
                text = _trace_text(mrng, tagged, n_seg, spec.domain)
                token_count = max(1, int(round(len(text.encode("utf-8")) / BYTES_PER_TOKEN)))
                trace = TraceRecord(item, model.id, run, text, token_count)
                traces.append(trace)
                seg = detect_boundary(trace, policy)
                j0, j1 = segment_state_range(seg, spec.stride)
                n_states = token_count // spec.stride + 1
                j1 = min(j1, n_states)
                steps = max(j1 - j0 - 1, 0)
                if geo.d0 > 0.0 and seg.segment_token_count > 0:
                    target = geo.d0 + geo.gamma * (math.log(seg.segment_token_count) - law.mean_log) + geo.coupling * b[i]
                    mu = planted_drift(target, steps)
                else:
                    mu = 0.0
                offset = spec.probe_signal * b[i] * probe_dir
                for layer in spec.layers:
                    states = _walk(mrng, n_states, j0, j1, spec.hidden_dim, mu) + offset
                    rel = archive.trajectory_relpath(item, model.id, run, layer)
                    archive.write_states(root / rel, states)
                    index.append(((item, model.id, run, layer), rel))
                if spec.behavior and m_idx == 0:
                    n_sent = max(1, seg.segment_token_count // 20)
                    sentence_counts.append((item, run, n_sent))
                    labels.extend(_judge_labels(mrng, item, run, n_sent, b[i], spec.judges))
    for cal_id, theta in calibration.items():
        crng = np.random.default_rng([spec.seed, 9999, int(cal_id[3:])])
        k = crng.binomial(spec.runs, _sigmoid(theta - b))
        responses.extend((item, cal_id, int(k[i]), spec.runs) for i, item in enumerate(items))

    for m in models:
        (root / "trajectories" / m.id).mkdir(parents=True, exist_ok=True)
    archive.write_manifest(manifest, root)
    archive.write_index(root, index)
    archive.write_traces(root, traces)
    native = np.digitize(b, np.quantile(b, [0.2, 0.4, 0.6, 0.8])) + 1
    archive.write_items(root, [ItemMeta(item, spec.domain, float(native[i]), correctness.get(item)) for i, item in enumerate(items)])
    archive.responses_to_csv(root / archive.RESPONSES_NAME, sorted(responses))
    archive.write_jsonl(root / "truth.jsonl", ({"item_id": item, "difficulty": float(b[i])} for i, item in enumerate(items)))
    if spec.behavior and labels:
        from trajgeom.behavior import write_labels_csv

        write_labels_csv(labels, root / "labels.csv")
        archive.write_result_table(
            archive.ResultTable(["item_id", "run_id", "sentence_count"], sorted(sentence_counts)), root / "sentence_counts.csv"
        )
    (root / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


_BEHAVIORS = ("strategy_shift", "uncertainty", "self_correct", "verify", "restate", "subgoal")


def _judge_labels(rng, item: str, run: int, n_sent: int, difficulty: float, judges: int):
    """Sentence labels from ``judges`` raters who each agree with a latent label 80% of the time."""
    from trajgeom.behavior import CATEGORIES, SentenceLabels

    base = np.array([0.04, 0.05, 0.04, 0.06, 0.05, 0.05])
    tilt = np.array([0.6, 0.4, 0.3, 0.2, 0.0, 0.1])
    p = base * np.exp(tilt * difficulty)
    p = np.append(p, max(0.05, 1.0 - p.sum()))
    p /= p.sum()
    latent = rng.choice(len(CATEGORIES), size=n_sent, p=p)
    out = []
    for s in range(n_sent):
        votes = {}
        for j in range(judges):
            cat = latent[s] if rng.random() < 0.8 else rng.integers(0, len(CATEGORIES))
            votes[f"judge{j}"] = CATEGORIES[int(cat)]
        out.append(SentenceLabels(item, run, s, votes))
    return out
