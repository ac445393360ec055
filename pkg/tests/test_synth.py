import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajgeom import archive, geometry, segment, synth
from trajgeom.synth import SynthSpec


@given(st.floats(0.05, 0.9), st.integers(20, 400))
def test_planted_drift_inverts_expected_directness(target, steps):
    mu = synth.planted_drift(target, steps)
    if mu == 0.0:
        assert target * target <= 1.0 / steps
        return
    # E[disp^2] / E[len^2] for unit-variance steps plus drift mu along one axis
    implied = math.sqrt((steps * mu * mu + 1.0) / (steps * (1.0 + mu * mu)))
    assert implied == pytest.approx(target, rel=1e-9)


def test_planted_drift_realised_directness():
    rng = np.random.default_rng(0)
    steps, dim, target = 300, 64, 0.5
    mu = synth.planted_drift(target, steps)
    vals = []
    for _ in range(100):
        s = rng.standard_normal((steps, dim)) / math.sqrt(dim)
        s[:, 0] += mu
        vals.append(geometry.directness(np.vstack([np.zeros(dim), np.cumsum(s, 0)]))[2])
    assert np.mean(vals) == pytest.approx(target, abs=0.03)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        SynthSpec(n_items=0)
    with pytest.raises(ValueError):
        SynthSpec(n_reasoning=0, n_baseline=0)
    with pytest.raises(ValueError):
        SynthSpec(length_law=synth.LengthLaw(difficulty_corr=1.0))
    spec = SynthSpec(n_items=7, layers=(1, 3))
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_cohort_contents(small_cohort):
    m = archive.load_manifest(small_cohort)
    assert [x.role for x in m.models] == ["reasoning", "baseline"] and m.runs_per_item == 3
    index = archive.load_index(small_cohort)
    assert len(index) == 60 * 3 * 2
    traces = archive.load_traces(small_cohort)
    for t in traces[:20]:
        tagged = t.model_id.startswith("reason")
        policy = segment.BoundaryPolicy("code", "tagged" if tagged else "untagged")
        seg = segment.detect_boundary(t, policy)
        assert seg.boundary_source == ("think_delimiter" if tagged else "code_fence")
        traj = archive.load_trajectory(m, t.item_id, t.model_id, t.run_id, 2)
        assert traj.states.shape[0] == t.token_count // m.stride_tokens + 1
    truth = [json.loads(x) for x in (small_cohort / "truth.jsonl").read_text().splitlines()]
    assert len(truth) == 60
    models = {r[1] for r in archive.iter_responses_csv(small_cohort / archive.RESPONSES_NAME)}
    assert len(models) == 2 + 40


def test_synth_is_deterministic(tmp_path):
    spec = SynthSpec(n_items=12, runs=2, hidden_dim=6, layers=(1,), seed=9)
    synth.synth_cohort(spec, tmp_path / "a")
    synth.synth_cohort(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
