import numpy as np
import pytest
from hypothesis import settings

from trajgeom.pipeline import PipelineConfig, run_pipeline
from trajgeom.synth import SynthSpec, synth_cohort

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_walk(rng, steps, dim=8):
    return np.vstack([np.zeros(dim), np.cumsum(rng.standard_normal((steps, dim)), axis=0)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """A 60-item synthetic cohort small enough for stage-level tests."""
    root = tmp_path_factory.mktemp("cohort")
    synth_cohort(SynthSpec(n_items=60, runs=3, hidden_dim=12, layers=(2,), seed=3), root)
    return root


@pytest.fixture(scope="session")
def small_bundle(small_cohort, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    cfg = PipelineConfig(
        cohort=str(small_cohort),
        out=str(out),
        bootstrap_n=100,
        permutation_n=50,
        probe_positions=3,
        probe_perm=3,
        probe_random_directions=3,
        run_resamples=5,
    )
    prov = run_pipeline(cfg)
    return out, cfg, prov
