import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajgeom import geometry, kernels

BACKENDS = kernels.available_backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def loop_path_stats(states):
    """Straight-loop reference for path length and net displacement."""
    total = 0.0
    for i in range(len(states) - 1):
        total += math.sqrt(sum((states[i + 1][k] - states[i][k]) ** 2 for k in range(len(states[0]))))
    disp = math.sqrt(sum((states[-1][k] - states[0][k]) ** 2 for k in range(len(states[0]))))
    return total, disp


def loop_menger(a, b, c):
    """Circumradius identity: 4 * area / (|ab| |bc| |ca|), area from Heron."""
    ab, bc, ca = math.dist(a, b), math.dist(b, c), math.dist(c, a)
    s = (ab + bc + ca) / 2
    area = math.sqrt(max(s * (s - ab) * (s - bc) * (s - ca), 0.0))
    return 4 * area / (ab * bc * ca)


def test_backend_selection_reports_a_known_backend():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in BACKENDS
    with pytest.raises(ValueError):
        kernels.path_stats(np.zeros((2, 2)), backend="fortran")


@needs_both
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree_on_random_walks(seed):
    rng = np.random.default_rng(seed)
    states = np.cumsum(rng.standard_normal((200, 64)), axis=0)
    lp, dp = kernels.path_stats(states, backend="python")
    lc, dc = kernels.path_stats(states, backend="cython")
    assert lc == pytest.approx(lp, rel=1e-12)
    assert dc == pytest.approx(dp, rel=1e-12)
    kp, gp = kernels.menger_profile(states, 1e-9, backend="python")
    kc, gc = kernels.menger_profile(states, 1e-9, backend="cython")
    np.testing.assert_allclose(kc, kp, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(np.asarray(gc), np.asarray(gp))
    r1p, r2p = kernels.two_nn(states, backend="python")
    r1c, r2c = kernels.two_nn(states, backend="cython")
    np.testing.assert_allclose(r1c, r1p, rtol=1e-12)
    np.testing.assert_allclose(r2c, r2p, rtol=1e-12)


@needs_both
@given(arrays(np.float64, st.tuples(st.integers(4, 30), st.integers(1, 6)), elements=finite))
def test_backends_agree_property(states):
    for fn in (kernels.path_stats,):
        a = fn(states, backend="python")
        b = fn(states, backend="cython")
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)
    kp, gp = kernels.menger_profile(states, 1e-12, backend="python")
    kc, gc = kernels.menger_profile(states, 1e-12, backend="cython")
    np.testing.assert_array_equal(np.asarray(gc), np.asarray(gp))
    np.testing.assert_allclose(kc, kp, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_directness_matches_straight_loop_reference(backend):
    rng = np.random.default_rng(7)
    for _ in range(20):
        states = np.cumsum(rng.standard_normal((int(rng.integers(2, 80)), 16)), axis=0)
        ref_l, ref_d = loop_path_stats(states.tolist())
        length, disp, d = geometry.directness(states, backend=backend)
        assert length == pytest.approx(ref_l, rel=1e-12)
        assert disp == pytest.approx(ref_d, rel=1e-12)
        assert d == pytest.approx(min(1.0, ref_d / ref_l), rel=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_menger_matches_heron_reference(backend):
    rng = np.random.default_rng(8)
    states = rng.standard_normal((40, 5))
    kappa, _ = kernels.menger_profile(states, 0.0, backend=backend)
    ref = [loop_menger(*states[i : i + 3].tolist()) for i in range(38)]
    np.testing.assert_allclose(kappa, ref, rtol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_nn_matches_brute_force(backend):
    rng = np.random.default_rng(9)
    pts = rng.standard_normal((50, 3))
    r1, r2 = kernels.two_nn(pts, backend=backend)
    for i in range(50):
        d = sorted(math.dist(pts[i], pts[j]) for j in range(50) if j != i)
        assert r1[i] == pytest.approx(d[0], rel=1e-12)
        assert r2[i] == pytest.approx(d[1], rel=1e-12)


def test_forced_python_backend_via_environment():
    import subprocess
    import sys

    code = "from trajgeom import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"TRAJGEOM_FORCE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
