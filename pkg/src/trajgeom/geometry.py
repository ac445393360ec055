"""Per-trajectory geometry: directness, Menger curvature, TwoNN and PCA90."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from trajgeom import kernels
from trajgeom.archive import ArchiveError, ResultTable, Trajectory

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12
VARIANCE_FRACTION = 0.90

TOO_SHORT = "too_short"
DEGENERATE_STEP = "degenerate_step"
DUPLICATE_NEIGHBORS = "duplicate_neighbors"


class TooShortError(ValueError):
    """Trajectory has fewer states than the metric requires."""


def _states(traj) -> np.ndarray:
    states = traj.states if isinstance(traj, Trajectory) else traj
    return np.ascontiguousarray(states, dtype=np.float64)


def trajectory_scale(states: np.ndarray) -> float:
    """Largest distance of any state from the centroid."""
    centered = states - states.mean(axis=0)
    return float(np.sqrt(np.einsum("ij,ij->i", centered, centered).max()))


@dataclass
class GeometryRecord:
    item_id: str
    model_id: str
    run_id: int
    layer_index: int
    sample_count: int
    segment_tokens: int | None = None
    path_length: float | None = None
    net_displacement: float | None = None
    directness: float | None = None
    curvature_profile: list[float] = field(default_factory=list)
    curvature_variability: float | None = None
    twonn_dimension: float | None = None
    pca90: int | None = None
    flags: set[str] = field(default_factory=set)

    COLUMNS = (
        "item_id",
        "model_id",
        "run_id",
        "layer_index",
        "sample_count",
        "segment_tokens",
        "path_length",
        "net_displacement",
        "directness",
        "curvature_mean",
        "curvature_variability",
        "twonn_dimension",
        "pca90",
        "flags",
    )

    def row(self) -> tuple:
        kmean = float(np.mean(self.curvature_profile)) if self.curvature_profile else None
        return (
            self.item_id,
            self.model_id,
            self.run_id,
            self.layer_index,
            self.sample_count,
            self.segment_tokens,
            self.path_length,
            self.net_displacement,
            self.directness,
            kmean,
            self.curvature_variability,
            self.twonn_dimension,
            self.pca90,
            ";".join(sorted(self.flags)),
        )


def directness(traj, flags: set | None = None, backend=None) -> tuple[float, float, float | None]:
    """Return ``(L, delta, D)``; ``D`` is None when the path has zero length."""
    states = _states(traj)
    if states.shape[0] < 2:
        raise TooShortError("directness needs at least 2 states")
    path_length, disp = kernels.path_stats(states, backend=backend)
    if path_length <= 0.0:
        if flags is not None:
            flags.add(DEGENERATE_STEP)
        return path_length, disp, None
    return path_length, disp, min(1.0, disp / path_length)


def menger_curvature_profile(traj, flags: set | None = None, eps: float = DEGENERATE_EPS, backend=None) -> list[float]:
    """Menger curvature of every consecutive triple of states.

    A triple with any pairwise distance below ``eps`` times the trajectory
    scale contributes 0 and raises the ``degenerate_step`` flag.
    """
    states = _states(traj)
    if states.shape[0] < 3:
        raise TooShortError("curvature needs at least 3 states")
    threshold = eps * trajectory_scale(states)
    kappa, degenerate = kernels.menger_profile(states, threshold, backend=backend)
    if flags is not None and degenerate.any():
        flags.add(DEGENERATE_STEP)
    return kappa.tolist()


def curvature_variability(profile, ddof: int = 1) -> float | None:
    """Standard deviation of a curvature profile; None for a single entry."""
    profile = np.asarray(profile, dtype=np.float64)
    if profile.size == 0:
        raise ValueError("empty curvature profile")
    if profile.size <= ddof:
        return None
    return float(np.std(profile, ddof=ddof))


def twonn_dimension(traj, flags: set | None = None, backend=None) -> float | None:
    """TwoNN estimate ``1 / mean(log(r2 / r1))`` over states with ``r1 > 0``.

    Returns None when every ratio equals one.
    """
    states = _states(traj)
    if states.shape[0] < 4:
        raise TooShortError("TwoNN needs at least 4 states")
    r1, r2 = kernels.two_nn(states, backend=backend)
    usable = r1 > 0.0
    if not usable.all() and flags is not None:
        flags.add(DUPLICATE_NEIGHBORS)
    if np.count_nonzero(usable) < 4:
        raise TooShortError("TwoNN needs at least 4 states with distinct neighbours")
    mean_log = float(np.mean(np.log(r2[usable] / r1[usable])))
    if mean_log <= 0.0:
        return None
    return 1.0 / mean_log


def pca90(traj, fraction: float = VARIANCE_FRACTION, rtol: float = 1e-10) -> int | None:
    """Smallest number of principal components explaining ``fraction`` of variance.

    Eigenvalues below ``rtol`` times the largest are treated as zero.
    Returns None when all states coincide.
    """
    states = _states(traj)
    if states.shape[0] < 2:
        raise TooShortError("PCA90 needs at least 2 states")
    centered = states - states.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    eig = sv**2 / (states.shape[0] - 1)
    if eig.size == 0 or eig[0] <= 0.0:
        return None
    eig = eig[eig > rtol * eig[0]]
    share = np.cumsum(eig) / eig.sum()
    # guard against share falling a hair short of the target through rounding
    return int(np.searchsorted(share, fraction - 1e-12) + 1)


def compute_record(traj: Trajectory, segment_tokens=None, metrics=("directness", "curvature", "twonn", "pca90"), backend=None) -> GeometryRecord:
    """Evaluate every requested metric whose precondition holds."""
    rec = GeometryRecord(traj.item_id, traj.model_id, traj.run_id, traj.layer_index, traj.sample_count, segment_tokens)
    n = traj.states.shape[0]
    states = _states(traj)
    if "directness" in metrics:
        if n >= 2:
            rec.path_length, rec.net_displacement, rec.directness = directness(states, rec.flags, backend)
        else:
            rec.flags.add(TOO_SHORT)
    if "curvature" in metrics:
        if n >= 3:
            rec.curvature_profile = menger_curvature_profile(states, rec.flags, backend=backend)
            rec.curvature_variability = curvature_variability(rec.curvature_profile)
        else:
            rec.flags.add(TOO_SHORT)
    if "twonn" in metrics:
        try:
            rec.twonn_dimension = twonn_dimension(states, rec.flags, backend)
        except TooShortError:
            rec.flags.add(TOO_SHORT)
    if "pca90" in metrics and n >= 2:
        rec.pca90 = pca90(states)
    return rec


def records_table(records, provenance=None) -> ResultTable:
    ordered = sorted(records, key=lambda r: (r.model_id, r.layer_index, r.item_id, r.run_id))
    return ResultTable(list(GeometryRecord.COLUMNS), [r.row() for r in ordered], dict(provenance or {}))


def geometry_for_cohort(manifest, policy=None, spec=None, traces=None, metrics=("directness", "curvature", "twonn", "pca90"), index=None, backend=None, jobs: int = 1, segments=None):
    """Per-(item, model, run, layer) geometry over a whole cohort.

    When ``traces`` (a mapping ``(item, model, run) -> TraceRecord``) and a
    boundary ``policy`` are supplied, each trajectory is first restricted to
    its solution segment. Precomputed ``segments`` (a mapping
    ``(item, model, run) -> SegmentedTrace``) take precedence. Trajectories that fail to load are counted in the
    returned ``errors`` list instead of aborting the run.

    Returns ``(table, report, records)`` with exclusion and error counts in ``report``.
    """
    from trajgeom import archive, segment

    if index is None:
        index = archive.load_index(manifest.root)
    if spec is None:
        spec = segment.SamplingSpec(manifest.stride_tokens, 1.0)
    model_by_id = {m.id: m for m in manifest.models}
    keys = sorted(k for k in index if k[1] in model_by_id)
    seg_cache = dict(segments or {})

    def one(key):
        item_id, model_id, run_id, layer = key
        traj = archive.load_trajectory(manifest, item_id, model_id, run_id, layer, index=index)
        seg_tokens = None
        tkey = (item_id, model_id, run_id)
        if tkey in seg_cache or (traces is not None and policy is not None):
            if tkey not in seg_cache:
                trace = traces.get(tkey)
                if trace is None:
                    raise ArchiveError(f"no trace for {tkey}")
                model = model_by_id[model_id]
                pol = policy(model) if callable(policy) else policy
                seg_cache[tkey] = segment.detect_boundary(trace, pol)
            segmented = seg_cache[tkey]
            seg_tokens = segmented.segment_token_count
            sliced = segment.slice_states(traj, segmented, spec)
            if sliced is None:
                sliced = Trajectory(item_id, model_id, run_id, layer, traj.states[:0].reshape(0, traj.states.shape[1]), traj.stride_tokens)
            traj = sliced
        if traj.states.shape[0] == 0:
            rec = GeometryRecord(item_id, model_id, run_id, layer, -1, seg_tokens, flags={TOO_SHORT})
            return rec
        return compute_record(traj, seg_tokens, metrics, backend)

    records = []
    errors = []
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {k: pool.submit(one, k) for k in keys}
            results = [(k, futures[k]) for k in keys]
            for k, fut in results:
                try:
                    records.append(fut.result())
                except (ArchiveError, OSError) as exc:
                    errors.append((k, str(exc)))
    else:
        for k in keys:
            try:
                records.append(one(k))
            except (ArchiveError, OSError) as exc:
                errors.append((k, str(exc)))
    for k, msg in errors:
        log.warning("trajectory %s skipped: %s", k, msg)
    report = {
        "rows": len(records),
        "errors": len(errors),
        "too_short": sum(TOO_SHORT in r.flags for r in records),
        "directness_undefined": sum(r.directness is None for r in records),
        "curvature_undefined": sum(r.curvature_variability is None for r in records),
        "twonn_undefined": sum(r.twonn_dimension is None for r in records),
    }
    return records_table(records), report, records

