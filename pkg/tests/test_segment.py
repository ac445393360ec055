import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajgeom.archive import TraceRecord, Trajectory
from trajgeom.segment import (
    BoundaryPolicy,
    SamplingSpec,
    SegmentedTrace,
    boundary_counts,
    detect_boundary,
    parse_sat_answer,
    prefix_length,
    segment_state_range,
    slice_states,
)

CORPUS = json.loads((Path(__file__).parent / "fixtures" / "segmentation_corpus.json").read_text(encoding="utf-8"))


def trace(text, tokens=None):
    return TraceRecord("i", "m", 0, text, len(text.split()) if tokens is None else tokens)


def test_corpus_covers_every_cell():
    assert len(CORPUS) >= 40
    cells = Counter()
    for case in CORPUS:
        kind = case["id"].split("-")[2]
        cells[(case["tagging"], case["domain"], kind)] += 1
    for tagging in ("tagged", "untagged"):
        for domain in ("code", "math", "sat"):
            for kind in ("marker", "fallback", "malformed"):
                assert cells[(tagging, domain, kind)] >= 1, (tagging, domain, kind)


@pytest.mark.parametrize("case", CORPUS, ids=[c["id"] for c in CORPUS])
def test_corpus_case(case):
    t = TraceRecord("i", "m", 0, case["text"], case["token_count"])
    seg = detect_boundary(t, BoundaryPolicy(case["domain"], case["tagging"]))
    assert seg.boundary_source == case["expected_source"]
    assert list(seg.segment_char_span) == case["expected_span"]
    assert seg.segment_token_start == case["expected_token_start"]
    assert seg.segment_token_count == case["expected_token_count"]


def test_tagged_example():
    seg = detect_boundary(trace("<think>plan</think>answer", 5), BoundaryPolicy("code", "tagged"))
    assert seg.segment_char_span == (7, 11) and seg.boundary_source == "think_delimiter"


def test_untagged_code_fence_example():
    text = "reason ```python\nprint(1)\n```"
    seg = detect_boundary(trace(text), BoundaryPolicy("code"))
    assert seg.segment_char_span == (0, text.index("```")) and seg.boundary_source == "code_fence"


def test_untagged_sat_without_marker_is_full_output():
    text = "no verdict reached"
    seg = detect_boundary(trace(text), BoundaryPolicy("sat"))
    assert seg.segment_char_span == (0, len(text)) and seg.boundary_source == "fallback_full"


def test_full_output_and_fixed_prefix_variants():
    text = "<think>" + "word " * 20 + "</think>answer"
    t = trace(text, 40)
    full = detect_boundary(t, BoundaryPolicy("code", "tagged", "full_output"))
    assert full.segment_char_span == (0, len(text.encode())) and full.segment_token_count == 40
    half = detect_boundary(t, BoundaryPolicy("code", "tagged", "fixed_prefix", 0.5))
    assert half.segment_token_count == 20 and half.segment_token_start == 0
    assert half.segment_char_span[1] == pytest.approx(len(text.encode()) / 2, abs=1)
    tiny = detect_boundary(trace("ab", 1), BoundaryPolicy("code", "untagged", "fixed_prefix", 0.5))
    assert tiny.boundary_source == "answer_only" and tiny.segment_token_count == 0


def test_policy_validation():
    with pytest.raises(ValueError):
        BoundaryPolicy("poetry")
    with pytest.raises(ValueError):
        BoundaryPolicy("code", "half")
    with pytest.raises(ValueError):
        BoundaryPolicy("code", variant="fixed_prefix", tau=0.0)
    with pytest.raises(ValueError):
        SamplingSpec(0)
    with pytest.raises(ValueError):
        SamplingSpec(10, 1.5)


texts = st.text(alphabet=st.sampled_from(list("ab <>/thinkTHINK`{}\\boxed\nSATunsatisfiableé")), max_size=80)


@given(texts, st.sampled_from(["code", "math", "sat"]), st.sampled_from(["tagged", "untagged"]), st.integers(0, 50))
def test_detect_boundary_total_and_in_bounds(text, domain, tagging, tokens):
    t = trace(text, tokens)
    seg = detect_boundary(t, BoundaryPolicy(domain, tagging))
    assert seg == detect_boundary(t, BoundaryPolicy(domain, tagging))
    lo, hi = seg.segment_char_span
    assert 0 <= lo <= hi <= len(text.encode())
    assert seg.segment_token_count >= 0
    assert (seg.segment_token_count == 0) == (seg.boundary_source == "answer_only")
    assert seg.segment_token_start + seg.segment_token_count <= max(tokens, 1)


@given(st.text(alphabet="xyz \n", min_size=1, max_size=30), st.text(max_size=40), st.text(max_size=40))
def test_answer_text_never_moves_tagged_span(reasoning, answer_a, answer_b):
    a = detect_boundary(trace(f"<think>{reasoning}</think>{answer_a}", 10), BoundaryPolicy("math", "tagged"))
    b = detect_boundary(trace(f"<think>{reasoning}</think>{answer_b}", 10), BoundaryPolicy("math", "tagged"))
    assert a.segment_char_span == b.segment_char_span


def test_boundary_counts_lists_every_source():
    segs = [detect_boundary(trace(c["text"], c["token_count"]), BoundaryPolicy(c["domain"], c["tagging"])) for c in CORPUS]
    counts = boundary_counts(segs)
    assert sum(counts.values()) == len(CORPUS)
    assert set(counts) >= {"think_delimiter", "code_fence", "boxed", "sat_marker", "xml_tag", "fallback_full", "answer_only"}


# --------------------------------------------------------------------------- SAT verdicts


def test_unsat_before_sat_ordering():
    assert parse_sat_answer("The formula is UNSATISFIABLE.") == "unsat"
    assert parse_sat_answer("SATISFIABLE first, later UNSATISFIABLE") == "sat"
    assert parse_sat_answer("UNSATISFIABLE first, later SATISFIABLE") == "unsat"
    assert parse_sat_answer("no marker here") == "none"
    assert parse_sat_answer("unsatisfiable") == "unsat"
    assert parse_sat_answer(trace("answer: Satisfiable")) == "sat"


@given(st.text(alphabet="abc .\n", max_size=20), st.text(alphabet="abc .\nSATISFIABLE", max_size=20))
def test_unsat_token_never_read_as_sat(prefix, suffix):
    assert parse_sat_answer(f"{prefix} UNSATISFIABLE{' ' + suffix if suffix else ''}") == "unsat"


# --------------------------------------------------------------------------- state slicing


def seg_with(start, count):
    return SegmentedTrace(TraceRecord("i", "m", 0, "x" * 10, 1000), (0, 1), start, count, "fallback_full")


def test_segment_state_range_excludes_boundary_state():
    assert segment_state_range(seg_with(0, 100), 10) == (0, 10)
    assert segment_state_range(seg_with(5, 100), 10) == (1, 10)
    assert segment_state_range(seg_with(0, 9), 10) == (0, 0)


def test_prefix_length_examples():
    assert prefix_length(20, 0.1) == 3
    assert prefix_length(50, 0.5) == 25
    assert prefix_length(50, 1.0) == 50
    assert prefix_length(2, 0.1) == 1


def make_traj(n):
    return Trajectory("i", "m", 0, 1, np.arange(n * 2, dtype=float).reshape(n, 2), 10)


def test_slice_states_identity_and_prefix():
    traj = make_traj(60)
    seg = seg_with(0, 500)
    full = slice_states(traj, seg, SamplingSpec(10, 1.0))
    np.testing.assert_array_equal(full.states, traj.states[:50])
    half = slice_states(traj, seg, SamplingSpec(10, 0.5))
    np.testing.assert_array_equal(half.states, traj.states[:25])
    assert (half.item_id, half.model_id, half.run_id, half.layer_index) == ("i", "m", 0, 1)
    assert slice_states(traj, seg_with(0, 5), SamplingSpec(10, 1.0)) is None


@given(st.integers(1, 80), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_slice_states_prefix_closed(n, f1, f2):
    f1, f2 = sorted((f1, f2))
    traj = make_traj(n + 5)
    seg = seg_with(0, 10 * n)
    a = slice_states(traj, seg, SamplingSpec(10, f1)).states
    b = slice_states(traj, seg, SamplingSpec(10, f2)).states
    assert a.shape[0] <= b.shape[0]
    np.testing.assert_array_equal(a, b[: a.shape[0]])
