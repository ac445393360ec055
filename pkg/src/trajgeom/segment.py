"""Solution-segment detection and stride-aware state slicing.

Spans are UTF-8 byte offsets into the trace text. Token positions are not
stored with traces, so byte offsets are mapped to token indices
proportionally: ``token(b) = round(b * token_count / total_bytes)``.
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from trajgeom.archive import TraceRecord, Trajectory

DOMAINS = ("code", "math", "sat")
SOURCES = ("think_delimiter", "code_fence", "boxed", "sat_marker", "xml_tag", "fallback_full", "answer_only")

DEFAULT_PATTERNS = {
    "version": 1,
    "think_open": "<think>",
    "think_close": "</think>",
    "code_fence": r"```",
    "boxed": r"\\boxed\s*\{",
    "sat_marker": r"(?i)\b(un)?satisfiable\b",
    "xml_answer": r"(?i)<(?:final_)?answer\b[^>]*>",
}


def load_patterns(path=None) -> dict:
    """Default pattern set, optionally overridden by a JSON file."""
    patterns = dict(DEFAULT_PATTERNS)
    if path is not None:
        patterns.update(json.loads(Path(path).read_text(encoding="utf-8")))
    return patterns


@dataclass(frozen=True)
class BoundaryPolicy:
    domain: str
    model_tagging: str = "untagged"
    variant: str = "default"
    tau: float | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.model_tagging not in ("tagged", "untagged"):
            raise ValueError(f"unknown model_tagging {self.model_tagging!r}")
        if self.variant not in ("default", "full_output", "fixed_prefix"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "fixed_prefix":
            if self.tau is None or not 0.0 < self.tau <= 1.0:
                raise ValueError("fixed_prefix needs tau in (0, 1]")


@dataclass(frozen=True)
class SamplingSpec:
    stride_tokens: int = 10
    prefix_fraction: float = 1.0

    def __post_init__(self):
        if self.stride_tokens < 1:
            raise ValueError("stride_tokens must be >= 1")
        if not 0.0 < self.prefix_fraction <= 1.0:
            raise ValueError("prefix_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class SegmentedTrace:
    trace: TraceRecord
    segment_char_span: tuple[int, int]
    segment_token_start: int
    segment_token_count: int
    boundary_source: str


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


def _token_at(byte_offset: int, total_bytes: int, token_count: int) -> int:
    if total_bytes == 0:
        return 0
    return int(math.floor(byte_offset * token_count / total_bytes + 0.5))


def _find_boxed(text: str, pattern: str) -> int:
    """Start of the first ``\\boxed{...}`` whose braces balance, or -1."""
    for m in re.finditer(pattern, text):
        depth = 1
        for ch in text[m.end():]:
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return m.start()
    return -1


def _segment(trace: TraceRecord, start_char: int, end_char: int, source: str) -> SegmentedTrace:
    text = trace.text
    total = len(text.encode("utf-8"))
    b0 = _byte_offset(text, start_char)
    b1 = b0 + len(text[start_char:end_char].encode("utf-8"))
    t0 = _token_at(b0, total, trace.token_count)
    t1 = _token_at(b1, total, trace.token_count)
    count = t1 - t0
    if b1 == b0 or trace.token_count == 0:
        return SegmentedTrace(trace, (b0, b0), t0, 0, "answer_only")
    return SegmentedTrace(trace, (b0, b1), t0, max(count, 1), source)


def _answer_only(trace: TraceRecord) -> SegmentedTrace:
    return SegmentedTrace(trace, (0, 0), 0, 0, "answer_only")


def detect_boundary(trace: TraceRecord, policy: BoundaryPolicy, patterns: dict | None = None) -> SegmentedTrace:
    """Locate the solution segment of ``trace`` under ``policy``.

    Tagged models: the inside of the first ``<think>...</think>`` block; a
    closing tag without an opening one starts the segment at offset 0 (the
    opening tag was part of the prompt). Missing closing tags or an empty
    block give a zero-length ``answer_only`` segment.

    Untagged models: text before the first domain marker (code fence, boxed
    answer, SAT verdict), then an XML answer tag; otherwise the whole output.
    Any empty segment is reported as ``answer_only``.
    """
    p = patterns or DEFAULT_PATTERNS
    text = trace.text
    if policy.variant == "full_output":
        return _segment(trace, 0, len(text), "fallback_full")
    if policy.variant == "fixed_prefix":
        total = len(text.encode("utf-8"))
        tokens = int(math.floor(policy.tau * trace.token_count + 1e-9))
        raw = text.encode("utf-8")
        cut = total if trace.token_count == 0 else int(round(tokens * total / trace.token_count))
        end_char = len(raw[:cut].decode("utf-8", errors="ignore"))
        seg = _segment(trace, 0, end_char, "fallback_full")
        if tokens == 0 or seg.boundary_source == "answer_only":
            return SegmentedTrace(trace, seg.segment_char_span, 0, 0, "answer_only")
        return SegmentedTrace(trace, seg.segment_char_span, 0, tokens, "fallback_full")

    if policy.model_tagging == "tagged":
        close = text.find(p["think_close"])
        if close < 0:
            return _answer_only(trace)
        opening = text.find(p["think_open"])
        start = opening + len(p["think_open"]) if 0 <= opening < close else 0
        if start >= close:
            return _answer_only(trace)
        return _segment(trace, start, close, "think_delimiter")

    cut = -1
    source = None
    if policy.domain == "code":
        m = re.search(p["code_fence"], text)
        if m:
            cut, source = m.start(), "code_fence"
    elif policy.domain == "math":
        pos = _find_boxed(text, p["boxed"])
        if pos >= 0:
            cut, source = pos, "boxed"
    else:
        m = re.search(p["sat_marker"], text)
        if m:
            cut, source = m.start(), "sat_marker"
    if source is None:
        m = re.search(p["xml_answer"], text)
        if m:
            cut, source = m.start(), "xml_tag"
    if source is None:
        return _segment(trace, 0, len(text), "fallback_full")
    return _segment(trace, 0, cut, source)


def boundary_counts(segmented: Iterable[SegmentedTrace]) -> Counter:
    counts = Counter({s: 0 for s in SOURCES})
    counts.update(s.boundary_source for s in segmented)
    return counts


def segment_state_range(segmented: SegmentedTrace, stride: int) -> tuple[int, int]:
    """Half-open range of state indices inside the segment.

    State ``j`` sits at token ``j * stride``. The state at the exact end
    token and states whose stride window runs past the end are excluded.
    """
    start = segmented.segment_token_start
    end = start + segmented.segment_token_count
    j0 = -(-start // stride)
    j1 = end // stride
    return j0, max(j0, j1)


def prefix_length(n_states: int, fraction: float, minimum: int = 3) -> int:
    """Number of states kept for a prefix fraction (floor, at least ``minimum``)."""
    if fraction >= 1.0:
        return n_states
    keep = int(math.floor(fraction * n_states + 1e-9))
    keep = max(keep, minimum) if n_states >= minimum else max(keep, 1)
    return min(keep, n_states)


def slice_states(trajectory: Trajectory, segmented: SegmentedTrace, spec: SamplingSpec) -> Trajectory | None:
    """Restrict ``trajectory`` to its segment, then to a prefix of it.

    Returns None (the empty-trajectory marker) when no state falls inside
    the segment.
    """
    j0, j1 = segment_state_range(segmented, spec.stride_tokens)
    j1 = min(j1, trajectory.states.shape[0])
    if j1 - j0 < 1:
        return None
    keep = prefix_length(j1 - j0, spec.prefix_fraction)
    return Trajectory(
        trajectory.item_id,
        trajectory.model_id,
        trajectory.run_id,
        trajectory.layer_index,
        trajectory.states[j0 : j0 + keep],
        trajectory.stride_tokens,
    )


def parse_sat_answer(trace, patterns: dict | None = None) -> str:
    """First SATISFIABLE / UNSATISFIABLE token (case-insensitive): 'sat', 'unsat' or 'none'."""
    text = trace.text if isinstance(trace, TraceRecord) else trace
    m = re.search((patterns or DEFAULT_PATTERNS)["sat_marker"], text)
    if m is None:
        return "none"
    return "unsat" if m.group(1) else "sat"
