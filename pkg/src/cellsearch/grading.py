"""Answer grading: the string/number/list/dict comparison cascade and the
final-answer aggregation rules (majority vote, value-max).
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from .protocol import AnswerLabels

ParsedValue = Union[float, str, list, dict]

_NUMBER_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class NoCandidates(ValueError):
    pass


@dataclass(frozen=True)
class Tolerance:
    abs_tol: float = 1e-6
    rel_tol: float = 1e-2

    def __post_init__(self):
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be >= 0")
        if self.abs_tol == 0 and self.rel_tol == 0:
            raise ValueError("at least one tolerance must be > 0")


DEFAULT_TOLERANCE = Tolerance()


def coerce_value(raw: str) -> ParsedValue:
    """Trim, then try number, JSON/py-literal list, dict; fall back to text."""
    text = str(raw).strip()
    if _NUMBER_RE.match(text):
        return float(text)
    if text.startswith("[") or text.startswith("{"):
        for parser in (json.loads, ast.literal_eval):
            try:
                value = parser(text)
            except (ValueError, SyntaxError):
                continue
            if isinstance(value, (list, dict)):
                return value
    return text


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _numbers_match(expected: float, got: float, tol: Tolerance) -> bool:
    return abs(expected - got) <= max(tol.abs_tol, tol.rel_tol * abs(expected))


def compare_values(expected, got, tol: Tolerance = DEFAULT_TOLERANCE) -> bool:
    """Comparison cascade over raw strings or already-parsed values.

    1. trimmed raw strings equal; 2. both numeric, within tolerance;
    3. both lists of equal length, element-wise; 4. both dicts with identical
    key sets, value-wise; otherwise unequal.
    """
    if isinstance(expected, str) and isinstance(got, str):
        if expected.strip() == got.strip():
            return True
    e = coerce_value(expected) if isinstance(expected, str) else expected
    g = coerce_value(got) if isinstance(got, str) else got
    if _is_number(e) and _is_number(g):
        return _numbers_match(float(e), float(g), tol)
    if isinstance(e, list) and isinstance(g, list):
        if len(e) != len(g):
            return False
        return all(compare_values(ev, gv, tol) for ev, gv in zip(e, g))
    if isinstance(e, dict) and isinstance(g, dict):
        if set(e.keys()) != set(g.keys()):
            return False
        return all(compare_values(ev, g[k], tol) for k, ev in e.items())
    return e == g


def compare_lists_unordered(expected: list, got: list, tol: Tolerance) -> bool:
    """Order-insensitive list match (off by default; for set-like answers)."""
    if len(expected) != len(got):
        return False
    remaining = list(got)
    for ev in expected:
        for i, gv in enumerate(remaining):
            if compare_values(ev, gv, tol):
                del remaining[i]
                break
        else:
            return False
    return True


def _normalize_name(name: str) -> str:
    return " ".join(name.split()).casefold()


def grade_answer(
    expected: AnswerLabels, got: AnswerLabels, tol: Tolerance = DEFAULT_TOLERANCE
) -> bool:
    """True iff every expected label is present and matches; extras are ignored.

    Label names match case-insensitively after whitespace normalization.
    """
    if not expected.entries:
        raise ValueError("expected labels must be non-empty")
    by_name = {_normalize_name(name): raw for name, raw in got.entries}
    for name, raw in expected.entries:
        candidate = by_name.get(_normalize_name(name))
        if candidate is None:
            return False
        if not compare_values(raw, candidate, tol):
            return False
    return True


def _canonical_value(value: ParsedValue):
    if _is_number(value):
        return ("n", repr(float(value)))
    if isinstance(value, str):
        return ("s", value.strip())
    if isinstance(value, list):
        return ("l", tuple(_canonical_value(v) for v in value))
    if isinstance(value, dict):
        return ("d", tuple(sorted((str(k), _canonical_value(v)) for k, v in value.items())))
    return ("x", repr(value))


def canonical_label_key(labels: AnswerLabels):
    """Hashable form of a label set: normalized names, coerced values."""
    return tuple(
        sorted((_normalize_name(name), _canonical_value(coerce_value(raw))) for name, raw in labels.entries)
    )


def majority_vote(
    answer_nodes: Sequence[Tuple[AnswerLabels, float, int]]
) -> AnswerLabels:
    """Mode over canonicalized label sets.

    Ties break by higher summed value estimate, then by earliest discovery.
    Input tuples are (labels, value_estimate, discovery_index).
    """
    if not answer_nodes:
        raise NoCandidates("no candidate answers to vote over")
    groups: dict = {}
    for labels, value, discovery in answer_nodes:
        key = canonical_label_key(labels)
        entry = groups.setdefault(key, {"count": 0, "value": 0.0, "first": discovery, "labels": labels})
        entry["count"] += 1
        entry["value"] += value
        if discovery < entry["first"]:
            entry["first"] = discovery
            entry["labels"] = labels
    best = max(groups.values(), key=lambda e: (e["count"], e["value"], -e["first"]))
    return best["labels"]


def select_by_value(
    answer_nodes: Sequence[Tuple[AnswerLabels, float, int]]
) -> AnswerLabels:
    """Labels of the highest-valued candidate; ties by earliest discovery."""
    if not answer_nodes:
        raise NoCandidates("no candidate answers to select from")
    best = max(answer_nodes, key=lambda item: (item[1], -item[2]))
    return best[0]
