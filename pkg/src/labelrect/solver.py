"""Exact zero-one programming for pseudo-label rectification.

Chooses one class per sample to maximize the summed predicted
probability, subject to prior-knowledge constraints on the per-class
counts. Constraints are enforced either hard (infeasibility reported, not
raised) or soft through slack variables penalized by a constant M.
Equality ties between samples (smooth regularization) merge the tied
samples into weighted groups before solving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .priors import PriorKnowledge
from .search import (
    EPS,
    CountObjective,
    CountSearch,
    RelationshipSearch,
    separable_exact,
    snap,
    steepest_ascent,
)
from .transport import TransportEngine, assign_groups_exactly

MAX_BRUTE_FORCE_COMBOS = 10_000_000
_ROW_SUM_TOL = 1e-6
# Relationship-constrained instances larger than this skip the complete
# count enumeration in favor of the Lagrangian box search.
_COUNT_SEARCH_MAX_N = 48


class InstanceTooLargeError(Exception):
    """Raised when exhaustive enumeration would exceed the supported size."""


@dataclass(frozen=True)
class ProbMatrix:
    """Predicted class probabilities, one row per sample.

    Rows must sum to 1 when built from probabilities; matrices built from
    raw scores skip that check and carry ``row_stochastic=False``.
    """

    values: np.ndarray
    row_stochastic: bool = True

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("probability matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability matrix entries must be finite")
        if self.row_stochastic:
            sums = arr.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
                worst = int(np.argmax(np.abs(sums - 1.0)))
                raise ValueError(
                    f"row {worst} sums to {sums[worst]!r}, expected 1"
                )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_probabilities(cls, values) -> "ProbMatrix":
        return cls(values, row_stochastic=True)

    @classmethod
    def from_scores(cls, values) -> "ProbMatrix":
        return cls(values, row_stochastic=False)

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelAssignment:
    """Dense class index per sample (the one-hot matrix, compactly)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("labels must be a 1-D vector")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError("label out of range")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    def __len__(self) -> int:
        return self.labels.size

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.labels.size, self.num_classes), dtype=np.int64)
        out[np.arange(self.labels.size), self.labels] = 1
        return out


@dataclass(frozen=True)
class SmoothRegularization:
    """Equality ties: each (member, anchor) pair must share a label."""

    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        pairs = tuple((int(m), int(a)) for m, a in self.pairs)
        members = [m for m, _ in pairs]
        anchors = {a for _, a in pairs}
        if len(set(members)) != len(members):
            raise ValueError("member indices must be distinct")
        if anchors & set(members):
            raise ValueError("an anchor cannot itself be a member")
        for m, a in pairs:
            if m == a:
                raise ValueError("a sample cannot anchor itself")
            if m < 0 or a < 0:
                raise ValueError("indices must be non-negative")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class SolverConfig:
    """Penalty constant, constraint mode, and solution strategy."""

    M: float = 0.0
    mode: str = "soft"
    optimality: str = "exact"

    def __post_init__(self):
        if self.M < 0:
            raise ValueError(f"M must be non-negative, got {self.M}")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {self.mode!r}")
        if self.optimality not in ("exact", "heuristic"):
            raise ValueError(
                f"optimality must be 'exact' or 'heuristic', got {self.optimality!r}"
            )


@dataclass(frozen=True)
class SlackValue:
    """One constraint's violation, recomputed from the class counts."""

    kind: str  # "unary_lower" | "unary_upper" | "binary"
    classes: tuple[int, ...]
    value: float

    def to_mapping(self) -> dict:
        if self.kind == "binary":
            return {
                "kind": self.kind,
                "greater": self.classes[0],
                "lesser": self.classes[1],
                "value": self.value,
            }
        return {"kind": self.kind, "class": self.classes[0], "value": self.value}


@dataclass(frozen=True)
class SolveReport:
    """Solution plus accounting: objective, penalty, counts, slacks."""

    assignment: LabelAssignment
    objective: float
    penalty: float
    class_counts: np.ndarray
    slacks: tuple[SlackValue, ...]
    certified_optimal: bool
    feasible: bool

    @property
    def total(self) -> float:
        return self.objective - self.penalty

    def to_mapping(self) -> dict:
        return {
            "objective": self.objective,
            "penalty": self.penalty,
            "total": self.total,
            "class_counts": [int(c) for c in self.class_counts],
            "slacks": [s.to_mapping() for s in self.slacks],
            "certified_optimal": self.certified_optimal,
            "feasible": self.feasible,
        }


def compute_slacks(
    counts: np.ndarray, knowledge: PriorKnowledge, n_t: int
) -> tuple[SlackValue, ...]:
    """Slack of every constraint at the given class counts (epsilon-snapped)."""
    records = []
    for ub in knowledge.unary:
        c = ub.class_index
        records.append(
            SlackValue("unary_lower", (c,), snap(n_t * ub.lower - counts[c]))
        )
        records.append(
            SlackValue("unary_upper", (c,), snap(counts[c] - n_t * ub.upper))
        )
    for br in knowledge.binary:
        records.append(
            SlackValue(
                "binary",
                (br.greater, br.lesser),
                snap(n_t * br.delta - (counts[br.greater] - counts[br.lesser])),
            )
        )
    return tuple(records)


def merge_groups(n_t: int, reg: SmoothRegularization | None):
    """Collapse equality ties into groups; returns (group_of, weights).

    Groups are numbered by the smallest sample index they contain, so
    group order is stable and lexicographic enumeration over groups
    matches lexicographic enumeration over sample label vectors.
    """
    if reg is None or len(reg) == 0:
        return np.arange(n_t, dtype=np.int64), np.ones(n_t, dtype=np.int64)
    roots = np.arange(n_t, dtype=np.int64)
    for member, anchor in reg.pairs:
        if member >= n_t or anchor >= n_t:
            raise ValueError("smooth-regularization index out of range")
        roots[member] = anchor
    first_seen: dict[int, int] = {}
    for i in range(n_t):
        first_seen.setdefault(int(roots[i]), i)
    ordered = sorted(first_seen, key=first_seen.get)
    group_id = {root: gid for gid, root in enumerate(ordered)}
    group_of = np.fromiter(
        (group_id[int(roots[i])] for i in range(n_t)), dtype=np.int64, count=n_t
    )
    weights = np.bincount(group_of).astype(np.int64)
    return group_of, weights


def _grouped_rows(P: ProbMatrix, group_of: np.ndarray, num_groups: int) -> np.ndarray:
    rows = np.zeros((num_groups, P.num_classes))
    np.add.at(rows, group_of, P.values)
    return rows


def _validate(P: ProbMatrix, knowledge: PriorKnowledge, reg, config) -> None:
    if knowledge.num_classes != P.num_classes:
        raise ValueError(
            f"knowledge covers {knowledge.num_classes} classes, "
            f"matrix has {P.num_classes}"
        )
    if reg is not None:
        for m, a in reg.pairs:
            if m >= P.n_t or a >= P.n_t:
                raise ValueError("smooth-regularization index out of range")


def _build_report(
    P: ProbMatrix,
    labels: np.ndarray,
    knowledge: PriorKnowledge,
    config: SolverConfig,
    certified: bool,
    feasible: bool,
) -> SolveReport:
    assignment = LabelAssignment(labels, P.num_classes)
    counts = assignment.class_counts()
    objective = float(P.values[np.arange(P.n_t), assignment.labels].sum())
    slacks = compute_slacks(counts, knowledge, P.n_t)
    if config.mode == "hard":
        penalty = 0.0
    else:
        penalty = config.M * sum(s.value for s in slacks)
    return SolveReport(
        assignment=assignment,
        objective=objective,
        penalty=penalty,
        class_counts=counts,
        slacks=slacks,
        certified_optimal=certified,
        feasible=feasible,
    )


def _grouped_argmax_labels(rows: np.ndarray, group_of: np.ndarray) -> np.ndarray:
    return np.argmax(rows, axis=1)[group_of]


def solve(
    P: ProbMatrix,
    knowledge: PriorKnowledge | None = None,
    reg: SmoothRegularization | None = None,
    config: SolverConfig | None = None,
) -> SolveReport:
    """Solve the rectification program for one probability matrix.

    Maximizes the summed picked probability minus M times the total
    constraint slack (soft mode), or subject to zero slack (hard mode;
    an unsatisfiable instance yields ``feasible=False`` with the plain
    argmax assignment, not an exception). Samples tied by ``reg`` always
    share a label.
    """
    if knowledge is None:
        knowledge = PriorKnowledge(num_classes=P.num_classes)
    if config is None:
        config = SolverConfig()
    _validate(P, knowledge, reg, config)
    group_of, weights = merge_groups(P.n_t, reg)
    rows = _grouped_rows(P, group_of, weights.size)
    hard = config.mode == "hard"

    if knowledge.empty or (not hard and config.M == 0.0):
        labels = _grouped_argmax_labels(rows, group_of)
        return _build_report(P, labels, knowledge, config, True, True)

    unit = rows / weights[:, None]
    certified = config.optimality == "exact"
    if config.optimality == "exact" and not hard and not knowledge.binary:
        _, group_labels = separable_exact(
            unit, weights, CountObjective(knowledge, P.n_t, P.num_classes), config.M
        )
        found = True
    elif (
        config.optimality == "exact"
        and not hard
        and knowledge.binary
        and P.n_t > _COUNT_SEARCH_MAX_N
    ):
        _, group_labels, certified = RelationshipSearch(
            unit, weights, knowledge, config.M
        ).run()
        found = True
    else:
        searcher = CountSearch(unit, weights, knowledge, None if hard else config.M)
        if config.optimality == "exact":
            group_labels, found = searcher.run_exact()
        else:
            group_labels, found = searcher.run_heuristic()

    if hard and not found:
        labels = _grouped_argmax_labels(rows, group_of)
        return _build_report(P, labels, knowledge, config, False, False)
    if group_labels is None:
        raise RuntimeError("search returned no assignment for a soft instance")
    labels = group_labels[group_of]
    if hard:
        counts = np.bincount(labels, minlength=P.num_classes)
        feasible = all(
            s.value == 0.0 for s in compute_slacks(counts, knowledge, P.n_t)
        )
    else:
        feasible = True
    return _build_report(P, labels, knowledge, config, certified, feasible)


def solve_fixed_counts(
    P: ProbMatrix,
    counts,
    reg: SmoothRegularization | None = None,
) -> tuple[LabelAssignment, float]:
    """Best assignment with the class counts pinned exactly.

    Returns the certified-optimal assignment and its objective. Counts
    that cannot be met (sum mismatch, or no whole-group packing exists)
    raise ValueError.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (P.num_classes,):
        raise ValueError("counts must have one entry per class")
    if np.any(counts < 0) or counts.sum() != P.n_t:
        raise ValueError("counts must be non-negative and sum to the sample count")
    group_of, weights = merge_groups(P.n_t, reg)
    rows = _grouped_rows(P, group_of, weights.size)
    unit = rows / weights[:, None]
    result = assign_groups_exactly(unit, weights, counts)
    if result is None:
        raise ValueError("counts are not achievable with the tied sample groups")
    _, group_labels = result
    assignment = LabelAssignment(group_labels[group_of], P.num_classes)
    objective = float(P.values[np.arange(P.n_t), assignment.labels].sum())
    return assignment, objective


def brute_force(
    P: ProbMatrix,
    knowledge: PriorKnowledge | None = None,
    reg: SmoothRegularization | None = None,
    config: SolverConfig | None = None,
) -> SolveReport:
    """Exhaustive oracle: enumerate every tie-respecting assignment.

    Ties in the total score break toward the lexicographically smallest
    label vector. Instances beyond ``MAX_BRUTE_FORCE_COMBOS`` assignments
    raise InstanceTooLargeError.
    """
    if knowledge is None:
        knowledge = PriorKnowledge(num_classes=P.num_classes)
    if config is None:
        config = SolverConfig()
    _validate(P, knowledge, reg, config)
    group_of, weights = merge_groups(P.n_t, reg)
    rows = _grouped_rows(P, group_of, weights.size)
    num_groups = weights.size
    num_classes = P.num_classes
    combos = num_classes**num_groups
    if combos > MAX_BRUTE_FORCE_COMBOS:
        raise InstanceTooLargeError(
            f"{combos} assignments exceed the enumeration limit "
            f"({MAX_BRUTE_FORCE_COMBOS})"
        )
    objective_terms = CountObjective(knowledge, P.n_t, num_classes)
    hard = config.mode == "hard"

    best_total = -np.inf
    best_combo: np.ndarray | None = None
    found_feasible = False
    chunk = 1 << 14
    shape = (num_classes,) * num_groups
    group_axis = np.arange(num_groups)[:, None]
    for start in range(0, combos, chunk):
        idx = np.arange(start, min(start + chunk, combos))
        digits = np.array(np.unravel_index(idx, shape))
        values = rows[group_axis, digits].sum(axis=0)
        counts = np.zeros((num_classes, idx.size))
        for c in range(num_classes):
            counts[c] = (weights[:, None] * (digits == c)).sum(axis=0)
        penalties = np.zeros(idx.size)
        lo, hi = objective_terms.lo, objective_terms.hi
        for c in range(num_classes):
            if np.isfinite(lo[c]):
                term = lo[c] - counts[c]
                penalties += np.where(term > EPS, term, 0.0)
            if np.isfinite(hi[c]):
                term = counts[c] - hi[c]
                penalties += np.where(term > EPS, term, 0.0)
        for g, l, rhs in objective_terms.br:
            term = rhs - (counts[g] - counts[l])
            penalties += np.where(term > EPS, term, 0.0)
        if hard:
            totals = np.where(penalties == 0.0, values, -np.inf)
        else:
            totals = values - config.M * penalties
        pick = int(np.argmax(totals))
        if totals[pick] > best_total:
            best_total = float(totals[pick])
            best_combo = digits[:, pick].copy()
            found_feasible = bool(penalties[pick] == 0.0)

    if hard and (best_combo is None or not np.isfinite(best_total)):
        labels = _grouped_argmax_labels(rows, group_of)
        return _build_report(P, labels, knowledge, config, False, False)
    assert best_combo is not None
    labels = best_combo[group_of]
    feasible = found_feasible if hard else True
    return _build_report(P, labels, knowledge, config, True, feasible)
