"""Two-stage rectification of pseudo labels.

Stage one solves the constrained program on the probability matrix.
Samples whose label changed relative to the plain argmax are treated as
uncertain; each is tied to its nearest confident neighbor in feature
space and the program is re-solved with those equality ties, smoothing
the rectified labels over the data manifold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import PriorKnowledge
from .solver import (
    LabelAssignment,
    ProbMatrix,
    SmoothRegularization,
    SolveReport,
    SolverConfig,
    solve,
)


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-sample feature vectors (rows)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("feature matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DistanceMatrix:
    """Non-negative sample-to-centroid distances (one column per class)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("distance matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("distances must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class RectifyConfig:
    """Penalty constant, smoothing switch, and neighbor metric.

    ``M=None`` means the conventional default of 10 times the sample
    count, resolved against the matrix at solve time.
    """

    M: float | None = None
    use_smooth: bool = True
    neighbor_metric: str = "cosine"
    mode: str = "soft"
    optimality: str = "exact"

    def __post_init__(self):
        if self.M is not None and self.M < 0:
            raise ValueError(f"M must be non-negative, got {self.M}")
        if self.neighbor_metric not in ("cosine", "euclidean"):
            raise ValueError(
                f"neighbor_metric must be 'cosine' or 'euclidean', "
                f"got {self.neighbor_metric!r}"
            )

    def resolve_M(self, n_t: int) -> float:
        return 10.0 * n_t if self.M is None else self.M


@dataclass(frozen=True)
class RectifyResult:
    """Final labels plus both stage reports and the smoothing structure."""

    labels: LabelAssignment
    stage1: SolveReport
    stage2: SolveReport
    uncertain: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...]
    warning: str | None = None

    def as_tuple(self) -> tuple[LabelAssignment, SolveReport, SolveReport]:
        return self.labels, self.stage1, self.stage2


def probs_from_distances(D: DistanceMatrix) -> ProbMatrix:
    """Row-wise softmax of the negated distances, max-shifted for stability."""
    neg = -D.values
    shifted = neg - neg.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return ProbMatrix(expd / expd.sum(axis=1, keepdims=True))


def _pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def nearest_anchor(
    features: FeatureMatrix, members, metric: str = "cosine"
) -> tuple[tuple[int, int], ...]:
    """Tie each member to its closest non-member (ties to the lowest index).

    The cosine metric compares L2-normalized vectors.
    """
    member_idx = np.asarray(sorted(set(int(m) for m in members)), dtype=np.int64)
    if member_idx.size == 0:
        return ()
    if member_idx.min() < 0 or member_idx.max() >= features.n_t:
        raise ValueError("member index out of range")
    anchor_idx = np.setdiff1d(np.arange(features.n_t), member_idx)
    if anchor_idx.size == 0:
        raise ValueError("no anchors remain outside the member set")
    dists = _pairwise_distances(
        features.values[member_idx], features.values[anchor_idx], metric
    )
    picks = anchor_idx[np.argmin(dists, axis=1)]
    return tuple((int(m), int(a)) for m, a in zip(member_idx, picks))


def rectify(
    P: ProbMatrix,
    knowledge: PriorKnowledge | None,
    features: FeatureMatrix | None = None,
    config: RectifyConfig | None = None,
) -> RectifyResult:
    """Rectify pseudo labels against prior knowledge, optionally smoothed.

    Stage one solves the program as-is. If smoothing is enabled, samples
    whose stage-one label differs from the plain argmax are each tied to
    their nearest unchanged neighbor and the program is re-solved with
    those ties. When every sample changed there is no anchor set; stage
    one stands and a warning is recorded.
    """
    if config is None:
        config = RectifyConfig()
    if config.use_smooth and features is None:
        raise ValueError("smoothing requires a feature matrix")
    if features is not None and features.n_t != P.n_t:
        raise ValueError("features and probabilities disagree on sample count")
    if knowledge is None:
        knowledge = PriorKnowledge(num_classes=P.num_classes)
    solver_cfg = SolverConfig(
        M=config.resolve_M(P.n_t), mode=config.mode, optimality=config.optimality
    )
    stage1 = solve(P, knowledge, None, solver_cfg)

    argmax_labels = np.argmax(P.values, axis=1)
    changed = np.nonzero(argmax_labels != stage1.assignment.labels)[0]
    if not config.use_smooth or changed.size == 0:
        return RectifyResult(
            labels=stage1.assignment,
            stage1=stage1,
            stage2=stage1,
            uncertain=tuple(int(i) for i in changed),
            pairs=(),
        )
    if changed.size == P.n_t:
        return RectifyResult(
            labels=stage1.assignment,
            stage1=stage1,
            stage2=stage1,
            uncertain=tuple(int(i) for i in changed),
            pairs=(),
            warning="every label changed; no anchors available for smoothing",
        )
    pairs = nearest_anchor(features, changed, config.neighbor_metric)
    stage2 = solve(P, knowledge, SmoothRegularization(pairs), solver_cfg)
    return RectifyResult(
        labels=stage2.assignment,
        stage1=stage1,
        stage2=stage2,
        uncertain=tuple(int(i) for i in changed),
        pairs=pairs,
    )
