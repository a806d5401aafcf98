"""Desk-scale self-training simulation on synthetic label-shifted domains.

Generates Gaussian class clusters whose class frequencies differ between
source and target, runs a centroid-based pseudo-labeling loop with or
without prior-knowledge rectification, and records per-iteration quality
metrics. This isolates the effect of rectifying pseudo labels without any
network training.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .priors import (
    ClassPrior,
    PriorKnowledge,
    estimate_prior,
    make_binary_relationships,
    make_unary_bounds,
    perturb_ranking,
    perturb_unary,
)
from .rectify import (
    DistanceMatrix,
    FeatureMatrix,
    RectifyConfig,
    _pairwise_distances,
    probs_from_distances,
    rectify,
)
from .solver import LabelAssignment, ProbMatrix


def largest_remainder_counts(probs: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``probs`` summing exactly to ``total``.

    Floors first, then hands remaining units to the largest remainders
    (ties to the lowest class index), so an exact prior stays exactly
    satisfiable after rounding.
    """
    probs = np.asarray(probs, dtype=float)
    raw = probs * total
    counts = np.floor(raw).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        order = np.lexsort((np.arange(probs.size), -(raw - counts)))
        counts[order[:leftover]] += 1
    return counts


@dataclass(frozen=True)
class LabeledSet:
    """Feature rows with ground-truth labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for a pair of label-shifted Gaussian mixture domains."""

    num_classes: int
    feature_dim: int
    class_means: np.ndarray
    class_scales: np.ndarray
    source_prior: ClassPrior
    target_prior: ClassPrior
    n_source: int
    n_target: int
    mean_shift: np.ndarray

    def __post_init__(self):
        means = np.array(self.class_means, dtype=float)
        scales = np.array(self.class_scales, dtype=float)
        shift = np.array(self.mean_shift, dtype=float)
        if means.shape != (self.num_classes, self.feature_dim):
            raise ValueError("class_means must be (num_classes, feature_dim)")
        if scales.shape != (self.num_classes,):
            raise ValueError("class_scales must have one entry per class")
        if np.any(scales <= 0):
            raise ValueError("class scales must be positive")
        if shift.ndim == 1:
            shift = np.broadcast_to(shift, means.shape).copy()
        if shift.shape != means.shape:
            raise ValueError("mean_shift must broadcast to class_means")
        for prior in (self.source_prior, self.target_prior):
            if prior.num_classes != self.num_classes:
                raise ValueError("prior length must match num_classes")
        if min(self.n_source, self.n_target) < self.num_classes:
            raise ValueError("need at least one sample slot per class")
        for arr in (means, scales, shift):
            arr.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "class_scales", scales)
        object.__setattr__(self, "mean_shift", shift)

    def to_mapping(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_means": self.class_means.tolist(),
            "class_scales": self.class_scales.tolist(),
            "source_prior": self.source_prior.probs.tolist(),
            "target_prior": self.target_prior.probs.tolist(),
            "n_source": self.n_source,
            "n_target": self.n_target,
            "mean_shift": self.mean_shift.tolist(),
        }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SyntheticDomainSpec":
        try:
            return cls(
                num_classes=int(mapping["num_classes"]),
                feature_dim=int(mapping["feature_dim"]),
                class_means=np.array(mapping["class_means"], dtype=float),
                class_scales=np.array(mapping["class_scales"], dtype=float),
                source_prior=ClassPrior(np.array(mapping["source_prior"], float)),
                target_prior=ClassPrior(np.array(mapping["target_prior"], float)),
                n_source=int(mapping["n_source"]),
                n_target=int(mapping["n_target"]),
                mean_shift=np.array(mapping["mean_shift"], dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed domain spec: {exc}") from exc


REVERSE_LONGTAIL_PRIOR = (0.35, 0.25, 0.15, 0.12, 0.08, 0.05)


def reverse_longtail_spec(
    n_source: int = 600, n_target: int = 600
) -> SyntheticDomainSpec:
    """Six 2-D Gaussian classes on a ring; target prior reverses the source."""
    num_classes = len(REVERSE_LONGTAIL_PRIOR)
    angles = np.linspace(0.0, 2.0 * np.pi, num_classes, endpoint=False)
    means = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return SyntheticDomainSpec(
        num_classes=num_classes,
        feature_dim=2,
        class_means=means,
        class_scales=np.ones(num_classes),
        source_prior=ClassPrior(np.array(REVERSE_LONGTAIL_PRIOR)),
        target_prior=ClassPrior(np.array(REVERSE_LONGTAIL_PRIOR[::-1])),
        n_source=n_source,
        n_target=n_target,
        mean_shift=np.array([0.6, 0.6]),
    )


def generate_shifted_domains(
    spec: SyntheticDomainSpec, seed: int
) -> tuple[LabeledSet, LabeledSet]:
    """Draw the source and target sets; class counts follow the priors
    exactly via largest-remainder rounding, so empirical priors are exact."""
    rng = np.random.default_rng(seed)
    sets = []
    for prior, n, means in (
        (spec.source_prior, spec.n_source, spec.class_means),
        (spec.target_prior, spec.n_target, spec.class_means + spec.mean_shift),
    ):
        counts = largest_remainder_counts(prior.probs, n)
        labels = np.repeat(np.arange(spec.num_classes), counts)
        noise = rng.standard_normal((n, spec.feature_dim))
        features = means[labels] + spec.class_scales[labels, None] * noise
        order = rng.permutation(n)
        sets.append(
            LabeledSet(
                features=features[order],
                labels=labels[order],
                num_classes=spec.num_classes,
            )
        )
    return sets[0], sets[1]


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    return float(np.mean(pred == truth))


def per_class_avg_accuracy(pred, truth) -> float:
    """Mean of per-class recalls; every truth class must be populated."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    recalls = []
    for c in range(int(truth.max()) + 1):
        mask = truth == c
        if not mask.any():
            raise ValueError(f"class {c} has no ground-truth samples")
        recalls.append(float(np.mean(pred[mask] == c)))
    return float(np.mean(recalls))


def kl_to_truth(mean_probs, truth) -> float:
    """KL divergence of a distribution from the ground-truth distribution,
    with the 0*log(0) = 0 convention."""
    p = np.asarray(
        mean_probs.probs if isinstance(mean_probs, ClassPrior) else mean_probs,
        dtype=float,
    )
    q = np.asarray(truth.probs if isinstance(truth, ClassPrior) else truth, float)
    if p.shape != q.shape:
        raise ValueError("distribution lengths differ")
    if np.any((q == 0) & (p > 0)):
        raise ValueError("truth has zero mass where the estimate is positive")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def teacher_blend(
    P_tch: ProbMatrix, labels: LabelAssignment, smoothing: float = 0.1
) -> ProbMatrix:
    """Average the teacher rows with (optionally smoothed) one-hot labels."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    if len(labels) != P_tch.n_t or labels.num_classes != P_tch.num_classes:
        raise ValueError("teacher matrix and labels disagree on shape")
    smoothed = (1.0 - smoothing) * labels.one_hot() + smoothing / P_tch.num_classes
    return ProbMatrix((P_tch.values + smoothed) / 2.0)


@dataclass(frozen=True)
class IterationRecord:
    """Quality metrics for one self-training iteration."""

    iteration: int
    acc_argmax: float
    acc_rectified: float
    per_class_acc: float
    kl_hist: float
    counts: tuple[int, ...]
    kl_teacher_raw: float
    kl_teacher_blend: float

    def to_mapping(self) -> dict:
        return {
            "iteration": self.iteration,
            "acc_argmax": self.acc_argmax,
            "acc_rectified": self.acc_rectified,
            "per_class_acc": self.per_class_acc,
            "kl_hist": self.kl_hist,
            "counts": list(self.counts),
            "kl_teacher_raw": self.kl_teacher_raw,
            "kl_teacher_blend": self.kl_teacher_blend,
        }


@dataclass(frozen=True)
class AdaptTrace:
    """Per-iteration records of one adaptation run."""

    records: tuple[IterationRecord, ...]

    def __post_init__(self):
        for rec in self.records:
            if not (np.isfinite(rec.kl_hist) and rec.kl_hist >= 0):
                raise ValueError("divergences must be finite and non-negative")
            for acc in (rec.acc_argmax, rec.acc_rectified, rec.per_class_acc):
                if not 0.0 <= acc <= 1.0:
                    raise ValueError("accuracies must lie in [0, 1]")

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def series(self, name: str) -> list[float]:
        return [getattr(rec, name) for rec in self.records]


@dataclass(frozen=True)
class AdaptConfig:
    """Loop length, distance metric, and rectification settings."""

    iterations: int = 10
    metric: str = "euclidean"
    M: float | None = None
    use_smooth: bool = True
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"metric must be 'euclidean' or 'cosine', got {self.metric!r}")


def _class_means(features, labels, num_classes, fallback=None):
    means = np.empty((num_classes, features.shape[1]))
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            means[c] = features[mask].mean(axis=0)
        elif fallback is not None:
            means[c] = fallback[c]
        else:
            raise ValueError(f"class {c} has no samples to initialize a centroid")
    return means


def centroid_self_training(
    source: LabeledSet,
    target: LabeledSet,
    knowledge: PriorKnowledge | None,
    config: AdaptConfig | None = None,
) -> AdaptTrace:
    """Iterated centroid pseudo-labeling on the target, with optional
    prior-knowledge rectification of each round's pseudo labels.

    Each iteration re-estimates centroids from soft predictions, converts
    centroid distances to probabilities, rectifies (or argmaxes) them into
    pseudo labels, and re-estimates centroids from those labels. Metrics
    are recorded against the target ground truth; a class that loses all
    samples keeps its previous centroid.
    """
    if config is None:
        config = AdaptConfig()
    num_classes = target.num_classes
    truth_prior = estimate_prior(target.labels, num_classes)
    X = target.features
    centroids = _class_means(source.features, source.labels, num_classes)
    rect_cfg = RectifyConfig(
        M=config.M, use_smooth=config.use_smooth, neighbor_metric=config.metric
    )
    records = []
    for it in range(config.iterations):
        soft = probs_from_distances(
            DistanceMatrix(_pairwise_distances(X, centroids, config.metric))
        ).values
        weighted = (soft.T @ X) / soft.sum(axis=0)[:, None]
        P = probs_from_distances(
            DistanceMatrix(_pairwise_distances(X, weighted, config.metric))
        )
        argmax_labels = np.argmax(P.values, axis=1)
        if knowledge is not None and not knowledge.empty:
            result = rectify(P, knowledge, FeatureMatrix(X), rect_cfg)
            labels = result.labels.labels
        else:
            labels = argmax_labels
        centroids = _class_means(X, labels, num_classes, fallback=weighted)
        counts = np.bincount(labels, minlength=num_classes)
        blend = teacher_blend(
            P,
            LabelAssignment(labels, num_classes),
            smoothing=config.label_smoothing,
        )
        records.append(
            IterationRecord(
                iteration=it,
                acc_argmax=accuracy(argmax_labels, target.labels),
                acc_rectified=accuracy(labels, target.labels),
                per_class_acc=per_class_avg_accuracy(labels, target.labels),
                kl_hist=kl_to_truth(counts / counts.sum(), truth_prior),
                counts=tuple(int(c) for c in counts),
                kl_teacher_raw=kl_to_truth(P.values.mean(axis=0), truth_prior),
                kl_teacher_blend=kl_to_truth(blend.values.mean(axis=0), truth_prior),
            )
        )
    return AdaptTrace(tuple(records))


_ARM_PATTERN = re.compile(
    r"^(baseline|ub(?P<sigma>[0-9.]+)(?P<plusbr>\+br)?|br)"
    r"(?:@n(?P<nphi>[0-9.]+))?(?:@r(?P<rphi>[0-9]+))?$"
)


@dataclass(frozen=True)
class ArmSpec:
    """One experiment arm: which knowledge to build and how noisy."""

    name: str
    use_ub: bool = False
    sigma: float = 0.0
    use_br: bool = False
    noise_phi: float = 0.0
    rank_phi: int = 0


def parse_arm(token: str) -> ArmSpec:
    """Parse an arm token: ``baseline``, ``ub<sigma>``, ``br`` or
    ``ub<sigma>+br``, with optional noise suffixes ``@n<phi>`` (prior
    noise) and ``@r<varphi>`` (ranking noise)."""
    match = _ARM_PATTERN.match(token.strip())
    if match is None:
        raise ValueError(f"cannot parse arm {token!r}")
    body = match.group(1)
    noise_phi = float(match.group("nphi") or 0.0)
    rank_phi = int(match.group("rphi") or 0)
    if body == "baseline":
        if noise_phi or rank_phi:
            raise ValueError("baseline arm takes no noise suffixes")
        return ArmSpec(name=token)
    if body == "br":
        return ArmSpec(name=token, use_br=True, noise_phi=noise_phi, rank_phi=rank_phi)
    sigma = float(match.group("sigma"))
    return ArmSpec(
        name=token,
        use_ub=True,
        sigma=sigma,
        use_br=match.group("plusbr") is not None,
        noise_phi=noise_phi,
        rank_phi=rank_phi,
    )


def knowledge_for_arm(
    arm: ArmSpec, target_labels: np.ndarray, num_classes: int, seed: int
) -> PriorKnowledge | None:
    """Build the arm's prior knowledge from the target ground truth.

    Noise draws depend only on the seed, not on the noise level, so runs
    at different levels share randomness and are directly comparable.
    """
    if not (arm.use_ub or arm.use_br):
        return None
    q = estimate_prior(target_labels, num_classes)
    knowledge = PriorKnowledge(num_classes=num_classes)
    if arm.use_ub:
        q_used = q
        if arm.noise_phi > 0:
            draws = np.random.default_rng([seed, 1]).uniform(-1, 1, num_classes)
            q_used = perturb_unary(q, arm.noise_phi, draws)
        knowledge = knowledge.merged_with(make_unary_bounds(q_used, arm.sigma))
    if arm.use_br:
        order = None
        if arm.rank_phi > 0:
            draws = np.random.default_rng([seed, 2]).uniform(-1, 1, num_classes)
            order = perturb_ranking(q, arm.rank_phi, draws)
        knowledge = knowledge.merged_with(make_binary_relationships(q, order))
    return knowledge


def run_arm(
    spec: SyntheticDomainSpec,
    arm: ArmSpec,
    seed: int,
    config: AdaptConfig | None = None,
) -> AdaptTrace:
    """Generate the seeded domains and run one arm's adaptation loop."""
    source, target = generate_shifted_domains(spec, seed)
    knowledge = knowledge_for_arm(arm, target.labels, spec.num_classes, seed)
    return centroid_self_training(source, target, knowledge, config)
