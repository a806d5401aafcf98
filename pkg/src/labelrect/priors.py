"""Prior knowledge about a target class distribution.

Two constraint families are supported: unary bounds, which box a single
class probability between a lower and an upper value, and binary
relationships, which order two class probabilities with a margin.
Utilities construct these constraints from a class prior, inject
controlled noise, and select partial subsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ClassPrior:
    """Probability vector over classes (entries >= 0, summing to 1)."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("class prior must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("class prior entries must be finite")
        if np.any(arr < 0):
            raise ValueError("class prior entries must be non-negative")
        if abs(arr.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"class prior must sum to 1, got {arr.sum()!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def num_classes(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class UnaryBound:
    """Lower/upper bound on one class probability."""

    class_index: int
    lower: float
    upper: float

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(
                f"need 0 <= lower <= upper <= 1, got [{self.lower}, {self.upper}]"
            )


@dataclass(frozen=True)
class BinaryRelationship:
    """Constraint p(greater) - p(lesser) >= delta."""

    greater: int
    lesser: int
    delta: float = 0.0

    def __post_init__(self):
        if self.greater == self.lesser:
            raise ValueError("binary relationship needs two distinct classes")
        if not -1.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [-1, 1], got {self.delta}")


@dataclass(frozen=True)
class PriorKnowledge:
    """A collection of unary bounds and binary relationships."""

    num_classes: int
    unary: tuple[UnaryBound, ...] = ()
    binary: tuple[BinaryRelationship, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "unary", tuple(self.unary))
        object.__setattr__(self, "binary", tuple(self.binary))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        seen = set()
        for ub in self.unary:
            if not 0 <= ub.class_index < self.num_classes:
                raise ValueError(f"unary bound class {ub.class_index} out of range")
            if ub.class_index in seen:
                raise ValueError(f"duplicate unary bound for class {ub.class_index}")
            seen.add(ub.class_index)
        for br in self.binary:
            for c in (br.greater, br.lesser):
                if not 0 <= c < self.num_classes:
                    raise ValueError(f"binary relationship class {c} out of range")

    def __len__(self) -> int:
        return len(self.unary) + len(self.binary)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def merged_with(self, other: "PriorKnowledge") -> "PriorKnowledge":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge knowledge over different class counts")
        return PriorKnowledge(
            num_classes=self.num_classes,
            unary=self.unary + other.unary,
            binary=self.binary + other.binary,
        )

    def to_mapping(self) -> dict:
        """Serialize to the interchange schema (plain JSON-able mapping)."""
        return {
            "num_classes": self.num_classes,
            "unary_bounds": [
                {"class": ub.class_index, "lower": ub.lower, "upper": ub.upper}
                for ub in self.unary
            ],
            "binary_relationships": [
                {"greater": br.greater, "lesser": br.lesser, "delta": br.delta}
                for br in self.binary
            ],
        }

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PriorKnowledge":
        try:
            num_classes = int(mapping["num_classes"])
            unary = tuple(
                UnaryBound(int(e["class"]), float(e["lower"]), float(e["upper"]))
                for e in mapping.get("unary_bounds", [])
            )
            binary = tuple(
                BinaryRelationship(
                    int(e["greater"]), int(e["lesser"]), float(e.get("delta", 0.0))
                )
                for e in mapping.get("binary_relationships", [])
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed prior knowledge mapping: {exc}") from exc
        return cls(num_classes=num_classes, unary=unary, binary=binary)


def descending_order(q: ClassPrior) -> np.ndarray:
    """Class indices sorted by prior probability, largest first, ties by index."""
    return np.lexsort((np.arange(q.num_classes), -q.probs))


def make_unary_bounds(q: ClassPrior, sigma: float) -> PriorKnowledge:
    """Box each class probability within a relative window of width sigma.

    Class c receives the bound [q_c*(1-sigma), min(1, q_c*(1+sigma))],
    with the lower end clamped at 0.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    bounds = []
    for c, qc in enumerate(q.probs):
        lo = max(0.0, qc * (1.0 - sigma))
        hi = min(1.0, qc * (1.0 + sigma))
        bounds.append(UnaryBound(c, lo, hi))
    return PriorKnowledge(num_classes=q.num_classes, unary=tuple(bounds))


def make_binary_relationships(
    q: ClassPrior, order: np.ndarray | list[int] | None = None
) -> PriorKnowledge:
    """Chain constraints ordering successive classes by prior probability.

    Classes are sorted by q descending (ties by ascending index, or an
    explicit `order` is used verbatim); each adjacent pair (c_i, c_{i+1})
    yields p(c_i) - p(c_{i+1}) >= 0.
    """
    if order is None:
        order = descending_order(q)
    order = np.asarray(order, dtype=int)
    if sorted(order.tolist()) != list(range(q.num_classes)):
        raise ValueError("order must be a permutation of all classes")
    chain = tuple(
        BinaryRelationship(int(order[i]), int(order[i + 1]), 0.0)
        for i in range(q.num_classes - 1)
    )
    return PriorKnowledge(num_classes=q.num_classes, binary=chain)


def perturb_unary(q: ClassPrior, phi: float, noise_draws) -> ClassPrior:
    """Multiplicatively perturb a prior and re-center it to a valid prior.

    The raw offsets q_c*phi*draw_c are centered by subtracting their mean
    so the vector still sums to 1; negatives are clamped to 0 and the
    result renormalized. Draws come from the caller (seeded uniform in
    [-1, 1]) so the operation itself is deterministic.
    """
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    draws = np.asarray(noise_draws, dtype=float)
    if draws.shape != q.probs.shape:
        raise ValueError("need one noise draw per class")
    if np.any(np.abs(draws) > 1.0 + 1e-12):
        raise ValueError("noise draws must lie in [-1, 1]")
    offsets = q.probs * phi * draws
    centered = offsets - offsets.mean()
    perturbed = np.maximum(q.probs + centered, 0.0)
    total = perturbed.sum()
    if total <= 0:
        raise ValueError("perturbation wiped out all probability mass")
    return ClassPrior(perturbed / total)


def perturb_ranking(q: ClassPrior, varphi: int, noise_draws) -> np.ndarray:
    """Noisy re-sort of the descending-probability class ordering.

    Each class's rank is jittered by varphi*draw and the classes are
    re-sorted by the noisy rank (ties broken by original rank). With
    varphi == 0 the ordering is unchanged. Returns a class permutation
    suitable as the `order` argument of make_binary_relationships.
    """
    if varphi < 0:
        raise ValueError(f"varphi must be non-negative, got {varphi}")
    draws = np.asarray(noise_draws, dtype=float)
    if draws.shape != q.probs.shape:
        raise ValueError("need one noise draw per class")
    order = descending_order(q)
    ranks = np.empty(q.num_classes, dtype=float)
    ranks[order] = np.arange(q.num_classes)
    noisy = ranks + varphi * draws
    return np.lexsort((ranks, noisy))


def select_partial(
    k: PriorKnowledge,
    q: ClassPrior,
    mode: str,
    count: int,
    rng_draws=None,
) -> PriorKnowledge:
    """Keep only constraints attached to a subset of classes.

    `mode` picks the `count` highest-probability classes ("major"), the
    lowest ("minor"), or a uniformly random subset ("random", driven by
    caller-supplied per-class draws). A unary bound is attached to its
    own class; a binary relationship to its `greater` class.
    """
    if q.num_classes != k.num_classes:
        raise ValueError("prior and knowledge class counts differ")
    if not 0 <= count <= len(k):
        raise ValueError(f"count must lie in [0, {len(k)}], got {count}")
    n_pick = min(count, k.num_classes)
    if mode == "major":
        chosen = descending_order(q)[:n_pick]
    elif mode == "minor":
        chosen = np.lexsort((np.arange(q.num_classes), q.probs))[:n_pick]
    elif mode == "random":
        if rng_draws is None:
            raise ValueError("random mode needs rng_draws")
        draws = np.asarray(rng_draws, dtype=float)
        if draws.shape != (q.num_classes,):
            raise ValueError("need one draw per class")
        chosen = np.lexsort((np.arange(q.num_classes), draws))[:n_pick]
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    keep = set(int(c) for c in chosen)
    return PriorKnowledge(
        num_classes=k.num_classes,
        unary=tuple(ub for ub in k.unary if ub.class_index in keep),
        binary=tuple(br for br in k.binary if br.greater in keep),
    )


def estimate_prior(labels, num_classes: int) -> ClassPrior:
    """Empirical class prior from a list of labels."""
    arr = np.asarray(labels, dtype=int)
    if arr.size == 0:
        raise ValueError("cannot estimate a prior from an empty label set")
    if arr.min() < 0 or arr.max() >= num_classes:
        raise ValueError("labels out of range for the given class count")
    counts = np.bincount(arr, minlength=num_classes)
    return ClassPrior(counts / arr.size)
