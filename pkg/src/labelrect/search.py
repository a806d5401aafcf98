"""Search strategies over class-count vectors.

The score of an assignment splits into a transport value that depends on
which samples go where, and a penalty that depends only on the per-class
count vector. Three strategies cover the cases:

* unary-only soft penalties are separable convex, so the objective is
  concave with the exchange property over count vectors and a steepest
  single-unit-move ascent with exact transport deltas is globally optimal
  (split groups, when equality ties exist, are resolved by branching);
* binary relationships couple two counts and hard mode needs a
  feasibility proof, so both use branch-and-bound over count coordinates
  with admissible prefix-sum bounds;
* the heuristic strategy reports the steepest-ascent point as is.
"""

from __future__ import annotations

import numpy as np

from .transport import TransportEngine, assign_groups_exactly

EPS = 1e-9
_PRUNE_TOL = 1e-12
# Stand-in penalty weight that makes the local search prioritize
# feasibility when repairing hard-mode constraint violations.
_REPAIR_WEIGHT = 1e12


def snap(x: float) -> float:
    """Zero out sub-epsilon slack so integer counts hitting a real-valued
    right-hand side do not register phantom violations."""
    return x if x > EPS else 0.0


class CountObjective:
    """Penalty of a count vector under a prior-knowledge constraint set."""

    def __init__(self, knowledge, n_t: int, num_classes: int):
        self.n_t = n_t
        self.num_classes = num_classes
        self.lo = np.full(num_classes, -np.inf)
        self.hi = np.full(num_classes, np.inf)
        for ub in knowledge.unary:
            self.lo[ub.class_index] = n_t * ub.lower
            self.hi[ub.class_index] = n_t * ub.upper
        self.br = [(br.greater, br.lesser, n_t * br.delta) for br in knowledge.binary]

    @property
    def separable(self) -> bool:
        return not self.br

    def penalty(self, counts) -> float:
        lo_slack = self.lo - counts
        hi_slack = counts - self.hi
        total = float(
            np.where(lo_slack > EPS, lo_slack, 0.0).sum()
            + np.where(hi_slack > EPS, hi_slack, 0.0).sum()
        )
        for g, l, rhs in self.br:
            total += snap(rhs - (counts[g] - counts[l]))
        return total


def steepest_ascent(
    engine: TransportEngine,
    objective: CountObjective,
    penalty_weight: float,
    count_offset: np.ndarray | None = None,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> None:
    """Drive the engine to a local optimum of value minus weighted penalty.

    Candidate moves shift one count unit between two classes and are
    scored with the exact transport value change (shortest residual path).
    For separable penalties (optionally restricted to per-class count
    boxes, which are separable too) the stopping point is the global
    optimum of the relaxation; with relationship penalties it is only a
    local one. The engine must start box-feasible when a box is given.
    """
    num_classes = engine.num_classes
    offset = (
        np.zeros(num_classes, dtype=np.int64) if count_offset is None else count_offset
    )
    cap = 20 * int(engine.w.sum()) + 1000
    pen_now = objective.penalty(engine.counts + offset)
    for _ in range(cap):
        table = engine.move_cost_table()
        best_gain = _PRUNE_TOL
        best_move = None
        for a in range(num_classes):
            if engine.counts[a] == 0:
                continue
            if box is not None and engine.counts[a] - 1 < box[0][a]:
                continue
            for b in range(num_classes):
                if b == a or not np.isfinite(table[a, b]):
                    continue
                if box is not None and engine.counts[b] + 1 > box[1][b]:
                    continue
                cand = engine.counts + offset
                cand[a] -= 1
                cand[b] += 1
                gain = -table[a, b] - penalty_weight * (
                    objective.penalty(cand) - pen_now
                )
                if gain > best_gain:
                    best_gain = gain
                    best_move = (a, b)
        if best_move is None:
            return
        engine.move_unit(*best_move)
        pen_now = objective.penalty(engine.counts + offset)
        # Keep applying the same move while it stays strictly improving; the
        # endpoint is a local optimum regardless of the visiting order.
        a, b = best_move
        while True:
            if engine.counts[a] == 0:
                break
            if box is not None and (
                engine.counts[a] - 1 < box[0][a] or engine.counts[b] + 1 > box[1][b]
            ):
                break
            dist, pred = engine._dijkstra(engine._arc_costs(), a)
            if not np.isfinite(dist[b]):
                break
            move_cost = dist[b] + engine.potentials[b] - engine.potentials[a]
            cand = engine.counts + offset
            cand[a] -= 1
            cand[b] += 1
            gain = -move_cost - penalty_weight * (objective.penalty(cand) - pen_now)
            if gain <= _PRUNE_TOL:
                break
            engine._augment(a, b, pred)
            engine.potentials += np.minimum(dist, dist[b])
            pen_now = objective.penalty(engine.counts + offset)
    raise RuntimeError("steepest ascent failed to converge")


def separable_exact(
    unit_values: np.ndarray,
    weights: np.ndarray,
    objective: CountObjective,
    M: float,
) -> tuple[float, np.ndarray]:
    """Exact optimum for unary-only soft penalties.

    Runs the provably-global steepest ascent on the splitting relaxation;
    whenever the relaxed optimum splits a weighted group, branches on that
    group's class with the relaxation value as an admissible bound.
    Returns (total score, per-group labels).
    """
    if not objective.separable:
        raise ValueError("separable_exact needs a relationship-free objective")
    num_groups = unit_values.shape[0]
    best: list = [-np.inf, None]
    labels_buf = np.empty(num_groups, dtype=np.int64)
    engine = TransportEngine(unit_values, weights)
    _separable_branch(
        engine,
        np.zeros(unit_values.shape[1], dtype=np.int64),
        0.0,
        objective,
        M,
        best,
        labels_buf,
    )
    assert best[1] is not None
    return best[0], best[1]


def _separable_branch(engine, fixed_counts, fixed_value, objective, M, best, labels_buf):
    """DFS over split groups; locked groups feed the penalty via offsets."""
    steepest_ascent(engine, objective, M, count_offset=fixed_counts)
    relaxed = (
        fixed_value
        + engine.value
        - M * objective.penalty(engine.counts + fixed_counts)
    )
    if relaxed <= best[0] + _PRUNE_TOL:
        return
    engine.consolidate_splits()
    splits = engine.split_groups()
    if splits.size == 0:
        active = engine.active_groups()
        labels_buf[active] = engine.group_assignment()[active]
        best[0] = relaxed
        best[1] = labels_buf.copy()
        return
    g = int(splits[0])
    gain = engine.u[g] * engine.w[g]
    at_node = engine.snapshot()
    engine.drop_group(g)
    dropped = engine.snapshot()
    for c in np.lexsort((np.arange(engine.num_classes), -gain)):
        c = int(c)
        child_counts = fixed_counts.copy()
        child_counts[c] += engine.w[g]
        labels_buf[g] = c
        engine.restore(dropped)
        _separable_branch(
            engine, child_counts, fixed_value + gain[c], objective, M, best, labels_buf
        )
    engine.restore(at_node)


def _resolve_counts(unit, weights, counts, objective, M, cache):
    """True (whole-group) total at a count vector, memoized; None if unpackable."""
    key = tuple(int(c) for c in counts)
    if key not in cache:
        result = assign_groups_exactly(unit, weights, np.asarray(counts, np.int64))
        if result is None:
            cache[key] = None
        else:
            value, labels = result
            cache[key] = (value - M * objective.penalty(counts), labels)
    return cache[key]


def _box_feasible_counts(counts, lo, hi, total):
    """Deterministic box-feasible count vector near ``counts``."""
    start = np.clip(counts, lo, hi)
    diff = int(total - start.sum())
    if diff > 0:
        for c in range(start.size):
            room = int(hi[c] - start[c])
            take = min(room, diff)
            start[c] += take
            diff -= take
            if diff == 0:
                break
    elif diff < 0:
        for c in range(start.size):
            room = int(start[c] - lo[c])
            give = min(room, -diff)
            start[c] -= give
            diff += give
            if diff == 0:
                break
    return start


class RelationshipSearch:
    """Certified optimum when relationship penalties couple two counts.

    The relationship slack terms are dualized with multipliers in [0, M];
    each multiplier choice shifts the per-class unit values linearly,
    leaving a unary-only problem solved exactly by steepest ascent, so
    every dual evaluation is an admissible upper bound. A projected
    subgradient loop tightens the bound against whole-group primal
    candidates; residual duality gaps (optima sitting on slack kinks) are
    closed by branching on per-class count boxes, which stay separable.
    """

    _ROOT_ROUNDS = 80
    _NODE_ROUNDS = 15

    def __init__(self, unit_values, weights, knowledge, M: float, tol: float = 1e-10):
        self.u = np.asarray(unit_values, dtype=float)
        self.w = np.asarray(weights, dtype=np.int64)
        self.num_classes = self.u.shape[1]
        self.n_t = int(self.w.sum())
        self.M = float(M)
        self.tol = tol
        self.objective = CountObjective(knowledge, self.n_t, self.num_classes)
        self.separable = CountObjective(
            knowledge.__class__(num_classes=self.num_classes, unary=knowledge.unary),
            self.n_t,
            self.num_classes,
        )
        self.greater = np.array([g for g, _, _ in self.objective.br], dtype=np.int64)
        self.lesser = np.array([l for _, l, _ in self.objective.br], dtype=np.int64)
        self.rhs = np.array([r for _, _, r in self.objective.br])
        self._cache: dict = {}
        self.best_total = -np.inf
        self.best_labels: np.ndarray | None = None

    def _consider(self, counts) -> None:
        resolved = _resolve_counts(
            self.u, self.w, counts, self.objective, self.M, self._cache
        )
        if resolved is not None and resolved[0] > self.best_total:
            self.best_total, self.best_labels = resolved

    def _polish(self, counts) -> None:
        """Full-objective local search seeded at a dual iterate."""
        key = ("polish", tuple(int(c) for c in counts))
        if key in self._cache:
            return
        self._cache[key] = True
        engine = TransportEngine(self.u, self.w)
        engine.move_to(counts)
        steepest_ascent(engine, self.objective, self.M)
        self._consider(engine.counts)

    def _dual_round(self, lam, lo, hi):
        """One dual evaluation inside a box; returns (bound, counts)."""
        shift = np.zeros(self.num_classes)
        np.add.at(shift, self.greater, lam)
        np.add.at(shift, self.lesser, -lam)
        engine = TransportEngine(self.u + shift[None, :], self.w)
        engine.move_to(_box_feasible_counts(engine.counts, lo, hi, self.n_t))
        steepest_ascent(engine, self.separable, self.M, box=(lo, hi))
        counts = engine.counts.copy()
        # engine.value already includes shift @ counts.
        bound = (
            engine.value
            - self.M * self.separable.penalty(counts)
            - float(lam @ self.rhs)
        )
        return bound, counts

    def _evaluate_node(self, lam, lo, hi, rounds):
        """Subgradient loop; returns (bound, lam, counts) at the best bound."""
        bound_best = np.inf
        state_best = None
        for _ in range(rounds):
            bound, counts = self._dual_round(lam, lo, hi)
            self._consider(counts)
            self._polish(counts)
            if bound < bound_best:
                bound_best = bound
                state_best = (lam.copy(), counts)
            if bound_best <= self.best_total + max(self.tol, _PRUNE_TOL):
                break
            diff = (counts[self.greater] - counts[self.lesser]).astype(float)
            grad = self.rhs - diff
            gnorm2 = float(grad @ grad)
            if gnorm2 == 0.0:
                break
            step = max(bound - self.best_total, self.tol) / gnorm2
            lam = np.clip(lam + step * grad, 0.0, self.M)
        assert state_best is not None
        return bound_best, state_best[0], state_best[1]

    def _branch_choice(self, lam, counts, lo, hi):
        """Class and split point whose box most blocks the certificate."""
        diff = (counts[self.greater] - counts[self.lesser]).astype(float)
        raw = self.rhs - diff
        true_pen = np.where(raw > EPS, raw, 0.0)
        mismatch = np.abs(self.M * true_pen - lam * raw)
        for i in np.argsort(-mismatch):
            if mismatch[i] <= self.tol:
                break
            for c in sorted(
                (self.greater[i], self.lesser[i]), key=lambda c: hi[c] - lo[c]
            )[::-1]:
                if hi[c] > lo[c]:
                    return int(c), int(np.clip(counts[c], lo[c], hi[c] - 1))
        widths = hi - lo
        c = int(np.argmax(widths))
        if widths[c] == 0:
            return None
        return c, int(np.clip(counts[c], lo[c], hi[c] - 1))

    def run(self) -> tuple[float, np.ndarray, bool]:
        """Returns (total, group labels, certified)."""
        self._consider(TransportEngine(self.u, self.w).counts)
        scout = TransportEngine(self.u, self.w)
        steepest_ascent(scout, self.objective, self.M)
        self._consider(scout.counts)

        lo0 = np.zeros(self.num_classes, dtype=np.int64)
        hi0 = np.full(self.num_classes, self.n_t, dtype=np.int64)
        stack = [(lo0, hi0, np.zeros(len(self.rhs)), self._ROOT_ROUNDS)]
        nodes = 0
        budget = max(48, 24_000 // max(1, self.n_t))
        certified = True
        while stack:
            lo, hi, lam, rounds = stack.pop()
            nodes += 1
            if nodes > budget:
                # Out of budget: the incumbent stands, without a proof.
                certified = False
                break
            if lo.sum() > self.n_t or hi.sum() < self.n_t:
                continue
            if np.array_equal(lo, hi):
                self._consider(lo)
                continue
            bound, lam, counts = self._evaluate_node(lam, lo, hi, rounds)
            if bound <= self.best_total + max(self.tol, _PRUNE_TOL):
                continue
            choice = self._branch_choice(lam, counts, lo, hi)
            if choice is None:
                # All boxes are points; the leaf case above would have
                # caught this, so a missing choice means a stuck bound.
                raise RuntimeError("count-box search could not branch")
            c, split = choice
            lo_right = lo.copy()
            lo_right[c] = split + 1
            hi_left = hi.copy()
            hi_left[c] = split
            near_left = counts[c] <= split
            far = (lo_right, hi, lam.copy(), self._NODE_ROUNDS)
            near = (lo, hi_left, lam.copy(), self._NODE_ROUNDS)
            if not near_left:
                near, far = far, near
            stack.append(far)
            stack.append(near)
        assert self.best_labels is not None
        return self.best_total, self.best_labels, certified


class CountSearch:
    """Branch-and-bound over class-count vectors.

    Used when relationship constraints couple two counts or when hard
    feasibility must be proven. Branching fixes one class count per level
    (constraint-heavy classes first, so relationship penalties become
    exact early). Node bounds add per-class sorted prefix sums for fixed
    classes, a merged greedy prefix for the remaining budget, and
    admissible penalty lower bounds.
    """

    def __init__(self, unit_values, weights, knowledge, M: float | None):
        self.u = np.asarray(unit_values, dtype=float)
        self.w = np.asarray(weights, dtype=np.int64)
        self.num_classes = self.u.shape[1]
        self.n_t = int(self.w.sum())
        self.hard = M is None
        self.M = 0.0 if M is None else float(M)
        self.objective = CountObjective(knowledge, self.n_t, self.num_classes)
        self.engine = TransportEngine(self.u, self.w)
        self.argmax_counts = self.engine.counts.copy()

        unit_cols = np.repeat(self.u, self.w, axis=0)
        col_sorted = -np.sort(-unit_cols, axis=0)
        self.col_prefix = np.vstack(
            [np.zeros((1, self.num_classes)), np.cumsum(col_sorted, axis=0)]
        )
        self.order = self._branch_order()
        self.rest_prefix = []
        for depth in range(self.num_classes + 1):
            if depth >= self.num_classes:
                self.rest_prefix.append(np.zeros(self.n_t + 1))
                continue
            merged = np.sort(
                np.concatenate([unit_cols[:, c] for c in self.order[depth:]])
            )[::-1][: self.n_t]
            self.rest_prefix.append(np.concatenate(([0.0], np.cumsum(merged))))
        self._fixed = np.zeros(self.num_classes, dtype=bool)
        self.best_total = -np.inf
        self.best_labels: np.ndarray | None = None

    def _branch_order(self) -> list[int]:
        degree = np.zeros(self.num_classes, dtype=int)
        neighbors: list[set[int]] = [set() for _ in range(self.num_classes)]
        for g, l, _ in self.objective.br:
            degree[g] += 1
            degree[l] += 1
            neighbors[g].add(l)
            neighbors[l].add(g)
        has_ub = np.isfinite(self.objective.hi) | np.isfinite(-self.objective.lo)
        order: list[int] = []
        placed: set[int] = set()
        remaining = set(range(self.num_classes))
        while remaining:
            pick = max(
                remaining,
                key=lambda c: (
                    len(neighbors[c] & placed),
                    degree[c],
                    bool(has_ub[c]),
                    -c,
                ),
            )
            order.append(pick)
            placed.add(pick)
            remaining.remove(pick)
        return order

    def _child_terms(self, depth: int, counts: np.ndarray, budget: int):
        """Per-child (k = units given to order[depth]) bound ingredients."""
        c = self.order[depth]
        k = np.arange(budget + 1, dtype=np.int64)
        rest = budget - k
        value = self.col_prefix[: budget + 1, c] + self.rest_prefix[depth + 1][rest]

        det = np.zeros(budget + 1)
        lo_c, hi_c = self.objective.lo[c], self.objective.hi[c]
        if np.isfinite(lo_c):
            term = lo_c - k
            det += np.where(term > EPS, term, 0.0)
        if np.isfinite(hi_c):
            term = k - hi_c
            det += np.where(term > EPS, term, 0.0)

        lb = np.zeros(budget + 1)
        for g, l, rhs in self.objective.br:
            if g == c:
                term = (rhs + counts[l] - k) if self._fixed[l] else (rhs - k)
                target = det if self._fixed[l] else lb
            elif l == c:
                term = (rhs - counts[g] + k) if self._fixed[g] else (rhs - rest + k)
                target = det if self._fixed[g] else lb
            elif self._fixed[g] and self._fixed[l]:
                continue  # already exact in the accumulated fixed penalty
            elif self._fixed[g]:
                term = np.full(budget + 1, rhs - counts[g])
                target = lb
            elif self._fixed[l]:
                term = rhs - rest + counts[l]
                target = lb
            else:
                term = rhs - rest
                target = lb
            target += np.where(term > EPS, term, 0.0)

        free_all = self.order[depth + 1 :]
        lo_free = np.array(
            [max(self.objective.lo[f], 0.0) for f in free_all], dtype=float
        )
        # Lower-bound slack: per-class and shared-budget forms, both admissible.
        per_class = np.zeros(budget + 1)
        for lo_f in lo_free:
            if lo_f > 0:
                term = lo_f - rest
                per_class += np.where(term > EPS, term, 0.0)
        joint = lo_free.sum() - rest
        joint = np.where(joint > EPS, joint, 0.0)
        lb += np.maximum(per_class, joint)
        # Upper-bound slack: the free budget in excess of total free capacity.
        capacity = float(sum(min(self.objective.hi[f], self.n_t) for f in free_all))
        overflow = rest - capacity
        lb += np.where(overflow > EPS, overflow, 0.0)
        return value, det, lb

    def _try_leaf(self, counts: np.ndarray) -> None:
        pen = self.objective.penalty(counts)
        if self.hard and pen > 0:
            return
        quick = (
            float(self.col_prefix[counts, np.arange(self.num_classes)].sum())
            - self.M * pen
        )
        if quick <= self.best_total + _PRUNE_TOL:
            return
        self.engine.move_to(counts)
        if self.engine.value - self.M * pen <= self.best_total + _PRUNE_TOL:
            return
        if self.engine.split_groups().size == 0:
            value = self.engine.value
            labels = self.engine.group_assignment().copy()
        else:
            result = assign_groups_exactly(
                self.u, self.w, counts, floor_value=self.best_total + self.M * pen
            )
            if result is None:
                return
            value, labels = result
        total = value - self.M * pen
        if total > self.best_total:
            self.best_total = total
            self.best_labels = labels

    def _dfs(self, depth: int, counts, fixed_value: float, fixed_pen: float, budget: int):
        c = self.order[depth]
        if depth == self.num_classes - 1:
            counts[c] = budget
            self._try_leaf(counts.copy())
            counts[c] = 0
            return
        value, det, lb = self._child_terms(depth, counts, budget)
        if self.hard:
            bounds = np.where(det + lb > 0, -np.inf, fixed_value + value)
        else:
            bounds = fixed_value + value - self.M * (fixed_pen + det + lb)
        for k in np.lexsort((np.arange(budget + 1), -bounds)):
            if bounds[k] <= self.best_total + _PRUNE_TOL:
                break
            counts[c] = k
            self._fixed[c] = True
            self._dfs(
                depth + 1,
                counts,
                fixed_value + self.col_prefix[k, c],
                fixed_pen + det[k],
                budget - k,
            )
            self._fixed[c] = False
            counts[c] = 0

    def run_exact(self) -> tuple[np.ndarray | None, bool]:
        """Full branch-and-bound; returns (group labels, found)."""
        self._seed_incumbents()
        counts = np.zeros(self.num_classes, dtype=np.int64)
        self._dfs(0, counts, 0.0, 0.0, self.n_t)
        return self.best_labels, self.best_labels is not None

    def run_heuristic(self) -> tuple[np.ndarray | None, bool]:
        """Local-search result only; no optimality certificate."""
        self._seed_incumbents()
        return self.best_labels, self.best_labels is not None

    def _seed_incumbents(self) -> None:
        self._try_leaf(self.argmax_counts)
        scout = TransportEngine(self.u, self.w)
        steepest_ascent(
            scout, self.objective, _REPAIR_WEIGHT if self.hard else self.M
        )
        if not np.array_equal(scout.counts, self.argmax_counts):
            self._try_leaf(scout.counts.copy())
