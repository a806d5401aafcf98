"""Balanced transportation engine for count-constrained label assignment.

Assigns weighted sample groups to classes so that each class receives an
exact number of units, maximizing the total probability score. Implemented
as successive shortest paths with node potentials on a compressed
class-to-class residual graph, which keeps every intermediate flow
optimal for its own count vector and makes re-targeting cheap.
"""

from __future__ import annotations

import numpy as np

# Reduced costs may drift slightly negative through float accumulation;
# anything beyond this is a broken invariant.
_REDCOST_TOL = 1e-6
_PRUNE_TOL = 1e-12


class TransportEngine:
    """Incremental optimal transport of weighted groups onto class counts.

    The flow matrix ``flow[g, c]`` holds how many units of group ``g`` sit
    in class ``c``. After construction the flow is the per-group argmax
    assignment (optimal for its own counts); ``move_to`` re-targets the
    count vector while preserving optimality. Groups with weight > 1 may
    end up split across classes; ``consolidate_splits`` reduces the splits
    to at most one fewer than the number of classes, and callers needing
    fully whole-group assignments branch via :func:`assign_groups_exactly`.
    """

    def __init__(self, unit_values: np.ndarray, weights: np.ndarray):
        u = np.ascontiguousarray(unit_values, dtype=float)
        w = np.asarray(weights, dtype=np.int64)
        if u.ndim != 2 or u.shape[0] != w.shape[0]:
            raise ValueError("unit_values and weights shapes are inconsistent")
        if np.any(w < 1):
            raise ValueError("group weights must be positive")
        self.u = u
        self.w = w
        n_groups, n_classes = u.shape
        start = np.argmax(u, axis=1)
        flow = np.zeros((n_groups, n_classes), dtype=np.int64)
        flow[np.arange(n_groups), start] = w
        self.flow = flow
        self.counts = np.bincount(start, weights=w, minlength=n_classes).astype(
            np.int64
        )
        self.value = float(np.sum(u[np.arange(n_groups), start] * w))
        # Argmax flow admits the zero potential (all outgoing moves cost >= 0).
        self.potentials = np.zeros(n_classes)
        self.active = np.ones(n_groups, dtype=bool)
        self.total_weight = int(w.sum())

    @property
    def num_classes(self) -> int:
        return self.u.shape[1]

    def snapshot(self):
        return (
            self.flow.copy(),
            self.counts.copy(),
            self.value,
            self.potentials.copy(),
            self.active.copy(),
            self.total_weight,
        )

    def restore(self, state) -> None:
        flow, counts, value, potentials, active, total = state
        self.flow = flow.copy()
        self.counts = counts.copy()
        self.value = value
        self.potentials = potentials.copy()
        self.active = active.copy()
        self.total_weight = total

    def drop_group(self, g: int) -> None:
        """Remove a group from the instance entirely.

        Only deletes residual arcs, so the remaining flow stays optimal
        for its shrunken boundary and the potentials remain valid.
        """
        if not self.active[g]:
            raise ValueError(f"group {g} is already dropped")
        self.value -= float(self.flow[g] @ self.u[g])
        self.counts -= self.flow[g]
        self.total_weight -= int(self.w[g])
        self.flow[g] = 0
        self.active[g] = False

    def active_groups(self) -> np.ndarray:
        return np.nonzero(self.active)[0]

    def _arc_costs(self) -> np.ndarray:
        """Cheapest class-to-class unit move costs (inf where impossible)."""
        n_classes = self.num_classes
        idx_g, idx_a = np.nonzero(self.flow > 0)
        diffs = self.u[idx_g, idx_a][:, None] - self.u[idx_g]
        costs = np.full((n_classes, n_classes), np.inf)
        np.minimum.at(costs, idx_a, diffs)
        np.fill_diagonal(costs, np.inf)
        return costs

    def _mover(self, a: int, b: int) -> int:
        """Group attaining the cheapest single-unit move from a to b."""
        rows = np.nonzero(self.flow[:, a] > 0)[0]
        picks = self.u[rows, a] - self.u[rows, b]
        return int(rows[np.argmin(picks)])

    def _dijkstra(self, costs: np.ndarray, src: int):
        """Shortest reduced-cost distances from one class to all others."""
        reduced = costs + self.potentials[:, None] - self.potentials[None, :]
        bad = reduced < -_REDCOST_TOL
        if bad.any():
            raise RuntimeError("transport potentials violated; invariant broken")
        np.clip(reduced, 0.0, None, out=reduced)
        n_classes = self.num_classes
        dist = np.full(n_classes, np.inf)
        dist[src] = 0.0
        pred = np.full(n_classes, -1, dtype=np.int64)
        done = np.zeros(n_classes, dtype=bool)
        for _ in range(n_classes):
            open_dist = np.where(done, np.inf, dist)
            a = int(np.argmin(open_dist))
            if not np.isfinite(open_dist[a]):
                break
            done[a] = True
            through = dist[a] + reduced[a]
            better = ~done & (through < dist)
            dist[better] = through[better]
            pred[better] = a
        return dist, pred

    def _augment(self, src: int, dst: int, pred: np.ndarray):
        path = []
        node = dst
        for _ in range(self.num_classes):
            if node == src:
                break
            parent = int(pred[node])
            path.append((parent, node))
            node = parent
        else:
            raise RuntimeError("path reconstruction failed")
        for a, b in reversed(path):
            g = self._mover(a, b)
            self.flow[g, a] -= 1
            self.flow[g, b] += 1
            self.value += self.u[g, b] - self.u[g, a]
        self.counts[src] -= 1
        self.counts[dst] += 1

    def move_cost_table(self):
        """Exact value drop of moving one unit between every class pair.

        Entry [a, b] is V(counts) - V(counts - e_a + e_b), i.e. the true
        shortest residual path cost; inf where counts[a] == 0.
        """
        n_classes = self.num_classes
        table = np.full((n_classes, n_classes), np.inf)
        costs = self._arc_costs()
        for a in range(n_classes):
            if self.counts[a] == 0:
                continue
            dist, _ = self._dijkstra(costs, a)
            table[a] = dist + self.potentials - self.potentials[a]
            table[a, a] = 0.0
        return table

    def move_cost(self, src: int, dst: int) -> float:
        """Exact value drop of moving one unit from src to dst."""
        if self.counts[src] == 0:
            return np.inf
        dist, _ = self._dijkstra(self._arc_costs(), src)
        return float(dist[dst] + self.potentials[dst] - self.potentials[src])

    def move_unit(self, src: int, dst: int) -> None:
        """Move one count unit from ``src`` to ``dst`` optimally."""
        if self.counts[src] <= 0:
            raise ValueError(f"class {src} has no units to move")
        dist, pred = self._dijkstra(self._arc_costs(), src)
        if not np.isfinite(dist[dst]):
            raise RuntimeError("destination unreachable; invariant broken")
        self._augment(src, dst, pred)
        self.potentials += np.minimum(dist, dist[dst])

    def move_to(self, target_counts) -> None:
        """Re-target the count vector, keeping the flow optimal throughout."""
        target = np.asarray(target_counts, dtype=np.int64)
        if target.shape != self.counts.shape:
            raise ValueError("target count vector has the wrong length")
        if np.any(target < 0) or target.sum() != self.total_weight:
            raise ValueError(
                "target counts must be non-negative and sum to the total weight"
            )
        while True:
            diff = self.counts - target
            over = np.nonzero(diff > 0)[0]
            if over.size == 0:
                return
            src = int(over[0])
            dist, pred = self._dijkstra(self._arc_costs(), src)
            under = np.nonzero(diff < 0)[0]
            reach = dist[under] + self.potentials[under]
            pick = int(np.lexsort((under, reach))[0])
            dst = int(under[pick])
            if not np.isfinite(dist[dst]):
                raise RuntimeError("deficit class unreachable; invariant broken")
            self._augment(src, dst, pred)
            self.potentials += np.minimum(dist, dist[dst])

    def split_groups(self) -> np.ndarray:
        """Indices of groups currently split across several classes."""
        return np.nonzero(np.count_nonzero(self.flow > 0, axis=1) > 1)[0]

    def group_assignment(self) -> np.ndarray:
        """Per-group class labels; only valid when no group is split."""
        return np.argmax(self.flow, axis=1)

    def consolidate_splits(self) -> None:
        """Cancel zero-cost cycles among split groups.

        At an optimum, any flow cycle alternating between split groups and
        classes carries zero reduced cost, so flow can be pushed around it
        until an edge empties, without changing counts or value. The
        remaining split edges form a forest, leaving at most one fewer
        split group than there are classes.
        """
        while True:
            cycle = self._find_split_cycle()
            if cycle is None:
                return
            gain = sum(self.u[g, to] - self.u[g, frm] for g, frm, to in cycle)
            if gain < 0:
                cycle = [(g, to, frm) for g, frm, to in reversed(cycle)]
            net: dict[tuple[int, int], int] = {}
            for g, frm, to in cycle:
                net[(g, frm)] = net.get((g, frm), 0) - 1
                net[(g, to)] = net.get((g, to), 0) + 1
            delta = min(
                int(self.flow[g, c]) // -change
                for (g, c), change in net.items()
                if change < 0
            )
            assert delta >= 1
            for g, frm, to in cycle:
                self.flow[g, frm] -= delta
                self.flow[g, to] += delta
                self.value += delta * (self.u[g, to] - self.u[g, frm])

    def _find_split_cycle(self):
        """A flow cycle among split groups as [(group, from, to), ...].

        Each split group contributes chain edges between consecutive
        classes holding its flow; a multigraph cycle over classes is
        detected with a union-find forest and recovered by walking it.
        """
        splits = self.split_groups()
        if splits.size == 0:
            return None
        parent = list(range(self.num_classes))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        adjacency: dict[int, list[tuple[int, int]]] = {}
        for g in splits:
            cls = np.nonzero(self.flow[g] > 0)[0]
            for a, b in zip(cls[:-1], cls[1:]):
                a, b, g_i = int(a), int(b), int(g)
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
                    adjacency.setdefault(a, []).append((b, g_i))
                    adjacency.setdefault(b, []).append((a, g_i))
                    continue
                steps = self._forest_path(adjacency, a, b)
                steps.append((g_i, b, a))
                return steps
        return None

    @staticmethod
    def _forest_path(adjacency, start: int, goal: int):
        """Path start -> goal in the forest, as (group, from, to) steps."""
        previous: dict[int, tuple[int, int] | None] = {start: None}
        frontier = [start]
        while frontier:
            node = frontier.pop()
            if node == goal:
                break
            for neighbor, group in adjacency.get(node, ()):
                if neighbor not in previous:
                    previous[neighbor] = (node, group)
                    frontier.append(neighbor)
        steps = []
        node = goal
        while previous[node] is not None:
            prev_node, group = previous[node]
            steps.append((group, prev_node, node))
            node = prev_node
        steps.reverse()
        return steps


def assign_groups_exactly(
    unit_values: np.ndarray,
    weights: np.ndarray,
    counts: np.ndarray,
    floor_value: float = -np.inf,
):
    """Best whole-group assignment meeting the count vector exactly.

    Returns ``(value, labels)`` with per-group labels, or ``None`` when the
    counts cannot be met without splitting a group, or when no assignment
    beats ``floor_value``. Exactness comes from branching on whichever
    group the transport relaxation splits; the relaxation value is an
    admissible bound.
    """
    u = np.asarray(unit_values, dtype=float)
    w = np.asarray(weights, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != w.sum() or np.any(counts < 0):
        return None
    best: list = [floor_value, None]
    engine = TransportEngine(u, w)
    engine.move_to(counts)
    _branch_on_splits(engine, counts, 0.0, best, np.empty(u.shape[0], np.int64))
    if best[1] is None:
        return None
    return best[0], best[1]


def _branch_on_splits(engine, counts, offset, best, labels_buf):
    """DFS over split groups; the engine is restored around each branch."""
    engine.move_to(counts)
    if offset + engine.value <= best[0] + _PRUNE_TOL:
        return
    engine.consolidate_splits()
    splits = engine.split_groups()
    if splits.size == 0:
        active = engine.active_groups()
        labels_buf[active] = engine.group_assignment()[active]
        best[0] = offset + engine.value
        best[1] = labels_buf.copy()
        return
    g = int(splits[0])
    weight = int(engine.w[g])
    gain = engine.u[g] * weight
    at_node = engine.snapshot()
    engine.drop_group(g)
    dropped = engine.snapshot()
    for c in np.lexsort((np.arange(engine.num_classes), -gain)):
        c = int(c)
        if counts[c] < weight:
            continue
        child_counts = counts.copy()
        child_counts[c] -= weight
        labels_buf[g] = c
        engine.restore(dropped)
        _branch_on_splits(engine, child_counts, offset + gain[c], best, labels_buf)
    engine.restore(at_node)
