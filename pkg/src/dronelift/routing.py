"""Turn-restricted shortest paths and tour construction.

Shortest paths run on the edge-expanded graph (search state = directed arc)
so the u-turn rule is enforced exactly: reversing onto the arc just
traversed is forbidden except at dead-end nodes, and optionally for the
first move out of the origin (which models leaving a completed delivery).

Tours over the resulting cost matrix are built by nearest-neighbor
construction followed by iterated 2-opt / 3-opt sequential improvement. No
symmetry or triangle property is assumed anywhere; reversed segments are
always re-costed in their actual direction.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from heapq import heappush, heappop

from .scenario import Arc, RoadGraph
from .seeding import derive_rng

UTURN_FORBID = "forbid"
UTURN_AFTER_DELIVERY = "after-delivery"


class Unreachable(ValueError):
    pass


@dataclass(frozen=True)
class Route:
    """A drivable path as an ordered arc sequence."""

    arcs: tuple[Arc, ...]
    cost: float  # meters, sum of arc lengths

    @property
    def nodes(self) -> tuple[int, ...]:
        if not self.arcs:
            return ()
        return (self.arcs[0].u,) + tuple(a.v for a in self.arcs)


@dataclass(frozen=True)
class Tour:
    """Visit order over matrix indices 1..n, implicitly closed through 0."""

    order: tuple[int, ...]
    cost: float


@dataclass
class CostMatrix:
    node_ids: list[int]  # index 0 = depot, 1.. = targets
    costs: list[list[float]]  # meters
    routes: dict[tuple[int, int], Route]  # keyed by matrix indices

    @property
    def n_targets(self) -> int:
        return len(self.node_ids) - 1


def _first_moves(graph: RoadGraph, from_node: int, entry_arc: int | None, policy: str):
    allowed = []
    for aid in graph.out_arcs[from_node]:
        if (
            entry_arc is not None
            and policy == UTURN_FORBID
            and graph.arcs[entry_arc].reverse_id == aid
            and from_node not in graph.dead_ends
        ):
            continue
        allowed.append(aid)
    return allowed


def _search(graph: RoadGraph, from_node: int, entry_arc: int | None, policy: str,
            goals: set[int]):
    """Dijkstra over arcs; returns (settled node -> (cost, last arc)), preds."""
    dist: dict[int, float] = {}
    pred: dict[int, int] = {}
    best_at: dict[int, tuple[float, int]] = {}
    remaining = set(goals)
    remaining.discard(from_node)
    heap: list[tuple[float, int]] = []
    for aid in _first_moves(graph, from_node, entry_arc, policy):
        arc = graph.arcs[aid]
        if arc.length < dist.get(aid, float("inf")):
            dist[aid] = arc.length
            pred[aid] = -1
            heappush(heap, (arc.length, aid))
    while heap and remaining:
        d, aid = heappop(heap)
        if d > dist.get(aid, float("inf")):
            continue
        arc = graph.arcs[aid]
        at = arc.v
        if at not in best_at:
            best_at[at] = (d, aid)
            remaining.discard(at)
        dead_end = at in graph.dead_ends
        for nxt in graph.out_arcs[at]:
            if nxt == arc.reverse_id and not dead_end:
                continue
            narc = graph.arcs[nxt]
            nd = d + narc.length
            if nd < dist.get(nxt, float("inf")) - 1e-12:
                dist[nxt] = nd
                pred[nxt] = aid
                heappush(heap, (nd, nxt))
    return best_at, pred


def _extract(graph: RoadGraph, best_at, pred, to_node: int) -> Route:
    cost, last = best_at[to_node]
    arcs = []
    aid = last
    while aid != -1:
        arcs.append(graph.arcs[aid])
        aid = pred[aid]
    arcs.reverse()
    return Route(tuple(arcs), cost)


def shortest_route(
    graph: RoadGraph,
    from_node: int,
    to_node: int,
    uturn_policy: str = UTURN_AFTER_DELIVERY,
    entry_arc: int | None = None,
) -> Route:
    """Minimum-length u-turn-aware route; empty route when from == to."""
    for n in (from_node, to_node):
        if n not in graph.out_arcs:
            raise KeyError(f"node {n} not in graph")
    if from_node == to_node:
        return Route((), 0.0)
    best_at, pred = _search(graph, from_node, entry_arc, uturn_policy, {to_node})
    if to_node not in best_at:
        raise Unreachable(f"no route from {from_node} to {to_node}")
    return _extract(graph, best_at, pred, to_node)


def cost_matrix(
    graph: RoadGraph,
    depot: int,
    targets: list[int],
    uturn_policy: str = UTURN_AFTER_DELIVERY,
) -> CostMatrix:
    """All-pairs shortest routes over depot + targets, one search per source."""
    ids = [depot] + list(targets)
    n = len(ids)
    costs = [[0.0] * n for _ in range(n)]
    routes: dict[tuple[int, int], Route] = {}
    goal_set = set(ids)
    for i, src in enumerate(ids):
        best_at, pred = _search(graph, src, None, uturn_policy, goal_set)
        for j, dst in enumerate(ids):
            if i == j:
                routes[(i, j)] = Route((), 0.0)
                continue
            if dst not in best_at:
                raise Unreachable(f"no route from {src} to {dst}")
            r = _extract(graph, best_at, pred, dst)
            costs[i][j] = r.cost
            routes[(i, j)] = r
    return CostMatrix(ids, costs, routes)


# ---------------------------------------------------------------------------
# Tour solving


def tour_cost(costs, order) -> float:
    if not order:
        return 0.0
    total = costs[0][order[0]]
    for a, b in zip(order, order[1:]):
        total += costs[a][b]
    return total + costs[order[-1]][0]


def _nearest_neighbor(costs, n) -> list[int]:
    unvisited = list(range(1, n + 1))
    order = []
    cur = 0
    while unvisited:
        nxt = min(unvisited, key=lambda j: (costs[cur][j], j))
        order.append(nxt)
        unvisited.remove(nxt)
        cur = nxt
    return order


def _two_opt_pass(costs, order) -> bool:
    """First-improvement 2-opt; reversed segments re-costed directionally."""
    n = len(order)
    ext = [0] + order + [0]
    for i in range(1, n):
        for j in range(i + 1, n + 1):
            # reverse ext[i..j]
            before = costs[ext[i - 1]][ext[i]] + costs[ext[j]][ext[j + 1]]
            inner_before = sum(costs[ext[k]][ext[k + 1]] for k in range(i, j))
            after = costs[ext[i - 1]][ext[j]] + costs[ext[i]][ext[j + 1]]
            inner_after = sum(costs[ext[k + 1]][ext[k]] for k in range(i, j))
            if after + inner_after < before + inner_before - 1e-12:
                order[i - 1 : j] = order[i - 1 : j][::-1]
                return True
    return False


def _or_opt_pass(costs, order) -> bool:
    """Relocate runs of 1..3 targets (the reversal-free 3-opt patterns)."""
    n = len(order)
    for seg in (1, 2, 3):
        for i in range(n - seg + 1):
            chunk = order[i : i + seg]
            rest = order[:i] + order[i + seg :]
            base = tour_cost(costs, order)
            for k in range(len(rest) + 1):
                if k == i:
                    continue
                cand = rest[:k] + chunk + rest[k:]
                if tour_cost(costs, cand) < base - 1e-12:
                    order[:] = cand
                    return True
    return False


def _local_opt(costs, order):
    improved = True
    while improved:
        improved = _two_opt_pass(costs, order)
        if not improved:
            improved = _or_opt_pass(costs, order)


def solve_tsp_lk(matrix: CostMatrix, restarts: int = 6) -> Tour:
    """Iterated 2-opt/3-opt over a nearest-neighbor start.

    Deterministic for a fixed matrix: perturbation kicks come from an RNG
    seeded off the matrix contents, ties break toward the lowest index.
    """
    n = matrix.n_targets
    if n == 0:
        return Tour((), 0.0)
    costs = matrix.costs
    order = _nearest_neighbor(costs, n)
    _local_opt(costs, order)
    best = list(order)
    best_cost = tour_cost(costs, best)
    nn_cost = best_cost
    if n >= 5:
        rng = derive_rng("lk-kick", n, round(sum(map(sum, costs)), 6))
        for _ in range(restarts):
            cand = list(best)
            # double-bridge kick
            a, b, c = sorted(rng.sample(range(1, n), 3))
            cand = cand[:a] + cand[b:c] + cand[a:b] + cand[c:]
            _local_opt(costs, cand)
            c_cost = tour_cost(costs, cand)
            if c_cost < best_cost - 1e-12:
                best, best_cost = cand, c_cost
    assert best_cost <= nn_cost + 1e-9
    return Tour(tuple(best), best_cost)


def solve_tsp_bruteforce(matrix: CostMatrix) -> Tour:
    """Exact optimum by enumeration; factorial guard at n = 10.

    Permutations are scanned in lexicographic order with strict improvement,
    so cost ties resolve to the lexicographically smallest order.
    """
    n = matrix.n_targets
    if n > 10:
        raise ValueError(f"brute force capped at 10 targets, got {n}")
    if n == 0:
        return Tour((), 0.0)
    costs = matrix.costs
    best = None
    best_cost = float("inf")
    for perm in itertools.permutations(range(1, n + 1)):
        c = tour_cost(costs, perm)
        if c < best_cost - 1e-12:
            best, best_cost = perm, c
    return Tour(best, best_cost)


def is_two_opt_stable(matrix: CostMatrix, tour: Tour) -> bool:
    order = list(tour.order)
    return not _two_opt_pass(matrix.costs, order)
