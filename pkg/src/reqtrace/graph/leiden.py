"""Leiden-style modularity optimisation and hierarchical community detection.

The implementation works on integer-indexed weighted adjacency maps. One
Leiden iteration runs fast local moving, refines each community into
well-connected sub-communities, then aggregates on the refined partition
while keeping the unrefined partition as the aggregate's starting point.
Iterations repeat until modularity stops improving.
"""

from __future__ import annotations

import logging
import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .model import KnowledgeGraph

logger = logging.getLogger(__name__)

Adjacency = list[dict[int, float]]

EPS = 1e-12
REFINE_THETA = 0.01
# Graphs with at most this many non-isolated nodes are solved exactly.
EXACT_MAX_NODES = 8


def modularity(adj: Adjacency, membership: Sequence[int], resolution: float = 1.0) -> float:
    """Newman modularity of ``membership`` on an undirected weighted graph."""
    degree = [sum(w for w in row.values()) for row in adj]
    two_m = sum(degree)
    if two_m == 0:
        return 0.0
    internal: dict[int, float] = {}
    total: dict[int, float] = {}
    for i, row in enumerate(adj):
        c = membership[i]
        total[c] = total.get(c, 0.0) + degree[i]
        for j, w in row.items():
            if membership[j] == c:
                internal[c] = internal.get(c, 0.0) + w
    return sum(internal.get(c, 0.0) / two_m - resolution * (k / two_m) ** 2 for c, k in total.items())


class _Level:
    """Aggregated graph: node weights are summed original degrees."""

    def __init__(self, adj: Adjacency, strength: list[float]):
        self.adj = adj
        self.strength = strength

    @property
    def n(self) -> int:
        return len(self.adj)


def _move_nodes(level: _Level, membership: list[int], gamma: float, two_m: float, rng: random.Random) -> None:
    n = level.n
    totals: dict[int, float] = {}
    for v in range(n):
        totals[membership[v]] = totals.get(membership[v], 0.0) + level.strength[v]
    next_label = max(membership) + 1
    order = list(range(n))
    rng.shuffle(order)
    queue = deque(order)
    queued = [True] * n
    while queue:
        v = queue.popleft()
        queued[v] = False
        own = membership[v]
        k_v = level.strength[v]
        links: dict[int, float] = {}
        for u, w in level.adj[v].items():
            if u != v:
                links[membership[u]] = links.get(membership[u], 0.0) + w
        totals[own] -= k_v

        def gain(c: int) -> float:
            return links.get(c, 0.0) - gamma * k_v * totals.get(c, 0.0) / two_m

        best, best_gain = own, gain(own)
        for c in sorted(links):
            g = gain(c)
            if g > best_gain + EPS:
                best, best_gain = c, g
        if best_gain < -EPS:
            # an empty community has zero gain
            best, next_label = next_label, next_label + 1
        totals[best] = totals.get(best, 0.0) + k_v
        if best != own:
            membership[v] = best
            for u in level.adj[v]:
                if u != v and membership[u] != best and not queued[u]:
                    queue.append(u)
                    queued[u] = True


def _refine(level: _Level, membership: list[int], gamma: float, two_m: float, rng: random.Random) -> list[int]:
    n = level.n
    refined = list(range(n))
    ref_total = list(level.strength)
    ref_size = [1] * n
    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(membership[v], []).append(v)
    for members in groups.values():
        if len(members) == 1:
            continue
        member_set = set(members)
        k_s = sum(level.strength[v] for v in members)
        # weight from each node into the rest of its community
        into_s = {v: sum(w for u, w in level.adj[v].items() if u in member_set and u != v) for v in members}
        # weight from each refined community into the rest of S
        ref_ext = {v: into_s[v] for v in members}
        order = list(members)
        rng.shuffle(order)
        for v in order:
            if ref_size[refined[v]] != 1:
                continue
            k_v = level.strength[v]
            if into_s[v] < gamma * k_v * (k_s - k_v) / two_m - EPS:
                continue
            links: dict[int, float] = {}
            for u, w in level.adj[v].items():
                if u in member_set and u != v:
                    links[refined[u]] = links.get(refined[u], 0.0) + w
            candidates: list[tuple[int, float]] = [(refined[v], 0.0)]
            for c in sorted(links):
                if c == refined[v]:
                    continue
                k_c = ref_total[c]
                if ref_ext[c] < gamma * k_c * (k_s - k_c) / two_m - EPS:
                    continue
                g = links[c] - gamma * k_v * k_c / two_m
                if g >= -EPS:
                    candidates.append((c, g))
            if len(candidates) == 1:
                continue
            top = max(g for _, g in candidates)
            weights = [math.exp((g - top) / REFINE_THETA) for _, g in candidates]
            choice = rng.choices(range(len(candidates)), weights=weights)[0]
            target = candidates[choice][0]
            if target == refined[v]:
                continue
            # update bookkeeping for the merge of v into target
            ref_ext[target] = ref_ext[target] + into_s[v] - 2 * links[target]
            ref_total[target] += k_v
            ref_total[refined[v]] -= k_v
            ref_size[target] += 1
            ref_size[refined[v]] -= 1
            refined[v] = target
    return refined


def _relabel(membership: Sequence[int]) -> list[int]:
    mapping: dict[int, int] = {}
    return [mapping.setdefault(c, len(mapping)) for c in membership]


def _aggregate(level: _Level, refined: list[int]) -> _Level:
    size = max(refined) + 1
    adj: Adjacency = [dict() for _ in range(size)]
    strength = [0.0] * size
    for v in range(level.n):
        cv = refined[v]
        strength[cv] += level.strength[v]
        for u, w in level.adj[v].items():
            cu = refined[u]
            adj[cv][cu] = adj[cv].get(cu, 0.0) + w
    return _Level(adj, strength)


def _leiden_pass(adj: Adjacency, initial: list[int], gamma: float, rng: random.Random) -> list[int]:
    strength = [sum(row.values()) for row in adj]
    two_m = sum(strength)
    level = _Level(adj, strength)
    membership = list(initial)
    # node_map[i] = aggregate node containing original node i
    node_map = list(range(len(adj)))
    while True:
        _move_nodes(level, membership, gamma, two_m, rng)
        membership = _relabel(membership)
        if max(membership) + 1 == level.n:
            break
        refined = _relabel(_refine(level, membership, gamma, two_m, rng))
        if max(refined) + 1 == level.n:
            # refinement merged nothing; aggregate on the unrefined partition instead
            refined = membership
        next_initial = [0] * (max(refined) + 1)
        for v in range(level.n):
            next_initial[refined[v]] = membership[v]
        node_map = [refined[node_map[i]] for i in range(len(adj))]
        level = _aggregate(level, refined)
        membership = next_initial
    return _relabel([membership[node_map[i]] for i in range(len(adj))])


def _set_partitions(n: int):
    """Restricted growth strings of length ``n``."""
    labels = [0] * n
    if n == 0:
        yield []
        return

    def rec(i: int, top: int):
        if i == n:
            yield list(labels)
            return
        for c in range(top + 2):
            labels[i] = c
            yield from rec(i + 1, max(top, c))

    labels[0] = 0
    yield from rec(1, 0)


def exact_partition(adj: Adjacency, resolution: float = 1.0) -> list[int]:
    """Modularity-optimal partition by exhaustive search. Isolated nodes stay alone."""
    n = len(adj)
    active = [i for i in range(n) if any(j != i for j in adj[i])]
    membership = list(range(n))
    if not active:
        return membership
    best_q, best = -math.inf, None
    for labels in _set_partitions(len(active)):
        trial = list(range(n, 2 * n))
        for node, c in zip(active, labels):
            trial[node] = c
        q = modularity(adj, trial, resolution)
        if q > best_q + EPS:
            best_q, best = q, trial
    return _relabel(best)


def leiden(
    adj: Adjacency,
    resolution: float = 1.0,
    seed: int = 0,
    restarts: int = 8,
    patience: int = 3,
    max_iterations: int = 50,
    exact_max_nodes: int = EXACT_MAX_NODES,
) -> list[int]:
    """Return a community label per node, labels numbered by first appearance.

    Each restart iterates Leiden passes until ``patience`` consecutive passes
    fail to improve modularity. The best partition over all restarts wins;
    earlier restarts win ties, so the result is a function of ``seed``.
    """
    n = len(adj)
    if n == 0:
        return []
    if sum(sum(row.values()) for row in adj) <= 0:
        return list(range(n))
    if sum(1 for i, row in enumerate(adj) if any(j != i for j in row)) <= exact_max_nodes:
        return exact_partition(adj, resolution)
    best: list[int] = list(range(n))
    best_q = modularity(adj, best, resolution)
    for r in range(max(1, restarts)):
        rng = random.Random(f"{seed}:{r}")
        membership = list(range(n))
        q_run = modularity(adj, membership, resolution)
        stale = 0
        for _ in range(max_iterations):
            candidate = _leiden_pass(adj, membership, resolution, rng)
            q = modularity(adj, candidate, resolution)
            if q > q_run + EPS:
                membership, q_run, stale = candidate, q, 0
            else:
                stale += 1
                if stale >= patience:
                    break
        if q_run > best_q + EPS:
            best, best_q = membership, q_run
    return _relabel(best)


# -- hierarchy over the knowledge graph ---------------------------------------------


@dataclass(frozen=True)
class Community:
    community_id: int
    level: int
    members: frozenset[str]
    parent: int | None = None

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class CommunityHierarchy:
    communities: tuple[Community, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {c.community_id: c for c in self.communities})

    @property
    def levels(self) -> int:
        return 1 + max((c.level for c in self.communities), default=-1)

    def at_level(self, level: int) -> list[Community]:
        return [c for c in self.communities if c.level == level]

    def get(self, community_id: int) -> Community:
        return self._by_id[community_id]

    def children(self, community_id: int) -> list[Community]:
        return [c for c in self.communities if c.parent == community_id]

    def is_split(self, community_id: int) -> bool:
        """True when the community's children differ from a plain copy of it."""
        kids = self.children(community_id)
        return len(kids) > 1

    def membership(self, level: int) -> dict[str, int]:
        return {m: c.community_id for c in self.at_level(level) for m in c.members}


def _component_adjacency(graph: KnowledgeGraph, keys: list[str]) -> Adjacency:
    index = {k: i for i, k in enumerate(keys)}
    adj: Adjacency = [dict() for _ in keys]
    for (a, b), edge in graph.edges.items():
        if a in index and b in index:
            adj[index[a]][index[b]] = edge.weight
            adj[index[b]][index[a]] = edge.weight
    return adj


def _partition(graph: KnowledgeGraph, keys: list[str], resolution: float, seed: int) -> list[list[str]]:
    labels = leiden(_component_adjacency(graph, keys), resolution, seed)
    groups: dict[int, list[str]] = {}
    for key, label in zip(keys, labels):
        groups.setdefault(label, []).append(key)
    return sorted(groups.values(), key=lambda g: min(g))


def detect_communities(
    graph: KnowledgeGraph,
    resolution: float = 1.0,
    max_levels: int = 3,
    seed: int = 0,
) -> CommunityHierarchy:
    """Detect a community hierarchy.

    Level 0 partitions the whole graph. Each deeper level re-runs the
    optimiser inside every community of the level above; communities that do
    not split are copied down so that every level partitions the node set.
    Detection stops early once no community splits.
    """
    if not graph.nodes:
        raise ValueError("cannot detect communities in an empty graph")
    if max_levels < 1:
        raise ValueError("max_levels must be >= 1")
    keys = sorted(graph.nodes)
    communities: list[Community] = []
    next_id = 0
    for members in _partition(graph, keys, resolution, seed):
        communities.append(Community(next_id, 0, frozenset(members)))
        next_id += 1
    frontier = list(communities)
    for level in range(1, max_levels):
        staged: list[Community] = []
        any_split = False
        for parent in frontier:
            parts = [sorted(parent.members)]
            if parent.size > 1:
                parts = _partition(graph, sorted(parent.members), resolution, seed + level)
            any_split |= len(parts) > 1
            for members in parts:
                staged.append(Community(next_id + len(staged), level, frozenset(members), parent.community_id))
        if not any_split:
            break
        communities.extend(staged)
        next_id += len(staged)
        frontier = staged
    logger.info("detected %d communities over %d level(s)", len(communities), 1 + max(c.level for c in communities))
    return CommunityHierarchy(tuple(communities))
