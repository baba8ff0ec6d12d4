"""Attributed graphs: ingestion, synthetic generation, sensitive properties,
Louvain partitioning and random-walk subgraph sampling.

Graphs are undirected and simple (no self-loops, no parallel edges). Node ids
are contiguous integers starting at 0. Every node carries a feature vector,
one binary property attribute and one class label. Instances are treated as
immutable after construction; all sampling is a pure function of its inputs
and an explicit seed.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

Edge = tuple  # (u, v) with u < v


def edge_key(u: int, v: int) -> Edge:
    """Canonical undirected edge representation."""
    return (u, v) if u < v else (v, u)


def seed_list(seed) -> list:
    """Normalize an int-or-sequence seed to a flat list for composition."""
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


@dataclass
class AttributedGraph:
    node_count: int
    edges: frozenset
    features: np.ndarray       # (n, f) float64
    property_attr: np.ndarray  # (n,) int
    class_label: np.ndarray    # (n,) int
    n_classes: int
    meta: dict = field(default_factory=dict)
    _adj: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.property_attr = np.asarray(self.property_attr, dtype=np.int64)
        self.class_label = np.asarray(self.class_label, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.node_count
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be (node_count, f)")
        if self.property_attr.shape != (n,) or self.class_label.shape != (n,):
            raise ValueError("property_attr/class_label must have one entry per node")
        for (u, v) in self.edges:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge endpoint out of range: {(u, v)}")
            if u > v:
                raise ValueError(f"edge not in canonical order: {(u, v)}")
        if self.n_classes < 1 or (n > 0 and self.class_label.max() >= self.n_classes):
            raise ValueError("class_label outside [0, n_classes)")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def edge_list(self) -> list:
        """Edges in sorted order (deterministic iteration)."""
        return sorted(self.edges)

    def edge_array(self) -> np.ndarray:
        """(m, 2) int64 array of canonical edges in sorted order, cached."""
        cache = self.meta.get("_edge_array")
        if cache is None:
            cache = np.asarray(self.edge_list(), dtype=np.int64).reshape(-1, 2)
            self.meta["_edge_array"] = cache
        return cache

    def adjacency(self) -> list:
        """Sorted neighbor lists, built lazily and cached."""
        if self._adj is None:
            adj = [[] for _ in range(self.node_count)]
            for (u, v) in self.edge_list():
                adj[u].append(v)
                adj[v].append(u)
            self._adj = adj
        return self._adj

    def csr_adjacency(self):
        """(indptr, indices) compressed neighbor lists, cached."""
        cache = self.meta.get("_csr")
        if cache is None:
            earr = self.edge_array()
            n = self.node_count
            if len(earr):
                src = np.concatenate([earr[:, 0], earr[:, 1]])
                dst = np.concatenate([earr[:, 1], earr[:, 0]])
                order = np.argsort(src, kind="stable")
                indices = dst[order]
                deg = np.bincount(src, minlength=n)
            else:
                indices = np.empty(0, dtype=np.int64)
                deg = np.zeros(n, dtype=np.int64)
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(deg, out=indptr[1:])
            cache = (indptr, indices)
            self.meta["_csr"] = cache
        return cache

    def degree(self, v: int) -> int:
        return len(self.adjacency()[v])

    def induced_subgraph(self, nodes, drop_edges=frozenset()) -> "AttributedGraph":
        """Induced subgraph on `nodes`, excluding `drop_edges`, re-indexed.

        The original ids are retained in meta["id_map"] (new id -> old id).
        Edges incident to excluded nodes vanish by induction.
        """
        keep = sorted(set(int(v) for v in nodes))
        idx = np.asarray(keep, dtype=np.int64)
        index = np.full(self.node_count, -1, dtype=np.int64)
        index[idx] = np.arange(len(keep))
        earr = self.edge_array()
        if len(earr):
            mask = (index[earr[:, 0]] >= 0) & (index[earr[:, 1]] >= 0)
            if drop_edges:
                packed = earr[:, 0] * self.node_count + earr[:, 1]
                dropped = np.asarray(
                    sorted(u * self.node_count + v for (u, v) in map(lambda e: edge_key(*e), drop_edges)),
                    dtype=np.int64)
                mask &= ~np.isin(packed, dropped)
            sub = earr[mask]
            # keep is ascending, so the relabeling preserves canonical order
            new_edges = frozenset(zip(index[sub[:, 0]].tolist(), index[sub[:, 1]].tolist()))
        else:
            new_edges = frozenset()
        return AttributedGraph(
            node_count=len(keep),
            edges=new_edges,
            features=self.features[idx],
            property_attr=self.property_attr[idx],
            class_label=self.class_label[idx],
            n_classes=self.n_classes,
            meta={"id_map": keep},
        )

    def digest(self) -> str:
        """Content hash over structure, features and per-node attributes."""
        h = hashlib.sha256()
        h.update(str(self.node_count).encode())
        h.update(str(self.n_classes).encode())
        h.update(np.asarray(self.edge_list(), dtype=np.int64).tobytes())
        h.update(self.features.tobytes())
        h.update(self.property_attr.tobytes())
        h.update(self.class_label.tobytes())
        return h.hexdigest()


@dataclass
class PropertySpec:
    """Which global statistic of the property attribute is being inferred.

    kind:
      node       - 1 iff #nodes with attr == attr_value exceeds the rest
      link-same  - 1 iff #edges whose endpoints share an attr value exceeds mixed edges
      link-attr  - 1 iff #edges with both endpoints == attr_value exceeds all others
    Ties map to 0.
    """

    kind: str
    attr_value: int = 1
    description: str = ""

    KINDS = ("node", "link-same", "link-attr")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown property kind {self.kind!r}")


@dataclass
class CommunityPartition:
    assignment: np.ndarray  # (n,) community id per node
    modularity: float

    def communities(self) -> list:
        """Node lists grouped by community id."""
        groups = {}
        for node, cid in enumerate(self.assignment):
            groups.setdefault(int(cid), []).append(node)
        return [groups[c] for c in sorted(groups)]

    @property
    def n_communities(self) -> int:
        return len(set(self.assignment.tolist()))


@dataclass
class WalkConfig:
    w: float
    target_size: int
    seed: int
    restart_on_dead_end: bool = True

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must be in [0, 1]")
        if self.target_size < 2:
            raise ValueError("target_size must be >= 2")


# ---------------------------------------------------------------------------
# File ingestion: <prefix>.edges.tsv (two tab-separated int columns) and
# <prefix>.nodes.csv with header id,label,attr,f0..f{f-1}.
# ---------------------------------------------------------------------------

def load_graph(prefix: str) -> AttributedGraph:
    """Load a graph from `<prefix>.edges.tsv` + `<prefix>.nodes.csv`.

    Self-loops and duplicate edges are dropped; their counts land in
    meta["self_loop_count"] / meta["dedup_count"].
    """
    edge_path = prefix + ".edges.tsv"
    node_path = prefix + ".nodes.csv"
    for p in (edge_path, node_path):
        if not os.path.exists(p):
            raise DataError("missing-file", f"input file not found: {p}")

    rows = []
    with open(node_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "label", "attr"]:
            raise DataError("bad-header", f"{node_path}: header must start with id,label,attr")
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError("ragged-attributes", f"{node_path}:{line_no}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError("ragged-attributes", f"{node_path}: no node rows")

    try:
        ids = [int(r[0]) for r in rows]
        labels = np.array([int(r[1]) for r in rows])
        attrs = np.array([int(r[2]) for r in rows])
        feats = np.array([[float(x) for x in r[3:]] for r in rows])
    except ValueError as exc:
        raise DataError("ragged-attributes", f"{node_path}: non-numeric cell ({exc})") from exc
    if sorted(ids) != list(range(len(rows))):
        raise DataError("bad-node-ids", f"{node_path}: node ids must be contiguous from 0")
    order = np.argsort(ids)
    labels, attrs, feats = labels[order], attrs[order], feats[order]
    n = len(rows)

    edges = set()
    dedup = 0
    self_loops = 0
    with open(edge_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError("bad-edge-row", f"{edge_path}:{line_no}: expected two tab-separated columns")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataError("bad-endpoint", f"{edge_path}:{line_no}: non-integer endpoint") from exc
            if u < 0 or v < 0:
                raise DataError("bad-endpoint", f"{edge_path}:{line_no}: negative endpoint")
            if u >= n or v >= n:
                raise DataError("ragged-attributes",
                                f"{edge_path}:{line_no}: edge references node {max(u, v)} "
                                f"but the attribute file has {n} rows")
            if u == v:
                self_loops += 1
                continue
            e = edge_key(u, v)
            if e in edges:
                dedup += 1
            else:
                edges.add(e)

    return AttributedGraph(
        node_count=n,
        edges=frozenset(edges),
        features=feats,
        property_attr=attrs,
        class_label=labels,
        n_classes=int(labels.max()) + 1,
        meta={"dedup_count": dedup, "self_loop_count": self_loops, "source": prefix},
    )


def save_graph(g: AttributedGraph, prefix: str):
    """Write `<prefix>.edges.tsv` + `<prefix>.nodes.csv`."""
    with open(prefix + ".edges.tsv", "w") as fh:
        for (u, v) in g.edge_list():
            fh.write(f"{u}\t{v}\n")
    with open(prefix + ".nodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "attr"] + [f"f{i}" for i in range(g.feature_dim)])
        for v in range(g.node_count):
            writer.writerow(
                [v, int(g.class_label[v]), int(g.property_attr[v])]
                + [repr(float(x)) for x in g.features[v]]
            )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def generate_sbm(blocks, p_in, p_out, attr_fracs, feature_noise, seed) -> AttributedGraph:
    """Stochastic block model with a planted binary property attribute.

    Within-block edges appear with probability p_in, cross-block with p_out.
    In block b, round(attr_fracs[b] * size) nodes get property_attr = 1.
    class_label is the block id; features are one-hot(attr) ++ one-hot(block)
    plus Gaussian noise of scale feature_noise. Deterministic per seed.
    """
    if not blocks:
        raise ValueError("empty block list")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if len(attr_fracs) != len(blocks):
        raise ValueError("attr_fracs must match blocks")
    if any(not 0.0 <= f <= 1.0 for f in attr_fracs):
        raise ValueError("attr_fracs must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    n = int(sum(blocks))
    n_blocks = len(blocks)
    block_of = np.repeat(np.arange(n_blocks), blocks)

    attr = np.zeros(n, dtype=np.int64)
    start = 0
    for b, size in enumerate(blocks):
        members = np.arange(start, start + size)
        n_ones = int(round(attr_fracs[b] * size))
        picked = rng.permutation(members)[:n_ones]
        attr[picked] = 1
        start += size

    same = block_of[:, None] == block_of[None, :]
    prob = np.where(same, p_in, p_out)
    draws = rng.random((n, n))
    iu, ju = np.triu_indices(n, k=1)
    hit = draws[iu, ju] < prob[iu, ju]
    edges = frozenset(zip(iu[hit].tolist(), ju[hit].tolist()))

    f = 2 + n_blocks
    feats = np.zeros((n, f))
    feats[np.arange(n), attr] = 1.0
    feats[np.arange(n), 2 + block_of] = 1.0
    feats += rng.normal(0.0, feature_noise, size=(n, f))

    return AttributedGraph(
        node_count=n,
        edges=edges,
        features=feats,
        property_attr=attr,
        class_label=block_of,
        n_classes=n_blocks,
        meta={"generator": "sbm", "blocks": list(blocks), "seed": seed},
    )


# ---------------------------------------------------------------------------
# Sensitive property
# ---------------------------------------------------------------------------

def property_label(attr: np.ndarray, edge_array: np.ndarray, spec: PropertySpec) -> int:
    """Binary property label from raw attribute and edge arrays. Ties -> 0."""
    if spec.kind == "node":
        hits = int(np.count_nonzero(attr == spec.attr_value))
        return int(hits > len(attr) - hits)
    if len(edge_array) == 0:
        return 0
    a, b = attr[edge_array[:, 0]], attr[edge_array[:, 1]]
    if spec.kind == "link-same":
        hits = int(np.count_nonzero(a == b))
    else:  # link-attr
        hits = int(np.count_nonzero((a == spec.attr_value) & (b == spec.attr_value)))
    return int(hits > len(edge_array) - hits)


def compute_property(g: AttributedGraph, spec: PropertySpec) -> int:
    """Binary property label of a graph. Ties resolve to 0."""
    return property_label(g.property_attr, g.edge_array(), spec)


# ---------------------------------------------------------------------------
# Louvain community detection
# ---------------------------------------------------------------------------

def modularity(n_nodes: int, edges, assignment) -> float:
    """Newman modularity of a node assignment on a simple unweighted graph."""
    m = len(edges)
    if m == 0:
        return 0.0
    assignment = np.asarray(assignment)
    deg = np.zeros(n_nodes)
    intra = {}
    tot = {}
    for (u, v) in edges:
        deg[u] += 1
        deg[v] += 1
        if assignment[u] == assignment[v]:
            c = int(assignment[u])
            intra[c] = intra.get(c, 0) + 1
    for v in range(n_nodes):
        c = int(assignment[v])
        tot[c] = tot.get(c, 0.0) + deg[v]
    q = 0.0
    for c, k in tot.items():
        q += intra.get(c, 0) / m - (k / (2 * m)) ** 2
    return q


class _LouvainLevel:
    """One weighted working graph inside the Louvain hierarchy.

    Degrees count self-loops twice; community moves accept the first strictly
    positive modularity gain scanning candidate communities by ascending id.
    """

    def __init__(self, n, weights, loops):
        self.n = n
        self.weights = weights              # dict node -> dict node -> weight
        self.loops = loops                  # per-node self-loop weight
        self.k = np.array([sum(weights[v].values()) + 2 * loops[v] for v in range(n)])
        self.two_m = float(self.k.sum())
        self.community = list(range(n))
        self.tot = self.k.astype(float).copy()  # sum of degrees per community

    def neighbor_community_weights(self, v):
        out = {}
        for u, w in self.weights[v].items():
            c = self.community[u]
            out[c] = out.get(c, 0.0) + w
        return out

    def sweep(self, order) -> bool:
        moved = False
        for v in order:
            cur = self.community[v]
            links = self.neighbor_community_weights(v)
            k_v = self.k[v]
            base = links.get(cur, 0.0) - k_v * (self.tot[cur] - k_v) / self.two_m
            for c in sorted(links):
                if c == cur:
                    continue
                gain = (links[c] - k_v * self.tot[c] / self.two_m) - base
                if gain > 1e-12:
                    self.tot[cur] -= k_v
                    self.tot[c] += k_v
                    self.community[v] = c
                    moved = True
                    break
        return moved

    def relabel(self):
        """Compact community ids to 0..C-1 in order of first node appearance."""
        seen = {}
        for v in range(self.n):
            c = self.community[v]
            if c not in seen:
                seen[c] = len(seen)
            self.community[v] = seen[c]
        return len(seen)

    def aggregate(self, n_comms):
        weights = [dict() for _ in range(n_comms)]
        loops = [0.0] * n_comms
        for v in range(self.n):
            loops[self.community[v]] += self.loops[v]
        done = set()
        for v in range(self.n):
            cv = self.community[v]
            for u, w in self.weights[v].items():
                if (u, v) in done or (v, u) in done:
                    continue
                done.add((v, u))
                cu = self.community[u]
                if cu == cv:
                    loops[cv] += w
                else:
                    weights[cv][cu] = weights[cv].get(cu, 0.0) + w
                    weights[cu][cv] = weights[cu].get(cv, 0.0) + w
        return _LouvainLevel(n_comms, weights, loops)


def louvain_partition(g: AttributedGraph, seed: int) -> CommunityPartition:
    """Louvain with a seeded node-visit shuffle, first-positive-gain moves.

    Works per connected component; isolated nodes stay singleton. A graph
    without edges yields the singleton partition with modularity 0.
    """
    n = g.node_count
    if n == 0:
        raise ValueError("empty graph")
    if not g.edges:
        return CommunityPartition(assignment=np.arange(n, dtype=np.int64), modularity=0.0)

    rng = np.random.default_rng(seed)
    weights = [dict() for _ in range(n)]
    for (u, v) in g.edge_list():
        weights[u][v] = 1.0
        weights[v][u] = 1.0
    level = _LouvainLevel(n, weights, [0.0] * n)
    node_map = list(range(n))  # original node -> current-level node

    while True:
        order = rng.permutation(level.n)
        improved = False
        for _ in range(200):  # safety cap; each sweep strictly increases Q
            if not level.sweep(order):
                break
            improved = True
        n_comms = level.relabel()
        if not improved or n_comms == level.n:
            break
        node_map = [level.community[c] for c in node_map]
        level = level.aggregate(n_comms)

    assignment = np.array([level.community[c] for c in node_map], dtype=np.int64)
    # normalize ids by first appearance over original node order
    seen = {}
    for v in range(n):
        c = int(assignment[v])
        if c not in seen:
            seen[c] = len(seen)
        assignment[v] = seen[c]
    return CommunityPartition(assignment=assignment, modularity=modularity(n, g.edges, assignment))


def split_target_auxiliary(g: AttributedGraph, seed: int):
    """Split a graph into (auxiliary, target-pool) halves along communities.

    Communities (largest first, ties by id) are greedily assigned to the
    currently smaller bin, so the size imbalance never exceeds the largest
    community. Returns the two induced subgraphs with disjoint node sets.
    """
    if g.node_count < 4:
        raise ValueError("graph too small to split")
    part = louvain_partition(g, seed)
    comms = part.communities()
    order = sorted(range(len(comms)), key=lambda c: (-len(comms[c]), c))
    bins = ([], [])
    sizes = [0, 0]
    for c in order:
        b = 0 if sizes[0] <= sizes[1] else 1
        bins[b].extend(comms[c])
        sizes[b] += len(comms[c])
    aux = g.induced_subgraph(bins[0])
    pool = g.induced_subgraph(bins[1])
    aux.meta["role"] = "auxiliary"
    pool.meta["role"] = "target-pool"
    return aux, pool


# ---------------------------------------------------------------------------
# Random-walk subgraph sampling
# ---------------------------------------------------------------------------

def _walk_sample(g, rng, start_pool, target_size, step_cap, restart, community_weights):
    """Collect distinct nodes along a random walk; returns (visited, partial).

    community_weights is (assignment, w): a step to a neighbor sharing the
    current node's community gets weight w, any other neighbor 1 - w; None
    means a simple (uniform) walk. A node without usable transitions is a
    dead end: restart from start_pool when allowed, otherwise fail.

    Uniform draws are consumed in blocks of 256 from `rng`.
    """
    indptr, indices = g.csr_adjacency()
    assignment = weight = None
    if community_weights is not None:
        assignment, weight = community_weights

    block = iter(())

    def next_uniform():
        nonlocal block
        for u in block:
            return u
        block = iter(rng.random(256))
        return next(block)

    start = int(start_pool[int(next_uniform() * len(start_pool))])
    visited = {start}
    cur = start
    steps = 0
    while len(visited) < target_size and steps < step_cap:
        steps += 1
        nbrs = indices[indptr[cur]:indptr[cur + 1]]
        stuck = len(nbrs) == 0
        if not stuck and assignment is not None:
            wts = np.where(assignment[nbrs] == assignment[cur], weight, 1.0 - weight)
            cum = np.cumsum(wts)
            if cum[-1] <= 0.0:
                stuck = True
        if stuck:
            if not restart:
                raise ValueError(f"walk stuck at node {cur} and restarts are disabled")
            cur = int(start_pool[int(next_uniform() * len(start_pool))])
            visited.add(cur)
            continue
        if assignment is None:
            cur = int(nbrs[int(next_uniform() * len(nbrs))])
        else:
            pick = int(np.searchsorted(cum, next_uniform() * cum[-1], side="right"))
            cur = int(nbrs[min(pick, len(nbrs) - 1)])
        visited.add(cur)
    return visited, len(visited) < target_size


def sample_reference_graph(g: AttributedGraph, part: CommunityPartition, cfg: WalkConfig,
                           start_community: int) -> AttributedGraph:
    """Community-weighted random-walk sample.

    The walk starts at a uniform node of `start_community`; a step to a
    neighbor in the current node's community has weight w, to any other
    community 1 - w. It runs until `target_size` distinct nodes are visited
    or 50 * target_size steps elapse (partial samples are flagged in meta).
    """
    assignment = part.assignment
    start_pool = np.flatnonzero(assignment == start_community)
    if len(start_pool) == 0:
        raise ValueError(f"community {start_community} has no nodes")
    rng = np.random.default_rng(cfg.seed)
    visited, partial = _walk_sample(
        g, rng, start_pool, cfg.target_size, 50 * cfg.target_size,
        cfg.restart_on_dead_end, (assignment, cfg.w),
    )
    sample = g.induced_subgraph(visited)
    sample.meta.update({"partial": partial, "start_community": int(start_community)})
    return sample


def sample_target_graphs(target_pool: AttributedGraph, count: int, size: int, seed: int) -> list:
    """`count` simple-random-walk induced subgraphs with derived seeds."""
    if size > target_pool.node_count:
        raise ValueError("sample size exceeds pool size")
    out = []
    all_nodes = np.arange(target_pool.node_count)
    for i in range(count):
        rng = np.random.default_rng(seed_list(seed) + [i])
        visited, partial = _walk_sample(
            target_pool, rng, all_nodes, size, 50 * size, True, None,
        )
        sample = target_pool.induced_subgraph(visited)
        sample.meta.update({"partial": partial, "walk_index": i})
        out.append(sample)
    return out
