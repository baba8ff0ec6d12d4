"""One-step Newton approximation of retraining after node + edge removal.

Removing nodes V_r and edges E_r from a reference graph changes the loss
terms of every remaining node whose l-hop receptive field touches the
removal; those are the influenced nodes. The parameter update solves

    (H + damping * I) x = grad(removed-or-influenced terms, original edges)
                        - grad(influenced terms, surviving edges)

with H the Hessian of the post-removal objective, via conjugate gradient on
Hessian-vector products. The error criterion (|V_r| + 2 |V_i|)^2 ranks
perturbations by how much approximation error to expect; retrain_exact is
the ground-truth oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .graph import AttributedGraph, edge_key


@dataclass(frozen=True)
class Perturbation:
    removed_nodes: frozenset
    removed_edges: frozenset
    closure_edges: frozenset  # removed_edges plus every edge incident to a removed node
    reference_digest: str = field(default=None, compare=False)

    @classmethod
    def make(cls, g: AttributedGraph, removed_nodes, removed_edges=(),
             reference_digest=None) -> "Perturbation":
        nodes = frozenset(int(v) for v in removed_nodes)
        edges = frozenset(edge_key(*e) for e in removed_edges)
        if nodes and (min(nodes) < 0 or max(nodes) >= g.node_count):
            raise ValueError("removed node outside the graph")
        if len(nodes) >= g.node_count:
            raise ValueError("perturbation removes every node")
        if not edges <= g.edges:
            raise ValueError("removed edge not present in the graph")
        closure = set(edges)
        if nodes:
            earr = g.edge_array()
            gone = np.zeros(g.node_count, dtype=bool)
            gone[list(nodes)] = True
            if len(earr):
                hit = earr[gone[earr[:, 0]] | gone[earr[:, 1]]]
                closure.update(zip(hit[:, 0].tolist(), hit[:, 1].tolist()))
        return cls(nodes, edges, frozenset(closure), reference_digest)

    @property
    def empty(self) -> bool:
        return not self.removed_nodes and not self.removed_edges


@dataclass
class InfluenceSet:
    nodes: frozenset
    hops: int


@dataclass
class CGConfig:
    tol: float = 1e-8
    max_iters: int = None  # defaults to 10 * parameter count
    damping: float = 1e-3

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("cg tol must be positive")


@dataclass
class ApproxResult:
    theta_aug: model.ModelParams
    delta: float
    residual_grad_norm: float
    cg_iters: int
    cg_residual: float
    converged: bool

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "residual_grad_norm": self.residual_grad_norm,
            "cg_iters": self.cg_iters,
            "cg_residual": self.cg_residual,
            "converged": self.converged,
        }


def remaining(g: AttributedGraph, p: Perturbation):
    """(surviving node ids, surviving edge set) after applying p."""
    nodes = [v for v in range(g.node_count) if v not in p.removed_nodes]
    edges = g.edges - p.closure_edges
    return nodes, edges


def _remaining_arrays(g: AttributedGraph, p: Perturbation):
    """Array form of `remaining` for the hot path."""
    gone = np.zeros(g.node_count, dtype=bool)
    if p.removed_nodes:
        gone[list(p.removed_nodes)] = True
    nodes = np.flatnonzero(~gone)
    earr = g.edge_array()
    if len(earr) == 0:
        return nodes, earr
    keep = ~(gone[earr[:, 0]] | gone[earr[:, 1]])
    if p.removed_edges:
        packed = earr[:, 0] * g.node_count + earr[:, 1]
        dropped = np.asarray(sorted(u * g.node_count + v for (u, v) in p.removed_edges),
                             dtype=np.int64)
        keep &= ~np.isin(packed, dropped)
    return nodes, earr[keep]


def _bfs_reach(indptr, indices, n, sources, depth):
    """Boolean mask of nodes within `depth` hops of any source (inclusive)."""
    seen = np.zeros(n, dtype=bool)
    frontier = np.asarray(sorted(sources), dtype=np.int64)
    seen[frontier] = True
    for _ in range(depth):
        if len(frontier) == 0:
            break
        counts = indptr[frontier + 1] - indptr[frontier]
        total = int(counts.sum())
        if total == 0:
            break
        starts = np.repeat(indptr[frontier], counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        nbrs = indices[starts + offsets]
        fresh = nbrs[~seen[nbrs]]
        if len(fresh) == 0:
            break
        seen[fresh] = True
        frontier = np.unique(fresh)
    return seen


def influenced_nodes(g: AttributedGraph, p: Perturbation, hops: int,
                     edge_scope: str = "original") -> InfluenceSet:
    """Remaining nodes whose l-hop receptive field the removal touches.

    Removed nodes influence their <=l-hop neighborhoods; a removed edge
    influences its endpoints plus their <=(l-1)-hop neighborhoods.
    Neighborhoods are taken in the original edge set by default
    (edge_scope="remaining" recomputes them after the removal, for
    sensitivity checks).
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    n = g.node_count
    if edge_scope == "original":
        indptr, indices = g.csr_adjacency()
    elif edge_scope == "remaining":
        _, earr = _remaining_arrays(g, p)
        view = AttributedGraph(n, frozenset(map(tuple, earr.tolist())),
                               g.features, g.property_attr, g.class_label,
                               g.n_classes)
        indptr, indices = view.csr_adjacency()
    else:
        raise ValueError("edge_scope must be 'original' or 'remaining'")

    hit = np.zeros(n, dtype=bool)
    if p.removed_nodes:
        hit |= _bfs_reach(indptr, indices, n, p.removed_nodes, hops)
    endpoints = {v for e in p.removed_edges for v in e}
    if endpoints:
        hit |= _bfs_reach(indptr, indices, n, endpoints, hops - 1)
    if p.removed_nodes:
        hit[list(p.removed_nodes)] = False
    return InfluenceSet(nodes=frozenset(np.flatnonzero(hit).tolist()), hops=hops)


def error_criterion(p: Perturbation, infl: InfluenceSet) -> float:
    """(|removed nodes| + 2 * |influenced nodes|)^2."""
    return float((len(p.removed_nodes) + 2 * len(infl.nodes)) ** 2)


def conjugate_gradient(matvec, b, tol, max_iters):
    """Solve A x = b for SPD A. Returns (x, iters, relative residual)."""
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0, 0.0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for it in range(1, max_iters + 1):
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * b_norm:
            return x, it, np.sqrt(rs_new) / b_norm
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iters, np.sqrt(rs) / b_norm


def approximate(theta_ref: model.ModelParams, g: AttributedGraph, p: Perturbation,
                cg: CGConfig = None, prop_full: model.PropagatedFeatures = None) -> ApproxResult:
    """One-step Newton estimate of the parameters retrained without p.

    CG non-convergence is reported through the result flags rather than
    raised: the perturbation stays usable and downstream selection can
    deprioritize it. `prop_full` may carry a precomputed full-graph
    propagation (it only depends on g and the hop count, so it can be shared
    across the perturbations of one reference).
    """
    cg = cg or CGConfig()
    keep_nodes, keep_edges = _remaining_arrays(g, p)
    if len(keep_nodes) == 0:
        raise ValueError("perturbation removes every node")

    infl = influenced_nodes(g, p, theta_ref.hops)
    delta_crit = error_criterion(p, infl)

    prop_rem = model.propagate(g, keep_nodes, keep_edges, theta_ref.hops)
    if p.empty:
        residual = float(np.linalg.norm(model.gradient(theta_ref, g, prop=prop_rem)))
        return ApproxResult(theta_ref.replace_theta(theta_ref.theta.copy()),
                            delta_crit, residual, 0, 0.0, True)

    if prop_full is None:
        prop_full = model.propagate(g, None, None, theta_ref.hops)
    touched = infl.nodes | p.removed_nodes
    rhs = model.gradient(theta_ref, g, terms=touched, prop=prop_full)
    if infl.nodes:
        rhs = rhs - model.gradient(theta_ref, g, terms=infl.nodes, prop=prop_rem)

    def matvec(v):
        return model.hessian_vector_product(theta_ref, g, v=v, damping=cg.damping, prop=prop_rem)

    max_iters = cg.max_iters or 10 * theta_ref.dim
    x, iters, rel_res = conjugate_gradient(matvec, rhs, cg.tol, max_iters)
    converged = rel_res <= cg.tol

    theta_aug = theta_ref.replace_theta(theta_ref.theta + x)
    residual = float(np.linalg.norm(model.gradient(theta_aug, g, prop=prop_rem)))
    return ApproxResult(theta_aug, delta_crit, residual, iters, rel_res, converged)


def retrain_exact(g: AttributedGraph, p: Perturbation, cfg: model.TrainConfig) -> model.ModelParams:
    """Train from scratch on the graph with p applied (the oracle path)."""
    keep_nodes, keep_edges = _remaining_arrays(g, p)
    if len(keep_nodes) == 0:
        raise ValueError("perturbation removes every node")
    return model.train(g, keep_nodes, keep_edges, cfg)


def residual_gradient_norm(theta: model.ModelParams, g: AttributedGraph, p: Perturbation) -> float:
    """Gradient norm of the post-removal objective at theta."""
    keep_nodes, keep_edges = _remaining_arrays(g, p)
    return float(np.linalg.norm(model.gradient(theta, g, keep_nodes, keep_edges)))
