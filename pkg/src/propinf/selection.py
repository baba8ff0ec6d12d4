"""Perturbation pools and the diversity-vs-error subset selector.

A pool holds k candidate perturbations of one reference graph, their pairwise
edit distances, their error criteria and the property labels of the resulting
augmented graphs. The selector picks q of them maximizing total pairwise
distance subject to a budget on the summed error criteria - a small quadratic
integer program solved exactly in-process (branch and bound certified against
brute-force enumeration), with a greedy fallback for large pools.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .approx import Perturbation, error_criterion, influenced_nodes
from .graph import AttributedGraph, PropertySpec, property_label, seed_list

BRUTE_FORCE_LIMIT = 25


@dataclass
class PerturbationPool:
    reference_id: object
    perturbations: list
    labels: list                   # property label of each augmented graph
    deltas: np.ndarray = None      # error criterion per perturbation
    distances: np.ndarray = None   # symmetric k x k, zero diagonal

    @property
    def k(self) -> int:
        return len(self.perturbations)

    def to_json(self, include_distances: bool = None) -> dict:
        if include_distances is None:
            include_distances = self.k <= 64
        out = {
            "reference_id": self.reference_id,
            "k": self.k,
            "labels": [int(x) for x in self.labels],
            "deltas": None if self.deltas is None else [float(x) for x in self.deltas],
            "removed_node_counts": [len(p.removed_nodes) for p in self.perturbations],
            "removed_edge_counts": [len(p.removed_edges) for p in self.perturbations],
        }
        if include_distances and self.distances is not None:
            out["distances"] = self.distances.tolist()
        return out


@dataclass
class SelectionConfig:
    q: int
    epsilon: float
    objective: str = "maximize_diversity"
    solver: str = "exact_bb"

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.objective not in ("maximize_diversity", "minimize_diversity"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.solver not in ("exact_bb", "brute_force", "greedy"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class SelectionResult:
    chosen: tuple
    objective_value: float
    proof: str        # "optimal" or "feasible-heuristic"
    infeasible: bool = False

    def to_json(self) -> dict:
        return {"chosen": [int(i) for i in self.chosen],
                "objective_value": float(self.objective_value),
                "proof": self.proof,
                "infeasible": self.infeasible}


def generate_perturbations(g_ref: AttributedGraph, spec: PropertySpec, k: int,
                           node_frac: float, edge_frac: float, seed: int,
                           hops: int = 2) -> PerturbationPool:
    """k random node+edge removals, stratified to realize both property labels.

    The first half of the pool draws its removed nodes from the stratum with
    property_attr == spec.attr_value, the second half from the complement
    (topping up uniformly when a stratum runs short); edge removals are
    uniform over the edges that survive the node removal. Labels come from
    compute_property on each augmented graph and deltas from the error
    criterion at `hops`.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    n = g_ref.node_count
    n_remove = int(round(node_frac * n))
    if n_remove >= n:
        raise ValueError("node_frac leaves no remaining graph")
    e_remove_target = int(round(edge_frac * len(g_ref.edges)))

    ids = np.arange(n)
    stratum1 = ids[g_ref.property_attr == spec.attr_value]
    stratum0 = ids[g_ref.property_attr != spec.attr_value]
    digest = g_ref.digest()
    earr = g_ref.edge_array()

    perturbations = []
    labels = []
    deltas = []
    for i in range(k):
        rng = np.random.default_rng(seed_list(seed) + [i])
        primary, backup = (stratum1, stratum0) if i < k // 2 else (stratum0, stratum1)
        take = min(n_remove, len(primary))
        removed = list(rng.permutation(primary)[:take])
        if take < n_remove:
            removed += list(rng.permutation(backup)[: n_remove - take])
        gone = np.zeros(n, dtype=bool)
        gone[removed] = True

        if len(earr):
            survivors = earr[~(gone[earr[:, 0]] | gone[earr[:, 1]])]
        else:
            survivors = earr
        e_remove = min(e_remove_target, len(survivors))
        picked = np.sort(rng.permutation(len(survivors))[:e_remove])
        removed_edges = [tuple(e) for e in survivors[picked].tolist()]

        p = Perturbation.make(g_ref, (int(v) for v in removed), removed_edges,
                              reference_digest=digest)
        perturbations.append(p)
        if e_remove:
            kept = np.ones(len(survivors), dtype=bool)
            kept[picked] = False
            aug_edges = survivors[kept]
        else:
            aug_edges = survivors
        # node properties count surviving nodes; link properties count
        # surviving edges (whose endpoints index the original attr array)
        if spec.kind == "node":
            labels.append(property_label(g_ref.property_attr[~gone], aug_edges[:0], spec))
        else:
            labels.append(property_label(g_ref.property_attr, aug_edges, spec))
        deltas.append(error_criterion(p, influenced_nodes(g_ref, p, hops)))

    return PerturbationPool(
        reference_id=digest[:12],
        perturbations=perturbations,
        labels=labels,
        deltas=np.array(deltas),
    )


def pairwise_edit_distance(pool: PerturbationPool) -> np.ndarray:
    """Graph edit distance between augmented siblings of one reference.

    For deletion-derived graphs of a common parent this is exactly the
    symmetric difference of the removed-node sets plus the symmetric
    difference of the removal closures (unit deletion/insertion costs).
    """
    digests = {p.reference_digest for p in pool.perturbations}
    if len(digests) > 1:
        raise ValueError("pool mixes perturbations of different references")
    k = pool.k
    d = np.zeros((k, k))
    for i in range(k):
        pi = pool.perturbations[i]
        for j in range(i + 1, k):
            pj = pool.perturbations[j]
            dist = len(pi.removed_nodes ^ pj.removed_nodes) + len(pi.closure_edges ^ pj.closure_edges)
            d[i, j] = d[j, i] = dist
    pool.distances = d
    return d


def default_budget(pool: PerturbationPool, q: int) -> float:
    """Budget heuristic: q times the median error criterion of the pool."""
    if pool.deltas is None:
        raise ValueError("pool has no deltas")
    return float(q * np.median(pool.deltas))


def _subset_objective(d: np.ndarray, subset) -> float:
    idx = list(subset)
    return float(d[np.ix_(idx, idx)].sum()) / 2.0


def _labels_ok(labels, subset) -> bool:
    got = {labels[i] for i in subset}
    return len(got) >= 2


def _max_cardinality_subset(deltas, epsilon) -> tuple:
    """Largest index set fitting the budget: greedy over ascending deltas."""
    order = sorted(range(len(deltas)), key=lambda i: (deltas[i], i))
    chosen = []
    total = 0.0
    for i in order:
        if total + deltas[i] <= epsilon:
            chosen.append(i)
            total += deltas[i]
    return tuple(sorted(chosen))


def _brute_force(d, deltas, q, epsilon, maximize, labels=None):
    best = None
    best_set = None
    for subset in itertools.combinations(range(len(deltas)), q):
        if sum(deltas[i] for i in subset) > epsilon:
            continue
        if labels is not None and not _labels_ok(labels, subset):
            continue
        obj = _subset_objective(d, subset)
        if best is None or (obj > best if maximize else obj < best):
            best, best_set = obj, subset
    return best_set, best


_ENUMERATE_LIMIT = 6000  # subsets; above this the branch-and-bound search runs


def _enumerate_vectorized(d, deltas, q, epsilon, maximize, labels=None):
    """Exact solve by scoring every subset at once (small instances).

    Combinations enumerate in lexicographic order and argmax/argmin return
    the first optimum, which reproduces the lexicographic tie-break.
    """
    k = len(deltas)
    combos = np.array(list(itertools.combinations(range(k), q)), dtype=np.int64)
    feasible = deltas[combos].sum(axis=1) <= epsilon
    if labels is not None:
        lab = np.asarray(labels)[combos]
        feasible &= np.any(lab != lab[:, :1], axis=1)
    if not feasible.any():
        return None, None
    obj = d[combos[:, :, None], combos[:, None, :]].sum(axis=(1, 2)) / 2.0
    obj = np.where(feasible, obj, -np.inf if maximize else np.inf)
    idx = int(np.argmax(obj) if maximize else np.argmin(obj))
    return tuple(combos[idx].tolist()), float(obj[idx])


def _branch_and_bound(d, deltas, q, epsilon, maximize, labels=None):
    """Exact DFS in index order (include-first), so the first incumbent among
    objective ties is the lexicographically smallest subset. Small instances
    short-circuit to whole-table enumeration."""
    k = len(deltas)
    if math.comb(k, q) <= _ENUMERATE_LIMIT:
        return _enumerate_vectorized(d, deltas, q, epsilon, maximize, labels)
    suffix_sorted_deltas = [np.sort(deltas[p:]) for p in range(k + 1)]
    # prefix sums of each row sorted descending (zero diagonal included):
    # row_top[i, t] = sum of the t largest distances from i to anywhere
    row_top = np.concatenate(
        [np.zeros((k, 1)), np.cumsum(np.sort(d, axis=1)[:, ::-1], axis=1)], axis=1)

    best = {"obj": None, "set": None}

    def completion_bound(pos, chosen, t):
        # per remaining candidate: its distance into the chosen set plus half
        # of its t-1 largest distances anywhere (loose but sound upper bound)
        cross = d[pos:, chosen].sum(axis=1) if len(chosen) else np.zeros(k - pos)
        vals = cross + 0.5 * row_top[pos:, t - 1]
        if t < len(vals):
            vals = np.partition(vals, len(vals) - t)[len(vals) - t:]
        return float(vals.sum())

    def dfs(pos, chosen, obj, dsum):
        t = q - len(chosen)
        if t == 0:
            if labels is not None and not _labels_ok(labels, chosen):
                return
            if best["obj"] is None or (obj > best["obj"] if maximize else obj < best["obj"]):
                best["obj"], best["set"] = obj, tuple(chosen)
            return
        if k - pos < t:
            return
        remaining = suffix_sorted_deltas[pos]
        if dsum + float(remaining[:t].sum()) > epsilon:
            return
        if labels is not None:
            reachable = {labels[i] for i in chosen} | {labels[i] for i in range(pos, k)}
            if len(reachable) < 2:
                return
        if best["obj"] is not None:
            if maximize:
                if obj + completion_bound(pos, chosen, t) <= best["obj"]:
                    return
            elif obj >= best["obj"]:  # distances are non-negative
                return
        if dsum + deltas[pos] <= epsilon:
            gain = float(d[pos, chosen].sum()) if len(chosen) else 0.0
            chosen.append(pos)
            dfs(pos + 1, chosen, obj + gain, dsum + deltas[pos])
            chosen.pop()
        dfs(pos + 1, chosen, obj, dsum)

    dfs(0, [], 0.0, 0.0)
    return best["set"], best["obj"]


def _greedy(d, deltas, q, epsilon, maximize, labels=None):
    """Farthest-point style insertion honoring the budget (heuristic)."""
    k = len(deltas)
    chosen = []
    dsum = 0.0

    def viable(i):
        rest = sorted(deltas[j] for j in range(k) if j != i and j not in chosen)
        slack = sum(rest[: q - len(chosen) - 1])
        return dsum + deltas[i] + slack <= epsilon

    while len(chosen) < q:
        cands = [i for i in range(k) if i not in chosen and viable(i)]
        if labels is not None and len(chosen) == q - 1:
            have = {labels[i] for i in chosen}
            if len(have) < 2:
                narrowed = [i for i in cands if labels[i] not in have]
                if narrowed:
                    cands = narrowed
        if not cands:
            return None, None
        sign = 1.0 if maximize else -1.0
        if not chosen:
            scores = {i: sign * float(d[i].sum()) for i in cands}
        else:
            scores = {i: sign * float(d[i, chosen].sum()) for i in cands}
        top = max(scores.values())
        pick = min(i for i in cands if scores[i] == top)  # smallest index on ties
        chosen.append(pick)
        dsum += deltas[pick]
    return tuple(sorted(chosen)), _subset_objective(d, chosen)


def select(pool: PerturbationPool, cfg: SelectionConfig,
           require_label_mix: bool = False) -> SelectionResult:
    """Choose cfg.q indices under the budget; exact unless solver="greedy".

    When no feasible q-subset exists the result is flagged infeasible and
    carries the largest subset that does fit the budget instead.
    `require_label_mix` additionally demands both property labels among the
    chosen perturbations (used to keep attack training sets two-class).
    """
    if pool.distances is None or pool.deltas is None:
        raise ValueError("pool needs distances and deltas before selection")
    if cfg.q > pool.k:
        raise ValueError("q exceeds pool size")
    if cfg.solver == "brute_force" and pool.k > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute_force requires k <= {BRUTE_FORCE_LIMIT}")

    d = pool.distances
    deltas = np.asarray(pool.deltas, dtype=np.float64)
    maximize = cfg.objective == "maximize_diversity"
    labels = pool.labels if require_label_mix else None

    if cfg.solver == "brute_force":
        subset, obj = _brute_force(d, deltas, cfg.q, cfg.epsilon, maximize, labels)
        proof = "optimal"
    elif cfg.solver == "exact_bb":
        subset, obj = _branch_and_bound(d, deltas, cfg.q, cfg.epsilon, maximize, labels)
        proof = "optimal"
    else:
        subset, obj = _greedy(d, deltas, cfg.q, cfg.epsilon, maximize, labels)
        proof = "feasible-heuristic"

    if subset is None:
        fallback = _max_cardinality_subset(deltas, cfg.epsilon)
        return SelectionResult(chosen=fallback,
                               objective_value=_subset_objective(d, fallback),
                               proof=proof, infeasible=True)
    return SelectionResult(chosen=tuple(subset), objective_value=float(obj), proof=proof)
