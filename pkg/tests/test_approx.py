import numpy as np
import pytest

from propinf.approx import (CGConfig, Perturbation, approximate,
                            conjugate_gradient, error_criterion,
                            influenced_nodes, remaining, residual_gradient_norm,
                            retrain_exact)
from propinf.graph import generate_sbm
from propinf.model import TrainConfig, propagate, train

from conftest import make_graph, random_er_graph


def naive_influenced(g, p, hops):
    """Reference BFS: per-source balls on adjacency lists, then the union."""
    adj = g.adjacency()

    def ball(sources, depth):
        seen = set(sources)
        frontier = list(sources)
        for _ in range(depth):
            nxt = []
            for v in frontier:
                for u in adj[v]:
                    if u not in seen:
                        seen.add(u)
                        nxt.append(u)
            frontier = nxt
        return seen

    out = set()
    for v in p.removed_nodes:
        out |= ball({v}, hops)
    for (u, v) in p.removed_edges:
        out |= ball({u}, hops - 1) | ball({v}, hops - 1) | {u, v}
    return out - p.removed_nodes


def random_perturbation(rng, g, max_nodes=3, max_edges=4):
    n_rm = int(rng.integers(0, min(max_nodes, g.node_count - 1) + 1))
    removed = set(int(v) for v in rng.permutation(g.node_count)[:n_rm])
    survivors = sorted(e for e in g.edges
                       if e[0] not in removed and e[1] not in removed)
    e_rm = int(rng.integers(0, min(max_edges, len(survivors)) + 1))
    picked = rng.permutation(len(survivors))[:e_rm]
    edges = [survivors[i] for i in sorted(picked)]
    return Perturbation.make(g, removed, edges)


# ---------------------------------------------------------------------------
# Perturbations and influenced nodes
# ---------------------------------------------------------------------------

def test_perturbation_closure():
    g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
    p = Perturbation.make(g, {1}, [(2, 3)])
    assert p.closure_edges == {(0, 1), (1, 2), (2, 3)}
    assert p.removed_edges == {(2, 3)}


def test_perturbation_validation():
    g = make_graph(3, [(0, 1)])
    with pytest.raises(ValueError):
        Perturbation.make(g, {0, 1, 2}, [])
    with pytest.raises(ValueError):
        Perturbation.make(g, {5}, [])
    with pytest.raises(ValueError):
        Perturbation.make(g, set(), [(1, 2)])


def test_influenced_path_edge_removal():
    # path 0-1-2-3-4, remove edge (1,2), hops=2:
    # ball(1,1) | ball(2,1) | endpoints = {0,1,2} | {1,2,3} = {0,1,2,3}
    g = make_graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    p = Perturbation.make(g, set(), [(1, 2)])
    infl = influenced_nodes(g, p, hops=2)
    assert infl.nodes == {0, 1, 2, 3}


def test_influenced_star_center_removal():
    g = make_graph(6, [(0, v) for v in range(1, 6)])
    p = Perturbation.make(g, {0}, [])
    infl = influenced_nodes(g, p, hops=1)
    assert infl.nodes == {1, 2, 3, 4, 5}


def test_influenced_empty_perturbation():
    g = make_graph(4, [(0, 1), (2, 3)])
    p = Perturbation.make(g, set(), [])
    assert influenced_nodes(g, p, hops=2).nodes == frozenset()


def test_influenced_rejects_zero_hops():
    g = make_graph(3, [(0, 1)])
    p = Perturbation.make(g, {0}, [])
    with pytest.raises(ValueError):
        influenced_nodes(g, p, hops=0)


def test_influenced_matches_naive_bfs(rng):
    for trial in range(60):
        r = np.random.default_rng(trial)
        g = random_er_graph(r, int(r.integers(8, 30)), float(r.uniform(0.08, 0.4)))
        p = random_perturbation(r, g)
        hops = int(r.integers(1, 4))
        infl = influenced_nodes(g, p, hops)
        assert infl.nodes == frozenset(naive_influenced(g, p, hops))
        assert not (infl.nodes & p.removed_nodes)


def test_influenced_remaining_scope_is_subset(rng):
    g = random_er_graph(rng, 20, 0.25)
    p = random_perturbation(rng, g, max_nodes=2, max_edges=3)
    by_original = influenced_nodes(g, p, 2, edge_scope="original").nodes
    by_remaining = influenced_nodes(g, p, 2, edge_scope="remaining").nodes
    assert by_remaining <= by_original | {v for e in p.removed_edges for v in e}


# ---------------------------------------------------------------------------
# Error criterion
# ---------------------------------------------------------------------------

def test_error_criterion_values():
    g = make_graph(30, [(0, 1)])

    class FakeInfl:
        nodes = frozenset(range(20))

    p = Perturbation.make(g, set(range(10, 15)), [])
    assert error_criterion(p, FakeInfl()) == (5 + 40) ** 2 == 2025


def test_error_criterion_empty_and_isolated():
    g = make_graph(3, [(0, 1)])
    p_empty = Perturbation.make(g, set(), [])
    assert error_criterion(p_empty, influenced_nodes(g, p_empty, 2)) == 0.0
    p_iso = Perturbation.make(g, {2}, [])  # node 2 is isolated
    assert error_criterion(p_iso, influenced_nodes(g, p_iso, 2)) == 1.0


def test_error_criterion_monotone(rng):
    # monotone in removed edges always, and in removed nodes as long as the
    # added node was not already influenced (an influenced node that moves
    # into the removal set trades its 2x weight for 1x)
    for trial in range(25):
        r = np.random.default_rng(400 + trial)
        g = random_er_graph(r, 20, 0.25)
        p = random_perturbation(r, g, max_nodes=2, max_edges=2)
        infl = influenced_nodes(g, p, 2)
        base = error_criterion(p, infl)
        outside = [v for v in range(20)
                   if v not in p.removed_nodes and v not in infl.nodes]
        if outside:
            bigger = Perturbation.make(g, p.removed_nodes | {outside[0]}, p.removed_edges)
            assert error_criterion(bigger, influenced_nodes(g, bigger, 2)) >= base
        survivors = sorted(g.edges - p.closure_edges)
        if survivors:
            more_edges = Perturbation.make(
                g, p.removed_nodes, set(p.removed_edges) | {survivors[0]})
            assert error_criterion(more_edges, influenced_nodes(g, more_edges, 2)) >= base


def test_error_criterion_not_monotone_for_influenced_nodes():
    # removing an already-influenced clique node shrinks the criterion:
    # K4 with V_r={0} gives (1 + 2*3)^2 = 49, V_r={0,1} gives (2 + 2*2)^2 = 36
    g = make_graph(4, [(u, v) for u in range(4) for v in range(u + 1, 4)])
    p1 = Perturbation.make(g, {0}, [])
    p2 = Perturbation.make(g, {0, 1}, [])
    assert error_criterion(p1, influenced_nodes(g, p1, 2)) == 49.0
    assert error_criterion(p2, influenced_nodes(g, p2, 2)) == 36.0


# ---------------------------------------------------------------------------
# Conjugate gradient
# ---------------------------------------------------------------------------

def test_cg_solves_spd_system(rng):
    a = rng.normal(size=(8, 8))
    spd = a @ a.T + 8 * np.eye(8)
    b = rng.normal(size=8)
    x, iters, res = conjugate_gradient(lambda v: spd @ v, b, 1e-12, 200)
    assert np.allclose(x, np.linalg.solve(spd, b), atol=1e-8)
    assert res <= 1e-12


def test_cg_zero_rhs_short_circuits():
    x, iters, res = conjugate_gradient(lambda v: v, np.zeros(5), 1e-10, 50)
    assert np.array_equal(x, np.zeros(5))
    assert iters == 0


# ---------------------------------------------------------------------------
# Approximation vs retraining
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sbm_setup():
    g = generate_sbm([100, 100], 0.1, 0.01, [0.4, 0.6], 0.1, seed=1)
    cfg = TrainConfig()
    theta = train(g, cfg=cfg)
    return g, cfg, theta


def test_approximate_empty_perturbation_is_exact(sbm_setup):
    g, cfg, theta = sbm_setup
    p = Perturbation.make(g, set(), [])
    res = approximate(theta, g, p)
    assert np.array_equal(res.theta_aug.theta, theta.theta)
    assert res.delta == 0.0
    assert res.cg_iters == 0


def test_approximate_close_to_retraining(sbm_setup):
    g, cfg, theta = sbm_setup
    rng = np.random.default_rng(0)
    p = Perturbation.make(g, rng.permutation(g.node_count)[:2],
                          sorted(g.edges)[:4])
    res = approximate(theta, g, p)
    exact = retrain_exact(g, p, cfg)
    rel = np.linalg.norm(res.theta_aug.theta - exact.theta) / np.linalg.norm(exact.theta)
    assert rel <= 0.05
    assert res.converged


def test_newton_exact_on_quadratic_objective():
    g = generate_sbm([40, 40], 0.15, 0.02, [0.4, 0.6], 0.2, seed=3)
    cfg = TrainConfig(objective="quadratic", grad_tol=1e-11, max_iters=30000)
    theta = train(g, cfg=cfg)
    rng = np.random.default_rng(5)
    for trial in range(5):
        p = random_perturbation(np.random.default_rng(trial), g, max_nodes=3, max_edges=5)
        res = approximate(theta, g, p, CGConfig(tol=1e-12, damping=0.0))
        exact = retrain_exact(g, p, cfg)
        rel = np.linalg.norm(res.theta_aug.theta - exact.theta) / np.linalg.norm(exact.theta)
        assert rel <= 1e-8


def test_retrain_empty_matches_full_training(sbm_setup):
    g, cfg, theta = sbm_setup
    p = Perturbation.make(g, set(), [])
    again = retrain_exact(g, p, cfg)
    assert np.array_equal(again.theta, theta.theta)


def test_retrain_uniqueness_under_budgets():
    g = generate_sbm([50, 50], 0.1, 0.01, [0.5, 0.5], 0.2, seed=9)
    p = Perturbation.make(g, {0, 1}, [])
    a = retrain_exact(g, p, TrainConfig(grad_tol=1e-7, max_iters=4000))
    b = retrain_exact(g, p, TrainConfig(grad_tol=1e-7, max_iters=40000))
    assert np.linalg.norm(a.theta - b.theta) <= 10 * 1e-7


def test_residual_norm_at_optimum(sbm_setup):
    g, cfg, theta = sbm_setup
    p = Perturbation.make(g, {3, 4}, [])
    exact = retrain_exact(g, p, cfg)
    assert residual_gradient_norm(exact, g, p) <= cfg.grad_tol
    empty = Perturbation.make(g, set(), [])
    assert residual_gradient_norm(theta, g, empty) <= cfg.grad_tol


def test_approximation_beats_reference_residual(sbm_setup):
    g, cfg, theta = sbm_setup
    wins = 0
    for trial in range(50):
        p = random_perturbation(np.random.default_rng(7000 + trial), g,
                                max_nodes=4, max_edges=8)
        if p.empty:
            wins += 1
            continue
        res = approximate(theta, g, p)
        if res.residual_grad_norm < residual_gradient_norm(theta, g, p):
            wins += 1
    assert wins >= 45  # the Newton step improves the residual in >=90%


def test_approx_result_json(sbm_setup):
    import json
    g, cfg, theta = sbm_setup
    res = approximate(theta, g, Perturbation.make(g, {0}, []))
    blob = json.dumps(res.to_json())
    back = json.loads(blob)
    assert back["delta"] == res.delta
    assert back["converged"] is True
    assert back["cg_iters"] == res.cg_iters


def test_remaining_consistency(rng):
    g = random_er_graph(rng, 15, 0.3)
    p = random_perturbation(rng, g)
    nodes, edges = remaining(g, p)
    assert set(nodes) == set(range(15)) - p.removed_nodes
    assert edges == g.edges - p.closure_edges


def test_changed_propagation_rows_within_influence(rng):
    # the influence set bounds which nodes' aggregated features can move
    for trial in range(30):
        r = np.random.default_rng(6000 + trial)
        g = random_er_graph(r, int(r.integers(10, 25)), float(r.uniform(0.1, 0.35)))
        p = random_perturbation(r, g)
        hops = int(r.integers(1, 3))
        infl = influenced_nodes(g, p, hops)
        before = propagate(g, hops=hops)
        keep = sorted(set(range(g.node_count)) - p.removed_nodes)
        after = propagate(g, keep, g.edges - p.closure_edges, hops)
        changed = {
            v for v in keep
            if np.abs(after.x[after.row_of[v]] - before.x[before.row_of[v]]).max() > 1e-12
        }
        assert changed <= set(infl.nodes)
