"""Experiment orchestration: the approximation attack, the conventional
shadow-training baseline, bound-constant fitting, reporting and persistence.

Both pipelines share one deterministic fixture (auxiliary graph, target pool,
target graphs with their trained models, probe set), so they are evaluated on
identical targets. Runtime is accounted per attack phase - sampling,
training, approximation, selection, attack - and excludes fixture
preparation: target models belong to the simulated data owner, not to the
attacker's budget.

Seed derivation from the master seed s (all streams are independent):
  [s,0] source/auxiliary generation     [s,1] independent target pool
  [s,2] community detection             [s,3,i] reference walk i
  [s,4,i] perturbation pool of ref i    [s,5] probe walk
  [s,6,j] target walk j                 [s,8,j] bound-fit perturbation j
  [s,9,j] shadow walk j
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import approx, attack, graph, model, selection
from .errors import ConfigError, PhaseError

THREADS_ENV = "PROPINF_THREADS"

CSV_COLUMNS = [
    "experiment", "knowledge", "property", "seed",
    "models_trained", "models_approximated", "targets",
    "accuracy", "roc_auc",
    "runtime_total_ms", "runtime_training_ms", "runtime_approximation_ms",
]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class GraphSourceCfg:
    kind: str = "sbm"            # "sbm" | "files"
    split: str = "independent"   # "louvain" | "independent"
    prefix: str = ""             # file prefix when kind == "files"
    blocks: tuple = (200, 200)
    p_in: float = 0.08
    p_out: float = 0.0
    attr_fracs: tuple = (0.40, 0.60)
    feature_noise: float = 1.0


@dataclass
class SamplingCfg:
    references: int = 10
    reference_size: int = 120
    walk_weight: float = 0.8


@dataclass
class PerturbCfg:
    k: int = 12
    q: int = 6
    node_frac: float = 0.10
    edge_frac: float = 0.20
    epsilon: float = None        # None = auto budget (q * median delta)
    solver: str = "exact_bb"


@dataclass
class ModelCfg:
    hops: int = 2
    lam: float = 3e-4
    grad_tol: float = 1e-6
    max_iters: int = 5000
    damping: float = 1e-3
    cg_tol: float = 1e-8
    cg_max_iters: int = None     # None = 10 * parameter count

    def train_config(self) -> model.TrainConfig:
        return model.TrainConfig(max_iters=self.max_iters, grad_tol=self.grad_tol,
                                 lam=self.lam, hops=self.hops)

    def cg_config(self) -> approx.CGConfig:
        return approx.CGConfig(tol=self.cg_tol, max_iters=self.cg_max_iters,
                               damping=self.damping)


@dataclass
class AttackCfg:
    knowledge: str = "white-box"  # "white-box" | "black-box"
    epochs: int = 3000
    learning_rate: float = 0.05
    weight_decay: float = 0.2
    probe_size: int = 32

    def train_config(self) -> attack.AttackTrainConfig:
        return attack.AttackTrainConfig(epochs=self.epochs,
                                        learning_rate=self.learning_rate,
                                        weight_decay=self.weight_decay)


@dataclass
class TargetCfg:
    count: int = 32
    size: int = 120


@dataclass
class ExperimentConfig:
    graph: GraphSourceCfg = field(default_factory=GraphSourceCfg)
    property_spec: graph.PropertySpec = field(default_factory=lambda: graph.PropertySpec("node", 1))
    sampling: SamplingCfg = field(default_factory=SamplingCfg)
    perturb: PerturbCfg = field(default_factory=PerturbCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    attack: AttackCfg = field(default_factory=AttackCfg)
    targets: TargetCfg = field(default_factory=TargetCfg)
    seed: int = 7
    threads: int = 1
    shadow_count: int = 60

    def validate(self):
        g = self.graph
        if g.kind not in ("sbm", "files"):
            raise ConfigError(f"graph.source must be sbm or files, got {g.kind!r}")
        if g.split not in ("louvain", "independent"):
            raise ConfigError(f"graph.split must be louvain or independent, got {g.split!r}")
        if g.kind == "files" and g.split == "independent":
            raise ConfigError("independent split requires an sbm source")
        if g.kind == "files" and not g.prefix:
            raise ConfigError("graph.prefix required for file sources")
        if g.kind == "sbm":
            if not g.blocks or len(g.blocks) != len(g.attr_fracs):
                raise ConfigError("graph.blocks and graph.attr_fracs must align")
            if not (0.0 <= g.p_out <= g.p_in <= 1.0):
                raise ConfigError("need 0 <= p_out <= p_in <= 1")
        if self.sampling.references < 1:
            raise ConfigError("sampling.references must be >= 1")
        if not 0.0 <= self.sampling.walk_weight <= 1.0:
            raise ConfigError("sampling.walk_weight must be in [0, 1]")
        if self.perturb.q < 1 or self.perturb.k < self.perturb.q:
            raise ConfigError("need k >= q >= 1")
        if self.perturb.epsilon is not None and self.perturb.epsilon <= 0:
            raise ConfigError("epsilon must be positive or auto")
        if self.perturb.solver not in ("exact_bb", "brute_force", "greedy"):
            raise ConfigError(f"unknown solver {self.perturb.solver!r}")
        if self.attack.knowledge not in ("white-box", "black-box"):
            raise ConfigError(f"unknown knowledge {self.attack.knowledge!r}")
        if self.targets.count < 1:
            raise ConfigError("targets.count must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.shadow_count < 1:
            raise ConfigError("shadow_count must be >= 1")
        try:
            self.model.train_config()
            self.model.cg_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def echo(self) -> dict:
        out = asdict(self)
        out["graph"]["blocks"] = list(self.graph.blocks)
        out["graph"]["attr_fracs"] = list(self.graph.attr_fracs)
        return out


def _parse_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _parse_ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def load_config(path: str) -> ExperimentConfig:
    """Parse the INI experiment file; unknown keys are rejected."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    cfg = ExperimentConfig()

    known = {
        "graph": {"source", "split", "prefix", "blocks", "p_in", "p_out",
                  "attr_fracs", "feature_noise"},
        "property": {"kind", "attr_value"},
        "sampling": {"references", "reference_size", "walk_weight"},
        "perturbation": {"k", "q", "node_frac", "edge_frac", "epsilon", "solver"},
        "model": {"hops", "lambda", "grad_tol", "max_iters", "damping",
                  "cg_tol", "cg_max_iters"},
        "attack": {"knowledge", "epochs", "learning_rate", "weight_decay", "probe_size"},
        "targets": {"count", "size"},
        "run": {"seed", "threads", "shadow_count"},
    }
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        extra = set(parser[section]) - known[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")

    try:
        if "graph" in parser:
            s = parser["graph"]
            cfg.graph.kind = s.get("source", cfg.graph.kind)
            cfg.graph.split = s.get("split", cfg.graph.split)
            cfg.graph.prefix = s.get("prefix", cfg.graph.prefix)
            if "blocks" in s:
                cfg.graph.blocks = _parse_ints(s["blocks"])
            cfg.graph.p_in = s.getfloat("p_in", cfg.graph.p_in)
            cfg.graph.p_out = s.getfloat("p_out", cfg.graph.p_out)
            if "attr_fracs" in s:
                cfg.graph.attr_fracs = _parse_floats(s["attr_fracs"])
            cfg.graph.feature_noise = s.getfloat("feature_noise", cfg.graph.feature_noise)
        if "property" in parser:
            s = parser["property"]
            cfg.property_spec = graph.PropertySpec(
                kind=s.get("kind", "node"), attr_value=s.getint("attr_value", 1))
        if "sampling" in parser:
            s = parser["sampling"]
            cfg.sampling.references = s.getint("references", cfg.sampling.references)
            cfg.sampling.reference_size = s.getint("reference_size", cfg.sampling.reference_size)
            cfg.sampling.walk_weight = s.getfloat("walk_weight", cfg.sampling.walk_weight)
        if "perturbation" in parser:
            s = parser["perturbation"]
            cfg.perturb.k = s.getint("k", cfg.perturb.k)
            cfg.perturb.q = s.getint("q", cfg.perturb.q)
            cfg.perturb.node_frac = s.getfloat("node_frac", cfg.perturb.node_frac)
            cfg.perturb.edge_frac = s.getfloat("edge_frac", cfg.perturb.edge_frac)
            eps = s.get("epsilon", "auto")
            cfg.perturb.epsilon = None if eps == "auto" else float(eps)
            cfg.perturb.solver = s.get("solver", cfg.perturb.solver)
        if "model" in parser:
            s = parser["model"]
            cfg.model.hops = s.getint("hops", cfg.model.hops)
            cfg.model.lam = s.getfloat("lambda", cfg.model.lam)
            cfg.model.grad_tol = s.getfloat("grad_tol", cfg.model.grad_tol)
            cfg.model.max_iters = s.getint("max_iters", cfg.model.max_iters)
            cfg.model.damping = s.getfloat("damping", cfg.model.damping)
            cfg.model.cg_tol = s.getfloat("cg_tol", cfg.model.cg_tol)
            if "cg_max_iters" in s:
                cfg.model.cg_max_iters = s.getint("cg_max_iters")
        if "attack" in parser:
            s = parser["attack"]
            cfg.attack.knowledge = s.get("knowledge", cfg.attack.knowledge)
            cfg.attack.epochs = s.getint("epochs", cfg.attack.epochs)
            cfg.attack.learning_rate = s.getfloat("learning_rate", cfg.attack.learning_rate)
            cfg.attack.weight_decay = s.getfloat("weight_decay", cfg.attack.weight_decay)
            cfg.attack.probe_size = s.getint("probe_size", cfg.attack.probe_size)
        if "targets" in parser:
            s = parser["targets"]
            cfg.targets.count = s.getint("count", cfg.targets.count)
            cfg.targets.size = s.getint("size", cfg.targets.size)
        if "run" in parser:
            s = parser["run"]
            cfg.seed = s.getint("seed", cfg.seed)
            cfg.threads = s.getint("threads", cfg.threads)
            cfg.shadow_count = s.getint("shadow_count", cfg.shadow_count)
    except ValueError as exc:
        raise ConfigError(f"bad value in {path}: {exc}") from exc

    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        try:
            cfg.threads = int(env_threads)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Fixture: the simulated data-owner side, shared by attack and baseline
# ---------------------------------------------------------------------------

@dataclass
class Fixture:
    aux: graph.AttributedGraph
    target_pool: graph.AttributedGraph
    target_graphs: list
    target_models: list
    truths: list
    probe: graph.AttributedGraph
    probe_nodes: list       # original auxiliary ids of the probe sample
    runtime_ms: float


def build_fixture(cfg: ExperimentConfig) -> Fixture:
    t0 = time.perf_counter()
    s = cfg.seed
    g = cfg.graph
    if g.kind == "sbm":
        if g.split == "independent":
            aux = graph.generate_sbm(g.blocks, g.p_in, g.p_out, g.attr_fracs,
                                     g.feature_noise, seed=[s, 0])
            pool = graph.generate_sbm(g.blocks, g.p_in, g.p_out, g.attr_fracs,
                                      g.feature_noise, seed=[s, 1])
        else:
            source = graph.generate_sbm(g.blocks, g.p_in, g.p_out, g.attr_fracs,
                                        g.feature_noise, seed=[s, 0])
            aux, pool = graph.split_target_auxiliary(source, seed=[s, 2])
    else:
        source = graph.load_graph(g.prefix)
        aux, pool = graph.split_target_auxiliary(source, seed=[s, 2])

    if pool.node_count < cfg.targets.size:
        raise PhaseError("fixture", "target pool smaller than targets.size")
    if aux.node_count < cfg.sampling.reference_size:
        raise PhaseError("fixture", "auxiliary graph smaller than reference_size")

    target_graphs = graph.sample_target_graphs(pool, cfg.targets.count,
                                               cfg.targets.size, seed=[s, 6])
    train_cfg = cfg.model.train_config()
    target_models = [model.train(tg, cfg=train_cfg) for tg in target_graphs]
    truths = [graph.compute_property(tg, cfg.property_spec) for tg in target_graphs]

    probe_size = min(cfg.attack.probe_size, aux.node_count)
    probe_graphs = graph.sample_target_graphs(aux, 1, probe_size, seed=[s, 5])
    probe = probe_graphs[0]
    return Fixture(aux=aux, target_pool=pool, target_graphs=target_graphs,
                   target_models=target_models, truths=truths, probe=probe,
                   probe_nodes=list(probe.meta["id_map"]),
                   runtime_ms=(time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    experiment: str
    config_echo: dict
    counts: dict
    metrics: attack.Metrics
    selection_log: list
    warnings: list
    digests: dict
    probe_nodes: list
    truths: list
    predictions: list
    runtime: dict

    def to_json_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config_echo,
            "counts": self.counts,
            "metrics": self.metrics.to_json(),
            "selection": self.selection_log,
            "warnings": self.warnings,
            "digests": self.digests,
            "probe_nodes": self.probe_nodes,
            "truths": self.truths,
            "predictions": self.predictions,
            "runtime": self.runtime,
        }

    def csv_row(self) -> list:
        return [
            self.experiment,
            self.config_echo["attack"]["knowledge"],
            self.config_echo["property_spec"]["kind"],
            self.config_echo["seed"],
            self.counts["models_trained"],
            self.counts["models_approximated"],
            self.counts["targets"],
            f"{self.metrics.accuracy:.6f}",
            f"{self.metrics.roc_auc:.6f}",
            f"{self.runtime['total_ms']:.3f}",
            f"{self.runtime['phases']['training']:.3f}",
            f"{self.runtime['phases']['approximation']:.3f}",
        ]


def _digest(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode())
    return h.hexdigest()[:16]


@contextmanager
def _timed(phases: dict, name: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        phases[name] = phases.get(name, 0.0) + (time.perf_counter() - t0) * 1e3


def _featurizer(cfg: ExperimentConfig, fixture: Fixture):
    if cfg.attack.knowledge == "white-box":
        return attack.featurize_whitebox
    return lambda params: attack.featurize_blackbox(params, fixture.probe)


def _attack_phase(cfg, fixture, samples, phases, digests, warnings):
    """Train the property classifier and score the fixture's targets."""
    featurize = _featurizer(cfg, fixture)
    with _timed(phases, "attack"):
        try:
            clf = attack.train_attack(samples, cfg.attack.train_config())
        except ValueError as exc:
            raise PhaseError("attack", str(exc)) from exc
        target_features = [featurize(m) for m in fixture.target_models]
        predictions = [attack.infer_property(clf, f) for f in target_features]
        metrics = attack.evaluate(predictions, fixture.truths)
    if metrics.degenerate:
        warnings.append("targets are single-class; roc_auc reported as 0.5")
    digests["attack"] = _digest(clf.weights.tobytes(), repr(clf.bias),
                                repr([(int(l), float(s)) for l, s in predictions]))
    return metrics, predictions


def run_attack(cfg: ExperimentConfig, fixture: Fixture = None) -> ExperimentReport:
    """The approximation attack end to end (reference models + Newton updates)."""
    cfg.validate()
    fixture = fixture or build_fixture(cfg)
    spec = cfg.property_spec
    phases = {k: 0.0 for k in ("sampling", "training", "approximation", "selection", "attack")}
    warnings = []
    digests = {}
    s = cfg.seed
    r = cfg.sampling.references

    with _timed(phases, "sampling"):
        part = graph.louvain_partition(fixture.aux, seed=[s, 2])
        n_comms = part.n_communities
        refs = []
        for i in range(r):
            wc = graph.WalkConfig(w=cfg.sampling.walk_weight,
                                  target_size=cfg.sampling.reference_size,
                                  seed=[s, 3, i])
            refs.append(graph.sample_reference_graph(fixture.aux, part, wc,
                                                     start_community=i % n_comms))
    digests["sampling"] = _digest(*[g.digest() for g in refs])

    train_cfg = cfg.model.train_config()
    cg_cfg = cfg.model.cg_config()
    featurize = _featurizer(cfg, fixture)

    def reference_branch(i):
        ref = refs[i]
        times = {"training": 0.0, "selection": 0.0, "approximation": 0.0}
        local_warnings = []
        with _timed(times, "training"):
            theta_ref = model.train(ref, cfg=train_cfg)
            prop_full = model.propagate(ref, hops=cfg.model.hops)
        with _timed(times, "selection"):
            pool = selection.generate_perturbations(
                ref, spec, cfg.perturb.k, cfg.perturb.node_frac,
                cfg.perturb.edge_frac, seed=[s, 4, i], hops=cfg.model.hops)
            selection.pairwise_edit_distance(pool)
            eps = cfg.perturb.epsilon
            if eps is None:
                eps = selection.default_budget(pool, cfg.perturb.q)
                if eps <= 0.0:  # degenerate pool (every perturbation empty)
                    eps = 1.0
                    local_warnings.append(
                        f"reference {i}: degenerate perturbation pool, budget floored")
            sel_cfg = selection.SelectionConfig(q=cfg.perturb.q, epsilon=eps,
                                                solver=cfg.perturb.solver)
            sel = selection.select(pool, sel_cfg)
            if sel.infeasible:
                local_warnings.append(
                    f"reference {i}: selection infeasible, downgraded to "
                    f"{len(sel.chosen)} of {cfg.perturb.q} perturbations")
            elif len({pool.labels[j] for j in sel.chosen}) < 2 and len(set(pool.labels)) >= 2:
                resel = selection.select(pool, sel_cfg, require_label_mix=True)
                if resel.infeasible:
                    local_warnings.append(
                        f"reference {i}: label-mix re-solve infeasible, keeping original choice")
                else:
                    sel = resel
        results = []
        with _timed(times, "approximation"):
            for j in sel.chosen:
                res = approx.approximate(theta_ref, ref, pool.perturbations[j], cg_cfg,
                                         prop_full=prop_full)
                if not res.converged:
                    local_warnings.append(
                        f"reference {i}: cg did not converge on perturbation {j} "
                        f"(residual {res.cg_residual:.2e})")
                results.append((j, res))
        return {"theta_ref": theta_ref, "pool": pool, "sel": sel,
                "results": results, "times": times, "warnings": local_warnings,
                "epsilon": eps}

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            branches = list(ex.map(reference_branch, range(r)))
    else:
        branches = [reference_branch(i) for i in range(r)]

    samples = []
    selection_log = []
    theta_blobs = []
    approx_blobs = []
    for i, br in enumerate(branches):
        for phase, ms in br["times"].items():
            phases[phase] += ms
        warnings.extend(br["warnings"])
        theta_blobs.append(br["theta_ref"].to_bytes())
        sel = br["sel"]
        selection_log.append({
            "reference": i,
            "epsilon": float(br["epsilon"]),
            "chosen": [int(j) for j in sel.chosen],
            "objective": sel.objective_value,
            "proof": sel.proof,
            "infeasible": sel.infeasible,
            "labels": [int(br["pool"].labels[j]) for j in sel.chosen],
            "deltas": [float(br["pool"].deltas[j]) for j in sel.chosen],
        })
        for j, res in br["results"]:
            approx_blobs.append(res.theta_aug.to_bytes())
            with _timed(phases, "attack"):
                samples.append(attack.AttackSample(
                    features=featurize(res.theta_aug),
                    label=br["pool"].labels[j],
                    origin="approximated"))
    digests["training"] = _digest(*theta_blobs)
    digests["approximation"] = _digest(*approx_blobs)
    digests["selection"] = _digest(*[repr(entry) for entry in selection_log])

    metrics, predictions = _attack_phase(cfg, fixture, samples, phases, digests, warnings)

    return ExperimentReport(
        experiment="attack",
        config_echo=cfg.echo(),
        counts={"models_trained": r,
                "models_approximated": len(samples),
                "references": r,
                "targets": len(fixture.target_graphs),
                "target_models": len(fixture.target_models)},
        metrics=metrics,
        selection_log=selection_log,
        warnings=warnings,
        digests=digests,
        probe_nodes=fixture.probe_nodes if cfg.attack.knowledge == "black-box" else None,
        truths=[int(t) for t in fixture.truths],
        predictions=[[int(l), float(sc)] for l, sc in predictions],
        runtime={"phases": phases,
                 "total_ms": sum(phases.values()),
                 "fixture_ms": fixture.runtime_ms},
    )


def run_shadow_baseline(cfg: ExperimentConfig, fixture: Fixture = None) -> ExperimentReport:
    """Conventional attack: one model trained from scratch per shadow graph."""
    cfg.validate()
    fixture = fixture or build_fixture(cfg)
    spec = cfg.property_spec
    phases = {k: 0.0 for k in ("sampling", "training", "approximation", "selection", "attack")}
    warnings = []
    digests = {}
    s = cfg.seed

    with _timed(phases, "sampling"):
        shadows = graph.sample_target_graphs(fixture.aux, cfg.shadow_count,
                                             cfg.sampling.reference_size, seed=[s, 9])
    digests["sampling"] = _digest(*[g.digest() for g in shadows])

    train_cfg = cfg.model.train_config()

    def shadow_branch(j):
        times = {"training": 0.0}
        with _timed(times, "training"):
            theta = model.train(shadows[j], cfg=train_cfg)
        return {"theta": theta, "times": times}

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            branches = list(ex.map(shadow_branch, range(cfg.shadow_count)))
    else:
        branches = [shadow_branch(j) for j in range(cfg.shadow_count)]

    featurize = _featurizer(cfg, fixture)
    samples = []
    theta_blobs = []
    for j, br in enumerate(branches):
        phases["training"] += br["times"]["training"]
        theta_blobs.append(br["theta"].to_bytes())
        with _timed(phases, "attack"):
            samples.append(attack.AttackSample(
                features=featurize(br["theta"]),
                label=graph.compute_property(shadows[j], spec),
                origin="retrained-shadow"))
    digests["training"] = _digest(*theta_blobs)
    digests["approximation"] = _digest(b"")
    digests["selection"] = _digest(b"")

    metrics, predictions = _attack_phase(cfg, fixture, samples, phases, digests, warnings)

    return ExperimentReport(
        experiment="baseline",
        config_echo=cfg.echo(),
        counts={"models_trained": cfg.shadow_count,
                "models_approximated": 0,
                "references": 0,
                "targets": len(fixture.target_graphs),
                "target_models": len(fixture.target_models)},
        metrics=metrics,
        selection_log=[],
        warnings=warnings,
        digests=digests,
        probe_nodes=fixture.probe_nodes if cfg.attack.knowledge == "black-box" else None,
        truths=[int(t) for t in fixture.truths],
        predictions=[[int(l), float(sc)] for l, sc in predictions],
        runtime={"phases": phases,
                 "total_ms": sum(phases.values()),
                 "fixture_ms": fixture.runtime_ms},
    )


# ---------------------------------------------------------------------------
# Bound-constant fitting
# ---------------------------------------------------------------------------

def _log_uniform_size(rng, cap):
    """Size in [0, cap] spread evenly across scales, so that small, medium
    and large removals are all represented."""
    if cap <= 0:
        return 0
    return min(cap, int(np.exp(rng.uniform(0.0, np.log(cap + 1.0)))) - 1 + int(rng.random() < 0.5))


def sample_random_perturbation(g, rng, max_nodes, max_edges):
    """Random perturbation with log-spread size caps; never returns the empty
    removal unless the graph admits nothing else."""
    max_nodes = min(max_nodes, g.node_count - 1)
    for _ in range(20):
        n_rm = _log_uniform_size(rng, max_nodes)
        e_rm = _log_uniform_size(rng, max_edges)
        removed = set(int(v) for v in rng.permutation(g.node_count)[:n_rm])
        survivors = sorted(e for e in g.edges
                           if e[0] not in removed and e[1] not in removed)
        e_rm = min(e_rm, len(survivors))
        picked = rng.permutation(len(survivors))[:e_rm]
        edges = [survivors[i] for i in sorted(picked)]
        if removed or edges:
            return approx.Perturbation.make(g, removed, edges)
    return approx.Perturbation.make(g, set(), [])


def fit_bound_constant(g_ref, theta_ref, n_perturbations: int, seed: int,
                       cg: approx.CGConfig = None, max_node_frac: float = 0.05,
                       max_edge_frac: float = 0.05) -> dict:
    """Estimate the constant tying the error criterion to the residual norm.

    Samples random perturbations of mixed sizes, approximates each, and
    records (criterion, residual gradient norm) pairs. C_hat is the largest
    observed ratio; the Spearman rank correlation measures how well the
    criterion orders the actual residuals.
    """
    cg = cg or approx.CGConfig()
    max_nodes = max(1, int(max_node_frac * g_ref.node_count))
    max_edges = max(1, int(max_edge_frac * len(g_ref.edges))) if g_ref.edges else 0
    points = []
    for j in range(n_perturbations):
        rng = np.random.default_rng(graph.seed_list(seed) + [8, j])
        p = sample_random_perturbation(g_ref, rng, max_nodes, max_edges)
        res = approx.approximate(theta_ref, g_ref, p, cg)
        points.append((res.delta, res.residual_grad_norm))
    if all(d == 0.0 for d, _ in points):
        raise ValueError("all sampled perturbations are empty")
    ratios = [norm / d for d, norm in points if d > 0]
    deltas = [d for d, _ in points]
    norms = [n for _, n in points]
    rho = float(stats.spearmanr(deltas, norms)[0])
    return {"C_hat": max(ratios), "spearman_rho": rho,
            "points": [[float(d), float(n)] for d, n in points]}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def emit_report(report: ExperimentReport, fmt: str, path: str):
    """Write a report: fmt="json" (full, stable ordering) or "csv-summary"
    (one row appended per experiment, header created on demand)."""
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    elif fmt == "csv-summary":
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(CSV_COLUMNS)
            writer.writerow(report.csv_row())
    else:
        raise ValueError(f"unknown report format {fmt!r}")
