"""The convex propagated-feature node classifier.

A fixed l-hop mean-aggregation front-end (row-normalized A + I propagation)
feeds a multinomial logistic regression with an L2 penalty attached to every
per-node loss term:

    loss(theta; T) = sum_{v in T} ce_v(theta)  +  |T| * (lam / 2) * ||theta||^2

That per-node regularizer makes the objective |T|*lam strongly convex and the
trained parameters comparable across graphs of different sizes. Besides the
logistic objective there is a "quadratic" one (squared error on the logits,
whose Hessian is constant, so one Newton step is exact) and a "ridge" one
(regularizer only), both used as diagnostics and test oracles.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

OBJECTIVES = ("logistic", "quadratic", "ridge")

_MAGIC = b"PMV1"
_OBJ_CODE = {name: i for i, name in enumerate(OBJECTIVES)}


@dataclass
class ModelParams:
    """Flat parameter vector theta = [W.ravel(), b] with its shape context."""

    theta: np.ndarray
    n_classes: int
    n_features: int
    hops: int
    lam: float
    objective: str = "logistic"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        m = self.n_classes * (self.n_features + 1)
        if self.theta.shape != (m,):
            raise ValueError(f"theta must have length {m}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta has non-finite entries")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def weights(self) -> np.ndarray:
        return self.theta[: self.n_classes * self.n_features].reshape(self.n_classes, self.n_features)

    def bias(self) -> np.ndarray:
        return self.theta[self.n_classes * self.n_features:]

    def replace_theta(self, theta) -> "ModelParams":
        return ModelParams(np.asarray(theta, dtype=np.float64), self.n_classes,
                           self.n_features, self.hops, self.lam, self.objective)

    # -- serialization: magic, c, f, hops, lam, objective code, theta --------

    def to_bytes(self) -> bytes:
        head = _MAGIC + struct.pack("<IIIdB", self.n_classes, self.n_features,
                                    self.hops, self.lam, _OBJ_CODE[self.objective])
        return head + self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        if blob[:4] != _MAGIC:
            raise ValueError("bad magic in model record")
        c, f, hops, lam, obj = struct.unpack_from("<IIIdB", blob, 4)
        theta = np.frombuffer(blob, dtype="<f8", offset=4 + struct.calcsize("<IIIdB"))
        return cls(theta.copy(), c, f, hops, lam, OBJECTIVES[obj])

    def to_json(self) -> dict:
        return {
            "format": _MAGIC.decode(),
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "hops": self.hops,
            "lam": self.lam,
            "objective": self.objective,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> "ModelParams":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(np.array(obj["theta"]), obj["n_classes"], obj["n_features"],
                   obj["hops"], obj["lam"], obj["objective"])


@dataclass
class PropagatedFeatures:
    """l-hop aggregated features for one (node subset, edge set) snapshot."""

    x: np.ndarray          # (len(nodes), f), rows follow sorted node ids
    nodes: np.ndarray      # sorted node ids included in the propagation
    hops: int
    edge_snapshot_hash: str
    row_of: dict = field(repr=False)

    def rows(self, terms) -> np.ndarray:
        return np.array(sorted(self.row_of[v] for v in terms), dtype=np.int64)


@dataclass
class TrainConfig:
    max_iters: int = 5000
    grad_tol: float = 1e-6
    step_rule: str = "backtracking"  # or "fixed"
    init: str = "zeros"
    lam: float = 1e-2
    seed: int = 0
    hops: int = 2
    objective: str = "logistic"
    step_size: float = 1.0

    def __post_init__(self):
        if self.grad_tol <= 0 or self.lam <= 0:
            raise ValueError("grad_tol and lam must be positive")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError("step_rule must be fixed or backtracking")
        if self.init != "zeros":
            raise ValueError("only zero initialization is supported")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


def propagate(g, node_subset=None, edge_set=None, hops: int = 2) -> PropagatedFeatures:
    """Row-normalized (A + I) aggregation, applied `hops` times.

    Only edges with both endpoints inside `node_subset` participate; excluded
    nodes contribute neither rows nor columns. Every kept node has its
    self-loop, so isolated nodes simply keep their raw features. `edge_set`
    may also be given as an (m, 2) canonical edge array.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    if node_subset is None:
        nodes = np.arange(g.node_count, dtype=np.int64)
    else:
        nodes = np.array(sorted(set(int(v) for v in node_subset)), dtype=np.int64)
    if edge_set is None:
        earr = g.edge_array()
    elif isinstance(edge_set, np.ndarray):
        earr = edge_set
    else:
        earr = np.asarray(sorted(edge_set), dtype=np.int64).reshape(-1, 2)

    n = len(nodes)
    index = np.full(g.node_count, -1, dtype=np.int64)
    index[nodes] = np.arange(n)
    if len(earr):
        ii, jj = index[earr[:, 0]], index[earr[:, 1]]
        keep = (ii >= 0) & (jj >= 0)
        ii, jj = ii[keep], jj[keep]
    else:
        ii = jj = np.empty(0, dtype=np.int64)

    x = g.features[nodes].copy()
    if hops > 0 and n > 0:
        self_ix = np.arange(n)
        rows = np.concatenate([ii, jj, self_ix])
        cols = np.concatenate([jj, ii, self_ix])
        order = np.argsort(rows, kind="stable")
        cols = cols[order]
        counts = np.bincount(rows, minlength=n)  # >= 1: self-loops everywhere
        starts = np.zeros(n, dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        inv_deg = (1.0 / counts)[:, None]
        for _ in range(hops):
            x = np.add.reduceat(x[cols], starts, axis=0) * inv_deg

    h = hashlib.sha256()
    h.update(ii.tobytes())
    h.update(jj.tobytes())
    h.update(nodes.tobytes())
    h.update(str(hops).encode())
    row_of = {int(v): i for i, v in enumerate(nodes)}
    return PropagatedFeatures(x=x, nodes=nodes, hops=hops,
                              edge_snapshot_hash=h.hexdigest()[:16], row_of=row_of)


# ---------------------------------------------------------------------------
# Objective core: all callers reduce to (X rows, labels, params) triples.
# ---------------------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _data_terms(params, prop, labels, terms):
    """Select the propagated rows and labels of the loss terms."""
    if terms is None:
        rows = np.arange(len(prop.nodes))
        node_ids = prop.nodes
    else:
        node_ids = np.array(sorted(set(terms)), dtype=np.int64)
        rows = np.array([prop.row_of[int(v)] for v in node_ids], dtype=np.int64)
    return prop.x[rows], labels[node_ids]


def _core_loss(params, x, y):
    n = x.shape[0]
    reg = n * 0.5 * params.lam * float(params.theta @ params.theta)
    if params.objective == "ridge" or n == 0:
        return reg
    z = x @ params.weights().T + params.bias()
    if params.objective == "logistic":
        zs = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(zs).sum(axis=1))
        data = float(np.sum(log_norm - zs[np.arange(n), y]))
    else:  # quadratic
        target = np.zeros_like(z)
        target[np.arange(n), y] = 1.0
        data = 0.5 * float(np.sum((z - target) ** 2))
    return data + reg


def _core_grad(params, x, y):
    n = x.shape[0]
    g = n * params.lam * params.theta
    if params.objective == "ridge" or n == 0:
        return g
    z = x @ params.weights().T + params.bias()
    if params.objective == "logistic":
        r = _softmax(z)
        r[np.arange(n), y] -= 1.0
    else:
        r = z.copy()
        r[np.arange(n), y] -= 1.0
    gw = r.T @ x
    gb = r.sum(axis=0)
    g = g.copy()
    c, f = params.n_classes, params.n_features
    g[: c * f] += gw.ravel()
    g[c * f:] += gb
    return g


def _core_hvp(params, x, y, vec):
    n = x.shape[0]
    out = n * params.lam * vec
    if params.objective == "ridge" or n == 0:
        return out
    c, f = params.n_classes, params.n_features
    vw = vec[: c * f].reshape(c, f)
    vb = vec[c * f:]
    dz = x @ vw.T + vb
    if params.objective == "logistic":
        p = _softmax(x @ params.weights().T + params.bias())
        dr = p * dz - p * np.sum(p * dz, axis=1, keepdims=True)
    else:
        dr = dz
    out = out.copy()
    out[: c * f] += (dr.T @ x).ravel()
    out[c * f:] += dr.sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def loss(params, g, node_subset=None, edge_set=None, *, terms=None, prop=None) -> float:
    """Total loss over the term set (default: all of node_subset)."""
    if prop is None:
        prop = propagate(g, node_subset, edge_set, params.hops)
    x, y = _data_terms(params, prop, g.class_label, terms)
    return _core_loss(params, x, y)


def gradient(params, g, node_subset=None, edge_set=None, *, terms=None, prop=None) -> np.ndarray:
    if prop is None:
        prop = propagate(g, node_subset, edge_set, params.hops)
    x, y = _data_terms(params, prop, g.class_label, terms)
    return _core_grad(params, x, y)


def hessian_vector_product(params, g, node_subset=None, edge_set=None, v=None,
                           damping: float = 0.0, *, terms=None, prop=None) -> np.ndarray:
    """(H + damping * I) v for the loss over the term set."""
    vec = np.asarray(v, dtype=np.float64)
    if vec.shape != (params.dim,):
        raise ValueError("vector length mismatch")
    if prop is None:
        prop = propagate(g, node_subset, edge_set, params.hops)
    x, y = _data_terms(params, prop, g.class_label, terms)
    return _core_hvp(params, x, y, vec) + damping * vec


def train(g, node_subset=None, edge_set=None, cfg: TrainConfig = None) -> ModelParams:
    """Full-batch descent with backtracking line search from theta = 0.

    Stops when the gradient norm drops to cfg.grad_tol or after
    cfg.max_iters steps; the objective is strongly convex, so the result is
    the global minimizer up to tolerance and bit-reproducible.
    """
    cfg = cfg or TrainConfig()
    prop = propagate(g, node_subset, edge_set, cfg.hops)
    params = ModelParams(
        np.zeros(g.n_classes * (g.feature_dim + 1)),
        g.n_classes, g.feature_dim, cfg.hops, cfg.lam, cfg.objective,
    )
    x, y = _data_terms(params, prop, g.class_label, None)

    cur_loss = _core_loss(params, x, y)
    if not np.isfinite(cur_loss):
        raise FloatingPointError("non-finite loss at initialization")
    eps = np.finfo(np.float64).eps
    step = cfg.step_size
    certified = None     # last Armijo-accepted step size
    open_loop = False    # Armijo decrease fell below float resolution
    best_gnorm = np.inf
    for _ in range(cfg.max_iters):
        grad = _core_grad(params, x, y)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol:
            break
        if cfg.step_rule == "fixed":
            params = params.replace_theta(params.theta - cfg.step_size * grad)
            cur_loss = _core_loss(params, x, y)
            if not np.isfinite(cur_loss):
                raise FloatingPointError("non-finite loss during training")
            continue
        if not open_loop:
            step = min(cfg.step_size, 2.0 * step)
            if 1e-4 * step * gnorm * gnorm < 16.0 * eps * max(1.0, abs(cur_loss)):
                # The required decrease is below the rounding noise of the
                # summed loss: line search can no longer certify progress.
                # Continue with plain gradient steps at the last certified
                # size, which already satisfies the descent condition here.
                open_loop = True
                if certified is not None:
                    step = certified
            else:
                accepted = False
                for _ in range(60):
                    trial = params.replace_theta(params.theta - step * grad)
                    trial_loss = _core_loss(trial, x, y)
                    if trial_loss <= cur_loss - 1e-4 * step * gnorm * gnorm:
                        params, cur_loss, accepted = trial, trial_loss, True
                        certified = step
                        break
                    step *= 0.5
                if not accepted:
                    break  # flat to numerical precision in every direction
                if not np.isfinite(cur_loss):
                    raise FloatingPointError("non-finite loss during training")
                continue
        best_gnorm = min(best_gnorm, gnorm)
        if gnorm > 4.0 * best_gnorm:  # safeguard against overshooting
            step *= 0.5
            best_gnorm = gnorm
        new_theta = params.theta - step * grad
        if not np.all(np.isfinite(new_theta)):
            step *= 0.5
            continue
        params = params.replace_theta(new_theta)
    return params


def posteriors(params, g, probe_nodes, edge_set=None, *, prop=None) -> np.ndarray:
    """Softmax outputs for `probe_nodes`; each row sums to 1."""
    if prop is None:
        prop = propagate(g, None, edge_set, params.hops)
    rows = np.array([prop.row_of[int(v)] for v in probe_nodes], dtype=np.int64)
    z = prop.x[rows] @ params.weights().T + params.bias()
    return _softmax(z)
