"""KL distillation of soft decision trees: full-tree baseline and greedy asymmetric growth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tree import (
    CompiledTree,
    DecisionNode,
    FeatureScaling,
    Leaf,
    TreeModel,
    sigmoid,
)

Q_FLOOR = 1e-12
LOGIT_CLIP = 30.0


class DistillError(ValueError):
    pass


class NumericalFault(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class DistillDataset:
    """Standardized features ``x`` (n, d) paired with teacher targets (n, |A|)."""

    x: np.ndarray
    targets: np.ndarray
    scaling: FeatureScaling | None = None
    time_index: np.ndarray | None = None
    feature_names: list | None = None
    action_names: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.x) != len(self.targets):
            raise DistillError("x and targets differ in length")
        if len(self.targets) and (np.any(self.targets < 0)
                                  or np.any(np.abs(self.targets.sum(1) - 1) > 1e-9)):
            raise DistillError("every target must be a probability distribution")

    def __len__(self):
        return len(self.x)

    @property
    def input_dim(self):
        return self.x.shape[1]

    @property
    def action_count(self):
        return self.targets.shape[1]

    def subset(self, idx) -> "DistillDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx], targets=self.targets[idx],
                       time_index=None if self.time_index is None else self.time_index[idx])

    def raw_x(self):
        return self.x if self.scaling is None else self.scaling.unstandardize(self.x)


@dataclass(frozen=True)
class DistillConfig:
    max_decision_nodes: int = 7
    learning_rate: float = 0.05
    epochs: int = 2000
    full_epochs: int = 5000
    temperature_init: float = 10.0
    train_temperature: bool = False
    optimizer: str = "adam"
    seed: int = 0
    leaf_score: str = "sum"
    min_leaf_samples: int = 8
    init_scale: float = 0.01
    full_init_scale: float = 0.01

    def __post_init__(self):
        if self.max_decision_nodes < 1:
            raise DistillError("max_decision_nodes must be >= 1")
        if not (self.learning_rate > 0 and self.temperature_init > 0):
            raise DistillError("learning_rate and temperature_init must be positive")
        if self.epochs < 1 or self.full_epochs < 1:
            raise DistillError("epochs must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise DistillError(f"unknown optimizer {self.optimizer!r}")
        if self.leaf_score not in ("sum", "mean"):
            raise DistillError(f"unknown leaf_score {self.leaf_score!r}")
        if self.min_leaf_samples < 0:
            raise DistillError("min_leaf_samples must be nonnegative")


@dataclass
class ExpansionRecord:
    expansion_index: int
    leaf_id: int
    score_before: float
    loss_after: float
    node_count: int
    depth_of_new_node: int
    tree_loss_before: float = math.nan
    tree_loss_at_expansion: float = math.nan
    tree_loss_after: float = math.nan
    leaf_scores: dict = field(default_factory=dict)


@dataclass
class TrainTrace:
    epoch_losses: list = field(default_factory=list)
    expansions: list = field(default_factory=list)
    stop_reason: str | None = None

    def extend(self, other: "TrainTrace"):
        self.epoch_losses.extend(other.epoch_losses)
        self.expansions.extend(other.expansions)

    @property
    def initial_loss(self):
        return self.epoch_losses[0]

    @property
    def final_loss(self):
        return self.epoch_losses[-1]


TRACE_COLUMNS = ("expansion_index", "leaf_id", "score_before", "loss_after", "node_count",
                 "depth_of_new_node")


def write_trace_csv(trace: TrainTrace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.expansions:
            w.writerow([r.expansion_index, r.leaf_id, repr(r.score_before), repr(r.loss_after),
                        r.node_count, r.depth_of_new_node])
    return Path(path)


# loss and gradients ------------------------------------------------------------

def kl_divergence(p, q) -> float:
    """KL(p || q) with 0 log 0 = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), Q_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def _kl_rows(P, Q):
    Qc = np.maximum(Q, Q_FLOOR)
    logp = np.log(np.where(P > 0, P, 1.0))
    return np.sum(P * (logp - np.log(Qc)), axis=1)


def _neg_entropy_rows(P):
    return np.sum(P * np.log(np.where(P > 0, P, 1.0)), axis=1)


def dataset_loss(tree: TreeModel, data: DistillDataset, start=None) -> float:
    """Mean per-sample KL(target || tree output)."""
    if len(data) == 0:
        raise DistillError("dataset is empty")
    ct = CompiledTree.from_tree(tree, start)
    Q = ct.forward(data.x)[-1]
    return float(np.mean(_kl_rows(data.targets, Q)))


@dataclass
class Gradient:
    weights: dict
    bias: dict
    temperature: dict
    logits: dict


def _loss_and_grads(ct: CompiledTree, X, P, neg_ent):
    lin, p_left, path, q_leaf, Q = ct.forward(X)
    n = len(X)
    ok = Q > Q_FLOOR
    Qc = np.where(ok, Q, Q_FLOOR)
    loss = float(np.mean(neg_ent - np.sum(P * np.log(Qc), axis=1)))
    g = np.where(ok, -P / Qc, 0.0) / n
    G = path.T @ g
    d_logits = q_leaf * (G - np.sum(G * q_leaf, axis=1, keepdims=True))
    ph = path * (g @ q_leaf.T)
    k = len(ct.internal)
    # per node: summed over leaves of its left subtree | right subtree
    under = ph @ ct.side_of.T
    d_s = (1.0 - p_left) * under[:, :k] - p_left * under[:, k:]
    d_lin = d_s * ct.temperature
    return loss, d_lin.T @ X, d_lin.sum(axis=0), np.sum(d_s * lin, axis=0), d_logits


def loss_gradient(tree: TreeModel, data: DistillDataset, start=None) -> Gradient:
    """Analytic gradient of the mean-KL loss with respect to every tree parameter."""
    if len(data) == 0:
        raise DistillError("dataset is empty")
    ct = CompiledTree.from_tree(tree, start)
    _, d_w, d_b, d_a, d_z = _loss_and_grads(ct, data.x, data.targets,
                                            _neg_entropy_rows(data.targets))
    return Gradient(
        {n: d_w[i] for i, n in enumerate(ct.internal)},
        {n: float(d_b[i]) for i, n in enumerate(ct.internal)},
        {n: float(d_a[i]) for i, n in enumerate(ct.internal)},
        {n: d_z[i] for i, n in enumerate(ct.leaves)},
    )


# training ----------------------------------------------------------------------

class _Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def steps(self, grads):
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


class _SGD:
    def __init__(self, shapes, lr):
        self.lr = lr

    def steps(self, grads):
        return [self.lr * g for g in grads]


def train_subtree(tree: TreeModel, data: DistillDataset, cfg: DistillConfig, start=None,
                  trainable=None, epochs=None) -> TrainTrace:
    """Full-batch descent on the subtree under ``start`` (default: root), in place.

    Only nodes in ``trainable`` (default: every node of the subtree) move.
    The loss is the subtree's own output on ``data``, so ancestors play no
    part. The best iterate seen is kept, so the final loss never exceeds
    the initial one.
    """
    if len(data) == 0:
        raise DistillError("cannot train on an empty dataset")
    epochs = cfg.epochs if epochs is None else epochs
    ct = CompiledTree.from_tree(tree, start)
    if trainable is None:
        k_mask = np.ones(len(ct.internal))
        l_mask = np.ones(len(ct.leaves))
    else:
        trainable = set(trainable)
        k_mask = np.array([n in trainable for n in ct.internal], dtype=float)
        l_mask = np.array([n in trainable for n in ct.leaves], dtype=float)
    a_mask = k_mask if cfg.train_temperature else np.zeros_like(k_mask)

    X, P = data.x, data.targets
    neg_ent = _neg_entropy_rows(P)
    params = [ct.weights, ct.bias, ct.temperature, ct.logits]
    shapes = [p.shape for p in params]
    opt = _Adam(shapes, cfg.learning_rate) if cfg.optimizer == "adam" else _SGD(shapes, cfg.learning_rate)

    trace = TrainTrace()
    best_loss, best = math.inf, None
    for _ in range(epochs + 1):
        loss, d_w, d_b, d_a, d_z = _loss_and_grads(ct, X, P, neg_ent)
        if not math.isfinite(loss):
            raise NumericalFault(f"non-finite loss after {len(trace.epoch_losses)} epochs", trace)
        trace.epoch_losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = [p.copy() for p in params]
        if len(trace.epoch_losses) > epochs:
            break
        grads = [d_w * k_mask[:, None], d_b * k_mask, d_a * a_mask, d_z * l_mask[:, None]]
        upd = opt.steps(grads)
        ct.weights -= upd[0]
        ct.bias -= upd[1]
        ct.temperature = np.maximum(ct.temperature - upd[2], 1e-6)
        ct.logits = np.clip(ct.logits - upd[3], -LOGIT_CLIP, LOGIT_CLIP)
        params = [ct.weights, ct.bias, ct.temperature, ct.logits]
    ct.weights, ct.bias, ct.temperature, ct.logits = best
    ct.write_back(tree)
    trace.epoch_losses.append(best_loss)
    return trace


def _mean_logits(targets) -> np.ndarray:
    """Logits of the KL-optimal single distribution, the mean target."""
    m = np.maximum(np.mean(targets, axis=0), Q_FLOOR)
    z = np.log(m)
    return np.clip(z - z.max(), -LOGIT_CLIP, 0.0)


def complete_tree(depth: int, input_dim: int, action_count: int, rng, cfg: DistillConfig,
                  leaf_logits=None, scaling=None) -> TreeModel:
    """Complete binary tree with heap numbering (children of k are 2k+1, 2k+2)."""
    n_int = 2 ** depth - 1
    nodes = {}
    for k in range(n_int):
        w = rng.uniform(-cfg.full_init_scale, cfg.full_init_scale, size=input_dim)
        nodes[k] = DecisionNode(w, 0.0, cfg.temperature_init, 2 * k + 1, 2 * k + 2)
    z = np.zeros(action_count) if leaf_logits is None else leaf_logits
    for k in range(n_int, 2 * n_int + 1):
        nodes[k] = Leaf(np.array(z, dtype=float))
    return TreeModel(nodes, 0, input_dim, action_count, "soft", scaling)


def distill_full(data: DistillDataset, depth: int, cfg: DistillConfig):
    """Baseline: a complete tree of ``depth`` trained with all parameters jointly."""
    if depth < 1:
        raise DistillError("depth must be >= 1")
    if len(data) == 0:
        raise DistillError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    tree = complete_tree(depth, data.input_dim, data.action_count, rng, cfg,
                         _mean_logits(data.targets), data.scaling)
    trace = train_subtree(tree, data, cfg, epochs=cfg.full_epochs)
    return tree.validate(), trace


# asymmetric construction ---------------------------------------------------------

def split_dataset(tree: TreeModel, node_id, data: DistillDataset):
    """Hard partition by the node's gate: left iff route probability >= 0.5.

    Returns index arrays into ``data``.
    """
    node = tree.nodes[node_id]
    p_left = sigmoid(node.temperature * (data.x @ node.weights + node.bias))
    left = p_left >= 0.5
    return np.flatnonzero(left), np.flatnonzero(~left)


def route_to_leaves(tree: TreeModel, data: DistillDataset) -> dict:
    """Send every sample down the hard-gated tree; leaf id -> sample indices."""
    out = {}
    stack = [(tree.root, np.arange(len(data)))]
    while stack:
        nid, idx = stack.pop()
        node = tree.nodes[nid]
        if isinstance(node, Leaf):
            out[nid] = idx
            continue
        li, ri = split_dataset(tree, nid, data.subset(idx))
        stack.append((node.left, idx[li]))
        stack.append((node.right, idx[ri]))
    return out


def leaf_score(tree: TreeModel, leaf_id, data: DistillDataset, cfg: DistillConfig) -> float:
    """Divergence of the leaf's own distribution from the teacher targets routed to it."""
    if len(data) == 0:
        return 0.0
    q = tree.nodes[leaf_id].probs
    kl = _kl_rows(data.targets, np.broadcast_to(q, data.targets.shape))
    return float(kl.sum() if cfg.leaf_score == "sum" else kl.mean())


def leaf_eligible(n_samples: int, cfg: DistillConfig) -> bool:
    return n_samples >= 2 * cfg.min_leaf_samples and n_samples > 0


def select_leaf(scores: dict, counts: dict, cfg: DistillConfig):
    """Eligible leaf with the largest score, ties to the lowest id; None when none is eligible."""
    best, best_score = None, -math.inf
    for lid in sorted(scores):
        if not leaf_eligible(counts[lid], cfg):
            continue
        if scores[lid] > best_score:
            best, best_score = lid, scores[lid]
    return best


def _grow(tree: TreeModel, leaf_id, cfg: DistillConfig, rng) -> TreeModel:
    out = tree.copy()
    parent = out.nodes[leaf_id]
    if not isinstance(parent, Leaf):
        raise DistillError(f"node {leaf_id} is not a leaf")
    left, right = out.next_id(), out.next_id() + 1
    w = rng.uniform(-cfg.init_scale, cfg.init_scale, size=out.input_dim)
    out.nodes[leaf_id] = DecisionNode(w, 0.0, cfg.temperature_init, left, right)
    out.nodes[left] = Leaf(parent.logits.copy())
    out.nodes[right] = Leaf(parent.logits.copy())
    out.invalidate()
    return out


def _train_fragment(tree, leaf_id, data, cfg):
    node = tree.nodes[leaf_id]
    trace = train_subtree(tree, data, cfg, start=leaf_id,
                          trainable={leaf_id, node.left, node.right})
    tree.invalidate()
    return trace


def expand_leaf(tree: TreeModel, leaf_id, data: DistillDataset, cfg: DistillConfig, rng):
    """Replace a leaf with a decision node whose children copy the leaf, then train that fragment.

    The new decision node keeps the leaf's id; ``data`` are the samples
    routed to the leaf. Returns a new tree and the fragment's training
    trace; ``tree`` is not modified.
    """
    if len(data) == 0:
        raise DistillError(f"leaf {leaf_id} has no routed samples")
    out = _grow(tree, leaf_id, cfg, rng)
    return out, _train_fragment(out, leaf_id, data, cfg)


def distill_asymmetric(data: DistillDataset, cfg: DistillConfig):
    """Grow a tree greedily: train the root, then repeatedly expand the worst-fit leaf."""
    n = cfg.max_decision_nodes
    return distill_asymmetric_path(data, cfg, [n])[n]


def distill_asymmetric_path(data: DistillDataset, cfg: DistillConfig, budgets):
    """Run one greedy growth up to ``max(budgets)`` and snapshot the tree at each budget.

    Growth is sequential and deterministic, so each snapshot equals a
    separate run with that budget.
    """
    if len(data) == 0:
        raise DistillError("dataset is empty")
    budgets = sorted(set(int(b) for b in budgets))
    if budgets[0] < 1:
        raise DistillError("budgets must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    tree = TreeModel.stub(data.input_dim, data.action_count, _mean_logits(data.targets),
                          data.scaling)
    trace = TrainTrace()
    snaps = {}
    routed = {tree.root: np.arange(len(data))}
    while tree.n_internal < budgets[-1]:
        subsets = {lid: data.subset(idx) for lid, idx in routed.items()}
        scores = {lid: leaf_score(tree, lid, sub, cfg) for lid, sub in subsets.items()}
        counts = {lid: len(idx) for lid, idx in routed.items()}
        if tree.n_internal == 0:
            chosen = tree.root  # the root is always trained
        else:
            chosen = select_leaf(scores, counts, cfg)
        if chosen is None:
            trace.stop_reason = (f"no eligible leaf (each needs >= {2 * cfg.min_leaf_samples} "
                                 f"samples) at {tree.n_internal} decision nodes")
            break
        before = dataset_loss(tree, data)
        depth = tree.depths()[chosen]
        tree = _grow(tree, chosen, cfg, rng)
        at_expansion = dataset_loss(tree, data)
        frag = _train_fragment(tree, chosen, subsets[chosen], cfg)

        idx = routed.pop(chosen)
        li, ri = split_dataset(tree, chosen, subsets[chosen])
        node = tree.nodes[chosen]
        routed[node.left] = idx[li]
        routed[node.right] = idx[ri]

        trace.epoch_losses.extend(frag.epoch_losses)
        trace.expansions.append(ExpansionRecord(
            expansion_index=len(trace.expansions), leaf_id=chosen, score_before=scores[chosen],
            loss_after=frag.final_loss, node_count=tree.n_internal, depth_of_new_node=depth,
            tree_loss_before=before, tree_loss_at_expansion=at_expansion,
            tree_loss_after=dataset_loss(tree, data), leaf_scores=scores,
        ))
        if tree.n_internal in budgets:
            snaps[tree.n_internal] = (tree.copy().validate(), _copy_trace(trace))
    for b in budgets:
        if b not in snaps:
            snaps[b] = (tree.copy().validate(), _copy_trace(trace))
    return snaps


def _copy_trace(trace):
    return TrainTrace(list(trace.epoch_losses), list(trace.expansions), trace.stop_reason)


# dataset files -----------------------------------------------------------------

def save_dataset(data: DistillDataset, path):
    """Line-delimited JSON: a header record, then one {x (raw), target, t} per sample."""
    raw = data.raw_x()
    scaling = data.scaling or FeatureScaling.identity(data.input_dim)
    with open(path, "w") as fh:
        header = {"kind": "header", "feature_names": data.feature_names,
                  "action_names": data.action_names, "feature_scaling": scaling.to_dict(),
                  "meta": data.meta}
        fh.write(json.dumps(header) + "\n")
        for i in range(len(data)):
            rec = {"x": [float(v) for v in raw[i]], "target": [float(v) for v in data.targets[i]]}
            if data.time_index is not None:
                rec["t"] = int(data.time_index[i])
            fh.write(json.dumps(rec) + "\n")
    return Path(path)


def load_dataset(path) -> DistillDataset:
    header, xs, ts, tidx = None, [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DistillError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if rec.get("kind") == "header":
                header = rec
                continue
            if "x" not in rec or "target" not in rec:
                raise DistillError(f"{path}:{lineno}: record needs 'x' and 'target'")
            xs.append(rec["x"])
            ts.append(rec["target"])
            if "t" in rec:
                tidx.append(rec["t"])
    if header is None:
        raise DistillError(f"{path}: missing header record")
    scaling = FeatureScaling.from_dict(header["feature_scaling"])
    try:
        raw = np.array(xs, dtype=float)
        targets = np.array(ts, dtype=float)
    except ValueError as exc:
        raise DistillError(f"{path}: ragged records") from exc
    if raw.ndim != 2 or raw.shape[1] != len(scaling.means):
        raise DistillError(f"{path}: feature dimension disagrees with header scaling")
    return DistillDataset(
        scaling.standardize(raw), targets, scaling,
        np.array(tidx, dtype=np.int64) if len(tidx) == len(xs) and xs else None,
        header.get("feature_names"), header.get("action_names"), header.get("meta", {}))
