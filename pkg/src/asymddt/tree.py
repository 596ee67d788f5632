"""Asymmetric soft decision trees: structure, inference, hardening, I/O."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOFT = "soft"
HARDENED = "hardened"


class TreeError(ValueError):
    pass


class DimensionError(TreeError):
    pass


class TreeModeError(TreeError):
    pass


class HardeningError(TreeError):
    pass


class TreeValidationError(TreeError):
    pass


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(s):
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(s):
    s = np.asarray(s, dtype=float)
    return np.minimum(s, 0.0) - np.log1p(np.exp(-np.abs(s)))


@dataclass(frozen=True)
class FeatureScaling:
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray) -> "FeatureScaling":
        raw = np.asarray(raw, dtype=float)
        std = raw.std(axis=0)
        # Constant columns keep unit scale.
        std = np.where(std > 1e-12, std, 1.0)
        return cls(raw.mean(axis=0), std)

    @classmethod
    def identity(cls, d: int) -> "FeatureScaling":
        return cls(np.zeros(d), np.ones(d))

    def standardize(self, raw):
        return (np.asarray(raw, dtype=float) - self.means) / self.stds

    def unstandardize(self, z):
        return np.asarray(z, dtype=float) * self.stds + self.means

    def to_dict(self):
        return {"means": [float(v) for v in self.means], "stds": [float(v) for v in self.stds]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["means"], dtype=float), np.array(d["stds"], dtype=float))

    def __eq__(self, other):
        return (isinstance(other, FeatureScaling) and np.array_equal(self.means, other.means)
                and np.array_equal(self.stds, other.stds))


@dataclass(frozen=True)
class HardSplit:
    feature: int
    threshold: float
    left_if_geq: bool

    def goes_left(self, x) -> bool:
        v = x[self.feature]
        return bool(v >= self.threshold) if self.left_if_geq else bool(v <= self.threshold)


@dataclass
class DecisionNode:
    weights: np.ndarray
    bias: float
    temperature: float
    left: int
    right: int
    hard: HardSplit | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not self.temperature > 0:
            raise TreeValidationError("temperature must be positive")


@dataclass
class Leaf:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def route_prob(node: DecisionNode, x) -> float:
    """Probability of taking the left branch, sigmoid(alpha * (x . w + b))."""
    x = np.asarray(x, dtype=float)
    if x.shape != node.weights.shape:
        raise DimensionError(f"input has shape {x.shape}, node weights {node.weights.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionError("input contains non-finite values")
    if not node.temperature > 0:
        raise TreeValidationError("temperature must be positive")
    return float(sigmoid(node.temperature * (x @ node.weights + node.bias)))


@dataclass
class TreeModel:
    nodes: dict
    root: int
    input_dim: int
    action_count: int
    mode: str = SOFT
    scaling: FeatureScaling | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def stub(cls, input_dim: int, action_count: int, logits=None, scaling=None) -> "TreeModel":
        """A single-leaf tree."""
        logits = np.zeros(action_count) if logits is None else logits
        return cls({0: Leaf(logits)}, 0, input_dim, action_count, SOFT, scaling)

    # structure -------------------------------------------------------------
    def is_leaf(self, nid) -> bool:
        return isinstance(self.nodes[nid], Leaf)

    def preorder(self, start=None):
        out, stack = [], [self.root if start is None else start]
        while stack:
            nid = stack.pop()
            out.append(nid)
            node = self.nodes[nid]
            if isinstance(node, DecisionNode):
                stack.append(node.right)
                stack.append(node.left)
        return out

    def internal_ids(self, start=None):
        return [n for n in self.preorder(start) if not self.is_leaf(n)]

    def leaf_ids(self, start=None):
        return [n for n in self.preorder(start) if self.is_leaf(n)]

    @property
    def n_internal(self) -> int:
        return len(self.internal_ids())

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids())

    def depths(self) -> dict:
        out = {self.root: 0}
        for nid in self.preorder():
            node = self.nodes[nid]
            if isinstance(node, DecisionNode):
                out[node.left] = out[nid] + 1
                out[node.right] = out[nid] + 1
        return out

    @property
    def max_depth(self) -> int:
        return max(self.depths().values())

    def parent_map(self) -> dict:
        parents = {}
        for nid, node in self.nodes.items():
            if isinstance(node, DecisionNode):
                parents[node.left] = nid
                parents[node.right] = nid
        return parents

    def next_id(self) -> int:
        return max(self.nodes) + 1

    def validate(self):
        """Check the proper-binary-tree and dimension invariants."""
        seen = set()
        stack = [self.root]
        if self.root not in self.nodes:
            raise TreeValidationError(f"root {self.root} missing")
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise TreeValidationError(f"node {nid} reachable more than once")
            seen.add(nid)
            node = self.nodes.get(nid)
            if node is None:
                raise TreeValidationError(f"dangling child reference {nid}")
            if isinstance(node, DecisionNode):
                if node.weights.shape != (self.input_dim,):
                    raise TreeValidationError(f"node {nid}: weights length != input_dim")
                if not (np.all(np.isfinite(node.weights)) and np.isfinite(node.bias)):
                    raise TreeValidationError(f"node {nid}: non-finite parameters")
                if self.mode == HARDENED and node.hard is None:
                    raise TreeValidationError(f"node {nid}: hardened tree lacks split test")
                stack.extend((node.left, node.right))
            else:
                if node.logits.shape != (self.action_count,):
                    raise TreeValidationError(f"leaf {nid}: logits length != action_count")
                if not np.all(np.isfinite(node.logits)):
                    raise TreeValidationError(f"leaf {nid}: non-finite logits")
        if seen != set(self.nodes):
            raise TreeValidationError(f"unreachable nodes {sorted(set(self.nodes) - seen)}")
        n_int = sum(isinstance(self.nodes[n], DecisionNode) for n in seen)
        if len(seen) - n_int != n_int + 1:
            raise TreeValidationError("leaf count must be internal count + 1")
        return self

    def copy(self) -> "TreeModel":
        return TreeModel(copy.deepcopy(self.nodes), self.root, self.input_dim,
                         self.action_count, self.mode, self.scaling)

    def invalidate(self):
        self._cache.clear()

    def __eq__(self, other):
        if not isinstance(other, TreeModel):
            return NotImplemented
        if (self.root, self.input_dim, self.action_count, self.mode) != (
                other.root, other.input_dim, other.action_count, other.mode):
            return False
        if self.scaling != other.scaling or set(self.nodes) != set(other.nodes):
            return False
        for nid, a in self.nodes.items():
            b = other.nodes[nid]
            if type(a) is not type(b):
                return False
            if isinstance(a, Leaf):
                if not np.array_equal(a.logits, b.logits):
                    return False
            elif not (np.array_equal(a.weights, b.weights) and a.bias == b.bias
                      and a.temperature == b.temperature and a.left == b.left
                      and a.right == b.right and a.hard == b.hard):
                return False
        return True


@dataclass
class CompiledTree:
    """Array view of the subtree under one node, used for batched inference and training.

    ``left_of[l, k]`` is 1 when leaf ``l`` lies under the left child of
    internal node ``k`` (``right_of`` likewise).
    """

    internal: list
    leaves: list
    weights: np.ndarray
    bias: np.ndarray
    temperature: np.ndarray
    logits: np.ndarray
    left_of: np.ndarray
    right_of: np.ndarray
    left_code: np.ndarray
    right_code: np.ndarray
    root_code: int

    @classmethod
    def from_tree(cls, tree: TreeModel, start=None) -> "CompiledTree":
        order = tree.preorder(start)
        internal = [n for n in order if not tree.is_leaf(n)]
        leaves = [n for n in order if tree.is_leaf(n)]
        kpos = {n: i for i, n in enumerate(internal)}
        lpos = {n: i for i, n in enumerate(leaves)}
        left_of = np.zeros((len(leaves), len(internal)))
        right_of = np.zeros((len(leaves), len(internal)))

        def mark(nid, k, mat):
            for leaf in tree.leaf_ids(nid):
                mat[lpos[leaf], k] = 1.0

        def code(nid):
            return kpos[nid] if nid in kpos else -1 - lpos[nid]

        for n in internal:
            node = tree.nodes[n]
            mark(node.left, kpos[n], left_of)
            mark(node.right, kpos[n], right_of)
        d = tree.input_dim
        return cls(
            internal, leaves,
            np.array([tree.nodes[n].weights for n in internal]).reshape(len(internal), d),
            np.array([tree.nodes[n].bias for n in internal], dtype=float),
            np.array([tree.nodes[n].temperature for n in internal], dtype=float),
            np.array([tree.nodes[n].logits for n in leaves]).reshape(len(leaves), tree.action_count),
            left_of, right_of,
            np.array([code(tree.nodes[n].left) for n in internal], dtype=np.int64),
            np.array([code(tree.nodes[n].right) for n in internal], dtype=np.int64),
            code(order[0]),
        )

    def write_back(self, tree: TreeModel):
        for i, n in enumerate(self.internal):
            node = tree.nodes[n]
            node.weights = self.weights[i].copy()
            node.bias = float(self.bias[i])
            node.temperature = float(self.temperature[i])
        for i, n in enumerate(self.leaves):
            tree.nodes[n].logits = self.logits[i].copy()
        tree.invalidate()

    @property
    def side_of(self) -> np.ndarray:
        """(2K, L) stack of ``left_of.T`` over ``right_of.T``."""
        m = getattr(self, "_side_of", None)
        if m is None or m.shape != (2 * len(self.internal), len(self.leaves)):
            m = self._side_of = np.vstack([self.left_of.T, self.right_of.T])
        return m

    def forward(self, X):
        """Return (pre-activations, left probs, leaf path probs, leaf dists, mixture)."""
        X = np.asarray(X, dtype=float)
        lin = X @ self.weights.T + self.bias
        s = self.temperature * lin
        log_left = log_sigmoid(s)
        p_left = np.exp(log_left)
        path = np.exp(np.hstack([log_left, log_left - s]) @ self.side_of)
        q_leaf = softmax(self.logits, axis=1)
        return lin, p_left, path, q_leaf, path @ q_leaf


def _check_x(tree: TreeModel, X):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != tree.input_dim:
        raise DimensionError(f"feature dimension {X.shape[-1]} != tree input_dim {tree.input_dim}")
    if not np.all(np.isfinite(X)):
        raise DimensionError("input contains non-finite values")
    return X


def _compiled(tree: TreeModel) -> CompiledTree:
    ct = tree._cache.get("compiled")
    if ct is None:
        ct = tree._cache["compiled"] = CompiledTree.from_tree(tree)
    return ct


def predict_soft_batch(tree: TreeModel, X) -> np.ndarray:
    if tree.mode != SOFT:
        raise TreeModeError("predict_soft needs a soft tree")
    X = np.atleast_2d(_check_x(tree, X))
    return _compiled(tree).forward(X)[-1]


def predict_soft(tree: TreeModel, x) -> np.ndarray:
    """Mixture of leaf distributions weighted by root-to-leaf path probability."""
    return predict_soft_batch(tree, np.asarray(x, dtype=float)[None, :])[0]


def predict_hard(tree: TreeModel, x):
    """Route deterministically to one leaf; returns (leaf id, leaf distribution)."""
    if tree.mode != HARDENED:
        raise TreeModeError("predict_hard needs a hardened tree")
    x = _check_x(tree, x)
    nid = tree.root
    node = tree.nodes[nid]
    while isinstance(node, DecisionNode):
        nid = node.left if node.hard.goes_left(x) else node.right
        node = tree.nodes[nid]
    return nid, node.probs


def predict_hard_batch(tree: TreeModel, X) -> np.ndarray:
    X = np.atleast_2d(_check_x(tree, X))
    return np.array([predict_hard(tree, x)[1] for x in X])


def predict(tree: TreeModel, X) -> np.ndarray:
    """Batch prediction in whatever mode the tree is in."""
    if tree.mode == SOFT:
        return predict_soft_batch(tree, X)
    return predict_hard_batch(tree, X)


def dominant_split(node: DecisionNode, nid=None) -> HardSplit:
    mags = np.abs(node.weights)
    if not np.any(mags > 0):
        raise HardeningError(f"node {nid}: all weights are zero, cannot pick a feature")
    j = int(np.argmax(mags))  # first maximum, so ties go to the lowest index
    w = float(node.weights[j])
    return HardSplit(j, -node.bias / w, w > 0)


def harden(tree: TreeModel) -> TreeModel:
    """Convert every decision node to an axis-aligned test on its largest-|w| feature."""
    if tree.mode != SOFT:
        raise TreeModeError("harden needs a soft tree")
    out = tree.copy()
    for nid in out.internal_ids():
        node = out.nodes[nid]
        node.hard = dominant_split(node, nid)
    out.mode = HARDENED
    return out


# serialization ---------------------------------------------------------------

FORMAT_VERSION = 1


def serialize_tree(tree: TreeModel) -> dict:
    nodes = []
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        if isinstance(node, Leaf):
            nodes.append({"id": nid, "kind": "leaf", "logits": [float(v) for v in node.logits]})
        else:
            rec = {"id": nid, "kind": "internal", "weights": [float(v) for v in node.weights],
                   "bias": float(node.bias), "temperature": float(node.temperature),
                   "left": node.left, "right": node.right}
            if node.hard is not None:
                rec["hard"] = {"feature": node.hard.feature,
                               "threshold": float(node.hard.threshold),
                               "left_if_geq": node.hard.left_if_geq}
            nodes.append(rec)
    scaling = None if tree.scaling is None else tree.scaling.to_dict()
    return {"format_version": FORMAT_VERSION, "input_dim": tree.input_dim,
            "action_count": tree.action_count, "mode": tree.mode, "root": tree.root,
            "feature_scaling": scaling, "nodes": nodes}


def _need(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise TreeValidationError(f"{path}: missing field '{key}'")
    return obj[key]


def deserialize_tree(doc: dict) -> TreeModel:
    d = int(_need(doc, "input_dim", "$"))
    a = int(_need(doc, "action_count", "$"))
    mode = _need(doc, "mode", "$")
    if mode not in (SOFT, HARDENED):
        raise TreeValidationError(f"$.mode: unknown mode {mode!r}")
    fs = doc.get("feature_scaling")
    scaling = None
    if fs is not None:
        scaling = FeatureScaling.from_dict(fs)
        if scaling.means.shape != (d,) or scaling.stds.shape != (d,):
            raise TreeValidationError("$.feature_scaling: length != input_dim")
    nodes = {}
    for i, rec in enumerate(_need(doc, "nodes", "$")):
        path = f"$.nodes[{i}]"
        nid = int(_need(rec, "id", path))
        if nid in nodes:
            raise TreeValidationError(f"{path}: duplicate id {nid}")
        kind = _need(rec, "kind", path)
        if kind == "leaf":
            logits = np.array(_need(rec, "logits", path), dtype=float)
            if logits.shape != (a,):
                raise TreeValidationError(f"{path}.logits: length != action_count")
            nodes[nid] = Leaf(logits)
        elif kind == "internal":
            if ("left" in rec) != ("right" in rec) or "left" not in rec:
                raise TreeValidationError(f"{path}: internal node must list both children")
            w = np.array(_need(rec, "weights", path), dtype=float)
            if w.shape != (d,):
                raise TreeValidationError(f"{path}.weights: length != input_dim")
            hard = None
            if rec.get("hard") is not None:
                h = rec["hard"]
                hard = HardSplit(int(_need(h, "feature", path + ".hard")),
                                 float(_need(h, "threshold", path + ".hard")),
                                 bool(_need(h, "left_if_geq", path + ".hard")))
            nodes[nid] = DecisionNode(w, float(_need(rec, "bias", path)),
                                      float(_need(rec, "temperature", path)),
                                      int(rec["left"]), int(rec["right"]), hard)
        else:
            raise TreeValidationError(f"{path}.kind: unknown kind {kind!r}")
    if not nodes:
        raise TreeValidationError("$.nodes: empty")
    root = int(doc.get("root", min(nodes)))
    return TreeModel(nodes, root, d, a, mode, scaling).validate()


def save_tree(tree: TreeModel, path):
    Path(path).write_text(json.dumps(serialize_tree(tree), indent=1))
    return Path(path)


def load_tree(path) -> TreeModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TreeValidationError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    return deserialize_tree(doc)


# DOT export --------------------------------------------------------------------

def _fmt(v):
    return f"{v:.3g}"


def export_dot(tree: TreeModel, feature_names, action_names, display_scale=None) -> str:
    """Render a tree as a Graphviz digraph.

    Thresholds are shown in unstandardized units (times ``display_scale``
    per feature when given). Soft trees are drawn with the dominant-feature
    rule that hardening would produce and labelled as approximate.
    """
    if len(feature_names) != tree.input_dim:
        raise TreeError(f"{len(feature_names)} feature names for input_dim {tree.input_dim}")
    if len(action_names) != tree.action_count:
        raise TreeError(f"{len(action_names)} action names for {tree.action_count} actions")
    scaling = tree.scaling or FeatureScaling.identity(tree.input_dim)
    scale = np.ones(tree.input_dim) if display_scale is None else np.asarray(display_scale, float)
    soft = tree.mode == SOFT
    lines = ["digraph tree {", "  node [fontname=\"Helvetica\"];"]
    if soft:
        lines.append('  label="approximate (dominant-feature) rendering of a soft tree";')
    for nid in tree.preorder():
        node = tree.nodes[nid]
        if isinstance(node, Leaf):
            p = node.probs
            k = int(np.argmax(p))
            lines.append(f'  n{nid} [shape=box, label="{action_names[k]}\\np={p[k]:.2f}"];')
            continue
        split = dominant_split(node, nid) if soft else node.hard
        j = split.feature
        thr = (split.threshold * scaling.stds[j] + scaling.means[j]) * scale[j]
        op = "≥" if split.left_if_geq else "≤"
        lines.append(f'  n{nid} [shape=ellipse, label="{feature_names[j]} {op} {_fmt(thr)}"];')
        lines.append(f'  n{nid} -> n{node.left} [label="true"];')
        lines.append(f'  n{nid} -> n{node.right} [label="false"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
