import math

import numpy as np
import pytest

from asymddt.distill import DistillDataset
from asymddt.tree import DecisionNode, Leaf, TreeModel


def random_tree(rng, n_internal, d=4, a=5, weight_scale=1.0, logit_scale=1.0):
    """Random proper binary tree grown by splitting uniformly chosen leaves."""
    nodes = {0: Leaf(rng.normal(0, logit_scale, a))}
    leaves = [0]
    next_id = 1
    for _ in range(n_internal):
        lid = leaves.pop(int(rng.integers(len(leaves))))
        nodes[lid] = DecisionNode(rng.normal(0, weight_scale, d), float(rng.normal()),
                                  float(rng.uniform(0.5, 2.0)), next_id, next_id + 1)
        nodes[next_id] = Leaf(rng.normal(0, logit_scale, a))
        nodes[next_id + 1] = Leaf(rng.normal(0, logit_scale, a))
        leaves += [next_id, next_id + 1]
        next_id += 2
    return TreeModel(nodes, 0, d, a).validate()


def random_dataset(rng, n, d=4, a=5):
    x = rng.normal(size=(n, d))
    t = rng.dirichlet(np.ones(a), size=n)
    return DistillDataset(x, t)


def enumerate_paths(tree, x):
    """Independent recursive oracle: sum over leaves of path probability times leaf softmax."""

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    def walk(nid, prob):
        node = tree.nodes[nid]
        if isinstance(node, Leaf):
            e = [math.exp(v) for v in node.logits]
            s = sum(e)
            return [prob * v / s for v in e]
        z = node.temperature * (sum(wi * xi for wi, xi in zip(node.weights, x)) + node.bias)
        pl = sig(z)
        left = walk(node.left, prob * pl)
        right = walk(node.right, prob * (1.0 - pl))
        return [l + r for l, r in zip(left, right)]

    return np.array(walk(tree.root, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
