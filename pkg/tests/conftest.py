from __future__ import annotations

import random

import pytest
import torch

from hiermem import Backbone, BackboneConfig, SemanticTree, TreeNode


@pytest.fixture(scope="session")
def small_backbone() -> Backbone:
    return Backbone(BackboneConfig(d=32, layers=2, heads=2, ctx=128, seed=7))


@pytest.fixture(scope="session")
def tiny_backbone() -> Backbone:
    return Backbone(BackboneConfig(d=16, layers=1, heads=2, ctx=64, seed=3))


def make_tree(layout: dict[int, tuple[str, list[int]]], root: int = 0, max_leaf_tokens: int = 512) -> SemanticTree:
    """Build a tree from {id: (text, children)}; depths are derived."""
    nodes = {nid: TreeNode(id=nid, text=text, children=list(children)) for nid, (text, children) in layout.items()}
    for nid, node in nodes.items():
        for c in node.children:
            nodes[c].parent = nid

    def set_depth(nid: int, depth: int) -> None:
        nodes[nid].depth = depth
        for c in nodes[nid].children:
            set_depth(c, depth + 1)

    set_depth(root, 0)
    return SemanticTree(nodes=nodes, root=root, max_leaf_tokens=max_leaf_tokens)


def random_tree(
    rng: random.Random,
    n_nodes: int,
    max_children: int = 4,
    empty_internal_prob: float = 0.3,
    words: int = 3,
) -> SemanticTree:
    """Random rooted tree with non-empty leaf texts; internal text may be empty."""
    parents = {0: None}
    for nid in range(1, n_nodes):
        parents[nid] = rng.randrange(nid)
    children: dict[int, list[int]] = {nid: [] for nid in range(n_nodes)}
    for nid in range(1, n_nodes):
        children[parents[nid]].append(nid)
    # cap branching by re-rooting surplus children onto their first sibling
    for nid in range(n_nodes):
        while len(children[nid]) > max_children:
            moved = children[nid].pop()
            target = children[nid][0]
            parents[moved] = target
            children[target].append(moved)

    nodes = {}
    for nid in range(n_nodes):
        is_leaf = not children[nid]
        if is_leaf or rng.random() > empty_internal_prob:
            text = " ".join(rng.choice(["alpha", "beta", "gamma", "delta", "omega"]) for _ in range(words))
        else:
            text = ""
        nodes[nid] = TreeNode(id=nid, text=text, parent=parents[nid], children=sorted(children[nid]))

    def set_depth(nid: int, depth: int) -> None:
        nodes[nid].depth = depth
        for c in nodes[nid].children:
            set_depth(c, depth + 1)

    set_depth(0, 0)
    return SemanticTree(nodes=nodes, root=0, max_leaf_tokens=512)


