"""Hierarchy induction for unstructured corpora.

Chunk memories are clustered bottom-up with a diagonal-covariance Gaussian
mixture fitted by EM; each non-empty cluster becomes an empty-text parent
whose memory is the aggregation of its members, and the procedure repeats on
the parent memories until compression stalls or a depth cap is reached.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .aggregation import AggParams, aggregate, params_hash
from .memory import MemoryCache
from .tokens import ByteTokenizer
from .tree import SemanticTree, TreeNode, validate_tree

logger = logging.getLogger(__name__)


@dataclass
class GmmModel:
    means: np.ndarray        # (K, d)
    variances: np.ndarray    # (K, d), floored
    weights: np.ndarray      # (K,)
    log_likelihoods: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _log_joint(self, X: np.ndarray) -> np.ndarray:
        """log p(x, component) for every point/component pair, (n, K)."""
        diff = X[:, None, :] - self.means[None, :, :]
        log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)
        quad = -0.5 * np.sum(diff * diff / self.variances[None, :, :], axis=2)
        return np.log(self.weights)[None, :] + log_norm[None, :] + quad

    def log_likelihood(self, X: np.ndarray) -> float:
        return float(_logsumexp(self._log_joint(X), axis=1).sum())

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        lj = self._log_joint(X)
        return np.exp(lj - _logsumexp(lj, axis=1)[:, None])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self._log_joint(X), axis=1)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _kmeanspp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            np.sum((X[:, None, :] - np.asarray(centers)[None, :, :]) ** 2, axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        centers.append(X[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def _em_once(
    X: np.ndarray,
    n_components: int,
    rng: np.random.Generator,
    max_iters: int,
    tol: float,
    var_floor: float,
) -> GmmModel:
    n = X.shape[0]
    global_var = np.maximum(X.var(axis=0), var_floor)
    centers = _kmeanspp_centers(X, n_components, rng)

    # hard Euclidean assignment to the seed centers, then a moment-matching
    # start; initializing with the global variance lets sharp noise dimensions
    # drown out well-separated signal dimensions
    labels = np.argmin(
        np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    means = np.empty_like(centers)
    variances = np.empty_like(centers)
    weights = np.empty(n_components)
    for k in range(n_components):
        members = X[labels == k]
        if len(members) == 0:
            means[k] = centers[k]
            variances[k] = global_var
            weights[k] = 1.0 / n
        else:
            means[k] = members.mean(axis=0)
            variances[k] = np.maximum(members.var(axis=0), var_floor)
            weights[k] = len(members) / n
    model = GmmModel(means=means, variances=variances, weights=weights / weights.sum())

    prev_ll = -np.inf
    for _ in range(max_iters):
        resp = model.responsibilities(X)
        counts = resp.sum(axis=0)
        safe = np.maximum(counts, 1e-12)
        model.weights = counts / n
        model.weights = model.weights / model.weights.sum()
        model.means = (resp.T @ X) / safe[:, None]
        diff = X[:, None, :] - model.means[None, :, :]
        var = np.einsum("nk,nkd->kd", resp, diff * diff) / safe[:, None]
        model.variances = np.maximum(var, var_floor)

        ll = model.log_likelihood(X)
        model.log_likelihoods.append(ll)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            model.converged = True
            break
        prev_ll = ll
    return model


def fit_gmm(
    vectors,
    n_components: int,
    max_iters: int = 100,
    seed: int = 0,
    tol: float = 1e-6,
    var_floor: float = 1e-6,
    n_init: int = 4,
) -> GmmModel:
    """EM for a diagonal-covariance mixture, k-means++-style seeding.

    Runs ``n_init`` deterministic restarts and keeps the fit with the best
    final log-likelihood; a single seeding can land both centers in one true
    cluster and strand EM in a local optimum. The winner's recorded history
    is non-decreasing (up to numerical slack).
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected (n, d) input, got shape {X.shape}")
    n, _ = X.shape
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n < n_components:
        raise ValueError(f"cannot fit {n_components} components to {n} points")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")

    if bool((X == X[0]).all()) and n_components > 1:
        warnings.warn("all points identical; falling back to a single component")
        n_components = 1

    rng = np.random.default_rng(seed)
    best: GmmModel | None = None
    for _ in range(n_init):
        model = _em_once(X, n_components, rng, max_iters, tol, var_floor)
        if best is None or model.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = model
    return best


# ---------------------------------------------------------------------------
# recursive hierarchy induction


@dataclass
class GmmTreeConfig:
    n_components: int = 4
    max_depth: int = 4
    min_compression: float = 0.9
    max_iters: int = 100
    seed: int = 0


def induce_hierarchy(
    chunk_texts: list[str],
    chunk_memories: torch.Tensor,
    config: GmmTreeConfig,
    agg_params: AggParams,
    backbone_hash: str = "",
) -> tuple[SemanticTree, MemoryCache]:
    """Build a tree over chunks by recursive clustering of their memories.

    Returns the tree plus a cache holding memories for every node; induced
    parents are empty-text, so their memories are pure child aggregations.
    """
    if len(chunk_texts) < 2:
        raise ValueError("need at least 2 chunks to induce a hierarchy")
    if chunk_memories.shape[0] != len(chunk_texts):
        raise ValueError("one memory per chunk required")
    if any(not t for t in chunk_texts):
        raise ValueError("chunk texts must be non-empty")

    # working representation: entry = (sorted chunk-member ids, memory, children entries)
    level = [
        {"members": (i,), "memory": chunk_memories[i], "text": chunk_texts[i], "children": []}
        for i in range(len(chunk_texts))
    ]
    depth = 0
    while len(level) >= 2 and depth < config.max_depth:
        k = min(config.n_components, len(level))
        X = torch.stack([e["memory"] for e in level]).detach().to(torch.float64).numpy()
        model = fit_gmm(X, k, max_iters=config.max_iters, seed=config.seed + depth)
        labels = model.predict(X)
        groups: dict[int, list[int]] = {}
        for idx, lab in enumerate(labels):
            groups.setdefault(int(lab), []).append(idx)
        clusters = sorted(groups.values(), key=lambda g: min(level[i]["members"][0] for i in g))
        ratio = len(clusters) / len(level)
        if ratio > config.min_compression:
            logger.info("stopping induction at depth %d: compression %.2f", depth, ratio)
            break
        parents = []
        for members in clusters:
            children = [level[i] for i in sorted(members)]
            stack = torch.stack([c["memory"] for c in children])
            memory = aggregate(stack, agg_params, parent_queries=None)
            parents.append(
                {
                    "members": tuple(m for c in children for m in c["members"]),
                    "memory": memory,
                    "text": "",
                    "children": children,
                }
            )
        level = parents
        depth += 1

    root_children = level
    root_stack = torch.stack([e["memory"] for e in root_children])
    root_entry = {
        "members": tuple(m for c in root_children for m in c["members"]),
        "memory": aggregate(root_stack, agg_params, parent_queries=None),
        "text": "",
        "children": root_children,
    }

    # materialize with pre-order ids
    tokenizer = ByteTokenizer()
    nodes: dict[int, TreeNode] = {}
    entries: dict[int, torch.Tensor] = {}
    counter = {"next": 0}

    def emit(entry: dict, parent: int | None, node_depth: int) -> int:
        nid = counter["next"]
        counter["next"] += 1
        node = TreeNode(
            id=nid, text=entry["text"], parent=parent, depth=node_depth
        )
        nodes[nid] = node
        entries[nid] = entry["memory"].detach()
        for child in entry["children"]:
            node.children.append(emit(child, nid, node_depth + 1))
        return nid

    root_id = emit(root_entry, None, 0)
    max_leaf = max(tokenizer.token_len(t) for t in chunk_texts)
    tree = SemanticTree(nodes=nodes, root=root_id, max_leaf_tokens=max_leaf)
    report = validate_tree(tree)
    if not report.ok:
        raise RuntimeError(f"induced tree failed validation:\n{report}")
    cache = MemoryCache(
        entries=entries,
        meta={
            "backbone_hash": backbone_hash,
            "tree_hash": tree.content_hash(),
            "policy": agg_params.policy,
            "agg_hash": params_hash(agg_params),
            "d": int(chunk_memories.shape[1]),
            "built_at": None,
        },
    )
    return tree, cache
