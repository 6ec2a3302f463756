"""Coarse-to-fine query routing over the tree and memory-conditioned decoding.

Traversal expands level by level from the root, keeps the k best-scoring
children of every expanded parent, and stops at leaves, at the depth cap, or
when the retrieved set would exceed its budget. Generation conditions the
backbone on the stacked retrieved memories instead of raw document text.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import Backbone, ContextOverflowError
from .memory import MemoryCache
from .tree import SemanticTree


@dataclass
class RoutingParams:
    w_query: nn.Parameter  # (d, d_h)
    w_key: nn.Parameter    # (d, d_h)
    d_h: int
    k: int = 2
    max_depth: int | None = None  # None: no cap beyond the tree itself
    budget: int = 64
    tau: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def trainable(self) -> dict[str, nn.Parameter]:
        return {"router.w_query": self.w_query, "router.w_key": self.w_key}


def init_routing_params(
    d: int,
    d_h: int = 32,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    **kwargs,
) -> RoutingParams:
    gen = torch.Generator().manual_seed(seed)

    def normal(*shape: int) -> nn.Parameter:
        t = torch.empty(*shape, dtype=dtype)
        t.normal_(0.0, 0.2, generator=gen)
        return nn.Parameter(t)

    return RoutingParams(w_query=normal(d, d_h), w_key=normal(d, d_h), d_h=d_h, **kwargs)


@dataclass
class QueryVector:
    vector: torch.Tensor
    n_tokens_used: int
    question: str


@dataclass
class RoutingTrace:
    levels: list[list[int]]
    scored: list[tuple[int, int, float]]  # (parent, child, score)
    selections: dict[int, list[int]]      # parent -> children kept
    retrieved: list[int]                  # level-major, id-ascending: the M_ret row order
    expanded: list[int]
    budget: int
    budget_hit: bool = False

    @property
    def score_evals(self) -> int:
        return len(self.scored)

    def retrieved_set(self) -> set[int]:
        return set(self.retrieved)

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "scored": [[p, c, s] for p, c, s in self.scored],
            "selections": {str(p): sel for p, sel in self.selections.items()},
            "retrieved": self.retrieved,
            "expanded": self.expanded,
            "budget": self.budget,
            "budget_hit": self.budget_hit,
            "score_evals": self.score_evals,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoutingTrace":
        return cls(
            levels=[list(l) for l in obj["levels"]],
            scored=[(p, c, float(s)) for p, c, s in obj["scored"]],
            selections={int(p): list(sel) for p, sel in obj["selections"].items()},
            retrieved=list(obj["retrieved"]),
            expanded=list(obj["expanded"]),
            budget=obj["budget"],
            budget_hit=obj.get("budget_hit", False),
        )


def embed_query(backbone: Backbone, question: str) -> QueryVector:
    """Summarize a question into one vector via the write/read markers.

    Only the first half of the question tokens feed the summary (at least
    one token), mirroring how node memories are built.
    """
    ids = backbone.encode(question)
    if not ids:
        raise ValueError("question is empty")
    n_q = max(1, len(ids) // 2)
    seq = torch.cat(
        [
            backbone.write_emb.unsqueeze(0),
            backbone.embed_tokens(ids[:n_q]),
            backbone.read_emb.unsqueeze(0),
        ],
        dim=0,
    )
    return QueryVector(vector=backbone.readout(seq), n_tokens_used=n_q, question=question)


def score(q: QueryVector, memory: torch.Tensor, params: RoutingParams) -> torch.Tensor:
    """Scaled dot product between projected query and projected memory."""
    return (q.vector @ params.w_query) @ (memory @ params.w_key) / math.sqrt(params.d_h)


def route(
    tree: SemanticTree,
    cache: MemoryCache,
    q: QueryVector,
    params: RoutingParams,
) -> RoutingTrace:
    """Level-wise top-k traversal; all bookkeeping lands in the trace."""
    max_depth = params.max_depth if params.max_depth is not None else tree.height()
    trace = RoutingTrace(
        levels=[[tree.root]],
        scored=[],
        selections={},
        retrieved=[tree.root],
        expanded=[],
        budget=params.budget,
        budget_hit=False,
    )
    frontier = [tree.root]
    depth = 0
    with torch.no_grad():
        while frontier and depth < max_depth:
            room = params.budget - len(trace.retrieved)
            if room <= 0:
                trace.budget_hit = any(tree.children(p) for p in frontier)
                break
            candidates: list[tuple[float, int]] = []  # (score, child)
            for parent in sorted(frontier):
                children = tree.children(parent)
                if not children:
                    continue
                trace.expanded.append(parent)
                ranked = []
                for child in children:
                    s = float(score(q, cache[child], params))
                    trace.scored.append((parent, child, s))
                    ranked.append((s, child))
                ranked.sort(key=lambda t: (-t[0], t[1]))
                kept = ranked[: params.k]
                trace.selections[parent] = [c for _, c in kept]
                candidates.extend(kept)
            if not candidates:
                break
            candidates.sort(key=lambda t: (-t[0], t[1]))
            if len(candidates) > room:
                candidates = candidates[:room]
                trace.budget_hit = True
            level = sorted(c for _, c in candidates)
            trace.levels.append(level)
            trace.retrieved.extend(level)
            frontier = [] if trace.budget_hit else level
            depth += 1
    return trace


def stack_retrieved(
    trace: RoutingTrace,
    cache: MemoryCache,
    tree: SemanticTree | None = None,
    leaves_only: bool = False,
) -> torch.Tensor:
    """Stack retrieved memories level-major, id-ascending within a level.

    ``leaves_only`` drops internal-node rows (an experimentation variant, not
    the default behaviour); it falls back to the full set when no leaf was
    retrieved so the generator always has something to condition on.
    """
    ids = trace.retrieved
    if leaves_only:
        if tree is None:
            raise ValueError("leaves_only filtering needs the tree")
        ids = [i for i in ids if tree.node(i).is_leaf] or ids
    return cache.matrix(ids)


def generate(
    backbone: Backbone,
    retrieved: torch.Tensor,
    question: str,
    max_new_tokens: int,
    stop_token: int | None = None,
) -> list[int]:
    """Greedy decoding conditioned on [retrieved memories; question tokens]."""
    q_ids = backbone.encode(question)
    n_prefix = retrieved.shape[0] + len(q_ids)
    if n_prefix + max_new_tokens > backbone.config.ctx:
        raise ContextOverflowError(
            f"{n_prefix} prefix + {max_new_tokens} new tokens exceeds context "
            f"{backbone.config.ctx}"
        )
    if n_prefix == 0:
        raise ValueError("nothing to condition on")
    out: list[int] = []
    with torch.no_grad():
        seq = torch.cat([retrieved.to(backbone.dtype), backbone.embed_tokens(q_ids)], dim=0)
        for _ in range(max_new_tokens):
            hidden = backbone.forward(seq)
            logits = backbone.lm_logits(hidden[-1])
            nxt = int(torch.argmax(logits))
            out.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
            seq = torch.cat([seq, backbone.embed_tokens([nxt])], dim=0)
    return out
