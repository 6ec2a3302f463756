"""Training objectives for the lightweight modules around the frozen backbone.

Trainable pieces: the write/read marker vectors, the routing projections and
the aggregation parameters. The discrete top-k traversal is never
differentiated through; routing supervision flows through a temperature
softmax over child scores instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .aggregation import AggParams
from .backbone import Backbone, next_token_ce
from .memory import MemoryCache, build_all
from .router import QueryVector, RoutingParams, embed_query, route
from .tokens import RECON_PROMPT
from .tree import SemanticTree


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries recent history for diagnosis."""


@dataclass
class LossWeights:
    lam_ae: float = 0.1
    lam_route: float = 1.0
    lam_sel: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        for name in ("lam_ae", "lam_route", "lam_sel"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class QAExample:
    question: str
    answer: str
    gold_leaves: list[int] = field(default_factory=list)


@dataclass
class RoutingSupervision:
    """Per-parent gold children, derived from gold leaves by propagating
    upward: a node is gold if any leaf below it (or itself) is gold."""

    gold_sets: dict[int, list[int]]

    @property
    def parents(self) -> list[int]:
        return sorted(self.gold_sets)

    def gold_set(self, parent: int) -> list[int]:
        return self.gold_sets[parent]

    def gold_child(self, parent: int) -> int:
        return min(self.gold_sets[parent])

    @classmethod
    def from_gold_leaves(cls, tree: SemanticTree, gold_leaves) -> "RoutingSupervision":
        closure: set[int] = set()
        for leaf in gold_leaves:
            if leaf not in tree.nodes:
                raise ValueError(f"gold node {leaf} is not in the tree")
            closure.add(leaf)
            closure.update(tree.ancestors(leaf))
        gold_sets: dict[int, list[int]] = {}
        for nid in closure:
            golds = [c for c in tree.children(nid) if c in closure]
            if golds:
                gold_sets[nid] = golds
        if not gold_sets:
            raise ValueError("supervision is empty: no gold leaf below an internal node")
        return cls(gold_sets)

    def validate_against(self, tree: SemanticTree) -> None:
        for parent, golds in self.gold_sets.items():
            if not golds:
                raise ValueError(f"empty gold set at parent {parent}")
            children = set(tree.children(parent))
            for g in golds:
                if g not in children:
                    raise ValueError(f"gold child {g} is not a child of {parent}")


# ---------------------------------------------------------------------------
# token-level losses


def loss_lm(backbone: Backbone, memory: torch.Tensor, token_ids) -> torch.Tensor:
    """Next-token CE over a node's text with its memory as an embedding prefix."""
    if not token_ids:
        return torch.zeros((), dtype=torch.float64)
    seq = torch.cat([memory.unsqueeze(0), backbone.embed_tokens(token_ids)], dim=0)
    hidden = backbone.forward(seq)
    return next_token_ce(backbone.lm_logits(hidden[: len(token_ids)]), token_ids)


def loss_ae(backbone: Backbone, memory: torch.Tensor, token_ids, prompt=RECON_PROMPT) -> torch.Tensor:
    """Reconstruction CE: decode the node text from its memory plus a fixed
    sentinel prompt."""
    if not token_ids:
        return torch.zeros((), dtype=torch.float64)
    n_prompt = len(prompt)
    seq = torch.cat(
        [
            memory.unsqueeze(0),
            backbone.embed_tokens(list(prompt)),
            backbone.embed_tokens(token_ids),
        ],
        dim=0,
    )
    hidden = backbone.forward(seq)
    rows = hidden[n_prompt : n_prompt + len(token_ids)]
    return next_token_ce(backbone.lm_logits(rows), token_ids)


def loss_gen(
    backbone: Backbone, retrieved: torch.Tensor, question_ids, answer_ids
) -> torch.Tensor:
    """Teacher-forced CE over the answer under the generation layout."""
    if not answer_ids:
        raise ValueError("answer is empty")
    if not question_ids:
        raise ValueError("question is empty")
    r = retrieved.shape[0]
    seq = torch.cat(
        [
            retrieved.to(backbone.dtype),
            backbone.embed_tokens(question_ids),
            backbone.embed_tokens(answer_ids),
        ],
        dim=0,
    )
    hidden = backbone.forward(seq)
    start = r + len(question_ids) - 1
    rows = hidden[start : start + len(answer_ids)]
    return next_token_ce(backbone.lm_logits(rows), answer_ids)


# ---------------------------------------------------------------------------
# routing losses over per-parent child scores


def child_scores(
    tree: SemanticTree,
    memories,
    q: QueryVector,
    params: RoutingParams,
    parents,
) -> dict[int, torch.Tensor]:
    """Score vectors over each parent's children, kept on the autograd graph."""
    q_proj = q.vector @ params.w_query
    out: dict[int, torch.Tensor] = {}
    for parent in parents:
        children = tree.children(parent)
        if not children:
            raise ValueError(f"parent {parent} has no children to score")
        stack = torch.stack([memories[c] for c in children], dim=0)
        out[parent] = (stack @ params.w_key) @ q_proj / math.sqrt(params.d_h)
    return out


def loss_route(
    scores_by_parent: dict[int, torch.Tensor],
    tree: SemanticTree,
    supervision: RoutingSupervision,
    tau: float,
) -> torch.Tensor:
    """Sum over supervised parents of CE of the gold child under softmax(s/tau)."""
    supervision.validate_against(tree)
    total = torch.zeros((), dtype=torch.float64)
    for parent in supervision.parents:
        children = tree.children(parent)
        gold = supervision.gold_child(parent)
        idx = children.index(gold)
        logp = F.log_softmax(scores_by_parent[parent] / tau, dim=-1)
        total = total - logp[idx].to(torch.float64)
    return total


def loss_sel(
    scores_by_parent: dict[int, torch.Tensor],
    tree: SemanticTree,
    supervision: RoutingSupervision,
    tau: float,
) -> torch.Tensor:
    """Sum over supervised parents of -log total softmax mass on the gold set."""
    supervision.validate_against(tree)
    total = torch.zeros((), dtype=torch.float64)
    for parent in supervision.parents:
        children = tree.children(parent)
        golds = supervision.gold_set(parent)
        if not golds:
            raise ValueError(f"empty gold set at parent {parent}")
        idx = torch.as_tensor([children.index(g) for g in golds], dtype=torch.long)
        logp = F.log_softmax(scores_by_parent[parent] / tau, dim=-1)
        total = total - torch.logsumexp(logp[idx], dim=0).to(torch.float64)
    return total


# ---------------------------------------------------------------------------
# combined objectives


def total_corpus_loss(
    tree: SemanticTree,
    backbone: Backbone,
    agg_params: AggParams,
    weights: LossWeights,
    memories: dict[int, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Sum over nodes of LM loss plus weighted reconstruction loss.

    Memories are rebuilt on the autograd graph unless a prebuilt (graph or
    fixed) mapping is supplied.
    """
    if memories is None:
        memories = build_all(tree, backbone, agg_params, grad=True).entries
    total = torch.zeros((), dtype=torch.float64)
    for nid, node in tree.nodes.items():
        ids = backbone.encode(node.text)
        if not ids:
            continue
        total = total + loss_lm(backbone, memories[nid], ids)
        if weights.lam_ae > 0:
            total = total + weights.lam_ae * loss_ae(backbone, memories[nid], ids)
    return total, memories


def total_qa_loss(
    tree: SemanticTree,
    backbone: Backbone,
    agg_params: AggParams,
    routing: RoutingParams,
    example: QAExample,
    weights: LossWeights,
    memories: dict[int, torch.Tensor] | None = None,
    enc_nodes: str = "leaves",
) -> tuple[torch.Tensor, dict[str, float]]:
    """Generation loss plus routing/selection supervision plus reconstruction.

    Retrieval for the generation term uses the hard traversal; gradients reach
    the retrieved memory values but never the discrete selection itself.
    """
    if memories is None:
        memories = build_all(tree, backbone, agg_params, grad=True).entries
    q = embed_query(backbone, example.question)
    trace = route(tree, MemoryCache(entries=memories), q, routing)
    retrieved = torch.stack([memories[i] for i in trace.retrieved], dim=0)
    l_gen = loss_gen(
        backbone, retrieved, backbone.encode(example.question), backbone.encode(example.answer)
    )

    supervision = RoutingSupervision.from_gold_leaves(tree, example.gold_leaves)
    scores = child_scores(tree, memories, q, routing, supervision.parents)
    l_route = loss_route(scores, tree, supervision, weights.tau)
    l_sel = loss_sel(scores, tree, supervision, weights.tau)

    l_ae = torch.zeros((), dtype=torch.float64)
    if weights.lam_ae > 0:
        if enc_nodes == "leaves":
            enc_ids = [n.id for n in tree.nodes.values() if n.is_leaf]
        elif enc_nodes == "all":
            enc_ids = list(tree.nodes)
        else:
            raise ValueError(f"enc_nodes must be 'leaves' or 'all', got {enc_nodes!r}")
        for nid in enc_ids:
            ids = backbone.encode(tree.node(nid).text)
            if ids:
                l_ae = l_ae + loss_ae(backbone, memories[nid], ids)

    total = l_gen + weights.lam_route * l_route + weights.lam_sel * l_sel + weights.lam_ae * l_ae
    parts = {
        "gen": float(l_gen.detach()),
        "route": float(l_route.detach()),
        "sel": float(l_sel.detach()),
        "ae": float(l_ae.detach()),
        "total": float(total.detach()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# evaluation helpers


def routing_accuracy(
    tree: SemanticTree,
    memories,
    q: QueryVector,
    routing: RoutingParams,
    supervision: RoutingSupervision,
) -> float:
    """Fraction of supervised parents whose top-scoring child is gold."""
    with torch.no_grad():
        scores = child_scores(tree, memories, q, routing, supervision.parents)
    hits = 0
    for parent in supervision.parents:
        children = tree.children(parent)
        best = children[int(torch.argmax(scores[parent]))]
        hits += best == supervision.gold_child(parent)
    return hits / len(supervision.parents)


def selection_recall(
    tree: SemanticTree,
    memories,
    q: QueryVector,
    routing: RoutingParams,
    supervision: RoutingSupervision,
) -> float:
    """Mean per-parent recall of the gold set under hard top-k selection."""
    with torch.no_grad():
        scores = child_scores(tree, memories, q, routing, supervision.parents)
    recalls = []
    for parent in supervision.parents:
        children = tree.children(parent)
        ranked = sorted(
            zip((-scores[parent]).tolist(), children), key=lambda t: (t[0], t[1])
        )
        kept = {c for _, c in ranked[: routing.k]}
        golds = set(supervision.gold_set(parent))
        recalls.append(len(kept & golds) / len(golds))
    return sum(recalls) / len(recalls)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """First-order updates (SGD with momentum) on the lightweight parameters."""

    def __init__(
        self,
        tree: SemanticTree,
        backbone: Backbone,
        agg_params: AggParams,
        routing: RoutingParams,
        weights: LossWeights | None = None,
        mode: str = "qa",
        lr: float = 1e-3,
        momentum: float = 0.9,
        fixed_memories: dict[int, torch.Tensor] | None = None,
        enc_nodes: str = "leaves",
    ):
        if mode not in ("corpus", "qa"):
            raise ValueError(f"mode must be 'corpus' or 'qa', got {mode!r}")
        self.tree = tree
        self.backbone = backbone
        self.agg_params = agg_params
        self.routing = routing
        self.weights = weights or LossWeights()
        self.mode = mode
        self.fixed_memories = fixed_memories
        self.enc_nodes = enc_nodes
        self.trainable: dict[str, torch.Tensor] = {
            "backbone.write_emb": backbone.write_emb,
            "backbone.read_emb": backbone.read_emb,
            **routing.trainable(),
            **agg_params.trainable(),
        }
        self.opt = torch.optim.SGD(list(self.trainable.values()), lr=lr, momentum=momentum)
        self.history: list[float] = []

    def step(self, batch: list[QAExample] | None = None) -> float:
        self.opt.zero_grad()
        if self.mode == "corpus":
            loss, _ = total_corpus_loss(
                self.tree, self.backbone, self.agg_params, self.weights,
                memories=self.fixed_memories,
            )
        else:
            if not batch:
                raise ValueError("qa mode needs a batch of examples")
            loss = torch.zeros((), dtype=torch.float64)
            for example in batch:
                item, _ = total_qa_loss(
                    self.tree,
                    self.backbone,
                    self.agg_params,
                    self.routing,
                    example,
                    self.weights,
                    memories=self.fixed_memories,
                    enc_nodes=self.enc_nodes,
                )
                loss = loss + item
            loss = loss / len(batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"loss became {value} at step {len(self.history)}; "
                f"recent history: {self.history[-5:]}"
            )
        loss.backward()
        self.opt.step()
        self.history.append(value)
        return value


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tol: float
    finite: bool = True

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error < self.tol

    def __str__(self) -> str:
        lines = [f"{'OK' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e}"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(
    named_params: dict[str, torch.Tensor],
    loss_fn,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of loss_fn against central differences.

    Perturbs every coordinate of every tensor in place (restoring it), so the
    instance should be small and built in float64.
    """
    params = list(named_params.values())
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    per_param: dict[str, float] = {}
    finite = True
    for (name, p), g in zip(named_params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            finite = False
            per_param[name] = float("inf")
            continue
        flat = p.detach().reshape(-1)
        g_flat = g.detach().reshape(-1)
        worst = 0.0
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(g_flat[i])
            denom = max(abs(a), abs(fd))
            err = abs(a - fd) / denom if denom > 1e-6 else abs(a - fd)
            worst = max(worst, err)
        per_param[name] = worst
    return GradCheckReport(per_param=per_param, tol=tol, finite=finite)
