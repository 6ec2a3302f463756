"""Routed-vs-flat prefill cost accounting and QA text metrics.

The analytic model charges layers * (query_len + context_len)^2 * d units for
a prefill; measurements time the same toy backbone on the routed memory
prefix versus the whole document, pinned to one thread for stability.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass

import torch

from .backbone import Backbone, BackboneConfig
from .memory import MemoryCache
from .router import RoutingParams, embed_query, route, stack_retrieved
from .tree import SemanticTree, post_order


@dataclass
class CostReport:
    question: str
    n_doc_tokens: int
    n_q: int
    n_ret: int
    score_evals: int
    flat_model_units: float
    routed_model_units: float
    model_ratio: float
    routed_prefill_s: float
    flat_prefill_s: float | None
    measured_ratio: float | None
    route_s: float
    first_token: int
    flat_measured: bool

    def to_dict(self) -> dict:
        return asdict(self)


def cost_model(n_q: int, length: int, config: BackboneConfig) -> float:
    """Model units for one prefill: layers * (n_q + length)^2 * d."""
    if n_q < 0 or length < 0:
        raise ValueError("token counts must be non-negative")
    return float(config.layers) * float(n_q + length) ** 2 * float(config.d)


def document_tokens(tree: SemanticTree, backbone: Backbone) -> list[int]:
    """All leaf tokens in document order (leaves in post-order are in order)."""
    ids: list[int] = []
    for nid in post_order(tree):
        node = tree.node(nid)
        if node.is_leaf:
            ids.extend(backbone.encode(node.text))
    return ids


def _time_best(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def measure(
    tree: SemanticTree,
    cache: MemoryCache,
    backbone: Backbone,
    questions: list[str],
    params: RoutingParams,
    reps: int = 5,
) -> list[CostReport]:
    """Time routed and flat first-token prefills for each question.

    The timed region covers the forward pass over the already-embedded prefix
    plus the first-token logits and argmax; tokenization, query embedding and
    routing are reported separately. The flat pass runs only when the whole
    document fits the context window; otherwise its cost is model-only.
    """
    doc_ids = document_tokens(tree, backbone)
    n_doc = len(doc_ids)
    reports = []
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for question in questions:
            t0 = time.perf_counter()
            q = embed_query(backbone, question)
            trace = route(tree, cache, q, params)
            retrieved = stack_retrieved(trace, cache)
            route_s = time.perf_counter() - t0

            q_ids = backbone.encode(question)
            routed_prefix = torch.cat(
                [retrieved.to(backbone.dtype), backbone.embed_tokens(q_ids)], dim=0
            )
            first = {"token": -1}

            def routed_once():
                with torch.no_grad():
                    hidden = backbone.forward(routed_prefix)
                    first["token"] = int(torch.argmax(backbone.lm_logits(hidden[-1])))

            routed_s = _time_best(routed_once, reps)

            flat_s = None
            fits = n_doc + len(q_ids) <= backbone.config.ctx
            if fits:
                flat_prefix = torch.cat(
                    [backbone.embed_tokens(doc_ids), backbone.embed_tokens(q_ids)], dim=0
                )

                def flat_once():
                    with torch.no_grad():
                        hidden = backbone.forward(flat_prefix)
                        torch.argmax(backbone.lm_logits(hidden[-1]))

                flat_s = _time_best(flat_once, reps)

            n_ret = retrieved.shape[0]
            flat_units = cost_model(len(q_ids), n_doc, backbone.config)
            routed_units = cost_model(len(q_ids), n_ret, backbone.config)
            reports.append(
                CostReport(
                    question=question,
                    n_doc_tokens=n_doc,
                    n_q=len(q_ids),
                    n_ret=n_ret,
                    score_evals=trace.score_evals,
                    flat_model_units=flat_units,
                    routed_model_units=routed_units,
                    model_ratio=flat_units / routed_units if routed_units else float("inf"),
                    routed_prefill_s=routed_s,
                    flat_prefill_s=flat_s,
                    measured_ratio=(flat_s / routed_s) if flat_s is not None else None,
                    route_s=route_s,
                    first_token=first["token"],
                    flat_measured=fits,
                )
            )
    finally:
        torch.set_num_threads(n_threads)
    return reports


# ---------------------------------------------------------------------------
# text metrics


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F-measure over whitespace tokens.

    Two empty strings score 1.0 by convention; one empty string scores 0.0.
    """
    c, r = candidate.split(), reference.split()
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    lcs = _lcs_len(c, r)
    if lcs == 0:
        return 0.0
    precision = lcs / len(c)
    recall = lcs / len(r)
    return 2.0 * precision * recall / (precision + recall)


def token_f1(candidate: str, reference: str) -> float:
    """Bag-of-tokens F1 (multiset overlap). Empty-vs-empty is 1.0."""
    c, r = Counter(candidate.split()), Counter(reference.split())
    if not c and not r:
        return 1.0
    overlap = sum((c & r).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(c.values())
    recall = overlap / sum(r.values())
    return 2.0 * precision * recall / (precision + recall)
