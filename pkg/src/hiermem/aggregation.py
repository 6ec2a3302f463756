"""Policies that compress a stack of child memory vectors into one vector.

All five policies take the (c, d) matrix of child memories in document order.
The cross-attention and graph-attention variants additionally condition on
parent query tokens derived from the parent's own text.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

POLICIES = ("mean", "self_attn", "cross_attn", "gat", "parent_token")


@dataclass
class AggParams:
    policy: str
    d: int
    d_h: int = 32
    tau: float = 1.0
    leaky_slope: float = 0.01
    num_queries: int = 4
    w_query: nn.Parameter | None = None   # (d, d_h)
    w_key: nn.Parameter | None = None     # (d, d_h)
    w_value: nn.Parameter | None = None   # (d, d)
    w_child: nn.Parameter | None = None   # (d, d_h)
    w_parent: nn.Parameter | None = None  # (d, d_h)
    attn_parent: nn.Parameter | None = None  # (d_h,)
    attn_child: nn.Parameter | None = None   # (d_h,)
    parent_token: nn.Parameter | None = None  # (d,)
    fallback_query: nn.Parameter | None = None  # (d,) used when parent text is empty

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown aggregation policy {self.policy!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def trainable(self) -> dict[str, nn.Parameter]:
        out = {}
        for name in (
            "w_query",
            "w_key",
            "w_value",
            "w_child",
            "w_parent",
            "attn_parent",
            "attn_child",
            "parent_token",
            "fallback_query",
        ):
            p = getattr(self, name)
            if p is not None:
                out[f"agg.{name}"] = p
        return out


def init_agg_params(
    policy: str,
    d: int,
    d_h: int = 32,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    tau: float = 1.0,
    num_queries: int = 4,
) -> AggParams:
    """Deterministically initialize the parameter set a policy needs."""
    gen = torch.Generator().manual_seed(seed)

    def normal(*shape: int, std: float = 0.2) -> nn.Parameter:
        t = torch.empty(*shape, dtype=dtype)
        t.normal_(0.0, std, generator=gen)
        return nn.Parameter(t)

    params = AggParams(policy=policy, d=d, d_h=d_h, tau=tau, num_queries=num_queries)
    if policy in ("self_attn", "cross_attn", "parent_token"):
        params.w_query = normal(d, d_h)
        params.w_key = normal(d, d_h)
    if policy == "parent_token":
        params.w_value = normal(d, d)
        params.parent_token = normal(d)
    if policy == "gat":
        params.w_child = normal(d, d_h)
        params.w_parent = normal(d, d_h)
        params.attn_parent = normal(d_h)
        params.attn_child = normal(d_h)
        params.w_value = normal(d, d)
    if policy in ("cross_attn", "gat"):
        params.fallback_query = normal(d)
    return params


def _check_stack(child_stack: torch.Tensor) -> torch.Tensor:
    if child_stack.ndim != 2 or child_stack.shape[0] < 1:
        raise ValueError(f"child stack must be (c>=1, d), got {tuple(child_stack.shape)}")
    return child_stack


def agg_mean(child_stack: torch.Tensor) -> torch.Tensor:
    M = _check_stack(child_stack)
    # accumulate in f64 so identical rows average back to themselves exactly
    return (M.to(torch.float64).mean(dim=0)).to(M.dtype)


def agg_self_attn(child_stack: torch.Tensor, params: AggParams) -> torch.Tensor:
    M = _check_stack(child_stack)
    q = M @ params.w_query
    k = M @ params.w_key
    att = F.softmax(q @ k.T / math.sqrt(params.d_h), dim=-1)
    w = att.sum(dim=0)  # column sums: total attention each child receives
    w = w / w.sum()
    return w @ M


def agg_cross_attn(
    child_stack: torch.Tensor, params: AggParams, parent_queries: torch.Tensor
) -> torch.Tensor:
    M = _check_stack(child_stack)
    if parent_queries is None or parent_queries.ndim != 2 or parent_queries.shape[0] < 1:
        raise ValueError("cross-attention aggregation needs at least one parent query token")
    q = parent_queries @ params.w_query
    k = M @ params.w_key
    scores = F.softmax(q @ k.T / math.sqrt(params.d_h), dim=-1)
    w = scores.mean(dim=0)
    return w @ M


def agg_gat(
    child_stack: torch.Tensor, params: AggParams, parent_queries: torch.Tensor
) -> torch.Tensor:
    M = _check_stack(child_stack)
    if params.tau <= 0:
        raise ValueError("tau must be positive")
    if parent_queries is None or parent_queries.ndim != 2 or parent_queries.shape[0] < 1:
        raise ValueError("graph-attention aggregation needs parent query tokens")
    q_bar = parent_queries.mean(dim=0)
    keys = M @ params.w_child
    p = q_bar @ params.w_parent
    logits = F.leaky_relu(
        params.attn_parent @ p + keys @ params.attn_child, negative_slope=params.leaky_slope
    )
    alpha = F.softmax(logits / params.tau, dim=-1)
    return alpha @ (M @ params.w_value.T)


def agg_parent_token(child_stack: torch.Tensor, params: AggParams) -> torch.Tensor:
    M = _check_stack(child_stack)
    if params.parent_token is None:
        raise ValueError("parent-token aggregation needs a learned parent token")
    full = torch.cat([params.parent_token.unsqueeze(0), M], dim=0)
    q = full @ params.w_query
    k = full @ params.w_key
    v = full @ params.w_value.T
    att = F.softmax(q @ k.T / math.sqrt(params.d_h), dim=-1)
    return (att @ v)[0]


def aggregate(
    child_stack: torch.Tensor,
    params: AggParams,
    parent_queries: torch.Tensor | None = None,
) -> torch.Tensor:
    """Dispatch on the configured policy; returns a d-vector."""
    if params.policy == "mean":
        return agg_mean(child_stack)
    if params.policy == "self_attn":
        return agg_self_attn(child_stack, params)
    if params.policy == "cross_attn":
        if parent_queries is None:
            parent_queries = params.fallback_query.unsqueeze(0)
        return agg_cross_attn(child_stack, params, parent_queries)
    if params.policy == "gat":
        if parent_queries is None:
            parent_queries = params.fallback_query.unsqueeze(0)
        return agg_gat(child_stack, params, parent_queries)
    if params.policy == "parent_token":
        return agg_parent_token(child_stack, params)
    raise ValueError(f"unknown aggregation policy {params.policy!r}")


def params_hash(params: AggParams) -> str:
    digest = hashlib.sha256()
    digest.update(f"{params.policy}:{params.d}:{params.d_h}:{params.tau}".encode())
    for name, p in sorted(params.trainable().items()):
        digest.update(name.encode())
        digest.update(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return digest.hexdigest()
