"""Bottom-up construction of one memory vector per tree node, plus cache IO."""

from __future__ import annotations

import json
import logging
import struct
import warnings

import numpy as np
import torch

from .aggregation import AggParams, aggregate, params_hash
from .backbone import Backbone, ContextOverflowError
from .tree import SemanticTree, post_order

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"H2MC"
CACHE_VERSION = 1


class CacheFormatError(RuntimeError):
    """Cache file is malformed (bad magic, version, or footer)."""


class CacheTruncatedError(CacheFormatError):
    """Cache file ends before the declared record count."""


class CacheMismatchWarning(UserWarning):
    """Cache metadata does not match the tree/backbone it is used with."""


class MissingMemoryError(RuntimeError):
    """A child memory was requested before it was built."""


class MemoryCache:
    def __init__(self, entries: dict[int, torch.Tensor] | None = None, meta: dict | None = None):
        self.entries: dict[int, torch.Tensor] = entries or {}
        self.meta: dict = meta or {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.entries

    def __getitem__(self, node_id: int) -> torch.Tensor:
        try:
            return self.entries[node_id]
        except KeyError:
            raise MissingMemoryError(f"no memory cached for node {node_id}") from None

    def matrix(self, node_ids) -> torch.Tensor:
        return torch.stack([self[i] for i in node_ids], dim=0)


# ---------------------------------------------------------------------------
# per-node construction


def leaf_memory(backbone: Backbone, text: str) -> torch.Tensor:
    """Memory of a leaf: readout over [write marker; text tokens; read marker]."""
    ids = backbone.encode(text)
    if not ids:
        raise ValueError("leaf text is empty")
    if len(ids) + 2 > backbone.config.ctx:
        raise ContextOverflowError(
            f"leaf of {len(ids)} tokens does not fit context {backbone.config.ctx}"
        )
    seq = torch.cat(
        [
            backbone.write_emb.unsqueeze(0),
            backbone.embed_tokens(ids),
            backbone.read_emb.unsqueeze(0),
        ],
        dim=0,
    )
    return backbone.readout(seq)


def parent_queries(backbone: Backbone, agg_params: AggParams, text: str) -> torch.Tensor | None:
    """Query tokens for parent-conditioned policies: first-K hidden states of
    the parent's own text, or None (fallback query) when the text is empty."""
    if agg_params.policy not in ("cross_attn", "gat"):
        return None
    ids = backbone.encode(text)
    if not ids:
        return None
    hidden = backbone.forward(backbone.embed_tokens(ids))
    return hidden[: max(1, min(agg_params.num_queries, hidden.shape[0]))]


def internal_memory(
    backbone: Backbone,
    agg_params: AggParams,
    text: str,
    child_stack: torch.Tensor,
) -> torch.Tensor:
    """Memory of an internal node from its children's memories and local text.

    The child stack is first pooled to a single vector. When the node has no
    local text the pooled vector is the memory directly; otherwise the model
    reads [write marker; pooled vector; text tokens; read marker].
    """
    queries = parent_queries(backbone, agg_params, text)
    pooled = aggregate(child_stack, agg_params, parent_queries=queries)
    ids = backbone.encode(text)
    if not ids:
        return pooled
    if len(ids) + 3 > backbone.config.ctx:
        raise ContextOverflowError(
            f"internal node of {len(ids)} tokens does not fit context {backbone.config.ctx}"
        )
    seq = torch.cat(
        [
            backbone.write_emb.unsqueeze(0),
            pooled.unsqueeze(0),
            backbone.embed_tokens(ids),
            backbone.read_emb.unsqueeze(0),
        ],
        dim=0,
    )
    return backbone.readout(seq)


def build_all(
    tree: SemanticTree,
    backbone: Backbone,
    agg_params: AggParams,
    grad: bool = False,
    built_at: float | None = None,
) -> MemoryCache:
    """Fill the cache for every node, children strictly before parents."""
    cache = MemoryCache(
        meta={
            "backbone_hash": backbone.weights_hash(),
            "tree_hash": tree.content_hash(),
            "policy": agg_params.policy,
            "agg_hash": params_hash(agg_params),
            "d": backbone.config.d,
            "built_at": built_at,
        }
    )
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        for nid in post_order(tree):
            node = tree.node(nid)
            if node.is_leaf:
                cache.entries[nid] = leaf_memory(backbone, node.text)
            else:
                stack = cache.matrix(node.children)
                cache.entries[nid] = internal_memory(backbone, agg_params, node.text, stack)
    return cache


# ---------------------------------------------------------------------------
# cache file: magic, version u32, d u32, count u64,
# records of (node-id u64, d little-endian f32), JSON meta footer


def save_cache(cache: MemoryCache, path) -> None:
    if not cache.entries:
        raise ValueError("refusing to save an empty cache")
    d = next(iter(cache.entries.values())).shape[0]
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIQ", CACHE_VERSION, d, len(cache.entries)))
        for nid in sorted(cache.entries):
            vec = cache.entries[nid].detach().to(torch.float32).numpy().astype("<f4")
            if vec.shape != (d,):
                raise ValueError(f"entry {nid} has shape {vec.shape}, expected ({d},)")
            fh.write(struct.pack("<Q", nid))
            fh.write(vec.tobytes())
        fh.write(json.dumps(cache.meta, sort_keys=True).encode("utf-8"))


def load_cache(
    path,
    tree: SemanticTree | None = None,
    backbone: Backbone | None = None,
    agg_params: AggParams | None = None,
) -> MemoryCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {blob[:4]!r}")
    if len(blob) < 20:
        raise CacheTruncatedError("file ends inside the header")
    version, d, count = struct.unpack_from("<IIQ", blob, 4)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    record = 8 + 4 * d
    body_end = 20 + record * count
    if len(blob) < body_end:
        raise CacheTruncatedError(
            f"expected {count} records ({body_end} bytes), file has {len(blob)}"
        )
    entries: dict[int, torch.Tensor] = {}
    off = 20
    for _ in range(count):
        (nid,) = struct.unpack_from("<Q", blob, off)
        vec = np.frombuffer(blob, dtype="<f4", count=d, offset=off + 8).copy()
        entries[nid] = torch.from_numpy(vec)
        off += record
    try:
        meta = json.loads(blob[body_end:].decode("utf-8")) if len(blob) > body_end else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheFormatError(f"unreadable meta footer: {exc}") from exc

    cache = MemoryCache(entries=entries, meta=meta)
    if tree is not None and meta.get("tree_hash") not in (None, tree.content_hash()):
        warnings.warn("cache was built for a different tree", CacheMismatchWarning)
    if backbone is not None and meta.get("backbone_hash") not in (None, backbone.weights_hash()):
        warnings.warn("cache was built with different backbone weights", CacheMismatchWarning)
    if agg_params is not None and meta.get("agg_hash") not in (None, params_hash(agg_params)):
        warnings.warn("cache was built with different aggregation parameters", CacheMismatchWarning)
    return cache
