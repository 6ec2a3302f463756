"""Command-line entry points: build-tree, memorize, ask, train, gmm-tree, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import torch

from . import aggregation, bench, gmm, memory, router, trainer
from .backbone import Backbone, BackboneConfig, load_extras, load_weights, save_weights
from .tree import (
    IngestConfig,
    build_tree_from_headings,
    load_tree,
    save_tree,
    segment_unstructured,
    tree_from_json,
    validate_tree,
)

logger = logging.getLogger(__name__)

# fixed offsets so one --seed determines every parameter group
AGG_SEED_OFFSET = 1
ROUTER_SEED_OFFSET = 2


def _add_backbone_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ctx", type=int, default=512)
    p.add_argument("--d-h", type=int, default=32, help="projection head dim")
    p.add_argument("--weights", default=None, help="checkpoint path; created if missing")


def _apply_extras(named: dict, extras: dict) -> None:
    with torch.no_grad():
        for name, param in named.items():
            if name not in extras:
                continue
            if tuple(extras[name].shape) != tuple(param.shape):
                logger.warning(
                    "checkpoint tensor %s has shape %s but the requested dims give %s; "
                    "keeping the seed-derived value (check --d-h / --policy)",
                    name, tuple(extras[name].shape), tuple(param.shape),
                )
                continue
            param.copy_(extras[name])


def _load_stack(args, with_router: bool = False):
    """Backbone plus pooling (and optionally routing) parameters.

    When --weights names an existing checkpoint, everything is restored from
    it; otherwise parameters derive from --seed and, if --weights was given,
    the freshly initialized state is persisted there.
    """
    extras: dict = {}
    from_file = bool(args.weights) and os.path.exists(args.weights)
    if from_file:
        backbone = load_weights(args.weights)
        extras = load_extras(args.weights)
    else:
        config = BackboneConfig(
            d=args.d, layers=args.layers, heads=args.heads, ctx=args.ctx, seed=args.seed
        )
        backbone = Backbone(config)
    d = backbone.config.d
    agg_params = aggregation.init_agg_params(
        args.policy, d=d, d_h=args.d_h, seed=args.seed + AGG_SEED_OFFSET
    )
    _apply_extras(agg_params.trainable(), extras)
    routing = None
    if with_router:
        routing = router.init_routing_params(
            d=d,
            d_h=args.d_h,
            seed=args.seed + ROUTER_SEED_OFFSET,
            k=args.k,
            max_depth=args.max_depth,
            budget=args.budget,
        )
        _apply_extras(routing.trainable(), extras)
    if args.weights and not from_file:
        stored = dict(agg_params.trainable())
        if routing is not None:
            stored.update(routing.trainable())
        save_weights(backbone, args.weights, extras=stored)
    return backbone, agg_params, routing


def _cmd_build_tree(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        raw = fh.read()
    if args.format == "md":
        tree = build_tree_from_headings(
            raw,
            IngestConfig(
                max_leaf_tokens=args.max_leaf_tokens, min_paragraphs=args.min_paragraphs
            ),
        )
    elif args.format == "json":
        tree = tree_from_json(json.loads(raw), max_leaf_tokens=args.max_leaf_tokens)
        report = validate_tree(tree)
        if not report.ok:
            print(report, file=sys.stderr)
            return 1
    else:
        tree = segment_unstructured(
            raw, args.max_leaf_tokens, min_paragraphs=args.min_paragraphs
        )
    save_tree(tree, args.out)
    leaves = len(tree.leaves())
    print(f"wrote {args.out}: {len(tree)} nodes ({leaves} leaves), height {tree.height()}")
    return 0


def _cmd_memorize(args) -> int:
    tree = load_tree(args.tree)
    backbone, agg_params, _ = _load_stack(args)
    built_at = time.time() if args.stamp else None
    cache = memory.build_all(tree, backbone, agg_params, built_at=built_at)
    memory.save_cache(cache, args.out)
    print(f"wrote {args.out}: {len(cache)} memories, policy {args.policy}")
    return 0


def _cmd_ask(args) -> int:
    tree = load_tree(args.tree)
    backbone, agg_params, params = _load_stack(args, with_router=True)
    cache = memory.load_cache(args.cache, tree=tree, backbone=backbone, agg_params=agg_params)
    q = router.embed_query(backbone, args.question)
    trace = router.route(tree, cache, q, params)
    retrieved = router.stack_retrieved(trace, cache, tree=tree, leaves_only=args.leaves_only)
    tokens = router.generate(backbone, retrieved, args.question, args.max_new_tokens)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            json.dump(trace.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")
    if args.out_tokens:
        with open(args.out_tokens, "w", encoding="utf-8") as fh:
            json.dump(tokens, fh)
            fh.write("\n")
    print(f"retrieved {len(trace.retrieved)} nodes over {len(trace.levels)} levels")
    print(f"tokens: {tokens}")
    print(f"answer: {backbone.decode(tokens)!r}")
    return 0


def _cmd_train(args) -> int:
    tree = load_tree(args.tree)
    backbone, agg_params, params = _load_stack(args, with_router=True)
    weights = trainer.LossWeights(
        lam_ae=args.lambda_ae, lam_route=args.lambda_r, lam_sel=args.lambda_s, tau=args.tau
    )
    batch = None
    if args.mode == "qa":
        if not args.qa:
            print("qa mode needs --qa examples.jsonl", file=sys.stderr)
            return 1
        batch = []
        with open(args.qa, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    batch.append(
                        trainer.QAExample(
                            question=obj["question"],
                            answer=obj["answer"],
                            gold_leaves=obj["gold_leaves"],
                        )
                    )
    t = trainer.Trainer(
        tree, backbone, agg_params, params, weights=weights, mode=args.mode,
        lr=args.lr, momentum=args.momentum,
    )
    for step in range(args.steps):
        value = t.step(batch)
        if step % max(1, args.steps // 10) == 0:
            print(f"step {step}: loss {value:.4f}")
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            json.dump({"loss": t.history}, fh)
            fh.write("\n")
    if args.save_weights:
        stored = dict(agg_params.trainable())
        stored.update(params.trainable())
        save_weights(backbone, args.save_weights, extras=stored)
        print(f"saved trained parameters to {args.save_weights}")
    print(f"final loss {t.history[-1]:.4f}")
    return 0


def _cmd_gmm_tree(args) -> int:
    texts = []
    with open(args.chunks, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                texts.append(json.loads(line)["text"])
    backbone, agg_params, _ = _load_stack(args)
    with torch.no_grad():
        memories = torch.stack([memory.leaf_memory(backbone, t) for t in texts])
    config = gmm.GmmTreeConfig(
        n_components=args.k_g, max_depth=args.max_depth, seed=args.seed,
        min_compression=args.min_compression,
    )
    tree, cache = gmm.induce_hierarchy(
        texts, memories, config, agg_params, backbone_hash=backbone.weights_hash()
    )
    save_tree(tree, args.tree_out)
    memory.save_cache(cache, args.cache_out)
    print(
        f"induced {len(tree)} nodes over height {tree.height()} "
        f"from {len(texts)} chunks; wrote {args.tree_out}, {args.cache_out}"
    )
    return 0


def _cmd_bench(args) -> int:
    tree = load_tree(args.tree)
    backbone, agg_params, params = _load_stack(args, with_router=True)
    cache = memory.load_cache(args.cache, tree=tree, backbone=backbone, agg_params=agg_params)
    questions = []
    with open(args.questions, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                questions.append(json.loads(line)["question"])
    reports = bench.measure(tree, cache, backbone, questions, params, reps=args.reps)
    payload = [r.to_dict() for r in reports]
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    for r in reports:
        measured = f"{r.measured_ratio:.1f}x" if r.measured_ratio else "model-only"
        print(
            f"N={r.n_doc_tokens} n_ret={r.n_ret} evals={r.score_evals} "
            f"model={r.model_ratio:.1f}x measured={measured}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermem")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tree", help="parse a document into a tree")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["md", "json", "text"], default="md")
    p.add_argument("--max-leaf-tokens", type=int, default=512)
    p.add_argument("--min-paragraphs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_tree)

    p = sub.add_parser("memorize", help="build the per-node memory cache")
    p.add_argument("--tree", required=True)
    p.add_argument("--policy", choices=list(aggregation.POLICIES), default="mean")
    p.add_argument("--out", required=True)
    p.add_argument("--stamp", action="store_true", help="record wall-clock build time")
    _add_backbone_args(p)
    p.set_defaults(func=_cmd_memorize)

    p = sub.add_parser("ask", help="route a question and generate")
    p.add_argument("--tree", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--policy", choices=list(aggregation.POLICIES), default="mean")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--leaves-only", action="store_true")
    p.add_argument("--trace", default=None, help="write the routing trace as JSON")
    p.add_argument("--out-tokens", default=None, help="write generated token ids as JSON")
    _add_backbone_args(p)
    p.set_defaults(func=_cmd_ask)

    p = sub.add_parser("train", help="train the lightweight modules")
    p.add_argument("--tree", required=True)
    p.add_argument("--mode", choices=["corpus", "qa"], default="corpus")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lambda-r", type=float, default=1.0)
    p.add_argument("--lambda-s", type=float, default=1.0)
    p.add_argument("--lambda-ae", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--policy", choices=list(aggregation.POLICIES), default="mean")
    p.add_argument("--qa", default=None, help="jsonl with question/answer/gold_leaves")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--log", default=None, help="write the loss curve as JSON")
    p.add_argument("--save-weights", default=None, help="write trained parameters here")
    _add_backbone_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gmm-tree", help="induce a hierarchy by recursive clustering")
    p.add_argument("--chunks", required=True, help="jsonl with a text field per chunk")
    p.add_argument("--cache-out", required=True)
    p.add_argument("--tree-out", required=True)
    p.add_argument("--k-g", type=int, default=4)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--min-compression", type=float, default=0.9)
    p.add_argument("--policy", choices=list(aggregation.POLICIES), default="mean")
    _add_backbone_args(p)
    p.set_defaults(func=_cmd_gmm_tree)

    p = sub.add_parser("bench", help="routed vs flat prefill comparison")
    p.add_argument("--tree", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--questions", required=True, help="jsonl with a question field")
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=list(aggregation.POLICIES), default="mean")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    _add_backbone_args(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
