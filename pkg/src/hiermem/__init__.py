"""Hierarchical memory index over long documents.

Build a tree over a document, distill every node into one cached memory
vector bottom-up through a small causal transformer, then answer questions by
routing coarse-to-fine over the tree and conditioning generation on the
retrieved memories instead of raw text.
"""

from .aggregation import AggParams, aggregate, init_agg_params
from .backbone import Backbone, BackboneConfig, load_weights, next_token_ce, save_weights
from .bench import CostReport, cost_model, measure, rouge_l, token_f1
from .gmm import GmmModel, GmmTreeConfig, fit_gmm, induce_hierarchy
from .memory import (
    MemoryCache,
    build_all,
    internal_memory,
    leaf_memory,
    load_cache,
    save_cache,
)
from .router import (
    QueryVector,
    RoutingParams,
    RoutingTrace,
    embed_query,
    generate,
    init_routing_params,
    route,
    score,
    stack_retrieved,
)
from .tokens import ByteTokenizer
from .trainer import (
    GradCheckReport,
    LossWeights,
    QAExample,
    RoutingSupervision,
    Trainer,
    grad_check,
    loss_ae,
    loss_gen,
    loss_lm,
    loss_route,
    loss_sel,
    total_corpus_loss,
    total_qa_loss,
)
from .tree import (
    IngestConfig,
    SemanticTree,
    TreeNode,
    ValidationReport,
    build_tree_from_headings,
    load_tree,
    post_order,
    save_tree,
    segment_unstructured,
    tree_from_json,
    tree_to_json,
    validate_tree,
)

__version__ = "0.1.0"
