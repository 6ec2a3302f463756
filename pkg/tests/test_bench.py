from __future__ import annotations

import pytest
import torch

from hiermem import (
    Backbone,
    BackboneConfig,
    build_all,
    cost_model,
    init_agg_params,
    init_routing_params,
    measure,
    rouge_l,
    token_f1,
)
from hiermem.bench import document_tokens

from conftest import make_tree


# ---------------------------------------------------------------------------
# analytic cost model


def test_cost_model_zero():
    config = BackboneConfig(d=64, layers=2, heads=2, ctx=512, seed=0)
    assert cost_model(0, 0, config) == 0.0


def test_cost_model_reference_ratio():
    """Frozen arithmetic: ((16+4096)/(16+64))^2 = 51.4^2 = 2641.96."""
    config = BackboneConfig(d=64, layers=2, heads=2, ctx=512, seed=0)
    ratio = cost_model(16, 4096, config) / cost_model(16, 64, config)
    assert ratio == pytest.approx((4112 / 80) ** 2, rel=1e-12)
    assert ratio == pytest.approx(2641.96, abs=1e-9)


def test_cost_model_quadratic_dominance():
    config = BackboneConfig(d=32, layers=2, heads=2, ctx=512, seed=0)
    n_q, length = 4, 4096
    ratio = cost_model(n_q, 2 * length, config) / cost_model(n_q, length, config)
    assert 3.9 < ratio < 4.0


def test_cost_model_monotone():
    config = BackboneConfig(d=32, layers=2, heads=2, ctx=512, seed=0)
    assert cost_model(8, 100, config) < cost_model(9, 100, config)
    assert cost_model(8, 100, config) < cost_model(8, 101, config)


def test_cost_model_rejects_negative():
    config = BackboneConfig(d=32, layers=2, heads=2, ctx=512, seed=0)
    with pytest.raises(ValueError):
        cost_model(-1, 10, config)


# ---------------------------------------------------------------------------
# measurement harness


@pytest.fixture(scope="module")
def measured_setup():
    bb = Backbone(BackboneConfig(d=16, layers=1, heads=2, ctx=256, seed=50))
    tree = make_tree(
        {0: ("", [1, 2]), 1: ("one two three four", []), 2: ("five six seven eight", [])}
    )
    agg = init_agg_params("mean", d=16, d_h=8, seed=51)
    cache = build_all(tree, bb, agg)
    params = init_routing_params(d=16, d_h=8, seed=52, k=2, budget=8)
    return tree, cache, bb, params


def test_measure_reports_fields(measured_setup):
    tree, cache, bb, params = measured_setup
    reports = measure(tree, cache, bb, ["what is two?"], params, reps=2)
    assert len(reports) == 1
    r = reports[0]
    assert r.n_ret <= params.budget
    assert r.flat_measured and r.flat_prefill_s is not None
    assert r.measured_ratio is not None and r.measured_ratio > 0
    assert r.routed_prefill_s > 0
    assert r.first_token >= 0
    assert r.n_doc_tokens == len(document_tokens(tree, bb))


def test_measure_score_eval_accounting(measured_setup):
    tree, cache, bb, params = measured_setup
    r = measure(tree, cache, bb, ["count the evals"], params, reps=1)[0]
    assert r.score_evals == len(tree.children(tree.root))


def test_measure_flat_model_only_when_too_long():
    bb = Backbone(BackboneConfig(d=16, layers=1, heads=2, ctx=32, seed=53))
    long_leaf = "w " * 14  # 28 tokens + question pushes past ctx
    tree = make_tree({0: ("", [1, 2]), 1: (long_leaf, []), 2: (long_leaf, [])})
    agg = init_agg_params("mean", d=16, d_h=8, seed=54)
    cache = build_all(tree, bb, agg)
    params = init_routing_params(d=16, d_h=8, seed=55, k=1, budget=2)
    r = measure(tree, cache, bb, ["q?"], params, reps=1)[0]
    assert not r.flat_measured
    assert r.flat_prefill_s is None and r.measured_ratio is None
    assert r.flat_model_units > r.routed_model_units


def test_document_tokens_is_leaf_concatenation(measured_setup):
    tree, _, bb, _ = measured_setup
    expected = bb.encode("one two three four") + bb.encode("five six seven eight")
    assert document_tokens(tree, bb) == expected


def test_measure_counters_deterministic(measured_setup):
    tree, cache, bb, params = measured_setup
    a = measure(tree, cache, bb, ["same question twice"], params, reps=1)[0]
    b = measure(tree, cache, bb, ["same question twice"], params, reps=1)[0]
    for field in ("n_doc_tokens", "n_q", "n_ret", "score_evals",
                  "flat_model_units", "routed_model_units", "first_token"):
        assert getattr(a, field) == getattr(b, field), field


# ---------------------------------------------------------------------------
# text metrics


def test_rouge_identical():
    assert rouge_l("a b c", "a b c") == 1.0


def test_rouge_disjoint():
    assert rouge_l("a b", "x y z") == 0.0


def test_rouge_hand_computed_example():
    # LCS("the cat sat", "the cat ran") = "the cat": P = R = 2/3
    assert rouge_l("the cat sat", "the cat ran") == pytest.approx(2 / 3)


def test_rouge_both_empty_convention():
    assert rouge_l("", "") == 1.0
    assert rouge_l("a", "") == 0.0
    assert rouge_l("", "a") == 0.0


def test_rouge_bounded():
    import random

    rng = random.Random(56)
    words = ["a", "b", "c", "d"]
    for _ in range(50):
        c = " ".join(rng.choice(words) for _ in range(rng.randrange(0, 8)))
        r = " ".join(rng.choice(words) for _ in range(rng.randrange(0, 8)))
        assert 0.0 <= rouge_l(c, r) <= 1.0


def test_rouge_subsequence_not_substring():
    # "a c" is a subsequence of "a b c" even though not contiguous
    assert rouge_l("a c", "a b c") == pytest.approx(2 * (1.0 * 2 / 3) / (1.0 + 2 / 3))


def test_token_f1_identical():
    assert token_f1("x y z", "x y z") == 1.0


def test_token_f1_disjoint():
    assert token_f1("x", "y") == 0.0


def test_token_f1_multiset_overlap():
    # candidate {a a b}, reference {a b b}: overlap = a + b = 2
    p, r = 2 / 3, 2 / 3
    assert token_f1("a a b", "a b b") == pytest.approx(2 * p * r / (p + r))


def test_token_f1_both_empty():
    assert token_f1("", "") == 1.0
