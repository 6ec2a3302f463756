from __future__ import annotations

import random

import pytest

from hiermem import (
    ByteTokenizer,
    IngestConfig,
    build_tree_from_headings,
    post_order,
    segment_unstructured,
    tree_from_json,
    tree_to_json,
    validate_tree,
)
from hiermem.tree import EmptyDocumentError, TreeStructureError

from conftest import make_tree, random_tree


# ---------------------------------------------------------------------------
# heading ingestion


def test_single_section_two_paragraphs():
    tree = build_tree_from_headings("# Intro\n\npara one.\n\npara two.\n")
    root = tree.node(tree.root)
    assert root.title == "Intro"
    assert len(root.children) == 2
    depths = sorted(n.depth for n in tree.nodes.values())
    assert depths == [0, 1, 1]
    assert all(tree.node(c).is_leaf for c in root.children)


def test_nested_sections():
    doc = "# A\n## B\np1\n## C\np2\n"
    tree = build_tree_from_headings(doc)
    a = tree.node(tree.root)
    assert a.title == "A"
    b, c = (tree.node(i) for i in a.children)
    assert (b.title, c.title) == ("B", "C")
    assert len(b.children) == 1 and "p1" in tree.node(b.children[0]).text
    assert len(c.children) == 1 and "p2" in tree.node(c.children[0]).text


def test_preamble_paragraph_stays_on_section():
    doc = "# A\n\nintro text\n\n## B\n\nbody\n"
    tree = build_tree_from_headings(doc)
    a = tree.node(tree.root)
    assert "intro text" in a.text
    assert len(a.children) == 1  # only section B; preamble absorbed


def test_multiple_top_level_headings_get_synthetic_root():
    tree = build_tree_from_headings("# A\npa\n# B\npb\n")
    root = tree.node(tree.root)
    assert root.title is None
    assert [tree.node(c).title for c in root.children] == ["A", "B"]


def test_heading_level_jump_rejected():
    with pytest.raises(TreeStructureError, match="Too Deep"):
        build_tree_from_headings("# A\n### Too Deep\n")


def test_empty_document_rejected():
    with pytest.raises(EmptyDocumentError):
        build_tree_from_headings("   \n\n  ")


def test_ids_are_document_order():
    tree = build_tree_from_headings("# A\n## B\np1\n## C\np2\n")
    order = []

    def walk(nid):
        order.append(nid)
        for c in tree.node(nid).children:
            walk(c)

    walk(tree.root)
    assert order == sorted(order)


def test_oversize_paragraph_chunked_in_md():
    long_para = "word " * 300  # 1500 tokens
    tree = build_tree_from_headings(f"# A\n\n{long_para}\n", IngestConfig(max_leaf_tokens=128))
    report = validate_tree(tree)
    assert report.ok, str(report)
    tok = ByteTokenizer()
    assert all(tok.token_len(tree.node(l).text) <= 128 for l in tree.leaves())


def test_min_paragraph_merging():
    doc = "p1\n\np2\n\np3\n\np4\n\np5\n"
    merged = segment_unstructured(doc, 512, min_paragraphs=2)
    root = merged.node(merged.root)
    assert len(root.children) == 2  # [p1 p2] [p3 p4 p5(tail merged back)]
    plain = segment_unstructured(doc, 512)
    assert len(plain.node(plain.root).children) == 5


# ---------------------------------------------------------------------------
# unstructured segmentation


def test_three_short_paragraphs():
    tree = segment_unstructured("alpha one.\n\nbeta two.\n\ngamma three.\n", 512)
    root = tree.node(tree.root)
    assert len(root.children) == 3
    assert all(tree.node(c).is_leaf for c in root.children)


def test_long_paragraph_chunks_cover_all_tokens_in_order():
    tok = ByteTokenizer()
    text = "tok " * 250  # 1000 tokens, one paragraph
    tree = segment_unstructured(text, 400)
    root = tree.node(tree.root)
    assert len(root.children) == 1
    holder = tree.node(root.children[0])
    assert holder.text == "" and len(holder.children) == 3
    chunk_tokens = []
    for cid in holder.children:
        ids = tok.encode(tree.node(cid).text)
        assert len(ids) <= 400
        chunk_tokens.extend(ids)
    assert chunk_tokens == tok.encode(text)


def test_exact_max_tokens_paragraph_not_split():
    text = "x" * 64
    tree = segment_unstructured(text, 64)
    root = tree.node(tree.root)
    assert len(root.children) == 1
    assert tree.node(root.children[0]).is_leaf


def test_whitespace_only_rejected():
    with pytest.raises(EmptyDocumentError):
        segment_unstructured(" \n \n\t", 64)


def test_leaf_concatenation_equals_source():
    tok = ByteTokenizer()
    rng = random.Random(4)
    words = ["lorem", "ipsum", "dolor", "sit", "amet"]
    for trial in range(20):
        paras = [
            " ".join(rng.choice(words) for _ in range(rng.randrange(1, 60)))
            for _ in range(rng.randrange(1, 6))
        ]
        text = "\n\n".join(paras) + rng.choice(["", "\n", "\n\n"])
        tree = segment_unstructured(text, 32)
        leaf_tokens = []
        for nid in post_order(tree):
            node = tree.node(nid)
            if node.is_leaf:
                leaf_tokens.extend(tok.encode(node.text))
        assert leaf_tokens == tok.encode(text), f"trial {trial}"


def test_all_leaves_within_token_budget():
    rng = random.Random(9)
    text = "\n\n".join("w" * rng.randrange(1, 300) for _ in range(10))
    tree = segment_unstructured(text, 64)
    tok = ByteTokenizer()
    assert all(tok.token_len(tree.node(l).text) <= 64 for l in tree.leaves())


# ---------------------------------------------------------------------------
# validation


def test_validate_well_formed():
    tree = make_tree({0: ("", [1, 2]), 1: ("a", []), 2: ("b", [])})
    assert validate_tree(tree).ok


def test_validate_detects_cycle():
    tree = make_tree({0: ("", [1]), 1: ("", [2]), 2: ("x", [])})
    tree.nodes[1].parent = 2  # parent points at its own descendant
    tree.nodes[2].children = [1]
    tree.nodes[0].children = []
    report = validate_tree(tree)
    assert not report.ok
    names = {c.name for c in report.failures()}
    assert "acyclic" in names
    acyclic = next(c for c in report.checks if c.name == "acyclic")
    assert set(acyclic.offenders) >= {1, 2}


def test_validate_detects_depth_error():
    tree = make_tree({0: ("", [1]), 1: ("x", [])})
    tree.nodes[1].depth = 7
    report = validate_tree(tree)
    assert not report.ok
    assert any(c.name == "depth-consistent" and 1 in c.offenders for c in report.failures())


def test_validate_detects_empty_leaf():
    tree = make_tree({0: ("", [1]), 1: ("", [])})
    report = validate_tree(tree)
    assert any(c.name == "leaf-text-nonempty" and 1 in c.offenders for c in report.failures())


# ---------------------------------------------------------------------------
# post-order traversal


def test_post_order_chain():
    tree = make_tree({0: ("", [1]), 1: ("", [2]), 2: ("b", [])})
    assert post_order(tree) == [2, 1, 0]


def test_post_order_left_to_right():
    tree = make_tree({0: ("", [1, 2]), 1: ("", [3]), 2: ("c2", []), 3: ("g1", [])})
    assert post_order(tree) == [3, 1, 2, 0]


def test_post_order_random_trees_descendants_first():
    for seed in range(25):
        rng = random.Random(seed)
        tree = random_tree(rng, n_nodes=50)
        order = post_order(tree)
        assert sorted(order) == sorted(tree.nodes)
        index = {nid: i for i, nid in enumerate(order)}
        for node in tree.nodes.values():
            for child in node.children:
                assert index[child] < index[node.id], f"seed {seed}"
        assert order[-1] == tree.root


def test_post_order_rejects_invalid():
    tree = make_tree({0: ("", [1]), 1: ("x", [])})
    tree.nodes[1].depth = 3
    with pytest.raises(TreeStructureError):
        post_order(tree)


# ---------------------------------------------------------------------------
# JSON round trip


def test_json_roundtrip_exact():
    doc = "# A\n\npre\n\n## B\n\nb1.\n\nb2.\n\n## C\n\nc1.\n"
    tree = build_tree_from_headings(doc)
    back = tree_from_json(tree_to_json(tree), max_leaf_tokens=tree.max_leaf_tokens)
    assert set(back.nodes) == set(tree.nodes)
    for nid, node in tree.nodes.items():
        other = back.nodes[nid]
        assert (node.title, node.text, node.parent, node.children, node.depth) == (
            other.title,
            other.text,
            other.parent,
            other.children,
            other.depth,
        )
    assert back.content_hash() == tree.content_hash()


def test_json_duplicate_id_rejected():
    obj = {"id": 0, "title": None, "text": "", "children": [
        {"id": 1, "title": None, "text": "a", "children": []},
        {"id": 1, "title": None, "text": "b", "children": []},
    ]}
    with pytest.raises(TreeStructureError):
        tree_from_json(obj)
