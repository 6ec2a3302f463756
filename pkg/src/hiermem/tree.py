"""Document ingestion into a rooted hierarchy of sections, paragraphs and chunks.

Two input formats are supported: markdown-style heading documents, where
heading nesting determines parent links, and an explicit recursive JSON tree
for precise fixtures. Unstructured text is segmented on blank lines.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

from .tokens import ByteTokenizer

logger = logging.getLogger(__name__)

_HEADING_RE = re.compile(r"^(?P<level>#{1,6})\s+(?P<title>.+?)\s*$")


class TreeStructureError(ValueError):
    """Document or tree violates a structural requirement."""


class EmptyDocumentError(TreeStructureError):
    """Input contains no usable content."""


@dataclass
class TreeNode:
    id: int
    title: str | None = None
    text: str = ""
    parent: int | None = None
    children: list[int] = field(default_factory=list)
    depth: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class SemanticTree:
    nodes: dict[int, TreeNode]
    root: int
    max_leaf_tokens: int = 512

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def children(self, node_id: int) -> list[int]:
        return self.nodes[node_id].children

    def leaves(self) -> list[int]:
        return [n.id for n in self.nodes.values() if n.is_leaf]

    def height(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def subtree_ids(self, node_id: int) -> set[int]:
        out: set[int] = set()
        stack = [node_id]
        while stack:
            nid = stack.pop()
            if nid in out:
                continue
            out.add(nid)
            stack.extend(self.nodes[nid].children)
        return out

    def ancestors(self, node_id: int) -> list[int]:
        out = []
        cur = self.nodes[node_id].parent
        steps = 0
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
            steps += 1
            if steps > len(self.nodes):
                raise TreeStructureError("parent chain does not terminate")
        return out

    def content_hash(self) -> str:
        payload = [
            (n.id, n.title, n.text, n.parent, tuple(n.children), n.depth)
            for n in sorted(self.nodes.values(), key=lambda n: n.id)
        ]
        blob = json.dumps([payload, self.max_leaf_tokens], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class IngestConfig:
    max_leaf_tokens: int = 512
    #: minimum paragraphs merged into one leaf; runt tail groups merge backwards
    min_paragraphs: int = 1


@dataclass
class ValidationCheck:
    name: str
    passed: bool
    offenders: list[int] = field(default_factory=list)
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[ValidationCheck]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[ValidationCheck]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f" offenders={c.offenders}" if c.offenders else ""
            lines.append(f"{status} {c.name}{extra} {c.detail}".rstrip())
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# parsing helpers


def _raw_paragraphs(text: str) -> list[str]:
    """Split on blank-line boundaries, keeping every byte.

    Each paragraph carries its trailing blank lines (and the first one any
    leading whitespace), so ``"".join(result) == text``.
    """
    if not text.strip():
        return []
    spans: list[str] = []
    pattern = re.compile(r"[^\n]*\S[^\n]*(?:\n[^\n]*\S[^\n]*)*(?:\n+|$)")
    pos = 0
    for m in pattern.finditer(text):
        if m.start() > pos and spans:
            spans[-1] += text[pos : m.start()]
        prefix = text[pos : m.start()] if not spans else ""
        spans.append(prefix + m.group(0))
        pos = m.end()
    if pos < len(text):
        spans[-1] += text[pos:]
    return spans


def _paragraph_leaves(
    paragraphs: list[str],
    parent_id: int,
    depth: int,
    config: IngestConfig,
    tokenizer: ByteTokenizer,
    next_id,
    nodes: dict[int, TreeNode],
) -> list[int]:
    """Attach paragraph leaves (merging runts, splitting oversize ones)."""
    groups: list[str] = []
    pending: list[str] = []
    for para in paragraphs:
        pending.append(para)
        if len(pending) >= config.min_paragraphs:
            merged = "".join(pending)
            if tokenizer.token_len(merged) <= config.max_leaf_tokens:
                groups.append(merged)
            else:
                groups.extend(pending)
            pending = []
    if pending:
        tail = "".join(pending)
        if groups and tokenizer.token_len(groups[-1] + tail) <= config.max_leaf_tokens:
            groups[-1] += tail
        else:
            groups.append(tail)

    out: list[int] = []
    for text in groups:
        nid = next_id()
        if tokenizer.token_len(text) <= config.max_leaf_tokens:
            nodes[nid] = TreeNode(id=nid, text=text, parent=parent_id, depth=depth)
            out.append(nid)
            continue
        # oversize paragraph: empty holder node with fixed-window chunk leaves
        holder = TreeNode(id=nid, text="", parent=parent_id, depth=depth)
        nodes[nid] = holder
        for chunk in tokenizer.split_windows(text, config.max_leaf_tokens):
            cid = next_id()
            nodes[cid] = TreeNode(id=cid, text=chunk, parent=nid, depth=depth + 1)
            holder.children.append(cid)
        out.append(nid)
    return out


# ---------------------------------------------------------------------------
# operations


def build_tree_from_headings(doc: str, config: IngestConfig | None = None) -> SemanticTree:
    """Parse a heading-marked document; headings become internal nodes.

    A heading's own paragraphs become its leaf children unless it also has
    sub-headings, in which case they are kept as preamble text on the heading
    node itself. A heading that skips a nesting level is rejected.
    """
    config = config or IngestConfig()
    tokenizer = ByteTokenizer()
    if not doc.strip():
        raise EmptyDocumentError("document is empty")

    # sections as (level, title, own-paragraph list, child sections)
    sections: list[dict] = []
    root_section = {"level": 0, "title": None, "paras": [], "subs": []}
    stack = [root_section]
    para_buf: list[str] = []

    def flush_paras() -> None:
        if para_buf:
            stack[-1]["paras"].extend(_raw_paragraphs("\n".join(para_buf) + "\n"))
            para_buf.clear()

    for line in doc.splitlines():
        m = _HEADING_RE.match(line)
        if not m:
            if line.strip() or para_buf:  # skip blank lines before any content
                para_buf.append(line)
            continue
        flush_paras()
        level = len(m.group("level"))
        title = m.group("title")
        if level > stack[-1]["level"] + 1:
            raise TreeStructureError(
                f"heading level jumps from {stack[-1]['level']} to {level} at {title!r}"
            )
        while stack[-1]["level"] >= level:
            stack.pop()
        section = {"level": level, "title": title, "paras": [], "subs": []}
        stack[-1]["subs"].append(section)
        stack.append(section)
    flush_paras()

    if not root_section["paras"] and not root_section["subs"]:
        raise EmptyDocumentError("document has no headings or paragraphs")

    # single top-level heading and nothing loose before it: that heading is the root
    if len(root_section["subs"]) == 1 and not root_section["paras"]:
        root_section = root_section["subs"][0]

    nodes: dict[int, TreeNode] = {}
    counter = {"next": 0}

    def next_id() -> int:
        nid = counter["next"]
        counter["next"] += 1
        return nid

    def emit(section: dict, parent: int | None, depth: int) -> int:
        nid = next_id()
        title = section["title"]
        paras = section["paras"]
        text = title or ""
        if section["subs"]:
            # preamble paragraphs stay on the section node as scoped context
            if paras:
                text = (text + "\n\n" if text else "") + "".join(paras).rstrip("\n")
            node = TreeNode(id=nid, title=title, text=text, parent=parent, depth=depth)
            nodes[nid] = node
            for sub in section["subs"]:
                node.children.append(emit(sub, nid, depth + 1))
        else:
            node = TreeNode(id=nid, title=title, text=text, parent=parent, depth=depth)
            nodes[nid] = node
            if paras:
                node.children.extend(
                    _paragraph_leaves(paras, nid, depth + 1, config, tokenizer, next_id, nodes)
                )
        return nid

    root_id = emit(root_section, None, 0)
    tree = SemanticTree(nodes=nodes, root=root_id, max_leaf_tokens=config.max_leaf_tokens)
    report = validate_tree(tree)
    if not report.ok:
        raise TreeStructureError(f"ingested tree failed validation:\n{report}")
    return tree


def segment_unstructured(text: str, max_tokens: int, min_paragraphs: int = 1) -> SemanticTree:
    """Blank-line segmentation under a synthetic root; long paragraphs get
    split into fixed-length chunk leaves."""
    if max_tokens < 8:
        raise ValueError("max_tokens must be >= 8")
    if not text.strip():
        raise EmptyDocumentError("input is whitespace only")
    tokenizer = ByteTokenizer()
    config = IngestConfig(max_leaf_tokens=max_tokens, min_paragraphs=min_paragraphs)

    nodes: dict[int, TreeNode] = {}
    counter = {"next": 0}

    def next_id() -> int:
        nid = counter["next"]
        counter["next"] += 1
        return nid

    root_id = next_id()
    root = TreeNode(id=root_id, depth=0)
    nodes[root_id] = root
    root.children.extend(
        _paragraph_leaves(_raw_paragraphs(text), root_id, 1, config, tokenizer, next_id, nodes)
    )
    tree = SemanticTree(nodes=nodes, root=root_id, max_leaf_tokens=max_tokens)
    report = validate_tree(tree)
    if not report.ok:
        raise TreeStructureError(f"segmented tree failed validation:\n{report}")
    return tree


def validate_tree(tree: SemanticTree) -> ValidationReport:
    """Report-only check of every structural invariant."""
    tokenizer = ByteTokenizer()
    checks: list[ValidationCheck] = []

    roots = [n.id for n in tree.nodes.values() if n.parent is None]
    root_ok = roots == [tree.root] and tree.nodes[tree.root].depth == 0
    checks.append(
        ValidationCheck(
            "single-root",
            root_ok,
            offenders=[] if root_ok else roots,
            detail=f"declared root={tree.root}",
        )
    )

    link_bad: list[int] = []
    for n in tree.nodes.values():
        for c in n.children:
            if c not in tree.nodes or tree.nodes[c].parent != n.id:
                link_bad.append(n.id)
        if n.parent is not None:
            p = tree.nodes.get(n.parent)
            if p is None or n.id not in p.children:
                link_bad.append(n.id)
    checks.append(ValidationCheck("parent-child-links", not link_bad, sorted(set(link_bad))))

    dup_bad = [n.id for n in tree.nodes.values() if len(set(n.children)) != len(n.children)]
    checks.append(ValidationCheck("children-unique", not dup_bad, dup_bad))

    cycle_bad: list[int] = []
    for n in tree.nodes.values():
        cur: int | None = n.id
        for _ in range(len(tree.nodes) + 1):
            parent = tree.nodes[cur].parent if cur in tree.nodes else None
            if parent is None:
                break
            cur = parent
        else:
            cycle_bad.append(n.id)
    checks.append(ValidationCheck("acyclic", not cycle_bad, cycle_bad))

    depth_bad = []
    if not cycle_bad:
        for n in tree.nodes.values():
            if n.parent is None:
                if n.depth != 0:
                    depth_bad.append(n.id)
            elif n.depth != tree.nodes[n.parent].depth + 1:
                depth_bad.append(n.id)
    checks.append(ValidationCheck("depth-consistent", not depth_bad, depth_bad))

    reach_bad = []
    if not cycle_bad and not link_bad:
        reachable = tree.subtree_ids(tree.root) if tree.root in tree.nodes else set()
        reach_bad = sorted(set(tree.nodes) - reachable)
    checks.append(ValidationCheck("all-reachable-from-root", not reach_bad, reach_bad))

    empty_bad = [n.id for n in tree.nodes.values() if n.is_leaf and not n.text]
    checks.append(ValidationCheck("leaf-text-nonempty", not empty_bad, empty_bad))

    size_bad = [
        n.id
        for n in tree.nodes.values()
        if n.is_leaf and tokenizer.token_len(n.text) > tree.max_leaf_tokens
    ]
    checks.append(ValidationCheck("leaf-token-limit", not size_bad, size_bad))

    return ValidationReport(checks)


def post_order(tree: SemanticTree) -> list[int]:
    """Node ids with every node after all of its descendants; root last."""
    report = validate_tree(tree)
    if not report.ok:
        raise TreeStructureError(f"cannot traverse invalid tree:\n{report}")
    out: list[int] = []
    stack: list[tuple[int, bool]] = [(tree.root, False)]
    while stack:
        nid, expanded = stack.pop()
        if expanded:
            out.append(nid)
            continue
        stack.append((nid, True))
        for child in reversed(tree.nodes[nid].children):
            stack.append((child, False))
    return out


# ---------------------------------------------------------------------------
# JSON tree format: {"id": int, "title": str|null, "text": str, "children": [...]}


def tree_to_json(tree: SemanticTree) -> dict:
    def emit(nid: int) -> dict:
        n = tree.nodes[nid]
        return {
            "id": n.id,
            "title": n.title,
            "text": n.text,
            "children": [emit(c) for c in n.children],
        }

    return emit(tree.root)


def tree_from_json(obj: dict, max_leaf_tokens: int = 512) -> SemanticTree:
    nodes: dict[int, TreeNode] = {}

    def parse(o: dict, parent: int | None, depth: int) -> int:
        if not isinstance(o, dict) or "id" not in o:
            raise TreeStructureError(f"malformed tree node object: {o!r}")
        nid = int(o["id"])
        if nid in nodes:
            raise TreeStructureError(f"duplicate node id {nid}")
        node = TreeNode(
            id=nid,
            title=o.get("title"),
            text=o.get("text", ""),
            parent=parent,
            depth=depth,
        )
        nodes[nid] = node
        for child in o.get("children", []):
            node.children.append(parse(child, nid, depth + 1))
        return nid

    root_id = parse(obj, None, 0)
    return SemanticTree(nodes=nodes, root=root_id, max_leaf_tokens=max_leaf_tokens)


def save_tree(tree: SemanticTree, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_json(tree), fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_tree(path, max_leaf_tokens: int = 512) -> SemanticTree:
    with open(path, encoding="utf-8") as fh:
        return tree_from_json(json.load(fh), max_leaf_tokens=max_leaf_tokens)
