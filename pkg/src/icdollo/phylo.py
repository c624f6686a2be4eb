"""Rooted, dated phylogenies: Newick parsing, MRCA, branch classes, grafting.

Every branch is identified by the id of the node it leads *into*; the
root's branch is the stem above the root (its length is the root's
``length``, possibly zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

RECON_LABEL = "<recon>"


class NewickError(ValueError):
    """Malformed Newick input; ``offset`` is the character position."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)


class UnknownTipError(KeyError):
    pass


@dataclass(frozen=True)
class Node:
    parent: int  # -1 marks the root
    children: tuple[int, ...]
    length: float
    label: str | None = None


@dataclass(frozen=True)
class Phylogeny:
    nodes: tuple[Node, ...]
    root: int
    tips: Mapping[str, int]
    # node id -> state index for observations that do not come from trait
    # data (grafted reconstruction tips)
    fixed: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tips", MappingProxyType(dict(self.tips)))
        object.__setattr__(self, "fixed", MappingProxyType(dict(self.fixed)))
        self._validate()

    def _validate(self):
        roots = [i for i, n in enumerate(self.nodes) if n.parent < 0]
        if roots != [self.root]:
            raise ValueError(f"expected exactly one root, found {roots}")
        for i, n in enumerate(self.nodes):
            if not (n.length >= 0.0) or n.length == float("inf"):
                raise ValueError(f"node {i}: branch length must be finite and >= 0")
            for c in n.children:
                if self.nodes[c].parent != i:
                    raise ValueError(f"node {c}: parent/child links disagree")
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen:
                raise ValueError("cycle in tree")
            seen.add(i)
            stack.extend(self.nodes[i].children)
        if len(seen) != len(self.nodes):
            raise ValueError("tree has nodes unreachable from the root")
        for label, i in self.tips.items():
            if not label:
                raise ValueError("empty tip label")
            if self.nodes[i].label != label:
                raise ValueError(f"tip map entry {label!r} points at a node with another label")

    # -- basic queries -------------------------------------------------
    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def tip_labels(self) -> list[str]:
        return list(self.tips)

    def is_leaf(self, i: int) -> bool:
        return not self.nodes[i].children

    def postorder(self) -> list[int]:
        order: list[int] = []
        stack = [(self.root, False)]
        while stack:
            i, done = stack.pop()
            if done:
                order.append(i)
                continue
            stack.append((i, True))
            for c in reversed(self.nodes[i].children):
                stack.append((c, False))
        return order

    def ancestors(self, i: int) -> list[int]:
        """Path from ``i`` (inclusive) up to the root (inclusive)."""
        path = [i]
        while self.nodes[path[-1]].parent >= 0:
            path.append(self.nodes[path[-1]].parent)
        return path

    def depth(self, i: int) -> float:
        return sum(self.nodes[j].length for j in self.ancestors(i) if j != self.root)

    def height(self) -> float:
        """Largest root-to-leaf distance, excluding the stem."""
        depth = {self.root: 0.0}
        best = 0.0
        for i in reversed(self.postorder()):
            n = self.nodes[i]
            if n.parent >= 0:
                depth[i] = depth[n.parent] + n.length
            if not n.children:
                best = max(best, depth[i])
        return best

    def tip_node(self, label: str) -> int:
        try:
            return self.tips[label]
        except KeyError:
            raise UnknownTipError(label) from None

    def total_length(self, include_stem: bool = True) -> float:
        return sum(n.length for i, n in enumerate(self.nodes) if include_stem or i != self.root)

    # -- derived trees -------------------------------------------------
    def with_stem(self, length: float) -> Phylogeny:
        nodes = list(self.nodes)
        nodes[self.root] = Node(-1, nodes[self.root].children, float(length), nodes[self.root].label)
        return Phylogeny(tuple(nodes), self.root, self.tips, self.fixed)

    def restrict(self, keep: Iterable[str]) -> Phylogeny:
        """Subtree spanned by the tips in ``keep``; unary nodes are merged."""
        keep = set(keep)
        for label in keep:
            self.tip_node(label)
        if not keep:
            raise ValueError("cannot restrict a tree to zero tips")
        builder = _Builder()

        def build(i: int) -> int | None:
            n = self.nodes[i]
            if not n.children:
                return builder.add(n.label, n.length) if n.label in keep else None
            kids = [k for k in (build(c) for c in n.children) if k is not None]
            if not kids:
                return None
            if len(kids) == 1 and n.label not in keep:
                builder.lengths[kids[0]] += n.length
                return kids[0]
            j = builder.add(n.label, n.length)
            for k in kids:
                builder.link(j, k)
            return j

        root = build(self.root)
        return builder.finish(root, tip_labels=keep)

    def to_newick(self, precision: int = 10) -> str:
        def fmt(i: int) -> str:
            n = self.nodes[i]
            s = ""
            if n.children:
                s = "(" + ",".join(fmt(c) for c in n.children) + ")"
            if n.label is not None and i not in self.fixed:
                s += _quote(n.label)
            return s + f":{n.length:.{precision}g}"

        return fmt(self.root) + ";"


def _quote(label: str) -> str:
    if any(ch in label for ch in " (),:;[]'\t"):
        return "'" + label.replace("'", "''") + "'"
    return label


class _Builder:
    def __init__(self):
        self.parents: list[int] = []
        self.children: list[list[int]] = []
        self.lengths: list[float] = []
        self.labels: list[str | None] = []
        self.offsets: dict[int, int] = {}

    def add(self, label: str | None, length: float) -> int:
        self.parents.append(-1)
        self.children.append([])
        self.lengths.append(length)
        self.labels.append(label)
        return len(self.parents) - 1

    def link(self, parent: int, child: int):
        self.parents[child] = parent
        self.children[parent].append(child)

    def finish(self, root: int, tip_labels: Iterable[str] | None = None) -> Phylogeny:
        nodes = tuple(
            Node(p, tuple(c), float(l), lab)
            for p, c, l, lab in zip(self.parents, self.children, self.lengths, self.labels)
        )
        tips: dict[str, int] = {}
        wanted = None if tip_labels is None else set(tip_labels)
        for i, n in enumerate(nodes):
            if n.children or n.label is None:
                if not n.children and (n.label is None or not n.label):
                    raise NewickError(f"tip node {i} has no label")
                continue
            if wanted is not None and n.label not in wanted:
                continue
            if n.label in tips:
                raise NewickError(f"duplicate tip label {n.label!r}")
            tips[n.label] = i
        return Phylogeny(nodes, root, tips)


# -- Newick ------------------------------------------------------------

class _Reader:
    def __init__(self, text: str):
        self.s = text
        self.i = 0

    def peek(self) -> str:
        self.skip()
        return self.s[self.i] if self.i < len(self.s) else ""

    def skip(self):
        s = self.s
        while self.i < len(s):
            ch = s[self.i]
            if ch.isspace():
                self.i += 1
            elif ch == "[":
                end = s.find("]", self.i)
                if end < 0:
                    raise NewickError("unterminated comment", self.i)
                self.i = end + 1
            else:
                break

    def expect(self, ch: str):
        if self.peek() != ch:
            got = self.peek() or "end of input"
            raise NewickError(f"expected {ch!r}, got {got!r}", self.i)
        self.i += 1

    def label(self) -> str | None:
        self.skip()
        s = self.s
        if self.i < len(s) and s[self.i] == "'":
            out = []
            self.i += 1
            while True:
                if self.i >= len(s):
                    raise NewickError("unterminated quoted label", self.i)
                if s[self.i] == "'":
                    if s[self.i + 1 : self.i + 2] == "'":
                        out.append("'")
                        self.i += 2
                        continue
                    self.i += 1
                    return "".join(out)
                out.append(s[self.i])
                self.i += 1
        start = self.i
        while self.i < len(s) and s[self.i] not in "(),:;[" and not s[self.i].isspace():
            self.i += 1
        text = s[start : self.i]
        return text or None

    def length(self) -> float | None:
        if self.peek() != ":":
            return None
        self.i += 1
        self.skip()
        start = self.i
        s = self.s
        while self.i < len(s) and s[self.i] not in "(),:;[" and not s[self.i].isspace():
            self.i += 1
        token = s[start : self.i]
        try:
            value = float(token)
        except ValueError:
            raise NewickError(f"bad branch length {token!r}", start) from None
        if not (0.0 <= value < float("inf")):
            raise NewickError(f"branch length {token!r} must be finite and >= 0", start)
        return value


def parse_newick(text: str) -> Phylogeny:
    """Parse one rooted Newick tree.

    All non-root branches must carry a length; the root length, if given,
    becomes the stem length.  Internal node labels are kept but are not
    data-bearing tips.
    """
    r = _Reader(text)
    b = _Builder()

    def subtree() -> int:
        start = r.i
        if r.peek() == "(":
            r.i += 1
            kids = [subtree()]
            while r.peek() == ",":
                r.i += 1
                kids.append(subtree())
            r.expect(")")
            node = b.add(r.label(), 0.0)
            for k in kids:
                b.link(node, k)
        else:
            label = r.label()
            if label is None:
                raise NewickError("expected a tip label", r.i if r.peek() else start)
            node = b.add(label, 0.0)
        pos = r.i
        length = r.length()
        b.lengths[node] = length if length is not None else float("nan")
        b.offsets[node] = pos
        return node

    root = subtree()
    r.expect(";")
    if r.peek():
        raise NewickError("trailing characters after ';'", r.i)
    for i, l in enumerate(b.lengths):
        if l != l:  # NaN: length missing
            if i == root:
                b.lengths[i] = 0.0
            else:
                raise NewickError(f"missing branch length for node {b.labels[i] or i}", b.offsets[i])
    return b.finish(root)


def read_trees(path) -> list[Phylogeny]:
    """One Newick tree per non-blank line."""
    trees = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                trees.append(parse_newick(line))
            except NewickError as exc:
                raise NewickError(f"{path}:{lineno}: {exc}") from None
    return trees


# -- topology queries --------------------------------------------------

def mrca(tree: Phylogeny, tips: Iterable[str]) -> int:
    """Deepest node ancestral to every listed tip (a tip itself if only one)."""
    ids = [tree.tip_node(t) for t in tips]
    if not ids:
        raise ValueError("mrca needs at least one tip")
    path = tree.ancestors(ids[0])
    rank = {node: k for k, node in enumerate(path)}
    best = 0
    for i in ids[1:]:
        j = i
        while j not in rank:
            j = tree.nodes[j].parent
        best = max(best, rank[j])
    return path[best]


def graft_reconstruction_tip(tree: Phylogeny, at: int, state: int) -> tuple[Phylogeny, int]:
    """Attach a zero-length branch at ``at`` leading to a tip fixed at ``state``."""
    if not 0 <= at < len(tree.nodes):
        raise ValueError(f"no node {at}")
    nodes = list(tree.nodes)
    new = len(nodes)
    host = nodes[at]
    nodes[at] = Node(host.parent, host.children + (new,), host.length, host.label)
    nodes.append(Node(at, (), 0.0, RECON_LABEL))
    fixed = dict(tree.fixed)
    fixed[new] = int(state)
    return Phylogeny(tuple(nodes), tree.root, tree.tips, fixed), new


@dataclass(frozen=True)
class BranchClassification:
    trait_id: str | None
    birth: frozenset[int]
    non_birth: frozenset[int]
    grafted_tip: int | None = None
    mrca: int | None = None


def classify_branches(
    tree: Phylogeny, present_tips: Iterable[str], trait_id: str | None = None
) -> BranchClassification:
    """Birth loci are the MRCA of ``present_tips`` and all its ancestors.

    Branch ids are child node ids, so the root id stands for the stem.
    """
    present = list(present_tips)
    if not present:
        raise ValueError("classify_branches needs at least one present tip")
    m = mrca(tree, present)
    birth = frozenset(tree.ancestors(m))
    non_birth = frozenset(range(len(tree.nodes))) - birth
    grafted = next(iter(tree.fixed), None) if len(tree.fixed) == 1 else None
    return BranchClassification(trait_id, birth, non_birth, grafted, m)
