"""Semantic atoms, linkage graphs, block assembly, and the block condition.

A semantic atom is a spatially coherent run of tokens that loses meaning if
split. Atoms linked by attribute-value or hierarchy relations are grouped
into blocks; a segment is a semantic block exactly when parsing it in
isolation agrees with parsing it in full-document context.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

from .model import (
    BlockieError,
    BoundingBox,
    Document,
    DocumentSchema,
    DocumentValues,
    LeafValue,
    Segment,
    check_segment,
    first_difference,
    restrict_values,
    values_equal,
)

# An annotator parses a target segment within a context segment.
Annotator = Callable[[Segment, Segment], DocumentValues]

LINK_ATTRIBUTE_VALUE = "attribute_value"
LINK_HIERARCHY = "hierarchy"


class UnsupportedGoldError(BlockieError):
    """Gold values lack the token support needed to build oracle blocks."""


class DanglingLinkageError(BlockieError):
    """A linkage references an atom that was not provided."""


@dataclass(frozen=True)
class GeometryParams:
    """Thresholds for the proximity-and-alignment grouping predicate."""

    max_h_gap_char_widths: float = 1.0
    max_v_gap_line_heights: float = 0.6
    min_vertical_overlap: float = 0.5
    min_horizontal_overlap: float = 0.5


@dataclass(frozen=True)
class SemanticAtom:
    """An indivisible visual text region: ordered tokens plus their union box."""

    doc_id: str
    atom_id: int
    token_ids: tuple[int, ...]
    bbox: BoundingBox
    text: str


@dataclass(frozen=True)
class Linkage:
    """A directed relation between two atoms of one document."""

    from_atom: int
    to_atom: int
    kind: str = LINK_ATTRIBUTE_VALUE

    def __post_init__(self):
        if self.from_atom == self.to_atom:
            raise ValueError("linkage endpoints must be distinct atoms")
        if self.kind not in (LINK_ATTRIBUTE_VALUE, LINK_HIERARCHY):
            raise ValueError(f"unknown linkage kind {self.kind!r}")


@dataclass(frozen=True)
class SemanticBlock:
    """A collection of atoms whose linkages all stay inside the collection."""

    block_id: str
    atom_ids: tuple[int, ...]
    token_ids: frozenset[int]
    reason: str = ""
    text: str = ""
    partial_values: DocumentValues | None = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", frozenset(self.token_ids))
        if not self.token_ids:
            raise ValueError(f"block {self.block_id} has no tokens")

    def segment(self, doc: Document) -> Segment:
        return Segment(doc.doc_id, self.token_ids)

    def with_parse(self, values: DocumentValues, reason: str | None = None) -> "SemanticBlock":
        return replace(
            self,
            partial_values=values,
            reason=self.reason if reason is None else reason,
        )


@dataclass(frozen=True)
class BlockSet:
    """Blocks of one document, ordered by first token in reading order."""

    doc_id: str
    blocks: tuple[SemanticBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        seen: set[int] = set()
        for block in self.blocks:
            overlap = seen & block.token_ids
            if overlap:
                raise ValueError(
                    f"blocks of {self.doc_id} overlap on tokens {sorted(overlap)[:5]}"
                )
            seen |= block.token_ids

    def token_ids(self) -> frozenset[int]:
        out: set[int] = set()
        for block in self.blocks:
            out |= block.token_ids
        return frozenset(out)

    def covers(self, doc: Document) -> bool:
        return self.token_ids() == doc.token_ids

    def to_json(self) -> dict:
        blocks = []
        for block in self.blocks:
            entry: dict = {
                "block_id": block.block_id,
                "reason": block.reason,
                "text": block.text,
                "token_ids": sorted(block.token_ids),
            }
            if block.partial_values is not None:
                entry["partial_values"] = block.partial_values.to_json()
            blocks.append(entry)
        return {"doc_id": self.doc_id, "blocks": blocks}

    @classmethod
    def from_json(cls, data: dict) -> "BlockSet":
        from .model import DocumentValues as DV

        blocks = []
        for entry in data.get("blocks", ()):
            values = entry.get("partial_values")
            blocks.append(
                SemanticBlock(
                    block_id=entry["block_id"],
                    atom_ids=tuple(entry.get("atom_ids", ())),
                    token_ids=frozenset(entry["token_ids"]),
                    reason=entry.get("reason", ""),
                    text=entry.get("text", ""),
                    partial_values=DV.from_raw(values) if values is not None else None,
                )
            )
        return cls(doc_id=data["doc_id"], blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Atom grouping
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _interval_overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    """Overlap length relative to the smaller interval."""
    overlap = min(a1, b1) - max(a0, b0)
    if overlap <= 0:
        return 0.0
    smaller = max(min(a1 - a0, b1 - b0), 1e-9)
    return overlap / smaller


def _detect_lines(doc: Document, params: GeometryParams) -> list[list[int]]:
    n = len(doc.tokens)
    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            ti, tj = doc.tokens[i], doc.tokens[j]
            if ti.page_index != tj.page_index:
                continue
            if (
                _interval_overlap(ti.bbox.y0, ti.bbox.y1, tj.bbox.y0, tj.bbox.y1)
                >= params.min_vertical_overlap
            ):
                uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    return [sorted(g) for g in sorted(groups.values(), key=min)]


def tokens_chainable(
    a, b, params: GeometryParams, line_char_width: float, median_line_height: float
) -> bool:
    """Proximity-and-alignment predicate for two tokens.

    Horizontally: same line (vertical overlap) and gap within a character
    width budget. Vertically: stacked with horizontal overlap and a gap
    within a line height budget.
    """
    if a.page_index != b.page_index:
        return False
    v_overlap = _interval_overlap(a.bbox.y0, a.bbox.y1, b.bbox.y0, b.bbox.y1)
    if v_overlap >= params.min_vertical_overlap:
        gap = max(a.bbox.x0, b.bbox.x0) - min(a.bbox.x1, b.bbox.x1)
        return gap <= params.max_h_gap_char_widths * line_char_width
    h_overlap = _interval_overlap(a.bbox.x0, a.bbox.x1, b.bbox.x0, b.bbox.x1)
    if h_overlap >= params.min_horizontal_overlap:
        gap = max(a.bbox.y0, b.bbox.y0) - min(a.bbox.y1, b.bbox.y1)
        return gap <= params.max_v_gap_line_heights * median_line_height
    return False


def group_atoms(doc: Document, params: GeometryParams = GeometryParams()) -> list[SemanticAtom]:
    """Partition tokens into semantic atoms via the chaining predicate."""
    n = len(doc.tokens)
    if n == 0:
        return []
    lines = _detect_lines(doc, params)
    line_of = {}
    line_char_width = {}
    line_heights = []
    for line_idx, members in enumerate(lines):
        widths = [
            doc.tokens[i].bbox.width / max(len(doc.tokens[i].text), 1) for i in members
        ]
        line_char_width[line_idx] = statistics.median(widths)
        line_heights.append(
            max(doc.tokens[i].bbox.y1 for i in members)
            - min(doc.tokens[i].bbox.y0 for i in members)
        )
        for i in members:
            line_of[i] = line_idx
    median_line_height = statistics.median(line_heights)

    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            # character width budget comes from the wider shared region
            cw = max(line_char_width[line_of[i]], line_char_width[line_of[j]])
            if tokens_chainable(doc.tokens[i], doc.tokens[j], params, cw, median_line_height):
                uf.union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)

    atoms = []
    for atom_id, members in enumerate(sorted(groups.values(), key=min)):
        members = sorted(members)
        bbox = doc.tokens[members[0]].bbox
        for i in members[1:]:
            bbox = bbox.union(doc.tokens[i].bbox)
        atoms.append(
            SemanticAtom(
                doc_id=doc.doc_id,
                atom_id=atom_id,
                token_ids=tuple(members),
                bbox=bbox,
                text=" ".join(doc.tokens[i].text for i in members),
            )
        )
    return atoms


# ---------------------------------------------------------------------------
# Block assembly
# ---------------------------------------------------------------------------


def assemble_blocks(atoms: Sequence[SemanticAtom], linkages: Iterable[Linkage]) -> BlockSet:
    """Group atoms into blocks: connected components of the linkage graph.

    Isolated atoms become singleton blocks; the result is invariant under
    permutation of atoms or linkages.
    """
    atoms = sorted(atoms, key=lambda a: a.atom_id)
    if not atoms:
        return BlockSet(doc_id="", blocks=())
    doc_id = atoms[0].doc_id
    index_of = {atom.atom_id: i for i, atom in enumerate(atoms)}
    uf = _UnionFind(len(atoms))
    for link in linkages:
        if link.from_atom not in index_of or link.to_atom not in index_of:
            raise DanglingLinkageError(
                f"linkage {link.from_atom}->{link.to_atom} references unknown atom"
            )
        uf.union(index_of[link.from_atom], index_of[link.to_atom])

    groups: dict[int, list[int]] = {}
    for i in range(len(atoms)):
        groups.setdefault(uf.find(i), []).append(i)

    components = []
    for members in groups.values():
        members_atoms = sorted((atoms[i] for i in members), key=lambda a: min(a.token_ids))
        components.append(members_atoms)
    components.sort(key=lambda ms: min(ms[0].token_ids))

    blocks = []
    for i, members_atoms in enumerate(components):
        token_ids = frozenset(tid for atom in members_atoms for tid in atom.token_ids)
        blocks.append(
            SemanticBlock(
                block_id=f"block_{i + 1}",
                atom_ids=tuple(a.atom_id for a in members_atoms),
                token_ids=token_ids,
                text=" ".join(a.text for a in members_atoms),
            )
        )
    return BlockSet(doc_id=doc_id, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Block condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockCheck:
    is_block: bool
    witness: str | None = None


def check_block_condition(
    block: SemanticBlock,
    doc: Document,
    annotator: Annotator,
    gold: DocumentValues | None = None,
) -> BlockCheck:
    """Check that isolated and in-context parses of the block agree.

    The block passes when annotator(B, B) equals annotator(B, D) and, if gold
    values are supplied, both equal the gold values restricted to B. Values
    are compared after text normalization; the witness names the first
    differing path.
    """
    segment = block.segment(doc)
    check_segment(doc, segment)
    whole = doc.whole_segment()
    isolated = annotator(segment, segment)
    in_context = annotator(segment, whole)
    if not values_equal(isolated, in_context):
        return BlockCheck(False, first_difference(isolated, in_context))
    if gold is not None:
        reference = restrict_values(doc, gold, segment)
        if not values_equal(in_context, reference):
            return BlockCheck(False, first_difference(in_context, reference))
    return BlockCheck(True, None)


def oracle_annotator(doc: Document, gold: DocumentValues) -> Annotator:
    """Annotator that restricts gold values to the target segment."""

    def annotate(target: Segment, context: Segment) -> DocumentValues:
        del context
        return restrict_values(doc, gold, target)

    return annotate


# ---------------------------------------------------------------------------
# Oracle blocks from labels
# ---------------------------------------------------------------------------

OTHERS_REASON = "These words are not tied to any schema entity; they form a leftover group."


def _instance_support(instance: dict, dotted: str) -> set[int]:
    out: set[int] = set()
    for name, value in instance.items():
        if not value:
            continue
        if isinstance(value[0], LeafValue):
            for leaf in value:
                if leaf.support is None:
                    raise UnsupportedGoldError(f"unsupported gold: {dotted}.{name} lacks token support")
                out |= leaf.support
        else:
            for inst in value:
                out |= _instance_support(inst, f"{dotted}.{name}")
    return out


def oracle_blocks_from_labels(
    doc: Document, gold: DocumentValues, schema: DocumentSchema
) -> BlockSet:
    """Build ground-truth blocks from labeled data.

    One block per top-level group instance, one per populated top-level leaf,
    and one leftover block per page for tokens that support nothing.
    """
    claimed: set[int] = set()
    collected: list[tuple[set[int], str]] = []

    def claim(tokens: set[int]) -> set[int]:
        fresh = tokens - claimed
        claimed.update(fresh)
        return fresh

    for root_node in schema.roots:
        value = gold.root.get(root_node.name)
        if not value:
            continue
        if root_node.is_leaf:
            tokens = claim(_instance_support({root_node.name: value}, "<root>"))
            if tokens:
                reason = (
                    f"The words give the value of '{root_node.name}' together with its "
                    f"label; nothing outside this span is needed to read it."
                )
                collected.append((tokens, reason))
        else:
            for idx, instance in enumerate(value):
                tokens = claim(_instance_support(instance, root_node.name))
                if tokens:
                    reason = (
                        f"The words belong to one '{root_node.name}' entry (number {idx + 1}): "
                        f"its attribute-value pairs and any nested parts stay together."
                    )
                    collected.append((tokens, reason))

    leftovers = set(range(len(doc.tokens))) - claimed
    by_page: dict[int, set[int]] = {}
    for tid in sorted(leftovers):
        by_page.setdefault(doc.tokens[tid].page_index, set()).add(tid)
    for page in sorted(by_page):
        collected.append((by_page[page], OTHERS_REASON))

    collected.sort(key=lambda item: min(item[0]))
    blocks = []
    for i, (tokens, reason) in enumerate(collected):
        segment = doc.segment(tokens)
        blocks.append(
            SemanticBlock(
                block_id=f"block_{i + 1}",
                atom_ids=(),
                token_ids=frozenset(tokens),
                reason=reason,
                text=" ".join(doc.tokens[t].text for t in sorted(tokens)),
                partial_values=restrict_values(doc, gold, segment),
            )
        )
    return BlockSet(doc_id=doc.doc_id, blocks=tuple(blocks))
