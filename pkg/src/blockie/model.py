"""Core document, schema, and value types plus the restriction and merge algebra.

Everything in this module is immutable after construction and all operations
are pure, so the types are safe to share across threads.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence


class BlockieError(Exception):
    """Base class for errors raised by this package."""


class ForeignSegmentError(BlockieError):
    """A segment references tokens that do not belong to the document."""


class SchemaFormatError(BlockieError):
    """A schema file or schema tree is malformed."""


def normalize_text(raw: str) -> str:
    """Trim, collapse internal whitespace to single spaces, apply Unicode NFC.

    Case is preserved.
    """
    return " ".join(unicodedata.normalize("NFC", raw).split())


def canonical_json(obj) -> str:
    """Serialize to a canonical JSON string (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Documents and segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized page coordinates, origin top-left."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise ValueError(f"invalid bounding box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )


@dataclass(frozen=True)
class Token:
    """One OCR word with its normalized box."""

    token_id: int
    text: str
    bbox: BoundingBox
    page_index: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"token {self.token_id} has empty text")
        if self.page_index < 0:
            raise ValueError("page_index must be non-negative")


@dataclass(frozen=True)
class Document:
    """An OCR'd document: tokens in reading order with dense ids 0..n-1."""

    doc_id: str
    tokens: tuple[Token, ...]
    source_tag: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        for i, tok in enumerate(self.tokens):
            if tok.token_id != i:
                raise ValueError(
                    f"document {self.doc_id}: token ids must be dense 0..n-1, "
                    f"got {tok.token_id} at position {i}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def token_ids(self) -> frozenset[int]:
        return frozenset(range(len(self.tokens)))

    def text(self) -> str:
        return " ".join(tok.text for tok in self.tokens)

    def whole_segment(self) -> "Segment":
        if not self.tokens:
            raise ValueError(f"document {self.doc_id} is empty")
        return Segment(self.doc_id, self.token_ids)

    def segment(self, token_ids: Iterable[int]) -> "Segment":
        return Segment(self.doc_id, frozenset(token_ids))


@dataclass(frozen=True)
class Segment:
    """A subset of a document's tokens, addressed by token id."""

    doc_id: str
    token_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", frozenset(self.token_ids))
        if not self.token_ids:
            raise ValueError("segment must contain at least one token")

    def text(self, doc: Document) -> str:
        check_segment(doc, self)
        return " ".join(doc.tokens[i].text for i in sorted(self.token_ids))

    def covers(self, doc: Document) -> bool:
        return self.token_ids == doc.token_ids


def check_segment(doc: Document, segment: Segment) -> None:
    """Raise ForeignSegmentError unless the segment belongs to the document."""
    if segment.doc_id != doc.doc_id or not segment.token_ids <= doc.token_ids:
        raise ForeignSegmentError(
            f"foreign segment: segment of {segment.doc_id!r} does not belong to "
            f"document {doc.doc_id!r}"
        )


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntityPath:
    """Dotted path from the schema root to a node, e.g. menu.nm."""

    parts: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if len(self.parts) < 1:
            raise ValueError("entity path must have depth >= 1")

    @classmethod
    def parse(cls, dotted: str) -> "EntityPath":
        return cls(tuple(dotted.split(".")))

    def child(self, name: str) -> "EntityPath":
        return EntityPath(self.parts + (name,))

    def __str__(self) -> str:
        return ".".join(self.parts)


@dataclass(frozen=True)
class SchemaNode:
    """One entity in the schema tree; a node without children is a leaf."""

    name: str
    children: tuple["SchemaNode", ...] = ()
    repeatable: bool = False
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        seen = set()
        for child in self.children:
            if child.name in seen:
                raise SchemaFormatError(f"duplicate child name {child.name!r} under {self.name!r}")
            seen.add(child.name)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def child(self, name: str) -> "SchemaNode | None":
        for node in self.children:
            if node.name == name:
                return node
        return None


@dataclass(frozen=True)
class DocumentSchema:
    """The hierarchical tree of entities to extract."""

    name: str
    roots: tuple[SchemaNode, ...]

    def __post_init__(self):
        object.__setattr__(self, "roots", tuple(self.roots))
        seen = set()
        for node in self.roots:
            if node.name in seen:
                raise SchemaFormatError(f"duplicate root name {node.name!r}")
            seen.add(node.name)
        if not any(True for _ in self.leaf_paths()):
            raise SchemaFormatError("schema must contain at least one leaf")

    def root(self, name: str) -> SchemaNode | None:
        for node in self.roots:
            if node.name == name:
                return node
        return None

    def find(self, path: EntityPath) -> SchemaNode | None:
        node = self.root(path.parts[0])
        for part in path.parts[1:]:
            if node is None:
                return None
            node = node.child(part)
        return node

    def leaf_paths(self) -> Iterator[EntityPath]:
        def walk(node: SchemaNode, prefix: tuple[str, ...]) -> Iterator[EntityPath]:
            path = prefix + (node.name,)
            if node.is_leaf:
                yield EntityPath(path)
            for child in node.children:
                yield from walk(child, path)

        for root in self.roots:
            yield from walk(root, ())

    def describe(self) -> str:
        """Plain-text rendering of the tree, used inside prompts."""
        lines = []

        def walk(node: SchemaNode, depth: int) -> None:
            kind = "group" if not node.is_leaf else "field"
            rep = ", repeatable" if node.repeatable else ""
            desc = f": {node.description}" if node.description else ""
            lines.append(f"{'  ' * depth}- {node.name} ({kind}{rep}){desc}")
            for child in node.children:
                walk(child, depth + 1)

        for root in self.roots:
            walk(root, 0)
        return "\n".join(lines)

    @classmethod
    def from_json(cls, data: Mapping) -> "DocumentSchema":
        def node_from(obj: Mapping) -> SchemaNode:
            if "name" not in obj:
                raise SchemaFormatError(f"schema node missing 'name': {obj!r}")
            children = tuple(node_from(c) for c in obj.get("children", ()))
            return SchemaNode(
                name=obj["name"],
                children=children,
                repeatable=bool(obj.get("repeatable", False)),
                description=obj.get("description", ""),
            )

        return cls(
            name=data.get("name", "schema"),
            roots=tuple(node_from(n) for n in data.get("roots", ())),
        )

    def to_json(self) -> dict:
        def node_to(node: SchemaNode) -> dict:
            out: dict = {"name": node.name, "repeatable": node.repeatable}
            if node.description:
                out["description"] = node.description
            if node.children:
                out["children"] = [node_to(c) for c in node.children]
            return out

        return {"name": self.name, "roots": [node_to(n) for n in self.roots]}

    @classmethod
    def load(cls, path) -> "DocumentSchema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LeafValue:
    """One extracted string with optional grounding tokens.

    Values produced without token grounding (model output, inferred answers)
    have support None and survive only whole-document restriction.
    """

    text: str
    support: frozenset[int] | None = None
    inferred: bool = False

    def __post_init__(self):
        if self.support is not None:
            object.__setattr__(self, "support", frozenset(self.support))

    def key(self) -> tuple:
        return (normalize_text(self.text), self.support, self.inferred)


# Internal canonical shape: a group value is a tuple of instances, an instance
# is a dict name -> node value, a leaf value is a tuple of LeafValue.
Instance = dict


def _freeze_instance(instance: Mapping) -> dict:
    out = {}
    for name, value in instance.items():
        out[name] = _freeze_node(value)
    return out


def _freeze_node(value):
    if isinstance(value, tuple) and all(isinstance(v, LeafValue) for v in value):
        return value
    if isinstance(value, LeafValue):
        return (value,)
    if isinstance(value, str):
        return (LeafValue(value),)
    if isinstance(value, (int, float)):
        return (LeafValue(str(value)),)
    if isinstance(value, Mapping):
        if _looks_like_leaf_record(value):
            return (_leaf_from_record(value),)
        return (_freeze_instance(value),)
    if isinstance(value, Sequence):
        items = list(value)
        if not items:
            return ()
        if all(isinstance(v, Mapping) and not _looks_like_leaf_record(v) for v in items):
            return tuple(_freeze_instance(v) for v in items)
        leaves = []
        for v in items:
            if isinstance(v, LeafValue):
                leaves.append(v)
            elif isinstance(v, str):
                leaves.append(LeafValue(v))
            elif isinstance(v, (int, float)):
                leaves.append(LeafValue(str(v)))
            elif isinstance(v, Mapping) and _looks_like_leaf_record(v):
                leaves.append(_leaf_from_record(v))
            else:
                raise ValueError(f"cannot interpret value item {v!r}")
        return tuple(leaves)
    raise ValueError(f"cannot interpret value node {value!r}")


def _looks_like_leaf_record(obj: Mapping) -> bool:
    return "text" in obj and isinstance(obj["text"], str) and set(obj) <= {"text", "support", "inferred"}


def _leaf_from_record(obj: Mapping) -> LeafValue:
    support = obj.get("support")
    return LeafValue(
        text=obj["text"],
        support=frozenset(support) if support is not None else None,
        inferred=bool(obj.get("inferred", False)),
    )


@dataclass(frozen=True)
class DocumentValues:
    """An instantiation of a schema: nested entity-path to value-list mapping.

    Group nodes map to tuples of instances, leaves to tuples of LeafValue.
    An empty tuple (or missing name) means the entity is absent.
    """

    root: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "root", _freeze_instance(self.root))

    @classmethod
    def empty(cls) -> "DocumentValues":
        return cls({})

    @classmethod
    def from_raw(cls, data: Mapping) -> "DocumentValues":
        """Build from JSON-ish data: strings, lists, dicts, leaf records."""
        return cls(dict(data))

    def is_empty(self) -> bool:
        return not any(True for _ in iter_leaf_entries(self))

    def to_json(self, include_support: bool = True) -> dict:
        return _instance_to_json(self.root, include_support)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DocumentValues):
            return NotImplemented
        return canonical_values(self) == canonical_values(other)

    def __hash__(self):
        return hash(canonical_values(self))


def _instance_to_json(instance: Mapping, include_support: bool) -> dict:
    out = {}
    for name in sorted(instance):
        value = instance[name]
        if not value:
            continue
        if isinstance(value[0], LeafValue):
            rendered = []
            for leaf in value:
                if include_support and (leaf.support is not None or leaf.inferred):
                    record: dict = {"text": leaf.text}
                    if leaf.support is not None:
                        record["support"] = sorted(leaf.support)
                    if leaf.inferred:
                        record["inferred"] = True
                    rendered.append(record)
                else:
                    rendered.append(leaf.text)
            out[name] = rendered
        else:
            out[name] = [_instance_to_json(inst, include_support) for inst in value]
    return out


def iter_leaf_entries(
    values: DocumentValues,
) -> Iterator[tuple[EntityPath, tuple[int, ...], LeafValue]]:
    """Yield (leaf path, repeatable-ancestor instance indices, value)."""

    def walk(instance: Mapping, prefix: tuple[str, ...], indices: tuple[int, ...]):
        for name in sorted(instance):
            value = instance[name]
            path = prefix + (name,)
            if not value:
                continue
            if isinstance(value[0], LeafValue):
                for leaf in value:
                    yield EntityPath(path), indices, leaf
            else:
                for idx, inst in enumerate(value):
                    yield from walk(inst, path, indices + (idx,))

    yield from walk(values.root, (), ())


def support_tokens(values: DocumentValues) -> frozenset[int]:
    """Union of all supporting token ids across leaf values."""
    out: set[int] = set()
    for _, _, leaf in iter_leaf_entries(values):
        if leaf.support:
            out |= leaf.support
    return frozenset(out)


def canonical_values(values: DocumentValues):
    """Order-insensitive normalized form used for value equality.

    Leaf texts are normalized, support and inferred flags are ignored, and
    sibling instances are sorted by their canonical form.
    """

    def node_key(value):
        if value and isinstance(value[0], LeafValue):
            return ("leaf", tuple(sorted(normalize_text(v.text) for v in value)))
        return ("group", tuple(sorted(instance_key(inst) for inst in value)))

    def instance_key(instance: Mapping):
        items = []
        for name in sorted(instance):
            key = node_key(instance[name])
            if key in (("leaf", ()), ("group", ())):
                continue
            items.append((name, key))
        return tuple(items)

    return instance_key(values.root)


def values_equal(a: DocumentValues, b: DocumentValues) -> bool:
    return canonical_values(a) == canonical_values(b)


def first_difference(a: DocumentValues, b: DocumentValues) -> str | None:
    """First path (dotted, sorted walk) where two value trees differ."""

    def instance_sort_key(inst: Mapping):
        return canonical_values(DocumentValues(dict(inst)))

    def walk(inst_a: Mapping, inst_b: Mapping, prefix: tuple[str, ...]) -> str | None:
        names = sorted(set(inst_a) | set(inst_b))
        for name in names:
            path = prefix + (name,)
            va = inst_a.get(name, ())
            vb = inst_b.get(name, ())
            if not va and not vb:
                continue
            leaf_a = bool(va) and isinstance(va[0], LeafValue)
            leaf_b = bool(vb) and isinstance(vb[0], LeafValue)
            if not va or not vb or leaf_a != leaf_b:
                return ".".join(path)
            if leaf_a:
                if sorted(normalize_text(v.text) for v in va) != sorted(
                    normalize_text(v.text) for v in vb
                ):
                    return ".".join(path)
            else:
                if len(va) != len(vb):
                    return ".".join(path)
                for ia, ib in zip(sorted(va, key=instance_sort_key), sorted(vb, key=instance_sort_key)):
                    diff = walk(ia, ib, path)
                    if diff is not None:
                        return diff
        return None

    return walk(a.root, b.root, ())


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(f"{v.path}: {v.message}" for v in self.violations)


def validate_values(schema: DocumentSchema, values: DocumentValues) -> ValidationReport:
    """List every structural violation of the values against the schema.

    Violations are data, not failures: an empty report means valid.
    """
    violations: list[Violation] = []

    def walk(instance: Mapping, node: SchemaNode | None, prefix: tuple[str, ...]):
        for name in sorted(instance):
            value = instance[name]
            path = prefix + (name,)
            dotted = ".".join(path)
            child = schema.root(name) if node is None else node.child(name)
            if child is None:
                violations.append(Violation(dotted, "unknown path"))
                continue
            if not value:
                continue
            if isinstance(value[0], LeafValue):
                if not child.is_leaf:
                    violations.append(Violation(dotted, "expected group instances, got values"))
                    continue
                if not child.repeatable and len(value) > 1:
                    violations.append(
                        Violation(dotted, f"non-repeatable leaf has {len(value)} values")
                    )
            else:
                if child.is_leaf:
                    violations.append(Violation(dotted, "expected values, got group instances"))
                    continue
                if not child.repeatable and len(value) > 1:
                    violations.append(
                        Violation(dotted, f"non-repeatable group has {len(value)} instances")
                    )
                for inst in value:
                    walk(inst, child, path)

    walk(values.root, None, ())
    return ValidationReport(tuple(violations))


def coerce_to_schema(
    data: Mapping, schema: DocumentSchema
) -> tuple[DocumentValues, list[str]]:
    """Coerce loosely structured data (e.g. model output) into valid values.

    Unknown paths and shape mismatches are dropped; one warning per drop.
    """
    warnings: list[str] = []

    def coerce_leaf(value, dotted: str) -> tuple[LeafValue, ...]:
        if value is None:
            return ()
        if isinstance(value, (str, int, float)):
            text = str(value)
            return (LeafValue(text),) if text.strip() else ()
        if isinstance(value, Mapping):
            if _looks_like_leaf_record(value):
                return (_leaf_from_record(value),)
            warnings.append(f"{dotted}: expected value, got object; dropped")
            return ()
        if isinstance(value, Sequence):
            out = []
            for item in value:
                out.extend(coerce_leaf(item, dotted))
            return tuple(out)
        warnings.append(f"{dotted}: cannot interpret {type(value).__name__}; dropped")
        return ()

    def coerce_instance(obj, node_children: tuple[SchemaNode, ...], prefix: tuple[str, ...]) -> dict:
        out: dict = {}
        if not isinstance(obj, Mapping):
            warnings.append(f"{'.'.join(prefix) or '<root>'}: expected object; dropped")
            return out
        by_name = {c.name: c for c in node_children}
        for name, value in obj.items():
            path = prefix + (str(name),)
            dotted = ".".join(path)
            child = by_name.get(name)
            if child is None:
                warnings.append(f"{dotted}: unknown path; dropped")
                continue
            if child.is_leaf:
                leaves = coerce_leaf(value, dotted)
                if leaves:
                    out[name] = leaves
            else:
                if isinstance(value, Mapping):
                    instances = [value]
                elif isinstance(value, Sequence) and not isinstance(value, str):
                    instances = [v for v in value if v is not None]
                elif value is None:
                    instances = []
                else:
                    warnings.append(f"{dotted}: expected group instances; dropped")
                    continue
                coerced = []
                for inst in instances:
                    inner = coerce_instance(inst, child.children, path)
                    if inner:
                        coerced.append(inner)
                if coerced:
                    if not child.repeatable and len(coerced) > 1:
                        warnings.append(f"{dotted}: non-repeatable group given {len(coerced)} instances; merging")
                        coerced = [_merge_instance_dicts(coerced)]
                    out[name] = tuple(coerced)
        return out

    root = coerce_instance(data, tuple(schema.roots), ())
    return DocumentValues(root), warnings


def _merge_instance_dicts(instances: list[dict]) -> dict:
    merged: dict = {}
    for inst in instances:
        for name, value in inst.items():
            if not value:
                continue
            if name not in merged:
                merged[name] = value
            elif isinstance(value[0], LeafValue):
                existing = list(merged[name])
                seen = {v.key() for v in existing}
                existing.extend(leaf for leaf in value if leaf.key() not in seen)
                merged[name] = tuple(existing)
            else:
                merged[name] = tuple(merged[name]) + tuple(value)
    return merged


# ---------------------------------------------------------------------------
# Restriction
# ---------------------------------------------------------------------------


def restrict_values(doc: Document, values: DocumentValues, segment: Segment) -> DocumentValues:
    """Restrict values to a segment: keep leaves whose support lies inside it.

    Restricting to the whole document is the identity; values without token
    support (inferred or unrecovered) survive only that case. Group instances
    left without any populated leaf are dropped.
    """
    check_segment(doc, segment)
    if segment.covers(doc):
        return values
    allowed = segment.token_ids

    def walk(instance: Mapping) -> dict:
        out: dict = {}
        for name, value in instance.items():
            if not value:
                continue
            if isinstance(value[0], LeafValue):
                kept = tuple(
                    leaf for leaf in value if leaf.support is not None and leaf.support <= allowed
                )
                if kept:
                    out[name] = kept
            else:
                kept_instances = []
                for inst in value:
                    inner = walk(inst)
                    if inner:
                        kept_instances.append(inner)
                if kept_instances:
                    out[name] = tuple(kept_instances)
        return out

    return DocumentValues(walk(values.root))


# ---------------------------------------------------------------------------
# Merge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MergeConflict:
    path: str
    kept: str
    dropped: str


def merge_values(parts: Sequence[DocumentValues], schema: DocumentSchema) -> DocumentValues:
    """Union partial value trees, preserving part order. See merge_values_detailed."""
    merged, _ = merge_values_detailed(parts, schema)
    return merged


def merge_values_detailed(
    parts: Sequence[DocumentValues], schema: DocumentSchema
) -> tuple[DocumentValues, list[MergeConflict]]:
    """Union partial value trees and report conflicts.

    Leaf values are concatenated in part order with identical duplicates
    collapsed; repeatable group instances are concatenated with identical
    duplicates collapsed; non-repeatable groups have their instances merged
    recursively. A non-repeatable leaf receiving two distinct values keeps the
    first and reports a conflict.
    """
    conflicts: list[MergeConflict] = []

    def merge_leaf(
        values_in_order: list[tuple[LeafValue, ...]], node: SchemaNode, dotted: str
    ) -> tuple[LeafValue, ...]:
        out: list[LeafValue] = []
        seen: set[tuple] = set()
        for leaves in values_in_order:
            for leaf in leaves:
                if leaf.key() in seen:
                    continue
                seen.add(leaf.key())
                out.append(leaf)
        if not node.repeatable and len(out) > 1:
            for extra in out[1:]:
                conflicts.append(MergeConflict(dotted, out[0].text, extra.text))
            out = out[:1]
        return tuple(out)

    def merge_group(
        instances_in_order: list[tuple[dict, ...]], node: SchemaNode, prefix: tuple[str, ...]
    ) -> tuple[dict, ...]:
        flat: list[dict] = []
        for instances in instances_in_order:
            flat.extend(instances)
        if not flat:
            return ()
        if node.repeatable:
            out = []
            seen = set()
            for inst in flat:
                key = canonical_values(DocumentValues(dict(inst))), _support_key(inst)
                if key in seen:
                    continue
                seen.add(key)
                out.append(inst)
            return tuple(out)
        return (merge_instances(flat, node, prefix),)

    def merge_instances(
        instances: list[Mapping], node: SchemaNode, prefix: tuple[str, ...]
    ) -> dict:
        out: dict = {}
        for child in node.children:
            path = prefix + (child.name,)
            present = [inst[child.name] for inst in instances if inst.get(child.name)]
            if not present:
                continue
            if child.is_leaf:
                out[child.name] = merge_leaf(present, child, ".".join(path))
            else:
                merged = merge_group(present, child, path)
                if merged:
                    out[child.name] = merged
        return out

    roots: dict = {}
    for root_node in schema.roots:
        present = [part.root[root_node.name] for part in parts if part.root.get(root_node.name)]
        if not present:
            continue
        if root_node.is_leaf:
            merged_leaf = merge_leaf(present, root_node, root_node.name)
            if merged_leaf:
                roots[root_node.name] = merged_leaf
        else:
            merged_group = merge_group(present, root_node, (root_node.name,))
            if merged_group:
                roots[root_node.name] = merged_group
    return DocumentValues(roots), conflicts


def _support_key(instance: Mapping) -> tuple:
    keys = []
    for name in sorted(instance):
        value = instance[name]
        if value and isinstance(value[0], LeafValue):
            keys.append((name, tuple(v.key() for v in value)))
        else:
            keys.append((name, tuple(_support_key(inst) for inst in value)))
    return tuple(keys)
