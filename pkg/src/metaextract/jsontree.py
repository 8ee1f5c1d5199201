"""Core data model: JSON trees, field paths, canonical serialization.

Trees are ordinary Python values (None, bool, int/Decimal, str, list, dict).
Numbers are kept as exact decimals so canonical serialization round-trips
byte-stably. All types here are immutable values by convention; functions
never mutate their inputs.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from functools import total_ordering
from typing import Any, Iterator, Optional, Union

# Keys that carry annotation metadata rather than extracted values.
# Excluded from scoring and leaf enumeration when skip_meta is set.
META_KEYS = frozenset(
    {"source", "confidence", "notes", "needs_transformation",
     "justification", "data_conflicts"}
)


@total_ordering
class ConfidenceLevel(Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"

    def __lt__(self, other: "ConfidenceLevel") -> bool:
        order = {"Low": 0, "Medium": 1, "High": 2}
        return order[self.value] < order[other.value]

    @classmethod
    def parse(cls, text: str) -> Optional["ConfidenceLevel"]:
        try:
            return cls(text.strip().capitalize())
        except (ValueError, AttributeError):
            return None


class Category(Enum):
    STATISTICS = "statistics"
    QUALITY_ASSESSMENT = "quality_assessment"
    STUDY_INFO = "study_info"


class Strategy(Enum):
    EXT = "ext"
    SELF_REFLECTION = "self_reflection"
    COMBINED_EXT = "combined_ext"
    CUSTOMISED_EXT = "customised_ext"


class PdfStatus(Enum):
    PROCESSED = "Processed"
    UNREADABLE = "Unreadable"


class EvalStatus(Enum):
    CORRECT = "Correct"
    MISSING = "Missing"
    HALLUCINATED = "Hallucinated"


class ErrorType(Enum):
    MISSING_FIELD = "Missing field"
    INCORRECT_VALUE = "Incorrect value"
    INCORRECT_UNIT = "Incorrect unit"
    OVERGENERALIZED = "Overgeneralized"


@dataclass(frozen=True)
class EvalLabel:
    """Verdict for a single ground-truth field."""

    status: EvalStatus
    error_type: Optional[ErrorType] = None
    explanation: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status is EvalStatus.CORRECT:
            if self.error_type is not None or self.explanation is not None:
                raise ValueError("Correct labels carry no error_type/explanation")
        elif self.status is EvalStatus.MISSING:
            if self.error_type is not ErrorType.MISSING_FIELD:
                raise ValueError("Missing labels must use the missing-field error type")
        else:
            if self.error_type not in (
                ErrorType.INCORRECT_VALUE,
                ErrorType.INCORRECT_UNIT,
                ErrorType.OVERGENERALIZED,
            ):
                raise ValueError("Hallucinated labels need a hallucination subtype")
            if not self.explanation:
                raise ValueError("Hallucinated labels need an explanation")


# ---------------------------------------------------------------------------
# Field paths
# ---------------------------------------------------------------------------

Segment = Union[str, int]

_BARE_KEY = re.compile(r"[A-Za-z0-9_\- %]+$")
_PATH_TOKEN = re.compile(
    r"""\[(?P<index>\d+)\]     # [3]
      | \[(?P<quoted>"(?:[^"\\]|\\.)*")\]  # ["a.b"]
      | (?P<bare>[^.\[\]]+)    # plain key
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class FieldPath:
    """Address of a node in a JSON tree: key and index segments."""

    segments: tuple[Segment, ...]

    def __str__(self) -> str:
        return self.render()

    def render(self) -> str:
        parts: list[str] = []
        for seg in self.segments:
            if isinstance(seg, int):
                parts.append(f"[{seg}]")
            elif _BARE_KEY.match(seg):
                parts.append(("." if parts else "") + seg)
            else:
                parts.append(f"[{json.dumps(seg, ensure_ascii=False)}]")
        return "".join(parts)

    @classmethod
    def parse(cls, text: str) -> "FieldPath":
        segments: list[Segment] = []
        pos = 0
        while pos < len(text):
            if text[pos] == ".":
                pos += 1
                continue
            m = _PATH_TOKEN.match(text, pos)
            if not m:
                raise ValueError(f"unparseable field path: {text!r}")
            if m.group("index") is not None:
                segments.append(int(m.group("index")))
            elif m.group("quoted") is not None:
                segments.append(json.loads(m.group("quoted")))
            else:
                segments.append(m.group("bare"))
            pos = m.end()
        return cls(tuple(segments))

    def child(self, seg: Segment) -> "FieldPath":
        return FieldPath(self.segments + (seg,))

    def starts_with(self, prefix: "FieldPath") -> bool:
        return self.segments[: len(prefix.segments)] == prefix.segments


EMPTY_PATH = FieldPath(())


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

def parse_json(text: str) -> Any:
    """Parse JSON keeping numbers exact (ints stay int, floats become Decimal)."""
    return json.loads(text, parse_float=Decimal)


def format_number(value: Union[int, Decimal, float]) -> str:
    """Render a number with no trailing zeros and no exponent for sane magnitudes."""
    if isinstance(value, bool):  # bool is an int subclass; guard anyway
        raise TypeError("bool is not a number here")
    if isinstance(value, int):
        return str(value)
    d = Decimal(str(value)) if isinstance(value, float) else value
    if not d.is_finite():
        raise ValueError("NaN/Inf cannot be serialized canonically")
    d = d.normalize()
    if d == d.to_integral_value():
        return str(int(d))
    return format(d, "f")


def dumps_canonical(tree: Any) -> str:
    """Serialize to canonical JSON: UTF-8, sorted keys, fixed number format."""
    out: list[str] = []
    _write_canonical(tree, out)
    return "".join(out)


def _write_canonical(value: Any, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, (int, Decimal, float)):
        out.append(format_number(value))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, list):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _write_canonical(item, out)
        out.append("]")
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise TypeError(f"object keys must be strings, got {key!r}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _write_canonical(value[key], out)
        out.append("}")
    else:
        raise TypeError(f"unsupported JSON tree value: {type(value).__name__}")


def tree_digest(tree: Any) -> str:
    """Hex sha256 of the canonical serialization."""
    return hashlib.sha256(dumps_canonical(tree).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Tree operations
# ---------------------------------------------------------------------------

def is_leaf(value: Any) -> bool:
    return not isinstance(value, (dict, list))


def resolve(tree: Any, path: FieldPath) -> tuple[bool, Any]:
    """Look up the node at *path*.

    Returns (found, node); absence is a value, not an error.
    """
    node = tree
    for seg in path.segments:
        if isinstance(seg, int):
            if not isinstance(node, list) or not 0 <= seg < len(node):
                return False, None
            node = node[seg]
        else:
            if not isinstance(node, dict) or seg not in node:
                return False, None
            node = node[seg]
    return True, node


def enumerate_leaves(
    tree: Any,
    skip_meta: bool = False,
    meta_keys: frozenset[str] = META_KEYS,
) -> list[tuple[FieldPath, Any]]:
    """Depth-first leaves in document order.

    With skip_meta, subtrees under reserved meta keys are excluded.
    """
    return list(_walk(tree, EMPTY_PATH, skip_meta, meta_keys))


def _walk(node: Any, path: FieldPath, skip_meta: bool,
          meta_keys: frozenset[str]) -> Iterator[tuple[FieldPath, Any]]:
    if isinstance(node, dict):
        for key, child in node.items():
            if skip_meta and key in meta_keys:
                continue
            yield from _walk(child, path.child(key), skip_meta, meta_keys)
    elif isinstance(node, list):
        for i, child in enumerate(node):
            yield from _walk(child, path.child(i), skip_meta, meta_keys)
    else:
        yield path, node


_WS = re.compile(r"\s+")
_NUMERIC_TEXT = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def canonicalize_value(value: Any) -> Any:
    """Canonical form of a leaf for equality tests (merge voting).

    Text is NFC-normalized, whitespace-collapsed, trimmed and casefolded;
    numeric-looking text becomes a Decimal; numbers compare by exact value.
    """
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, int):
        return Decimal(value)
    if isinstance(value, float):
        return Decimal(str(value))
    if isinstance(value, Decimal):
        return value
    if isinstance(value, str):
        text = _WS.sub(" ", unicodedata.normalize("NFC", value)).strip()
        if _NUMERIC_TEXT.match(text):
            try:
                return Decimal(text)
            except InvalidOperation:
                pass
        return text.casefold()
    raise TypeError(f"not a leaf value: {type(value).__name__}")


def canonical_equal(a: Any, b: Any) -> bool:
    """Leaf equality after canonicalization; non-leaves compare canonically serialized."""
    if is_leaf(a) and is_leaf(b):
        ca, cb = canonicalize_value(a), canonicalize_value(b)
        if isinstance(ca, Decimal) and isinstance(cb, Decimal):
            return ca == cb
        return type(ca) is type(cb) and ca == cb
    if is_leaf(a) != is_leaf(b):
        return False
    return dumps_canonical(a) == dumps_canonical(b)


def nearest_enclosing_meta(tree: Any, path: FieldPath, key: str) -> Optional[Any]:
    """Value of the nearest enclosing meta *key* (e.g. "confidence") for a node."""
    best = None
    node = tree
    if isinstance(node, dict) and key in node:
        best = node[key]
    for seg in path.segments:
        found, node = resolve(node, FieldPath((seg,)))
        if not found:
            break
        if isinstance(node, dict) and key in node:
            best = node[key]
    return best


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionRecord:
    doc_id: str
    strategy: Strategy
    tree: Any
    pdf_status: PdfStatus
    prompt_hash: str
    model_id: Optional[str] = None
    created_at: Optional[str] = None
    token_estimate: Optional[int] = None
    profile_id: Optional[str] = None
    degraded: bool = False
    failed: bool = False

    def __post_init__(self) -> None:
        if self.strategy is Strategy.COMBINED_EXT:
            if self.model_id is not None:
                raise ValueError("combined records carry no single model identity")
        elif self.model_id is None and not self.failed:
            raise ValueError("non-combined records need a model_id")
        if self.token_estimate is not None and self.token_estimate < 0:
            raise ValueError("token_estimate must be non-negative")

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "model_id": self.model_id,
            "strategy": self.strategy.value,
            "tree": self.tree,
            "pdf_status": self.pdf_status.value,
            "prompt_hash": self.prompt_hash,
            "created_at": self.created_at,
            "token_estimate": self.token_estimate,
            "profile_id": self.profile_id,
            "degraded": self.degraded,
            "failed": self.failed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExtractionRecord":
        return cls(
            doc_id=data["doc_id"],
            model_id=data.get("model_id"),
            strategy=Strategy(data["strategy"]),
            tree=data["tree"],
            pdf_status=PdfStatus(data["pdf_status"]),
            prompt_hash=data["prompt_hash"],
            created_at=data.get("created_at"),
            token_estimate=data.get("token_estimate"),
            profile_id=data.get("profile_id"),
            degraded=data.get("degraded", False),
            failed=data.get("failed", False),
        )


@dataclass(frozen=True)
class GroundTruthDoc:
    doc_id: str
    tree: Any
    category_map: dict[str, Category]  # rendered path prefix -> category
    ma_id: str = ""

    def category_of(self, path: FieldPath) -> Optional[Category]:
        """Longest-prefix category lookup for a scored leaf."""
        best: Optional[Category] = None
        best_len = -1
        for prefix_text, cat in self.category_map.items():
            prefix = FieldPath.parse(prefix_text) if prefix_text else EMPTY_PATH
            if path.starts_with(prefix) and len(prefix.segments) > best_len:
                best, best_len = cat, len(prefix.segments)
        return best

    def scored_leaves(self, category: Optional[Category] = None,
                      meta_keys: frozenset[str] = META_KEYS,
                      ) -> list[tuple[FieldPath, Any]]:
        leaves = enumerate_leaves(self.tree, skip_meta=True, meta_keys=meta_keys)
        out = []
        for path, value in leaves:
            cat = self.category_of(path)
            if cat is None:
                continue
            if category is None or cat is category:
                out.append((path, value))
        return out


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")
