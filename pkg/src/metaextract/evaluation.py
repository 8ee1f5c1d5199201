"""Field alignment and Correct/Missing/Hallucinated labelling.

Two judges share one output shape: a deterministic judge whose synonym and
unit knowledge lives in auditable data files, and an optional LLM judge that
sees only blinded GT/EXT value pairs (never a model identity, strategy name,
or the source document).
"""

from __future__ import annotations

import csv
import json
import random
import re
import unicodedata
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Optional

from .gateway import Gateway, ModelRequest, ParseFailure
from .jsontree import (
    META_KEYS,
    Category,
    EvalLabel,
    EvalStatus,
    ErrorType,
    ExtractionRecord,
    FieldPath,
    GroundTruthDoc,
    Strategy,
    canonical_equal,
    canonicalize_value,
    is_leaf,
    resolve,
)
from .prompts import render_evaluation

DATA_DIR = Path(__file__).parent / "data"


class EvaluationError(Exception):
    pass


class ResultCountMismatch(EvaluationError):
    pass


# ---------------------------------------------------------------------------
# Normalization helpers
# ---------------------------------------------------------------------------

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def phrase_key(text: str) -> str:
    """Casefolded, punctuation-insensitive phrase form for synonym lookup."""
    text = unicodedata.normalize("NFKC", text).casefold()
    return _NON_ALNUM.sub(" ", text).strip()


def unit_key(text: str) -> str:
    """Unit form: NFKC (folds superscripts), drop spacing and caret marks."""
    text = unicodedata.normalize("NFKC", text).casefold()
    return re.sub(r"[\s^]+", "", text)


def _class_map(classes: Iterable[Iterable[str]], keyfn) -> dict[str, int]:
    mapping: dict[str, int] = {}
    for i, cls in enumerate(classes):
        for phrase in cls:
            mapping[keyfn(phrase)] = i
    return mapping


_NOT_REPORTED = {"not reported", "na", "n a", "none reported", "null", "nr",
                 "not mentioned", "not stated", "not available"}


def is_not_reported(leaf: Any) -> bool:
    if leaf is None:
        return True
    if isinstance(leaf, str):
        return phrase_key(leaf) in _NOT_REPORTED
    return False


@dataclass(frozen=True)
class ComparisonOptions:
    numeric_rel_tolerance: Decimal = Decimal("0.01")
    unit_classes: tuple[tuple[str, ...], ...] = ()
    synonym_classes: tuple[tuple[str, ...], ...] = ()
    generic_terms: frozenset[str] = frozenset()
    semantic_judge: str = "off"  # "off" | "llm"

    def __post_init__(self) -> None:
        if self.numeric_rel_tolerance < 0:
            raise ValueError("tolerance must be non-negative")

    @classmethod
    def load_default(cls, numeric_rel_tolerance: Decimal = Decimal("0.01"),
                     semantic_judge: str = "off") -> "ComparisonOptions":
        units = json.loads((DATA_DIR / "unit_equivalences.json").read_text("utf-8"))
        syns = json.loads((DATA_DIR / "string_synonyms.json").read_text("utf-8"))
        generic = json.loads((DATA_DIR / "generic_terms.json").read_text("utf-8"))
        return cls(
            numeric_rel_tolerance=numeric_rel_tolerance,
            unit_classes=tuple(tuple(c) for c in units["classes"]),
            synonym_classes=tuple(tuple(c) for c in syns["classes"]),
            generic_terms=frozenset(phrase_key(t) for t in generic["terms"]),
            semantic_judge=semantic_judge,
        )

    @property
    def unit_map(self) -> dict[str, int]:
        return _class_map(self.unit_classes, unit_key)

    @property
    def synonym_map(self) -> dict[str, int]:
        return _class_map(self.synonym_classes, phrase_key)

    def same_synonym_class(self, a: str, b: str) -> bool:
        mapping = self.synonym_map
        ka, kb = phrase_key(a), phrase_key(b)
        return ka in mapping and kb in mapping and mapping[ka] == mapping[kb]


# ---------------------------------------------------------------------------
# Field alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldMatch:
    gt_path: FieldPath
    ext_path: Optional[FieldPath]
    method: str  # Exact | Normalized | Synonym | LlmSemantic | Unmatched

    def __post_init__(self) -> None:
        if (self.method == "Unmatched") != (self.ext_path is None):
            raise ValueError("Unmatched iff ext_path absent")


def _norm_key(key: str) -> str:
    return phrase_key(key).replace(" ", "")


def _match_key(node: dict, seg: str, opts: ComparisonOptions,
               level: str) -> Optional[str]:
    if seg in node:
        return seg
    if level == "exact":
        return None
    target = _norm_key(seg)
    for key in node:
        if key in META_KEYS:
            continue
        if _norm_key(key) == target:
            return key
    if level == "normalized":
        return None
    mapping = opts.synonym_map
    seg_class = mapping.get(phrase_key(seg))
    if seg_class is not None:
        for key in node:
            if key in META_KEYS:
                continue
            if mapping.get(phrase_key(key)) == seg_class:
                return key
    return None


def _descend(ext: Any, gt_path: FieldPath, opts: ComparisonOptions,
             level: str) -> Optional[FieldPath]:
    node = ext
    segments: list = []
    for seg in gt_path.segments:
        if isinstance(seg, int):
            if not isinstance(node, list) or not 0 <= seg < len(node):
                return None
            node, actual = node[seg], seg
        else:
            if not isinstance(node, dict):
                return None
            actual = _match_key(node, seg, opts, level)
            if actual is None:
                return None
            node = node[actual]
        segments.append(actual)
    if not is_leaf(node):
        return None
    return FieldPath(tuple(segments))


def _deep_candidates(ext: Any, last_seg: Any, opts: ComparisonOptions,
                     prefix: FieldPath = FieldPath(())) -> list[FieldPath]:
    """All non-meta leaves whose final key matches *last_seg* loosely."""
    found: list[FieldPath] = []
    if isinstance(ext, dict):
        for key, child in ext.items():
            if key in META_KEYS:
                continue
            path = prefix.child(key)
            if is_leaf(child):
                if isinstance(last_seg, str) and (
                        _norm_key(key) == _norm_key(last_seg)
                        or opts.same_synonym_class(key, last_seg)):
                    found.append(path)
            else:
                found.extend(_deep_candidates(child, last_seg, opts, path))
    elif isinstance(ext, list):
        for i, child in enumerate(ext):
            found.extend(_deep_candidates(child, last_seg, opts, prefix.child(i)))
    return found


def align_fields(gt_doc: GroundTruthDoc, ext: Any, category: Category,
                 opts: ComparisonOptions) -> list[FieldMatch]:
    """Greedy one-to-one alignment of scored GT leaves to EXT leaves,
    in GT document order."""
    matches: list[FieldMatch] = []
    consumed: set[tuple] = set()
    for gt_path, _gt_leaf in gt_doc.scored_leaves(category):
        match = _align_one(ext, gt_path, opts, consumed)
        if match.ext_path is not None:
            consumed.add(match.ext_path.segments)
        matches.append(match)
    return matches


def _align_one(ext: Any, gt_path: FieldPath, opts: ComparisonOptions,
               consumed: set[tuple]) -> FieldMatch:
    for level, method in (("exact", "Exact"), ("normalized", "Normalized"),
                          ("synonym", "Synonym")):
        path = _descend(ext, gt_path, opts, level)
        if path is not None and path.segments not in consumed:
            return FieldMatch(gt_path, path, method)
    for path in _deep_candidates(ext, gt_path.segments[-1], opts):
        if path.segments not in consumed:
            return FieldMatch(gt_path, path, "Synonym")
    return FieldMatch(gt_path, None, "Unmatched")


# ---------------------------------------------------------------------------
# Value comparison
# ---------------------------------------------------------------------------

def compare_values(gt_leaf: Any, ext_leaf: Any, category: Category,
                   opts: ComparisonOptions) -> EvalLabel:
    if is_not_reported(ext_leaf) and not is_not_reported(gt_leaf):
        return EvalLabel(EvalStatus.MISSING, ErrorType.MISSING_FIELD,
                         "extracted output marked the value as not reported")
    if canonical_equal(gt_leaf, ext_leaf):
        return EvalLabel(EvalStatus.CORRECT)

    gt_c = canonicalize_value(gt_leaf) if is_leaf(gt_leaf) else None
    ext_c = canonicalize_value(ext_leaf) if is_leaf(ext_leaf) else None

    if isinstance(gt_c, Decimal) and isinstance(ext_c, Decimal):
        if gt_c == 0:
            return _incorrect_value(gt_leaf, ext_leaf)
        rel = abs(ext_c - gt_c) / abs(gt_c)
        if rel <= opts.numeric_rel_tolerance:
            return EvalLabel(EvalStatus.CORRECT)
        return _incorrect_value(gt_leaf, ext_leaf)

    if isinstance(gt_c, str) and isinstance(ext_c, str):
        unit_map = opts.unit_map
        gt_u, ext_u = unit_key(str(gt_leaf)), unit_key(str(ext_leaf))
        if gt_u in unit_map and ext_u in unit_map:
            if unit_map[gt_u] == unit_map[ext_u]:
                return EvalLabel(EvalStatus.CORRECT)
            return EvalLabel(
                EvalStatus.HALLUCINATED, ErrorType.INCORRECT_UNIT,
                f"unit {ext_leaf!r} is not equivalent to {gt_leaf!r}")
        if opts.same_synonym_class(str(gt_leaf), str(ext_leaf)):
            return EvalLabel(EvalStatus.CORRECT)
        gt_tokens = phrase_key(str(gt_leaf)).split()
        ext_tokens = phrase_key(str(ext_leaf)).split()
        generic = all(t in opts.generic_terms for t in ext_tokens) and ext_tokens
        subset = ext_tokens and set(ext_tokens) < set(gt_tokens)
        if generic or subset:
            return EvalLabel(
                EvalStatus.HALLUCINATED, ErrorType.OVERGENERALIZED,
                f"extracted text {ext_leaf!r} is vaguer than {gt_leaf!r}")
        return _incorrect_value(gt_leaf, ext_leaf)

    return _incorrect_value(gt_leaf, ext_leaf)


def _incorrect_value(gt_leaf: Any, ext_leaf: Any) -> EvalLabel:
    return EvalLabel(EvalStatus.HALLUCINATED, ErrorType.INCORRECT_VALUE,
                     f"extracted {ext_leaf!r} contradicts ground truth {gt_leaf!r}")


# ---------------------------------------------------------------------------
# Document evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalEntry:
    match: FieldMatch
    label: EvalLabel
    gt_value: Any = None
    ext_value: Any = None

    def to_json(self) -> dict:
        data: dict[str, Any] = {
            "gt_path": self.match.gt_path.render(),
            "ext_path": self.match.ext_path.render() if self.match.ext_path else None,
            "method": self.match.method,
            "status": self.label.status.value,
            "gt_value": self.gt_value,
            "ext_value": self.ext_value,
        }
        if self.label.error_type is not None:
            data["error_type"] = self.label.error_type.value
        if self.label.explanation is not None:
            data["explanation"] = self.label.explanation
        return data

    @classmethod
    def from_json(cls, data: dict) -> "EvalEntry":
        ext_path = FieldPath.parse(data["ext_path"]) if data.get("ext_path") else None
        match = FieldMatch(FieldPath.parse(data["gt_path"]), ext_path,
                           data["method"])
        label = EvalLabel(
            EvalStatus(data["status"]),
            ErrorType(data["error_type"]) if data.get("error_type") else None,
            data.get("explanation"),
        )
        return cls(match, label, data.get("gt_value"), data.get("ext_value"))


@dataclass(frozen=True)
class DocEvaluation:
    doc_id: str
    model_id: Optional[str]
    strategy: Strategy
    category: Category
    evals: tuple[EvalEntry, ...]

    def counts(self) -> dict[EvalStatus, int]:
        out = {status: 0 for status in EvalStatus}
        for entry in self.evals:
            out[entry.label.status] += 1
        return out

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "model_id": self.model_id,
            "strategy": self.strategy.value,
            "category": self.category.value,
            "evals": [entry.to_json() for entry in self.evals],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DocEvaluation":
        return cls(
            doc_id=data["doc_id"],
            model_id=data.get("model_id"),
            strategy=Strategy(data["strategy"]),
            category=Category(data["category"]),
            evals=tuple(EvalEntry.from_json(e) for e in data["evals"]),
        )


def _subtree_of(tree: Any, paths: list[FieldPath]) -> Any:
    """Rebuild a nested tree containing only the given leaf paths (plus the
    leaf values), preserving structure."""
    out: dict = {}
    for path in paths:
        found, value = resolve(tree, path)
        if not found:
            continue
        node = out
        segs = path.segments
        for seg in segs[:-1]:
            node = node.setdefault(str(seg) if isinstance(seg, int) else seg, {})
        node[str(segs[-1]) if isinstance(segs[-1], int) else segs[-1]] = value
    return out


def evaluate_document(gt_doc: GroundTruthDoc, record: ExtractionRecord,
                      category: Category, opts: ComparisonOptions,
                      judge: str = "deterministic",
                      gateway: Optional[Gateway] = None,
                      judge_model: Optional[str] = None) -> DocEvaluation:
    if gt_doc.doc_id != record.doc_id:
        raise EvaluationError("ground truth and record refer to different documents")
    if judge == "deterministic":
        evals = _judge_deterministic(gt_doc, record.tree, category, opts)
    elif judge == "llm":
        if gateway is None or judge_model is None:
            raise EvaluationError("llm judge needs a gateway and judge model")
        evals = _judge_llm(gt_doc, record.tree, category, opts, gateway,
                           judge_model)
    else:
        raise EvaluationError(f"unknown judge {judge!r}")
    return DocEvaluation(
        doc_id=record.doc_id, model_id=record.model_id,
        strategy=record.strategy, category=category, evals=tuple(evals))


def _judge_deterministic(gt_doc: GroundTruthDoc, ext: Any, category: Category,
                         opts: ComparisonOptions) -> list[EvalEntry]:
    leaves = dict((path.segments, leaf)
                  for path, leaf in gt_doc.scored_leaves(category))
    entries = []
    for match in align_fields(gt_doc, ext, category, opts):
        gt_leaf = leaves[match.gt_path.segments]
        if match.ext_path is None:
            label = EvalLabel(EvalStatus.MISSING, ErrorType.MISSING_FIELD,
                              "field absent from extracted output")
            ext_leaf = None
        else:
            _, ext_leaf = resolve(ext, match.ext_path)
            label = compare_values(gt_leaf, ext_leaf, category, opts)
        entries.append(EvalEntry(match, label, gt_leaf, ext_leaf))
    return entries


_STATUS_ALIASES = {
    "correct": EvalStatus.CORRECT,
    "missing": EvalStatus.MISSING,
    "hallucinated": EvalStatus.HALLUCINATED,
    "hallucinate": EvalStatus.HALLUCINATED,
}


def _judge_llm(gt_doc: GroundTruthDoc, ext: Any, category: Category,
               opts: ComparisonOptions, gateway: Gateway,
               judge_model: str) -> list[EvalEntry]:
    scored = gt_doc.scored_leaves(category)
    gt_subtree = _subtree_of(gt_doc.tree, [path for path, _ in scored])
    tolerance = f"{opts.numeric_rel_tolerance * 100}%"
    prompt = render_evaluation(category, gt_subtree, ext, tolerance=tolerance)
    # The judge sees only the two JSON payloads: no model identity, no
    # strategy name, no source document.
    verdicts = _request_verdicts(gateway, judge_model, prompt)
    expected = {path.segments: leaf for path, leaf in scored}
    parsed = _index_verdicts(verdicts, expected)
    if parsed is None:
        retry_prompt = prompt + (
            "\n\nREMINDER: Return exactly one verdict object per GT field, "
            "using the field's full path as field_name.")
        verdicts = _request_verdicts(gateway, judge_model, retry_prompt)
        parsed = _index_verdicts(verdicts, expected)
        if parsed is None:
            raise ResultCountMismatch(
                "judge verdicts do not cover the scored ground-truth fields")
    entries = []
    for path, gt_leaf in scored:
        verdict = parsed[path.segments]
        label = _label_from_verdict(verdict)
        if label.status is EvalStatus.MISSING:
            match = FieldMatch(path, None, "Unmatched")
        else:
            match = FieldMatch(path, path, "LlmSemantic")
        entries.append(EvalEntry(match, label, gt_leaf, None))
    return entries


def _request_verdicts(gateway: Gateway, judge_model: str, prompt: str) -> Any:
    response = gateway.complete(ModelRequest(model_id=judge_model, prompt=prompt))
    data = response.parsed
    if isinstance(data, dict):
        for key in ("evaluations", "fields", "results"):
            if isinstance(data.get(key), list):
                return data[key]
        return [data]
    return data


def _index_verdicts(verdicts: Any, expected: dict) -> Optional[dict]:
    if not isinstance(verdicts, list):
        return None
    indexed: dict = {}
    for item in verdicts:
        if not isinstance(item, dict) or "field_name" not in item:
            return None
        try:
            path = FieldPath.parse(str(item["field_name"]))
        except ValueError:
            return None
        indexed[path.segments] = item
    if set(indexed) != set(expected):
        return None
    return indexed


def _label_from_verdict(verdict: dict) -> EvalLabel:
    status = _STATUS_ALIASES.get(str(verdict.get("status", "")).strip().casefold())
    if status is None:
        raise ParseFailure(f"judge verdict has bad status: {verdict}", str(verdict))
    if status is EvalStatus.CORRECT:
        return EvalLabel(EvalStatus.CORRECT)
    if status is EvalStatus.MISSING:
        return EvalLabel(EvalStatus.MISSING, ErrorType.MISSING_FIELD,
                         verdict.get("explanation"))
    try:
        error_type = ErrorType(str(verdict.get("error_type", "Incorrect value")))
    except ValueError:
        error_type = ErrorType.INCORRECT_VALUE
    if error_type is ErrorType.MISSING_FIELD:
        error_type = ErrorType.INCORRECT_VALUE
    return EvalLabel(status, error_type,
                     verdict.get("explanation") or "judge marked as hallucinated")


# ---------------------------------------------------------------------------
# Human audit sampling
# ---------------------------------------------------------------------------

AUDIT_COLUMNS = ["stratum", "doc_id", "path", "ext_value", "gt_value",
                 "human_label_1", "human_label_2"]


def _stratum_of(doc_eval: DocEvaluation) -> str:
    model = doc_eval.model_id or "combined"
    return f"{model}|{doc_eval.strategy.value}|{doc_eval.category.value}"


def audit_sample(evals: list[DocEvaluation], per_stratum: int,
                 seed: int) -> list[dict]:
    """Stratified (model x strategy x category) seeded sample for human
    labelling. Rows omit the automated judge's verdict so raters stay blind."""
    if per_stratum <= 0:
        raise ValueError("per_stratum must be positive")
    strata: dict[str, list[dict]] = {}
    for doc_eval in evals:
        stratum = _stratum_of(doc_eval)
        for entry in doc_eval.evals:
            strata.setdefault(stratum, []).append({
                "stratum": stratum,
                "doc_id": doc_eval.doc_id,
                "path": entry.match.gt_path.render(),
                "ext_value": "" if entry.ext_value is None else str(entry.ext_value),
                "gt_value": "" if entry.gt_value is None else str(entry.gt_value),
                "human_label_1": "",
                "human_label_2": "",
            })
    manifest: list[dict] = []
    for stratum in sorted(strata):
        rows = sorted(strata[stratum], key=lambda r: (r["doc_id"], r["path"]))
        rng = random.Random(f"{seed}:{stratum}")
        if len(rows) > per_stratum:
            rows = rng.sample(rows, per_stratum)
            rows.sort(key=lambda r: (r["doc_id"], r["path"]))
        manifest.extend(rows)
    return manifest


def write_audit_csv(manifest: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=AUDIT_COLUMNS)
        writer.writeheader()
        writer.writerows(manifest)


def ingest_human_labels(path: Path, evals: list[DocEvaluation]) -> dict:
    """Read back a labelled audit CSV; report rater agreement and kappa,
    both human-vs-human and each human vs the automated judge (judge labels
    are rejoined from the evaluations, never stored in the CSV)."""
    from .stats import cohens_kappa  # local import; stats consumes evaluations

    judge_by_key: dict[tuple, str] = {}
    for doc_eval in evals:
        stratum = _stratum_of(doc_eval)
        for entry in doc_eval.evals:
            key = (stratum, doc_eval.doc_id, entry.match.gt_path.render())
            judge_by_key[key] = entry.label.status.value

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.DictReader(fh)
                if row["human_label_1"] and row["human_label_2"]]
    if not rows:
        raise EvaluationError("no fully labelled rows in audit file")
    h1 = [row["human_label_1"] for row in rows]
    h2 = [row["human_label_2"] for row in rows]
    judge = []
    for row in rows:
        key = (row["stratum"], row["doc_id"], row["path"])
        if key not in judge_by_key:
            raise EvaluationError(f"audit row not found in evaluations: {key}")
        judge.append(judge_by_key[key])
    agree_hh = sum(1 for x, y in zip(h1, h2) if x == y) / len(rows)
    agree_hj = sum(1 for x, y, z in zip(h1, h2, judge)
                   if x == z or y == z) / len(rows)
    return {
        "n": len(rows),
        "human_agreement": agree_hh,
        "human_judge_agreement": agree_hj,
        "kappa_human_human": cohens_kappa(h1, h2),
        "kappa_human1_judge": cohens_kappa(h1, judge),
        "kappa_human2_judge": cohens_kappa(h2, judge),
    }
