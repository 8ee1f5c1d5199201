"""Extraction strategies: baseline, self-reflection, customised prompts.

Self-reflection corrections are located by structural matching ("minimal
change" patches name a top-level field plus just enough nested keys to pin
down the error location) and applied without touching any other leaf.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .gateway import Attachment, Gateway, ModelRequest, ParseFailure, estimate_tokens
from .jsontree import (
    ConfidenceLevel,
    ExtractionRecord,
    FieldPath,
    PdfStatus,
    Strategy,
    resolve,
)
from .prompts import DomainProfile, render_baseline, render_customised, render_reflection


class ExtractionError(Exception):
    pass


class SchemaViolation(ExtractionError):
    pass


class TargetNotFound(ExtractionError):
    pass


class AmbiguousTarget(ExtractionError):
    pass


@dataclass(frozen=True)
class Correction:
    field_name: str
    justification: str
    initial_value: Optional[Any] = None
    revised_value: Optional[Any] = None
    revised_source: Optional[str] = None
    revised_confidence: Optional[ConfidenceLevel] = None

    def __post_init__(self) -> None:
        if self.revised_value is None and self.revised_source is None \
                and self.revised_confidence is None:
            raise SchemaViolation(
                f"correction for {self.field_name!r} revises nothing")


@dataclass(frozen=True)
class CorrectionSet:
    status: str  # "corrections" | "no_corrections"
    corrections: tuple[Correction, ...]
    pdf_status: PdfStatus

    def __post_init__(self) -> None:
        if self.status == "no_corrections" and self.corrections:
            raise SchemaViolation("no-corrections set must be empty")

    @classmethod
    def from_json(cls, data: Any) -> "CorrectionSet":
        if not isinstance(data, dict):
            raise SchemaViolation("correction set must be a JSON object")
        pdf_status = PdfStatus(data.get("pdf_status", "Processed"))
        if data.get("status", "").lower().startswith("no corrections"):
            return cls("no_corrections", (), pdf_status)
        raw = data.get("data_corrections")
        if not isinstance(raw, list):
            raise SchemaViolation("expected a data_corrections list")
        corrections = []
        for item in raw:
            if not isinstance(item, dict):
                raise SchemaViolation("correction entries must be objects")
            if "field_name" not in item:
                raise SchemaViolation("correction missing field_name")
            if not item.get("justification"):
                raise SchemaViolation(
                    f"correction for {item.get('field_name')!r} lacks justification")
            confidence = None
            if item.get("revised_confidence") is not None:
                confidence = ConfidenceLevel.parse(item["revised_confidence"])
                if confidence is None:
                    raise SchemaViolation(
                        f"bad confidence value {item['revised_confidence']!r}")
            corrections.append(Correction(
                field_name=item["field_name"],
                justification=item["justification"],
                initial_value=item.get("initial_value"),
                revised_value=item.get("revised_value"),
                revised_source=item.get("revised_source"),
                revised_confidence=confidence,
            ))
        return cls("corrections", tuple(corrections), pdf_status)


@dataclass
class ApplyReport:
    applied: int = 0
    skipped: list[tuple[Correction, str]] = field(default_factory=list)
    changed_paths: list[FieldPath] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Correction application
# ---------------------------------------------------------------------------

def _skeleton_fits(node: Any, skeleton: Any) -> bool:
    if not isinstance(skeleton, dict) or not skeleton:
        return True
    if not isinstance(node, dict):
        return False
    for key, sub in skeleton.items():
        if key not in node:
            return False
        if isinstance(sub, dict) and sub and not _skeleton_fits(node[key], sub):
            return False
    return True


def _find_matches(node: Any, skeleton: Any, prefix: FieldPath) -> list[FieldPath]:
    matches = []
    if _skeleton_fits(node, skeleton):
        matches.append(prefix)
    if isinstance(node, dict):
        for key, child in node.items():
            matches.extend(_find_matches(child, skeleton, prefix.child(key)))
    elif isinstance(node, list):
        for i, child in enumerate(node):
            matches.extend(_find_matches(child, skeleton, prefix.child(i)))
    return matches


def _overwrite(node: dict, revised: dict, at: FieldPath,
               changed: list[FieldPath]) -> None:
    for key, value in revised.items():
        if isinstance(value, dict) and isinstance(node.get(key), dict) and value:
            _overwrite(node[key], value, at.child(key), changed)
        else:
            node[key] = copy.deepcopy(value)
            changed.append(at.child(key))


def _set_nearest_meta(tree: Any, path: FieldPath, key: str,
                      value: Any) -> FieldPath:
    """Overwrite the deepest enclosing meta *key* along *path*; create at the
    innermost enclosing object if none exists. Returns the written path."""
    objects: list[tuple[FieldPath, dict]] = []
    node = tree
    if isinstance(node, dict):
        objects.append((FieldPath(()), node))
    for i, seg in enumerate(path.segments):
        found, node = resolve(node, FieldPath((seg,)))
        if not found:
            break
        if isinstance(node, dict):
            objects.append((FieldPath(path.segments[: i + 1]), node))
    for obj_path, obj in reversed(objects):
        if key in obj:
            obj[key] = value
            return obj_path.child(key)
    obj_path, obj = objects[-1]
    obj[key] = value
    return obj_path.child(key)


def apply_corrections(tree: Any, correction_set: CorrectionSet,
                      ) -> tuple[Any, ApplyReport]:
    """Apply a correction set, returning a new tree; the input is untouched.

    Corrections whose target cannot be located are skipped and reported.
    """
    out = copy.deepcopy(tree)
    report = ApplyReport()
    for correction in correction_set.corrections:
        try:
            changed = _apply_one(out, correction)
        except (TargetNotFound, AmbiguousTarget) as exc:
            report.skipped.append((correction, str(exc)))
            continue
        report.applied += 1
        report.changed_paths.extend(changed)
    return out, report


def _apply_one(tree: Any, correction: Correction) -> list[FieldPath]:
    if not isinstance(tree, dict) or correction.field_name not in tree:
        raise TargetNotFound(
            f"top-level field {correction.field_name!r} not in tree")
    anchor_path = FieldPath((correction.field_name,))
    anchor = tree[correction.field_name]

    skeleton = correction.initial_value
    if skeleton is None:
        skeleton = correction.revised_value
    target_path = anchor_path
    if isinstance(skeleton, dict) and skeleton:
        matches = _find_matches(anchor, skeleton, anchor_path)
        if not matches:
            raise TargetNotFound(
                f"no subtree of {correction.field_name!r} matches the "
                f"identifying keys {sorted(skeleton)}")
        if len(matches) > 1:
            raise AmbiguousTarget(
                f"{len(matches)} subtrees of {correction.field_name!r} match "
                f"the identifying keys {sorted(skeleton)}")
        target_path = matches[0]

    changed: list[FieldPath] = []
    if correction.revised_value is not None:
        _, target = resolve(tree, target_path)
        if isinstance(correction.revised_value, dict) and isinstance(target, dict):
            _overwrite(target, correction.revised_value, target_path, changed)
        else:
            tree[correction.field_name] = copy.deepcopy(correction.revised_value)
            changed.append(anchor_path)

    meta_anchor = changed[0] if changed else target_path
    if correction.revised_source is not None:
        changed.append(_set_nearest_meta(
            tree, meta_anchor, "source", correction.revised_source))
    if correction.revised_confidence is not None:
        changed.append(_set_nearest_meta(
            tree, meta_anchor, "confidence", correction.revised_confidence.value))
    return changed


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def prompt_hash(prompt: str, attachment: Optional[Attachment]) -> str:
    h = hashlib.sha256(prompt.encode("utf-8"))
    if attachment is not None:
        h.update(bytes.fromhex(attachment.sha256))
    return h.hexdigest()


@dataclass
class ExtractionPipeline:
    gateway: Gateway
    doc_provider: Callable[[str], Attachment]

    def extract_baseline(self, doc_id: str, model_id: str) -> ExtractionRecord:
        return self._extract(doc_id, model_id, render_baseline(),
                             Strategy.EXT, profile_id=None)

    def extract_customised(self, doc_id: str, model_id: str,
                           profile: DomainProfile) -> ExtractionRecord:
        return self._extract(doc_id, model_id, render_customised(profile),
                             Strategy.CUSTOMISED_EXT, profile_id=profile.profile_id)

    def _extract(self, doc_id: str, model_id: str, prompt: str,
                 strategy: Strategy, profile_id: Optional[str]) -> ExtractionRecord:
        attachment = self.doc_provider(doc_id)
        request = ModelRequest(model_id=model_id, prompt=prompt,
                               attachment=attachment)
        try:
            response = self.gateway.complete(request)
            tree = response.parsed
            status = _pdf_status_of(tree)
        except ParseFailure:
            return ExtractionRecord(
                doc_id=doc_id, model_id=model_id, strategy=strategy,
                tree={}, pdf_status=PdfStatus.PROCESSED,
                prompt_hash=prompt_hash(prompt, attachment),
                profile_id=profile_id, failed=True)
        if status is PdfStatus.UNREADABLE:
            tree = {"pdf_status": PdfStatus.UNREADABLE.value}
        return ExtractionRecord(
            doc_id=doc_id, model_id=model_id, strategy=strategy, tree=tree,
            pdf_status=status,
            prompt_hash=prompt_hash(prompt, attachment),
            created_at=response.created_at,
            token_estimate=estimate_tokens(prompt, attachment.data),
            profile_id=profile_id)

    def self_reflect(self, initial: ExtractionRecord) -> CorrectionSet:
        if initial.strategy is not Strategy.EXT:
            raise ExtractionError("reflection starts from a baseline record")
        prompt = render_reflection(initial)
        attachment = self.doc_provider(initial.doc_id)
        # Reflection goes back to the same model that produced the extraction.
        request = ModelRequest(model_id=initial.model_id, prompt=prompt,
                               attachment=attachment)
        response = self.gateway.complete(request)
        return CorrectionSet.from_json(response.parsed)

    def reflect_record(self, initial: ExtractionRecord) -> ExtractionRecord:
        """Run self-reflection and apply its corrections.

        Unparseable reflections degrade to the unmodified baseline tree so
        aggregate metrics stay comparable across strategies.
        """
        try:
            correction_set = self.self_reflect(initial)
        except (ParseFailure, SchemaViolation):
            return _as_reflected(initial, initial.tree, degraded=True)
        tree, _report = apply_corrections(initial.tree, correction_set)
        return _as_reflected(initial, tree, degraded=False)


def _as_reflected(initial: ExtractionRecord, tree: Any,
                  degraded: bool) -> ExtractionRecord:
    return ExtractionRecord(
        doc_id=initial.doc_id, model_id=initial.model_id,
        strategy=Strategy.SELF_REFLECTION, tree=tree,
        pdf_status=initial.pdf_status, prompt_hash=initial.prompt_hash,
        created_at=initial.created_at, token_estimate=initial.token_estimate,
        degraded=degraded)


def _pdf_status_of(tree: Any) -> PdfStatus:
    if not isinstance(tree, dict) or "pdf_status" not in tree:
        raise ParseFailure("extraction output lacks pdf_status", str(tree))
    return PdfStatus(tree["pdf_status"])
