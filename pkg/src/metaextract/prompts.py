"""Prompt template library.

Templates live as versioned text assets next to this module, with
``<!-- SLOT -->`` placeholder markers and a sidecar manifest declaring the
required slots of each template. All render functions are pure: identical
inputs produce identical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from .jsontree import ExtractionRecord, Category, PdfStatus, dumps_canonical

ASSETS_DIR = Path(__file__).parent / "prompt_assets"

BASELINE_EXPERTISE = "medical"

_SLOT = re.compile(r"<!-- ([A-Z_]+) -->")


class PromptError(Exception):
    pass


class UnboundSlot(PromptError):
    pass


class EmptyFocusOutcomes(PromptError):
    pass


class UnreadableSource(PromptError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_slots: frozenset[str]
    version: str

    def render(self, **bindings: str) -> str:
        missing = self.required_slots - bindings.keys()
        if missing:
            raise UnboundSlot(
                f"{self.template_id}: unbound slots {sorted(missing)}")
        extra = bindings.keys() - self.required_slots
        if extra:
            raise UnboundSlot(
                f"{self.template_id}: unknown slots {sorted(extra)}")
        text = self.body
        for name, value in bindings.items():
            text = text.replace(f"<!-- {name} -->", value)
        leftover = _SLOT.search(text)
        if leftover:
            raise UnboundSlot(
                f"{self.template_id}: unresolved placeholder {leftover.group(1)}")
        return text


@dataclass(frozen=True)
class DomainProfile:
    """Per-meta-analysis customisation of the extraction prompt."""

    profile_id: str
    expertise: str
    focus_outcomes: tuple[str, ...]
    extra_pc_fields: Optional[str] = None

    @classmethod
    def from_json(cls, data: dict) -> "DomainProfile":
        return cls(
            profile_id=data["profile_id"],
            expertise=data["expertise"],
            focus_outcomes=tuple(data.get("focus_outcomes", [])),
            extra_pc_fields=data.get("extra_pc_fields"),
        )


@lru_cache(maxsize=None)
def _manifest() -> dict:
    return json.loads((ASSETS_DIR / "manifest.json").read_text("utf-8"))


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    try:
        entry = _manifest()["templates"][template_id]
    except KeyError:
        raise PromptError(f"unknown template: {template_id}") from None
    body = (ASSETS_DIR / entry["file"]).read_text("utf-8")
    return PromptTemplate(
        template_id=template_id,
        body=body,
        required_slots=frozenset(entry["required_slots"]),
        version=entry["version"],
    )


def render_baseline() -> str:
    return load_template("extraction").render(
        EXPERTISE=BASELINE_EXPERTISE, FOCUS_OUTCOMES="")


def render_customised(profile: DomainProfile) -> str:
    if not profile.focus_outcomes:
        raise EmptyFocusOutcomes(
            f"profile {profile.profile_id} has no focus outcomes")
    focus = " Please Focus on these outcomes: " + \
        " and ".join(profile.focus_outcomes) + "."
    if profile.extra_pc_fields:
        # Kept inside the same substitution region so the customised render
        # differs from the baseline in exactly two places.
        focus += f" Also extract these participant characteristics: {profile.extra_pc_fields}."
    return load_template("extraction").render(
        EXPERTISE=profile.expertise, FOCUS_OUTCOMES=focus)


def render_reflection(initial: ExtractionRecord) -> str:
    if initial.pdf_status is not PdfStatus.PROCESSED:
        raise UnreadableSource(
            f"cannot reflect on unreadable document {initial.doc_id}")
    return load_template("reflection").render(
        INITIAL_JSON=dumps_canonical(initial.tree))


def render_merge(a: Any, b: Any, c: Any) -> str:
    return load_template("merge").render(
        MODEL_A_JSON=dumps_canonical(a),
        MODEL_B_JSON=dumps_canonical(b),
        MODEL_C_JSON=dumps_canonical(c),
    )


_EVAL_TEMPLATE_BY_CATEGORY = {
    Category.STATISTICS: "eval_statistics",
    Category.QUALITY_ASSESSMENT: "eval_quality",
    Category.STUDY_INFO: "eval_study_info",
}


def render_evaluation(category: Category, gt: Any, ext: Any,
                      tolerance: str = "1%") -> str:
    template = load_template(_EVAL_TEMPLATE_BY_CATEGORY[category])
    bindings = {
        "GT_INSERT": dumps_canonical(gt),
        "EXT_INSERT": dumps_canonical(ext),
    }
    if "TOLERANCE" in template.required_slots:
        bindings["TOLERANCE"] = tolerance
    return template.render(**bindings)
