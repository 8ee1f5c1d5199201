"""Three-tier human review: routing, decision log, finalization.

Study-descriptor fields auto-accept unless confidence is Low (tier 1),
quality-assessment fields queue with the extracted value pre-filled as a
suggestion (tier 2), and statistical fields always require human
verification (tier 3). Decisions land in an append-only log that can be
replayed to reconstruct item state.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .jsontree import (
    Category,
    ConfidenceLevel,
    ExtractionRecord,
    FieldPath,
    enumerate_leaves,
    nearest_enclosing_meta,
    utc_now_iso,
)
from .stats import PRCell

_EMPTY = FieldPath(())


class ReviewError(Exception):
    pass


class UnknownItem(ReviewError):
    pass


class AlreadyDecided(ReviewError):
    pass


class InvalidDecision(ReviewError):
    pass


class PendingItemsRemain(ReviewError):
    def __init__(self, item_ids: list[str]):
        super().__init__(f"{len(item_ids)} tier-3 items still pending")
        self.item_ids = item_ids


TIERS = ("T1", "T2", "T3")

AUTO_ACCEPTED = "AutoAccepted"
PENDING = "Pending"
ACCEPTED = "Accepted"
CORRECTED = "Corrected"
REJECTED = "Rejected"

_DECISIONS = {ACCEPTED, CORRECTED, REJECTED}


@dataclass(frozen=True)
class TierPolicy:
    tier: str
    categories: frozenset[Category]
    recall_target: float
    precision_target: float
    auto_accept_rule: str  # AcceptUnlessLowConfidence | SuggestRequireReview | RequireVerification

    def __post_init__(self) -> None:
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")

    @classmethod
    def defaults(cls) -> tuple["TierPolicy", ...]:
        return (
            cls("T1", frozenset({Category.STUDY_INFO}), 0.80, 0.90,
                "AcceptUnlessLowConfidence"),
            cls("T2", frozenset({Category.QUALITY_ASSESSMENT}), 0.85, 0.95,
                "SuggestRequireReview"),
            cls("T3", frozenset({Category.STATISTICS}), 0.90, 0.95,
                "RequireVerification"),
        )

    @classmethod
    def from_json(cls, data: dict) -> "TierPolicy":
        return cls(
            tier=data["tier"],
            categories=frozenset(Category(c) for c in data["categories"]),
            recall_target=float(data["recall_target"]),
            precision_target=float(data["precision_target"]),
            auto_accept_rule=data["auto_accept_rule"],
        )

    def to_json(self) -> dict:
        return {
            "tier": self.tier,
            "categories": sorted(c.value for c in self.categories),
            "recall_target": self.recall_target,
            "precision_target": self.precision_target,
            "auto_accept_rule": self.auto_accept_rule,
        }


def policy_for_category(policies: tuple[TierPolicy, ...],
                        category: Optional[Category]) -> TierPolicy:
    """Tier lookup; anything without a category mapping falls back to the
    strictest tier."""
    if category is not None:
        for policy in policies:
            if category in policy.categories:
                return policy
    for policy in policies:
        if policy.tier == "T3":
            return policy
    raise ReviewError("policy does not define tier T3")


@dataclass(frozen=True)
class ReviewItem:
    item_id: str
    doc_id: str
    path: FieldPath
    category: Optional[Category]
    tier: str
    extracted_value: Any
    source_hint: Optional[str] = None
    confidence: Optional[ConfidenceLevel] = None
    status: str = PENDING
    corrected_value: Any = None
    reviewer_id: Optional[str] = None
    decided_at: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status == CORRECTED and self.corrected_value is None:
            raise ValueError("Corrected items need a corrected_value")
        if self.tier == "T3" and self.status == AUTO_ACCEPTED:
            raise ValueError("tier-3 items are never auto-accepted")

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "doc_id": self.doc_id,
            "path": self.path.render(),
            "category": self.category.value if self.category else None,
            "tier": self.tier,
            "extracted_value": self.extracted_value,
            "source_hint": self.source_hint,
            "confidence": self.confidence.value if self.confidence else None,
            "status": self.status,
            "corrected_value": self.corrected_value,
            "reviewer_id": self.reviewer_id,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ReviewItem":
        return cls(
            item_id=data["item_id"],
            doc_id=data["doc_id"],
            path=FieldPath.parse(data["path"]) if data["path"] else _EMPTY,
            category=Category(data["category"]) if data.get("category") else None,
            tier=data["tier"],
            extracted_value=data.get("extracted_value"),
            source_hint=data.get("source_hint"),
            confidence=(ConfidenceLevel.parse(data["confidence"])
                        if data.get("confidence") else None),
            status=data["status"],
            corrected_value=data.get("corrected_value"),
            reviewer_id=data.get("reviewer_id"),
            decided_at=data.get("decided_at"),
        )


def _item_id(doc_id: str, path: FieldPath) -> str:
    digest = hashlib.sha256(f"{doc_id}\x00{path.render()}".encode()).hexdigest()
    return digest[:16]


def route_fields(record: ExtractionRecord,
                 category_of: Callable[[FieldPath], Optional[Category]],
                 policies: tuple[TierPolicy, ...] = ()) -> list[ReviewItem]:
    """Turn each scored leaf of a record into a ReviewItem.

    Tier-1 fields auto-accept unless their nearest enclosing confidence is
    Low. Leaves with no category mapping queue as tier 3 (fail-safe).
    """
    policies = policies or TierPolicy.defaults()
    items: list[ReviewItem] = []
    for path, leaf in enumerate_leaves(record.tree, skip_meta=True):
        category = category_of(path)
        policy = policy_for_category(policies, category)
        conf_raw = nearest_enclosing_meta(record.tree, path, "confidence")
        confidence = (ConfidenceLevel.parse(conf_raw)
                      if isinstance(conf_raw, str) else None)
        source = nearest_enclosing_meta(record.tree, path, "source")
        status = PENDING
        if (policy.auto_accept_rule == "AcceptUnlessLowConfidence"
                and confidence is not ConfidenceLevel.LOW):
            status = AUTO_ACCEPTED
        items.append(ReviewItem(
            item_id=_item_id(record.doc_id, path),
            doc_id=record.doc_id,
            path=path,
            category=category,
            tier=policy.tier,
            extracted_value=leaf,
            source_hint=source if isinstance(source, str) else None,
            confidence=confidence,
            status=status,
        ))
    return items


@dataclass(frozen=True)
class EffortReport:
    per_tier: dict[str, tuple[int, int]]  # tier -> (total, human-reviewed)

    def fraction(self, tier: str) -> Optional[float]:
        total, reviewed = self.per_tier.get(tier, (0, 0))
        return reviewed / total if total else None

    def to_json(self) -> dict:
        out = {}
        for tier in TIERS:
            total, reviewed = self.per_tier.get(tier, (0, 0))
            out[tier] = {
                "items_total": total,
                "items_reviewed": reviewed,
                "fraction": reviewed / total if total else None,
            }
        return out


class ReviewStore:
    """In-memory item state backed by an append-only decision log on disk.

    All writes go through one lock; reads return snapshots. Reloading the
    log reproduces the same state (replay is the source of truth).
    """

    def __init__(self, run_id: str, log_path: Optional[Path] = None):
        self.run_id = run_id
        self.log_path = log_path
        self._lock = threading.Lock()
        self._items: dict[str, ReviewItem] = {}
        self._trees: dict[str, Any] = {}
        self._tokens: dict[str, str] = {}  # token -> item_id it decided
        self._log: list[dict] = []

    # -- loading ----------------------------------------------------------

    def add_document(self, record: ExtractionRecord,
                     items: list[ReviewItem]) -> None:
        with self._lock:
            self._trees[record.doc_id] = record.tree
            for item in items:
                self._items[item.item_id] = item

    def replay_log(self) -> None:
        if self.log_path is None or not self.log_path.exists():
            return
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line), persist=False)

    # -- queries ----------------------------------------------------------

    def get(self, item_id: str) -> ReviewItem:
        item = self._items.get(item_id)
        if item is None:
            raise UnknownItem(item_id)
        return item

    def queue(self, tier: Optional[str] = None,
              status: Optional[str] = None) -> list[ReviewItem]:
        items = sorted(self._items.values(),
                       key=lambda it: (it.doc_id, it.path.render()))
        if tier:
            items = [it for it in items if it.tier == tier]
        if status:
            items = [it for it in items if it.status == status]
        return items

    # -- decisions --------------------------------------------------------

    def submit_decision(self, item_id: str, decision: str,
                        reviewer_id: str, token: str,
                        corrected_value: Any = None) -> ReviewItem:
        if decision not in _DECISIONS:
            raise InvalidDecision(f"unknown decision {decision!r}")
        if decision == CORRECTED and corrected_value is None:
            raise InvalidDecision("Corrected requires corrected_value")
        if not reviewer_id:
            raise InvalidDecision("reviewer_id required")
        if not token:
            raise InvalidDecision("idempotency token required")
        with self._lock:
            if self._tokens.get(token) == item_id:
                return self._items[item_id]
            item = self._items.get(item_id)
            if item is None:
                raise UnknownItem(item_id)
            if item.status not in (PENDING,):
                raise AlreadyDecided(item_id)
            entry = {
                "item_id": item_id,
                "decision": decision,
                "corrected_value": corrected_value,
                "reviewer_id": reviewer_id,
                "token": token,
                "decided_at": utc_now_iso(),
            }
            return self._apply(entry, persist=True)

    def _apply(self, entry: dict, persist: bool) -> ReviewItem:
        item = self._items.get(entry["item_id"])
        if item is None:
            raise UnknownItem(entry["item_id"])
        updated = replace(
            item,
            status=entry["decision"],
            corrected_value=entry.get("corrected_value"),
            reviewer_id=entry["reviewer_id"],
            decided_at=entry["decided_at"],
        )
        self._items[item.item_id] = updated
        self._tokens[entry["token"]] = item.item_id
        self._log.append(entry)
        if persist and self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False,
                                    sort_keys=True) + "\n")
        return updated

    # -- finalization -----------------------------------------------------

    def finalize(self) -> tuple[dict[str, Any], EffortReport]:
        """Final tree per document. Accepted/AutoAccepted keep the extracted
        value, Corrected substitutes the reviewer value, Rejected becomes
        null. Refuses while tier-3 items are still pending."""
        with self._lock:
            blocking = [it.item_id for it in self._items.values()
                        if it.tier == "T3" and it.status == PENDING]
            if blocking:
                raise PendingItemsRemain(sorted(blocking))
            finals: dict[str, Any] = {}
            for doc_id, tree in self._trees.items():
                out = _deep_copy(tree)
                for item in self._items.values():
                    if item.doc_id != doc_id:
                        continue
                    if item.status == CORRECTED:
                        _set_leaf(out, item.path, item.corrected_value)
                    elif item.status == REJECTED:
                        _set_leaf(out, item.path, None)
                finals[doc_id] = out
            return finals, self.effort_report()

    def effort_report(self) -> EffortReport:
        per_tier: dict[str, tuple[int, int]] = {}
        for tier in TIERS:
            items = [it for it in self._items.values() if it.tier == tier]
            reviewed = sum(1 for it in items
                           if it.status in (ACCEPTED, CORRECTED, REJECTED))
            per_tier[tier] = (len(items), reviewed)
        return EffortReport(per_tier)


def _deep_copy(tree: Any) -> Any:
    """Value-preserving deep copy via the canonical serialization round trip."""
    from .jsontree import dumps_canonical, parse_json
    return parse_json(dumps_canonical(tree))


def _set_leaf(tree: Any, path: FieldPath, value: Any) -> None:
    node = tree
    for seg in path.segments[:-1]:
        node = node[seg]
    node[path.segments[-1]] = value


# ---------------------------------------------------------------------------
# Target checks
# ---------------------------------------------------------------------------

def check_targets(cells: list[PRCell],
                  policies: tuple[TierPolicy, ...] = ()) -> dict[str, dict]:
    """Compare measured precision/recall per category against tier targets."""
    policies = policies or TierPolicy.defaults()
    report: dict[str, dict] = {}
    for policy in policies:
        matching = [c for c in cells if c.category in policy.categories]
        if not matching:
            report[policy.tier] = {"status": "NotEvaluated"}
            continue
        precisions = [c.precision for c in matching if c.precision is not None]
        recalls = [c.recall for c in matching if c.recall is not None]
        precision = sum(precisions) / len(precisions) if precisions else None
        recall = sum(recalls) / len(recalls) if recalls else None
        precision_met = precision is not None and precision >= policy.precision_target
        recall_met = recall is not None and recall >= policy.recall_target
        report[policy.tier] = {
            "status": "Met" if precision_met and recall_met else "Unmet",
            "precision": precision,
            "precision_target": policy.precision_target,
            "precision_met": precision_met,
            "recall": recall,
            "recall_target": policy.recall_target,
            "recall_met": recall_met,
        }
    return report
