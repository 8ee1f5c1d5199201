"""Hierarchical three-way merge of extraction trees.

Rule order at every conflicting position: majority vote on canonical-equal
values; then highest enclosing confidence; then completeness (non-null leaf
count, ties broken by numeric-type conformity, then fixed input order
A < B < C). Objects recurse key-by-key; keys present in only one input are
retained. The merge never invents a value: every output leaf is canonical-
equal to some input leaf at the same path.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from typing import Any, Optional

from .gateway import Gateway, GatewayError, ModelRequest
from .jsontree import (
    EMPTY_PATH,
    ConfidenceLevel,
    FieldPath,
    canonical_equal,
    canonicalize_value,
    enumerate_leaves,
    is_leaf,
    resolve,
)
from .prompts import render_merge


class FabricationDetected(GatewayError):
    pass


class MergeRule(Enum):
    UNANIMOUS = "unanimous"
    MAJORITY = "majority"
    CONFIDENCE_MAX = "confidence_max"
    COMPLETENESS = "completeness"


@dataclass(frozen=True)
class MergeDecision:
    path: FieldPath
    rule: MergeRule
    chosen_input: str  # "A" | "B" | "C" | "Agreed"

    def to_json(self) -> dict:
        return {"path": self.path.render(), "rule": self.rule.value,
                "chosen_input": self.chosen_input}


@dataclass
class MergeTrace:
    """One decision per merged leaf, or one per conflicting subtree chosen
    wholesale. A single-source value counts as unanimous among present inputs."""

    decisions: list[MergeDecision]

    def used_order_tie_break(self) -> bool:
        return any(d.rule is MergeRule.COMPLETENESS for d in self.decisions)

    def to_json(self) -> list[dict]:
        return [d.to_json() for d in self.decisions]


LABELS = ("A", "B", "C")


def merge_three(a: Any, b: Any, c: Any) -> tuple[Any, MergeTrace]:
    trace = MergeTrace(decisions=[])
    present = [("A", a, None), ("B", b, None), ("C", c, None)]
    merged = _merge(present, EMPTY_PATH, trace)
    return merged, trace


def _effective_confidence(node: Any, inherited: Optional[ConfidenceLevel],
                          ) -> Optional[ConfidenceLevel]:
    if isinstance(node, dict) and isinstance(node.get("confidence"), str):
        parsed = ConfidenceLevel.parse(node["confidence"])
        if parsed is not None:
            return parsed
    return inherited


def _merge(present: list[tuple[str, Any, Optional[ConfidenceLevel]]],
           path: FieldPath, trace: MergeTrace) -> Any:
    present = [(label, node, _effective_confidence(node, conf))
               for label, node, conf in present]

    if all(isinstance(node, dict) for _, node, _ in present):
        out: dict[str, Any] = {}
        seen: list[str] = []
        for _, node, _ in present:
            for key in node:
                if key not in seen:
                    seen.append(key)
        for key in seen:
            children = [(label, node[key], conf)
                        for label, node, conf in present if key in node]
            out[key] = _merge(children, path.child(key), trace)
        return out

    # Conflict position: vote on whole values (leaves, arrays, or mixed shapes).
    values = [node for _, node, _ in present]
    groups: list[list[int]] = []
    for i, value in enumerate(values):
        for group in groups:
            if canonical_equal(values[group[0]], value):
                group.append(i)
                break
        else:
            groups.append([i])
    groups.sort(key=len, reverse=True)

    if len(groups) == 1:
        rule = MergeRule.UNANIMOUS if len(present) == 3 else (
            MergeRule.MAJORITY if len(present) == 2 else MergeRule.UNANIMOUS)
        chosen = "Agreed" if len(present) > 1 else present[0][0]
        _record(trace, path, rule, chosen, values[0])
        return values[0]
    if len(groups[0]) >= 2:
        winner = values[groups[0][0]]
        _record(trace, path, MergeRule.MAJORITY, "Agreed", winner)
        return winner

    # All present values distinct.
    confs = [conf for _, _, conf in present]
    if all(conf is not None for conf in confs):
        best = max(confs)  # type: ignore[type-var]
        if sum(1 for conf in confs if conf == best) == 1:
            idx = confs.index(best)
            label, winner, _ = present[idx]
            _record(trace, path, MergeRule.CONFIDENCE_MAX, label, winner)
            return winner

    scored = [
        (-_completeness(node), -_type_conformity(node), LABELS.index(label), i)
        for i, (label, node, _) in enumerate(present)
    ]
    idx = min(scored)[3]
    label, winner, _ = present[idx]
    _record(trace, path, MergeRule.COMPLETENESS, label, winner)
    return winner


def _record(trace: MergeTrace, path: FieldPath, rule: MergeRule,
            chosen: str, value: Any) -> None:
    trace.decisions.append(MergeDecision(path, rule, chosen))


def _completeness(node: Any) -> int:
    return sum(1 for _, leaf in enumerate_leaves(node) if leaf is not None)


def _type_conformity(node: Any) -> int:
    count = 0
    for _, leaf in enumerate_leaves(node):
        if leaf is None or isinstance(leaf, bool):
            continue
        if isinstance(canonicalize_value(leaf), Decimal):
            count += 1
    return count


# ---------------------------------------------------------------------------
# LLM-delegated merge
# ---------------------------------------------------------------------------

def validate_no_fabrication(output: Any, inputs: tuple[Any, Any, Any]) -> None:
    for path, leaf in enumerate_leaves(output):
        ok = False
        for tree in inputs:
            found, candidate = resolve(tree, path)
            if found and is_leaf(candidate) and canonical_equal(candidate, leaf):
                ok = True
                break
        if not ok:
            raise FabricationDetected(
                f"output leaf {path.render()} matches no input value")


def merge_via_llm(a: Any, b: Any, c: Any, gateway: Gateway,
                  merger_model: str) -> Any:
    prompt = render_merge(a, b, c)
    response = gateway.complete(ModelRequest(model_id=merger_model, prompt=prompt))
    merged = response.parsed
    validate_no_fabrication(merged, (a, b, c))
    return merged
