"""Precision/recall aggregation, error distributions, and rank statistics.

Covers the reporting layer: per-cell precision/recall, error-type shares,
Friedman omnibus test over a rank matrix, the Nemenyi post-hoc critical
difference, and Cohen's kappa for rater agreement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

from scipy.special import gammaincc

from .evaluation import DocEvaluation
from .jsontree import Category, ErrorType, EvalStatus, Strategy


class StatsError(Exception):
    pass


class EmptyCell(StatsError):
    pass


class MissingTreatment(StatsError):
    pass


class DegenerateInput(StatsError):
    pass


class UnsupportedAlpha(StatsError):
    pass


class UnsupportedK(StatsError):
    pass


class LengthMismatch(StatsError):
    pass


# ---------------------------------------------------------------------------
# Precision / recall
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PRCell:
    category: Category
    strategy: Strategy
    model_id: Optional[str]
    correct: int
    hallucinated: int
    missing: int
    precision: Optional[float]
    recall: Optional[float]
    n_docs: int
    precision_excluded_docs: int = 0

    def to_json(self) -> dict:
        return {
            "category": self.category.value,
            "strategy": self.strategy.value,
            "model_id": self.model_id,
            "correct": self.correct,
            "hallucinated": self.hallucinated,
            "missing": self.missing,
            "precision": self.precision,
            "recall": self.recall,
            "n_docs": self.n_docs,
            "precision_excluded_docs": self.precision_excluded_docs,
        }


def _doc_pr(counts: dict[EvalStatus, int]) -> tuple[Optional[float], Optional[float]]:
    c = counts[EvalStatus.CORRECT]
    h = counts[EvalStatus.HALLUCINATED]
    m = counts[EvalStatus.MISSING]
    precision = c / (c + h) if c + h > 0 else None
    recall = c / (c + h + m) if c + h + m > 0 else None
    return precision, recall


def precision_recall(evals: Sequence[DocEvaluation],
                     aggregation: str = "MacroPerDoc") -> list[PRCell]:
    """Aggregate evaluations into one PRCell per (category, strategy, model).

    Micro pools field counts across documents; MacroPerDoc averages
    per-document precision/recall, excluding documents whose precision is
    undefined (no extracted fields) from the precision mean.
    """
    if aggregation not in ("Micro", "MacroPerDoc"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    cells: dict[tuple, list[DocEvaluation]] = {}
    for doc_eval in evals:
        key = (doc_eval.category, doc_eval.strategy, doc_eval.model_id)
        cells.setdefault(key, []).append(doc_eval)
    out: list[PRCell] = []
    for key in sorted(cells, key=lambda k: (k[0].value, k[1].value, k[2] or "")):
        group = cells[key]
        if not group:
            raise EmptyCell(str(key))
        totals = {status: 0 for status in EvalStatus}
        for doc_eval in group:
            for status, n in doc_eval.counts().items():
                totals[status] += n
        if aggregation == "Micro":
            precision, recall = _doc_pr(totals)
            excluded = 0
        else:
            precisions, recalls = [], []
            excluded = 0
            for doc_eval in group:
                p, r = _doc_pr(doc_eval.counts())
                if p is None:
                    excluded += 1
                else:
                    precisions.append(p)
                if r is not None:
                    recalls.append(r)
            precision = sum(precisions) / len(precisions) if precisions else None
            recall = sum(recalls) / len(recalls) if recalls else None
        out.append(PRCell(
            category=key[0], strategy=key[1], model_id=key[2],
            correct=totals[EvalStatus.CORRECT],
            hallucinated=totals[EvalStatus.HALLUCINATED],
            missing=totals[EvalStatus.MISSING],
            precision=precision, recall=recall, n_docs=len(group),
            precision_excluded_docs=excluded))
    return out


# ---------------------------------------------------------------------------
# Error distribution
# ---------------------------------------------------------------------------

def error_distribution(evals: Sequence[DocEvaluation],
                       ) -> dict[ErrorType, tuple[int, Optional[Decimal]]]:
    """Count errors by type and report each type's share of all errors.

    Percents are rounded to one decimal; the rounding residual is assigned
    to the largest category so the reported shares always sum to 100.0.
    """
    counts = {error_type: 0 for error_type in ErrorType}
    for doc_eval in evals:
        for entry in doc_eval.evals:
            if entry.label.error_type is not None:
                counts[entry.label.error_type] += 1
    return distribution_from_counts(counts)


def distribution_from_counts(counts: dict[ErrorType, int],
                             ) -> dict[ErrorType, tuple[int, Optional[Decimal]]]:
    total = sum(counts.values())
    if total == 0:
        return {et: (0, None) for et in counts}
    percents: dict[ErrorType, Decimal] = {}
    for error_type, n in counts.items():
        raw = Decimal(n) * 100 / Decimal(total)
        percents[error_type] = raw.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    residual = Decimal("100.0") - sum(percents.values())
    if residual != 0:
        largest = max(counts, key=lambda et: (counts[et], et.value))
        percents[largest] += residual
    return {et: (counts[et], percents[et]) for et in counts}


# ---------------------------------------------------------------------------
# Ranks, Friedman, Nemenyi
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankMatrix:
    treatments: tuple[str, ...]
    blocks: tuple[str, ...]
    ranks: tuple[tuple[float, ...], ...]  # blocks x treatments

    def __post_init__(self) -> None:
        k = len(self.treatments)
        expected = k * (k + 1) / 2
        for row in self.ranks:
            if len(row) != k:
                raise ValueError("rank row width does not match treatments")
            if not math.isclose(sum(row), expected):
                raise ValueError("rank row does not sum to k(k+1)/2")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def k(self) -> int:
        return len(self.treatments)

    def mean_ranks(self) -> dict[str, float]:
        n = self.n_blocks
        return {t: sum(row[j] for row in self.ranks) / n
                for j, t in enumerate(self.treatments)}


def _rank_row(values: Sequence[float], higher_better: bool) -> list[float]:
    order = sorted(range(len(values)),
                   key=lambda j: -values[j] if higher_better else values[j])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for pos in range(i, j + 1):
            ranks[order[pos]] = avg
        i = j + 1
    return ranks


def mean_rank(scores: dict[str, dict[str, float]],
              higher_better: bool = True) -> tuple[RankMatrix, dict[str, float]]:
    """Rank treatments within each block (rank 1 = best, average-rank ties)
    and return the matrix plus per-treatment mean ranks.

    *scores* maps block -> treatment -> score.
    """
    blocks = tuple(scores)
    if not blocks:
        raise ValueError("no blocks")
    treatments = tuple(scores[blocks[0]])
    rows = []
    for block in blocks:
        row_scores = scores[block]
        if set(row_scores) != set(treatments):
            raise MissingTreatment(block)
        rows.append(tuple(_rank_row([row_scores[t] for t in treatments],
                                    higher_better)))
    rm = RankMatrix(treatments, blocks, tuple(rows))
    return rm, rm.mean_ranks()


@dataclass(frozen=True)
class FriedmanResult:
    chi2: float
    df: int
    p_value: float
    n_blocks: int
    k_treatments: int

    def to_json(self) -> dict:
        return {"chi2": self.chi2, "df": self.df, "p_value": self.p_value,
                "n_blocks": self.n_blocks, "k_treatments": self.k_treatments}


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution via the regularized
    incomplete gamma function."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2, x / 2))


def friedman_test(rm: RankMatrix) -> FriedmanResult:
    n, k = rm.n_blocks, rm.k
    if n < 2:
        raise ValueError("need at least 2 blocks")
    if k < 3:
        raise ValueError("need at least 3 treatments")
    if len({row for row in rm.ranks}) == 1 and len(set(rm.ranks[0])) == 1:
        raise DegenerateInput("all ranks identical")
    rank_sums = [sum(row[j] for row in rm.ranks) for j in range(k)]
    chi2 = (12 / (n * k * (k + 1))) * sum(r * r for r in rank_sums) - 3 * n * (k + 1)
    chi2 = max(chi2, 0.0)
    return FriedmanResult(chi2=chi2, df=k - 1, p_value=chi2_sf(chi2, k - 1),
                          n_blocks=n, k_treatments=k)


# Studentized range q / sqrt(2) for the Nemenyi test, k = 2..10.
_NEMENYI_Q = {
    "0.05": {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850,
             7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164},
    "0.10": {2: 1.645, 3: 2.052, 4: 2.291, 5: 2.459, 6: 2.589,
             7: 2.693, 8: 2.780, 9: 2.855, 10: 2.920},
}


@dataclass(frozen=True)
class NemenyiResult:
    cd: float
    mean_ranks: dict[str, float]
    significant_pairs: frozenset[frozenset[str]]

    def diagram_data(self) -> dict:
        return {
            "cd": self.cd,
            "treatments": [
                {"treatment": t, "mean_rank": r}
                for t, r in sorted(self.mean_ranks.items(), key=lambda kv: kv[1])
            ],
        }

    def to_json(self) -> dict:
        return {
            "cd": self.cd,
            "mean_ranks": self.mean_ranks,
            "significant_pairs": sorted(sorted(pair)
                                        for pair in self.significant_pairs),
        }


def nemenyi_test(rm: RankMatrix, alpha: Decimal | float | str = "0.05",
                 ) -> NemenyiResult:
    alpha_key = format(Decimal(str(alpha)).normalize(), "f")
    if alpha_key == "0.1":
        alpha_key = "0.10"
    if alpha_key not in _NEMENYI_Q:
        raise UnsupportedAlpha(alpha_key)
    k, n = rm.k, rm.n_blocks
    if k not in _NEMENYI_Q[alpha_key]:
        raise UnsupportedK(str(k))
    q = _NEMENYI_Q[alpha_key][k]
    cd = q * math.sqrt(k * (k + 1) / (6 * n))
    means = rm.mean_ranks()
    pairs = frozenset(
        frozenset((a, b))
        for i, a in enumerate(rm.treatments)
        for b in rm.treatments[i + 1:]
        if abs(means[a] - means[b]) > cd)
    return NemenyiResult(cd=cd, mean_ranks=means, significant_pairs=pairs)


# ---------------------------------------------------------------------------
# Cohen's kappa
# ---------------------------------------------------------------------------

def cohens_kappa(labels_a: Sequence, labels_b: Sequence) -> Optional[float]:
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"{len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n == 0:
        raise LengthMismatch("empty label vectors")
    observed = sum(1 for x, y in zip(labels_a, labels_b) if x == y) / n
    alphabet = set(labels_a) | set(labels_b)
    expected = sum(
        (sum(1 for x in labels_a if x == label) / n)
        * (sum(1 for y in labels_b if y == label) / n)
        for label in alphabet)
    if expected == 1:
        return 1.0 if observed == 1 else None
    return (observed - expected) / (1 - expected)
