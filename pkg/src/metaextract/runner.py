"""Pipeline orchestration: extract, merge, evaluate, report.

Each stage reads and writes run artifacts through RunStore and is a no-op
when its completion marker already exists, so interrupted runs resume where
they stopped.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

from .config import ConfigInvalid, RunConfig
from .evaluation import DocEvaluation, evaluate_document
from .extraction import ExtractionPipeline
from .gateway import Attachment, Gateway
from .jsontree import ExtractionRecord, PdfStatus, Strategy
from .merger import merge_three, merge_via_llm, MergeTrace
from .prompts import DomainProfile
from .stats import (
    PRCell,
    error_distribution,
    friedman_test,
    mean_rank,
    nemenyi_test,
    precision_recall,
)
from .store import RunStore


class InsufficientInputs(Exception):
    pass


class MissingGroundTruth(Exception):
    pass


class NothingToReport(Exception):
    pass


_MEDIA_TYPES = {".pdf": "application/pdf", ".txt": "text/plain",
                ".md": "text/plain"}


def make_doc_provider(docs_dir: Path):
    docs_dir = Path(docs_dir)

    def provider(doc_id: str) -> Attachment:
        for path in sorted(docs_dir.iterdir()):
            if path.is_file() and path.stem == doc_id:
                media = _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
                return Attachment(data=path.read_bytes(), media_type=media)
        raise FileNotFoundError(f"no document {doc_id} in {docs_dir}")

    return provider


def list_doc_ids(docs_dir: Path) -> list[str]:
    return sorted(p.stem for p in Path(docs_dir).iterdir()
                  if p.is_file() and not p.name.startswith("."))


def build_gateway(config: RunConfig) -> Gateway:
    cache_dir = Path(config.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    return Gateway(
        backends=config.build_backends(),
        cache_dir=cache_dir,
        audit_log_path=cache_dir / "audit.jsonl",
    )


def load_profile(config: RunConfig, store: RunStore,
                 doc_id: str) -> DomainProfile:
    if config.profiles_dir is None:
        raise ConfigInvalid("customised extraction needs profiles_dir")
    candidates = [Path(config.profiles_dir) / f"{doc_id}.json"]
    gt = store.load_ground_truth(doc_id)
    if gt is not None and gt.ma_id:
        candidates.append(Path(config.profiles_dir) / f"{gt.ma_id}.json")
    candidates.append(Path(config.profiles_dir) / "default.json")
    for path in candidates:
        if path.exists():
            return DomainProfile.from_json(json.loads(path.read_text("utf-8")))
    raise ConfigInvalid(f"no domain profile found for document {doc_id}")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def run_extract(config: RunConfig, store: Optional[RunStore] = None,
                gateway: Optional[Gateway] = None) -> tuple[RunStore, int]:
    """Produce extraction records for every configured strategy except the
    merged one. Returns (store, count of failed records)."""
    store = store or RunStore(config)
    if store.stage_done("extract"):
        return store, 0
    gateway = gateway or build_gateway(config)
    pipeline = ExtractionPipeline(gateway, make_doc_provider(config.docs_dir))
    doc_ids = list_doc_ids(config.docs_dir)
    models = config.extraction_models()
    needs_ext = bool({Strategy.EXT, Strategy.SELF_REFLECTION,
                      Strategy.COMBINED_EXT} & set(config.strategies))
    failures = 0
    for doc_id in doc_ids:
        for spec in models:
            baseline = None
            if needs_ext:
                baseline = pipeline.extract_baseline(doc_id, spec.model_id)
                failures += baseline.failed
                if Strategy.EXT in config.strategies or \
                        Strategy.COMBINED_EXT in config.strategies:
                    store.write_record(baseline)
            if Strategy.SELF_REFLECTION in config.strategies:
                if baseline is not None and not baseline.failed and \
                        baseline.pdf_status is PdfStatus.PROCESSED:
                    store.write_record(pipeline.reflect_record(baseline))
                elif baseline is not None:
                    store.write_record(_retagged(baseline,
                                                 Strategy.SELF_REFLECTION))
            if Strategy.CUSTOMISED_EXT in config.strategies:
                profile = load_profile(config, store, doc_id)
                record = pipeline.extract_customised(doc_id, spec.model_id,
                                                     profile)
                failures += record.failed
                store.write_record(record)
    store.mark_stage("extract")
    return store, failures


def _retagged(record: ExtractionRecord, strategy: Strategy) -> ExtractionRecord:
    return ExtractionRecord(
        doc_id=record.doc_id, model_id=record.model_id, strategy=strategy,
        tree=record.tree, pdf_status=record.pdf_status,
        prompt_hash=record.prompt_hash, created_at=record.created_at,
        token_estimate=record.token_estimate, degraded=True,
        failed=record.failed)


def run_merge(config: RunConfig, store: Optional[RunStore] = None,
              gateway: Optional[Gateway] = None) -> RunStore:
    """Build one merged record per document from three models' baselines."""
    store = store or RunStore(config)
    if Strategy.COMBINED_EXT not in config.strategies:
        return store
    if store.stage_done("merge"):
        return store
    models = config.extraction_models()
    if len(models) < 3:
        raise InsufficientInputs("merged strategy needs 3 extraction models")
    chosen = models[:3]
    for doc_id in list_doc_ids(config.docs_dir):
        inputs = []
        for spec in chosen:
            path = store.record_path(doc_id, spec.model_id, Strategy.EXT.value)
            if not path.exists():
                raise InsufficientInputs(
                    f"no baseline record for {doc_id} / {spec.model_id}")
            inputs.append(store.read_record(doc_id, spec.model_id,
                                            Strategy.EXT.value))
        trees = tuple(r.tree for r in inputs)
        if config.merge_mode == "llm":
            gateway = gateway or build_gateway(config)
            merged = merge_via_llm(*trees, gateway=gateway,
                                   merger_model=config.merger_model)
            trace = MergeTrace(decisions=[])
        else:
            merged, trace = merge_three(*trees)
        digest = hashlib.sha256(
            "".join(sorted(r.prompt_hash for r in inputs)).encode()).hexdigest()
        store.write_record(ExtractionRecord(
            doc_id=doc_id, model_id=None, strategy=Strategy.COMBINED_EXT,
            tree=merged, pdf_status=PdfStatus.PROCESSED, prompt_hash=digest,
            created_at=max(r.created_at for r in inputs)))
        store.write_trace(doc_id, trace)
    store.mark_stage("merge")
    return store


def run_evaluate(config: RunConfig, store: Optional[RunStore] = None,
                 gateway: Optional[Gateway] = None) -> tuple[RunStore, int]:
    """Judge every record against ground truth and persist evaluations,
    metrics, and rank statistics. Returns (store, skipped-doc count)."""
    if config.gt_dir is None:
        raise ConfigInvalid("evaluation needs gt_dir")
    store = store or RunStore(config)
    if store.stage_done("evaluate"):
        return store, 0
    opts = config.comparison_options()
    if config.judge == "llm":
        gateway = gateway or build_gateway(config)
    skipped: set[str] = set()
    evals: list[DocEvaluation] = []
    for record in store.iter_records():
        gt = store.load_ground_truth(record.doc_id)
        if gt is None:
            skipped.add(record.doc_id)
            continue
        for category in sorted(set(gt.category_map.values()),
                               key=lambda c: c.value):
            doc_eval = evaluate_document(
                gt, record, category, opts, judge=config.judge,
                gateway=gateway, judge_model=config.judge_model)
            store.write_evaluation(doc_eval)
            evals.append(doc_eval)
    cells = precision_recall(evals, "MacroPerDoc")
    store.write_metrics_csv(cells)
    stats_payload, cd_payload = compute_run_stats(evals, cells)
    store.write_stats_json(stats_payload)
    store.write_cd_diagram(cd_payload)
    store.mark_stage("evaluate")
    return store, len(skipped)


def compute_run_stats(evals: list[DocEvaluation],
                      cells: list[PRCell]) -> tuple[dict, dict]:
    """Friedman/Nemenyi over strategies with model x category blocks, plus
    model mean ranks over category blocks."""
    dist = error_distribution(evals)
    payload: dict[str, Any] = {
        "error_distribution": {
            et.value: {"count": count,
                       "percent": None if pct is None else str(pct)}
            for et, (count, pct) in dist.items()
        },
        "friedman": None,
        "nemenyi": None,
        "model_mean_ranks": None,
        "kappa": None,
    }
    cd_payload: dict[str, Any] = {"cd": None, "treatments": []}

    recall_by = {}
    for cell in cells:
        if cell.recall is None:
            continue
        recall_by[(cell.model_id, cell.category, cell.strategy)] = cell.recall
    models = sorted({m for m, _, _ in recall_by if m is not None})
    categories = sorted({c for _, c, _ in recall_by}, key=lambda c: c.value)
    strategies = sorted({s for _, _, s in recall_by}, key=lambda s: s.value)

    # Strategy comparison: blocks are model x category cells; the merged
    # strategy has no model of its own, so its per-category recall stands in
    # for every model's block.
    scores: dict[str, dict[str, float]] = {}
    for model in models:
        for category in categories:
            row = {}
            for strategy in strategies:
                key = (None if strategy is Strategy.COMBINED_EXT else model,
                       category, strategy)
                if key in recall_by:
                    row[strategy.value] = recall_by[key]
            if len(row) == len(strategies):
                scores[f"{model}|{category.value}"] = row
    if len(scores) >= 2 and len(strategies) >= 3:
        rm, means = mean_rank(scores, higher_better=True)
        result = friedman_test(rm)
        payload["friedman"] = result.to_json()
        nem = nemenyi_test(rm, "0.05")
        payload["nemenyi"] = nem.to_json()
        cd_payload = nem.diagram_data()

    # Model comparison: blocks are categories, scores are recall averaged
    # over the strategies run per model.
    if len(models) >= 2 and len(categories) >= 2:
        model_scores: dict[str, dict[str, float]] = {}
        for category in categories:
            row = {}
            for model in models:
                vals = [recall_by[(model, category, s)] for s in strategies
                        if (model, category, s) in recall_by]
                if vals:
                    row[model] = sum(vals) / len(vals)
            if len(row) == len(models):
                model_scores[category.value] = row
        if model_scores:
            _, means = mean_rank(model_scores, higher_better=True)
            payload["model_mean_ranks"] = {
                m: round(r, 2) for m, r in means.items()}
    return payload, cd_payload


def run_report(config: RunConfig, store: Optional[RunStore] = None,
               fmt: str = "md") -> tuple[RunStore, Path]:
    store = store or RunStore(config)
    evals = list(store.iter_evaluations())
    if not evals:
        raise NothingToReport("no evaluations found; run evaluate first")
    cells = precision_recall(evals, "MacroPerDoc")
    if fmt == "csv":
        return store, store.write_metrics_csv(cells)
    if fmt == "json":
        payload = {"cells": [c.to_json() for c in cells]}
        path = store.root / "report.json"
        from .store import _write_canonical_file
        _write_canonical_file(path, payload)
        return store, path
    if fmt == "md":
        text = render_markdown_report(evals, cells)
        path = store.write_report_md(text)
        store.mark_stage("report")
        return store, path
    raise ValueError(f"unknown report format {fmt!r}")


def render_markdown_report(evals: list[DocEvaluation],
                           cells: list[PRCell]) -> str:
    lines = ["# Extraction evaluation report", ""]
    categories = sorted({c.category for c in cells}, key=lambda c: c.value)
    for category in categories:
        lines.append(f"## {category.value.replace('_', ' ').title()}")
        lines.append("")
        lines.append("| Strategy | Model | Docs | Precision | Recall |")
        lines.append("|---|---|---|---|---|")
        for cell in cells:
            if cell.category is not category:
                continue
            precision = "-" if cell.precision is None else f"{cell.precision:.3f}"
            recall = "-" if cell.recall is None else f"{cell.recall:.3f}"
            lines.append(f"| {cell.strategy.value} | {cell.model_id or 'combined'} "
                         f"| {cell.n_docs} | {precision} | {recall} |")
        lines.append("")
    dist = error_distribution(evals)
    lines.append("## Error distribution")
    lines.append("")
    lines.append("| Error type | Count | Percent |")
    lines.append("|---|---|---|")
    for et, (count, pct) in sorted(dist.items(),
                                   key=lambda kv: -kv[1][0]):
        lines.append(f"| {et.value} | {count} | "
                     f"{'-' if pct is None else str(pct)} |")
    lines.append("")
    return "\n".join(lines)
