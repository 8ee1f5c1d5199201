"""On-disk run persistence.

A run directory is content-addressed: its id hashes the config snapshot plus
the document bytes, so rerunning with the same inputs lands in the same
directory and completed stages are skipped. Every artifact is canonical JSON
or CSV so two identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterator, Optional

from .config import RunConfig
from .evaluation import DocEvaluation
from .jsontree import Category, ExtractionRecord, GroundTruthDoc, dumps_canonical, parse_json
from .merger import MergeTrace
from .stats import PRCell


class StoreError(Exception):
    pass


class RunLocked(StoreError):
    pass


STAGES = ("extract", "merge", "evaluate", "report")

METRICS_COLUMNS = ["category", "strategy", "model", "n_docs",
                   "correct", "hallucinated", "missing", "precision", "recall"]


def doc_digests(docs_dir: Path) -> dict[str, str]:
    """sha256 per document, keyed by file stem, in sorted order."""
    digests = {}
    for path in sorted(Path(docs_dir).iterdir()):
        if path.is_file() and not path.name.startswith("."):
            digests[path.stem] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def compute_run_id(config: RunConfig) -> str:
    payload = dumps_canonical({
        "config": config.snapshot(),
        "docs": doc_digests(config.docs_dir),
    })
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _write_canonical_file(path: Path, tree: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_canonical(tree) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class RunStore:
    """Owns one runs/<run_id>/ directory."""

    def __init__(self, config: RunConfig, run_id: Optional[str] = None):
        self.config = config
        self.run_id = run_id or compute_run_id(config)
        self.root = Path(config.runs_dir) / self.run_id
        self._lock_path = self.root / ".lock"

    # -- locking and manifest ----------------------------------------------

    def acquire_lock(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run {self.run_id} is locked by another process")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release_lock(self) -> None:
        try:
            self._lock_path.unlink()
        except FileNotFoundError:
            pass

    def __enter__(self) -> "RunStore":
        self.acquire_lock()
        return self

    def __exit__(self, *_exc) -> None:
        self.release_lock()

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def write_manifest(self) -> None:
        manifest = {
            "run_id": self.run_id,
            "config": self.config.snapshot(),
            "docs": doc_digests(self.config.docs_dir),
            "stages": {stage: self.stage_done(stage) for stage in STAGES},
        }
        _write_canonical_file(self.manifest_path, manifest)

    def stage_marker(self, stage: str) -> Path:
        return self.root / f".{stage}.done"

    def stage_done(self, stage: str) -> bool:
        return self.stage_marker(stage).exists()

    def mark_stage(self, stage: str) -> None:
        self.stage_marker(stage).write_text("done\n", encoding="utf-8")
        self.write_manifest()

    # -- extraction records --------------------------------------------------

    def record_path(self, doc_id: str, model: str, strategy: str) -> Path:
        return self.root / "extractions" / f"{doc_id}.{model}.{strategy}.json"

    def trace_path(self, doc_id: str) -> Path:
        return self.root / "extractions" / f"{doc_id}.combined.trace.json"

    def write_record(self, record: ExtractionRecord) -> None:
        model = record.model_id or "combined"
        path = self.record_path(record.doc_id, model, record.strategy.value)
        _write_canonical_file(path, record.to_json())

    def write_trace(self, doc_id: str, trace: MergeTrace) -> None:
        _write_canonical_file(self.trace_path(doc_id), trace.to_json())

    def read_record(self, doc_id: str, model: str,
                    strategy: str) -> ExtractionRecord:
        path = self.record_path(doc_id, model, strategy)
        return ExtractionRecord.from_json(parse_json(path.read_text("utf-8")))

    def iter_records(self) -> Iterator[ExtractionRecord]:
        ext_dir = self.root / "extractions"
        if not ext_dir.exists():
            return
        for path in sorted(ext_dir.glob("*.json")):
            if path.name.endswith(".trace.json"):
                continue
            yield ExtractionRecord.from_json(parse_json(path.read_text("utf-8")))

    # -- evaluations --------------------------------------------------------

    def eval_path(self, doc_id: str, model: str, strategy: str,
                  category: Category) -> Path:
        return (self.root / "evaluations"
                / f"{doc_id}.{model}.{strategy}.{category.value}.json")

    def write_evaluation(self, doc_eval: DocEvaluation) -> None:
        model = doc_eval.model_id or "combined"
        path = self.eval_path(doc_eval.doc_id, model,
                              doc_eval.strategy.value, doc_eval.category)
        _write_canonical_file(path, doc_eval.to_json())

    def iter_evaluations(self) -> Iterator[DocEvaluation]:
        eval_dir = self.root / "evaluations"
        if not eval_dir.exists():
            return
        for path in sorted(eval_dir.glob("*.json")):
            yield DocEvaluation.from_json(parse_json(path.read_text("utf-8")))

    # -- metrics, stats, reports ---------------------------------------------

    def write_metrics_csv(self, cells: list[PRCell]) -> Path:
        path = self.root / "metrics.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            for cell in cells:
                writer.writerow([
                    cell.category.value,
                    cell.strategy.value,
                    cell.model_id or "combined",
                    cell.n_docs,
                    cell.correct,
                    cell.hallucinated,
                    cell.missing,
                    "" if cell.precision is None else f"{cell.precision:.6f}",
                    "" if cell.recall is None else f"{cell.recall:.6f}",
                ])
        return path

    def write_stats_json(self, payload: dict) -> Path:
        path = self.root / "stats.json"
        _write_canonical_file(path, payload)
        return path

    def write_cd_diagram(self, payload: dict) -> Path:
        path = self.root / "cd_diagram.json"
        _write_canonical_file(path, payload)
        return path

    def write_report_md(self, text: str) -> Path:
        path = self.root / "report.md"
        path.write_text(text, encoding="utf-8")
        return path

    def write_final_tree(self, doc_id: str, tree: Any) -> Path:
        path = self.root / "final" / f"{doc_id}.json"
        _write_canonical_file(path, tree)
        return path

    def write_effort(self, payload: dict) -> Path:
        path = self.root / "effort.json"
        _write_canonical_file(path, payload)
        return path

    @property
    def decisions_log_path(self) -> Path:
        review_dir = self.root / "review"
        review_dir.mkdir(parents=True, exist_ok=True)
        return review_dir / "decisions.jsonl"

    # -- ground truth ---------------------------------------------------------

    def load_ground_truth(self, doc_id: str) -> Optional[GroundTruthDoc]:
        if self.config.gt_dir is None:
            return None
        tree_path = Path(self.config.gt_dir) / f"{doc_id}.json"
        map_path = Path(self.config.gt_dir) / f"{doc_id}.categories.json"
        if not tree_path.exists() or not map_path.exists():
            return None
        tree = parse_json(tree_path.read_text("utf-8"))
        sidecar = json.loads(map_path.read_text("utf-8"))
        category_map = {prefix: Category(cat)
                        for prefix, cat in sidecar["categories"].items()}
        return GroundTruthDoc(doc_id=doc_id, tree=tree,
                              category_map=category_map,
                              ma_id=sidecar.get("ma_id", ""))

    # -- validation -----------------------------------------------------------

    def validate(self) -> list[str]:
        """Best-effort schema check of every artifact; returns problem list."""
        problems: list[str] = []
        if not self.root.exists():
            return [f"run directory {self.root} does not exist"]
        for path in sorted(self.root.rglob("*.json")):
            try:
                tree = parse_json(path.read_text("utf-8"))
            except Exception as exc:
                problems.append(f"{path}: unparseable JSON ({exc})")
                continue
            rel = path.relative_to(self.root)
            try:
                if rel.parts[0] == "extractions" and not path.name.endswith(
                        ".trace.json"):
                    ExtractionRecord.from_json(tree)
                elif rel.parts[0] == "evaluations":
                    DocEvaluation.from_json(tree)
                elif rel.name == "manifest.json":
                    for key in ("run_id", "config", "docs", "stages"):
                        if key not in tree:
                            problems.append(f"{path}: missing key {key}")
            except Exception as exc:
                problems.append(f"{path}: schema violation ({exc})")
        metrics = self.root / "metrics.csv"
        if metrics.exists():
            with open(metrics, newline="", encoding="utf-8") as fh:
                header = next(csv.reader(fh), None)
            if header != METRICS_COLUMNS:
                problems.append(f"{metrics}: unexpected header {header}")
        return problems
