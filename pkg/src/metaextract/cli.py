"""Command-line interface.

Exit codes: 0 success, 1 hard failure, 2 partial success (some documents
failed but the stage completed).
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from .config import ConfigInvalid, MissingCredential, RunConfig
from .evaluation import audit_sample, write_audit_csv
from .jsontree import Strategy
from .review import ReviewStore, route_fields
from .runner import (
    InsufficientInputs,
    NothingToReport,
    run_evaluate,
    run_extract,
    run_merge,
    run_report,
)
from .stats import (
    cohens_kappa,
    friedman_test,
    mean_rank,
    nemenyi_test,
)
from .store import RunStore


def _load_config(path: str) -> RunConfig:
    try:
        return RunConfig.from_file(Path(path))
    except ConfigInvalid as exc:
        raise click.ClickException(str(exc))


def _fail(message: str) -> "NoReturn":  # noqa: F821
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
def main() -> None:
    """Structured data extraction pipeline for trial reports."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def extract(config_path: str) -> None:
    """Run the extraction strategies over every document."""
    config = _load_config(config_path)
    try:
        with RunStore(config) as store:
            store, failures = run_extract(config, store)
    except (ConfigInvalid, MissingCredential) as exc:
        _fail(str(exc))
    click.echo(f"run {store.run_id}: extraction complete", err=True)
    if failures:
        click.echo(f"{failures} record(s) failed", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def merge(config_path: str) -> None:
    """Merge three models' baseline outputs per document."""
    config = _load_config(config_path)
    try:
        with RunStore(config) as store:
            store = run_merge(config, store)
    except (ConfigInvalid, InsufficientInputs) as exc:
        _fail(str(exc))
    click.echo(f"run {store.run_id}: merge complete", err=True)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def evaluate(config_path: str) -> None:
    """Judge records against ground truth; write metrics and stats."""
    config = _load_config(config_path)
    try:
        with RunStore(config) as store:
            store, skipped = run_evaluate(config, store)
    except ConfigInvalid as exc:
        _fail(str(exc))
    click.echo(f"run {store.run_id}: evaluation complete", err=True)
    if skipped:
        click.echo(f"{skipped} document(s) had no ground truth", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", default="md",
              type=click.Choice(["csv", "json", "md"]))
def report(config_path: str, fmt: str) -> None:
    """Render metrics as csv, json, or a markdown report."""
    config = _load_config(config_path)
    try:
        store, path = run_report(config, fmt=fmt)
    except NothingToReport as exc:
        _fail(str(exc))
    click.echo(str(path))


@main.command("review-serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--strategy", "strategy_name", default=None,
              help="Strategy whose records feed the review queue.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def review_serve(config_path: str, strategy_name: str, host: str,
                 port: int) -> None:
    """Serve the human review API for a completed run."""
    import uvicorn

    from .server import create_app

    config = _load_config(config_path)
    store = RunStore(config)
    review_store = build_review_store(config, store, strategy_name)
    metrics = {}
    metrics_payload = load_metrics_payload(store)
    if metrics_payload is not None:
        metrics[store.run_id] = metrics_payload
    app = create_app({store.run_id: review_store}, metrics)
    click.echo(f"serving run {store.run_id} on http://{host}:{port}", err=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def build_review_store(config: RunConfig, store: RunStore,
                       strategy_name: str = None) -> ReviewStore:
    """Queue the chosen strategy's records (merged output when present)."""
    records = list(store.iter_records())
    if not records:
        raise click.ClickException("no extraction records in run")
    if strategy_name:
        strategy = Strategy(strategy_name)
    elif any(r.strategy is Strategy.COMBINED_EXT for r in records):
        strategy = Strategy.COMBINED_EXT
    else:
        strategy = Strategy.EXT
    review_store = ReviewStore(store.run_id, log_path=store.decisions_log_path)
    for record in records:
        if record.strategy is not strategy or record.failed:
            continue
        gt = store.load_ground_truth(record.doc_id)
        category_of = gt.category_of if gt else (lambda _path: None)
        items = route_fields(record, category_of, config.tier_policy)
        review_store.add_document(record, items)
    review_store.replay_log()
    return review_store


def load_metrics_payload(store: RunStore) -> dict:
    metrics_path = store.root / "metrics.csv"
    stats_path = store.root / "stats.json"
    if not metrics_path.exists():
        return None
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    payload = {"cells": rows}
    if stats_path.exists():
        payload["stats"] = json.loads(stats_path.read_text("utf-8"))
    return payload


@main.command("audit-sample")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--per-stratum", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--out", "out_path", default=None, type=click.Path())
def audit_sample_cmd(config_path: str, per_stratum: int, seed: int,
                     out_path: str) -> None:
    """Draw a stratified sample of judged fields for human labelling."""
    config = _load_config(config_path)
    store = RunStore(config)
    evals = list(store.iter_evaluations())
    if not evals:
        _fail("no evaluations found; run evaluate first")
    manifest = audit_sample(
        evals,
        per_stratum if per_stratum is not None else config.audit_per_stratum,
        seed if seed is not None else config.seed)
    path = Path(out_path) if out_path else store.root / "audit_sample.csv"
    write_audit_csv(manifest, path)
    click.echo(str(path))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def validate(config_path: str) -> None:
    """Check every run artifact against its expected schema."""
    config = _load_config(config_path)
    store = RunStore(config)
    problems = store.validate()
    for problem in problems:
        click.echo(problem, err=True)
    if problems:
        sys.exit(1)
    click.echo(f"run {store.run_id}: all artifacts valid", err=True)


@main.group()
def stats() -> None:
    """Standalone statistics on CSV input."""


def _read_score_csv(path: str) -> dict[str, dict[str, float]]:
    """CSV with a leading block column and one column per treatment."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        treatments = header[1:]
        scores = {}
        for row in reader:
            if not row:
                continue
            scores[row[0]] = {t: float(v) for t, v in zip(treatments, row[1:])}
    return scores


@stats.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--higher-better/--lower-better", default=True)
def friedman(csv_path: str, higher_better: bool) -> None:
    """Friedman test over a block x treatment score table."""
    rm, means = mean_rank(_read_score_csv(csv_path), higher_better)
    result = friedman_test(rm)
    click.echo(json.dumps({"friedman": result.to_json(),
                           "mean_ranks": means}, indent=2))


@stats.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--alpha", default="0.05")
@click.option("--higher-better/--lower-better", default=True)
def nemenyi(csv_path: str, alpha: str, higher_better: bool) -> None:
    """Nemenyi critical-difference test over a score table."""
    rm, _means = mean_rank(_read_score_csv(csv_path), higher_better)
    result = nemenyi_test(rm, alpha)
    click.echo(json.dumps(result.to_json(), indent=2))


@stats.command()
@click.argument("csv_path", type=click.Path(exists=True))
def kappa(csv_path: str) -> None:
    """Cohen's kappa between two label columns (rater_a, rater_b)."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        _fail("empty label file")
    cols = list(rows[0].keys())[:2]
    value = cohens_kappa([r[cols[0]] for r in rows],
                         [r[cols[1]] for r in rows])
    click.echo(json.dumps({"kappa": value, "n": len(rows)}))


if __name__ == "__main__":
    main()
