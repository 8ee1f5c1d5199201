"""Acceptance gate: one test per release criterion.

Each test prints a single PASS/FAIL line (run with -s or -rA to see them all)
and fails loudly when its criterion is not met.
"""

import copy
import json
import random
import re
import socket
import time
from contextlib import contextmanager
from decimal import Decimal
from pathlib import Path


from conftest import write_config
from test_merger import oracle_merge, triple_corpus

from metaextract.config import RunConfig
from metaextract.evaluation import ComparisonOptions, compare_values
from metaextract.extraction import CorrectionSet, apply_corrections, Correction
from metaextract.jsontree import (
    Category,
    ErrorType,
    ExtractionRecord,
    PdfStatus,
    Strategy,
    dumps_canonical,
    enumerate_leaves,
    parse_json,
)
from metaextract.merger import MergeRule, merge_three, validate_no_fabrication
from metaextract.prompts import (
    DomainProfile,
    load_template,
    render_baseline,
    render_customised,
    render_evaluation,
    render_merge,
    render_reflection,
)
from metaextract.review import (
    AUTO_ACCEPTED,
    CORRECTED,
    PENDING,
    REJECTED,
    ACCEPTED,
    PendingItemsRemain,
    ReviewStore,
    route_fields,
)
from metaextract.runner import run_evaluate, run_extract, run_merge, run_report
from metaextract.stats import (
    chi2_sf,
    distribution_from_counts,
    mean_rank,
    precision_recall,
)
from metaextract.store import RunStore

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def verdict(name: str, ok: bool) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    assert ok, name


@contextmanager
def no_network():
    """Fail the enclosed block if anything opens a network connection."""
    original = socket.socket.connect

    def blocked(self, *args, **kwargs):
        raise AssertionError(f"network connection attempted: {args}")

    socket.socket.connect = blocked
    try:
        yield
    finally:
        socket.socket.connect = original


def test_merge_oracle_equivalence():
    start = time.monotonic()
    mismatches = 0
    for a, b, c in triple_corpus(1000, seed=101):
        merged, _ = merge_three(a, b, c)
        if dumps_canonical(merged) != dumps_canonical(oracle_merge(a, b, c)):
            mismatches += 1
    elapsed = time.monotonic() - start
    verdict("merge oracle equivalence on 1000 triples "
            f"({mismatches} mismatches, {elapsed:.2f}s)",
            mismatches == 0 and elapsed < 10)


def test_merge_invariants():
    violations = 0
    for a, b, c in triple_corpus(1000, seed=101):
        merged, trace = merge_three(a, b, c)
        same, same_trace = merge_three(copy.deepcopy(merged),
                                       copy.deepcopy(merged),
                                       copy.deepcopy(merged))
        if dumps_canonical(same) != dumps_canonical(merged):
            violations += 1
        if any(d.rule is not MergeRule.UNANIMOUS
               for d in same_trace.decisions):
            violations += 1
        try:
            validate_no_fabrication(merged, (a, b, c))
        except Exception:
            violations += 1
        scopes = [d.path for d in trace.decisions]
        for leaf_path, _ in enumerate_leaves(merged):
            if sum(1 for s in scopes if leaf_path.starts_with(s)) != 1:
                violations += 1
    verdict(f"merge invariants on corpus ({violations} violations)",
            violations == 0)


def test_statistics_anchors():
    p = chi2_sf(9.81, 3)
    dist = distribution_from_counts({
        ErrorType.MISSING_FIELD: 19470,
        ErrorType.INCORRECT_VALUE: 2296,
        ErrorType.INCORRECT_UNIT: 267,
        ErrorType.OVERGENERALIZED: 163,
    })
    percents = {et: pct for et, (_, pct) in dist.items()}
    scores = {
        "c1": {"grok": 0.8, "gemini": 0.9, "gpt": 0.7},
        "c2": {"grok": 0.9, "gemini": 0.5, "gpt": 0.7},
        "c3": {"grok": 0.9, "gemini": 0.7, "gpt": 0.5},
    }
    _, means = mean_rank(scores, higher_better=True)
    rounded = {m: round(r, 1) for m, r in means.items()}
    ok = (abs(p - 0.0203) <= 0.0005
          and percents[ErrorType.MISSING_FIELD] == Decimal("87.8")
          and percents[ErrorType.INCORRECT_VALUE] == Decimal("10.3")
          and percents[ErrorType.INCORRECT_UNIT] == Decimal("1.2")
          and percents[ErrorType.OVERGENERALIZED] == Decimal("0.7")
          and rounded == {"grok": 1.3, "gemini": 2.0, "gpt": 2.7})
    verdict(f"statistics anchors (p={p:.4f}, shares "
            f"{[str(percents[et]) for et in ErrorType]}, ranks {rounded})", ok)


def test_metrics_properties():
    from test_stats import make_doc_eval

    rng = random.Random(500)
    problems = 0
    for i in range(500):
        c, h, m = rng.randint(0, 8), rng.randint(0, 8), rng.randint(0, 8)
        if c + h + m == 0:
            c = 1
        doc_eval = make_doc_eval(f"d{i}", c, h, m)
        if sum(doc_eval.counts().values()) != len(doc_eval.evals):
            problems += 1
        (cell,) = precision_recall([doc_eval], "Micro")
        for value in (cell.precision, cell.recall):
            if value is not None and not 0.0 <= value <= 1.0:
                problems += 1
        (more,) = precision_recall([make_doc_eval(f"d{i}", c, h, m + 1)],
                                   "Micro")
        if more.precision != cell.precision:
            problems += 1
        if cell.recall and not (more.recall < cell.recall):
            problems += 1
    for i in range(50):
        k = rng.randint(3, 6)
        blocks = {f"b{j}": {f"t{t}": rng.random() for t in range(k)}
                  for j in range(rng.randint(2, 6))}
        rm, _ = mean_rank(blocks)
        expected = k * (k + 1) / 2
        for row in rm.ranks:
            if abs(sum(row) - expected) > 1e-9:
                problems += 1
    verdict(f"metrics properties on 500 random evaluations "
            f"({problems} problems)", problems == 0)


def test_correction_application():
    tree = parse_json(
        (FIXTURES / "reflection_example_input.json").read_text("utf-8"))
    cs = CorrectionSet.from_json(json.loads(
        (FIXTURES / "reflection_example_corrections.json").read_text("utf-8")))
    out, report = apply_corrections(tree, cs)
    before = {p.render(): v for p, v in enumerate_leaves(tree)}
    after = {p.render(): v for p, v in enumerate_leaves(out)}
    changed = {k for k in set(before) | set(after)
               if before.get(k) != after.get(k)}
    expected = {
        "participant_characteristics.age.range[0]",
        "outcome_cognitive_function.final_followup.control_group.mean",
        "outcome_cognitive_function.final_followup.control_group.source",
    }
    ok = (report.applied == 2 and changed == expected
          and after["participant_characteristics.age.range[0]"] == 21
          and after["participant_characteristics.age.range[1]"] == 57
          and after["outcome_cognitive_function.final_followup."
                    "control_group.mean"] == Decimal("26.0")
          and after["outcome_cognitive_function.final_followup."
                    "control_group.source"] == "Table 4")

    from test_extraction import random_tree
    rng = random.Random(73)
    fuzz_problems = 0
    runs = 0
    while runs < 200:
        base = random_tree(rng)
        leaves = [(p, v) for p, v in enumerate_leaves(base)
                  if len(p.segments) >= 2]
        if not isinstance(base, dict) or not leaves:
            continue
        runs += 1
        path, old = rng.choice(leaves)
        new_value = f"fuzz{rng.randint(100, 999)}"
        skeleton = new_value
        for seg in reversed(path.segments[1:]):
            skeleton = {seg: skeleton}
        fuzz_cs = CorrectionSet(
            "corrections",
            (Correction(field_name=path.segments[0], justification="fuzz",
                        revised_value=skeleton),),
            PdfStatus.PROCESSED)
        fuzzed, fuzz_report = apply_corrections(base, fuzz_cs)
        b = {p.render(): v for p, v in enumerate_leaves(base)}
        a = {p.render(): v for p, v in enumerate_leaves(fuzzed)}
        diff = {k for k in set(b) | set(a) if b.get(k) != a.get(k)}
        if fuzz_report.applied:
            if diff - {p.render() for p in fuzz_report.changed_paths}:
                fuzz_problems += 1
        elif diff:
            fuzz_problems += 1
    verdict(f"correction application (example ok={ok}, "
            f"{fuzz_problems} fuzz violations)", ok and fuzz_problems == 0)


def test_judge_golden_corpus():
    opts = ComparisonOptions.load_default()
    cases = json.loads((GOLDEN / "judge_corpus.json").read_text("utf-8"))
    disagreements = 0
    for case in cases:
        def conv(v):
            return Decimal(str(v)) if isinstance(v, float) else v
        label = compare_values(conv(case["gt_value"]), conv(case["ext_value"]),
                               Category.STATISTICS, opts)
        got = (label.status.value,
               label.error_type.value if label.error_type else None)
        if got != (case["status"], case["error_type"]):
            disagreements += 1
    verdict(f"judge golden corpus (50 pairs, {disagreements} disagreements)",
            len(cases) == 50 and disagreements == 0)


def run_pipeline(config_path: Path) -> RunStore:
    config = RunConfig.from_file(config_path)
    with RunStore(config) as store:
        run_extract(config, store)
        run_merge(config, store)
        run_evaluate(config, store)
    run_report(config, fmt="md")
    return RunStore(config)


def snapshot_run(store: RunStore) -> dict[str, bytes]:
    return {str(p.relative_to(store.root)): p.read_bytes()
            for p in sorted(store.root.rglob("*")) if p.is_file()}


def test_end_to_end_mock_run(tmp_path):
    # two consecutive runs share the response cache but write to separate
    # run directories; their artifacts must match byte for byte
    first_path = write_config(tmp_path / "one")
    second_path = write_config(tmp_path / "two")
    data = json.loads(second_path.read_text("utf-8"))
    data["cache_dir"] = str(tmp_path / "one" / "cache")
    second_path.write_text(json.dumps(data), encoding="utf-8")

    start = time.monotonic()
    with no_network():
        first = run_pipeline(first_path)
        second = run_pipeline(second_path)
    elapsed = time.monotonic() - start
    snap1, snap2 = snapshot_run(first), snapshot_run(second)
    identical = snap1 == snap2
    has_artifacts = any(k.startswith("extractions") for k in snap1) and \
        "metrics.csv" in snap1 and "report.md" in snap1
    verdict(f"end-to-end mock run (elapsed {elapsed:.2f}s, "
            f"{len(snap1)} artifacts, byte-identical={identical})",
            identical and has_artifacts and elapsed < 60)


def test_blinding_audit(tmp_path):
    config_path = write_config(tmp_path, judge="llm")
    with no_network():
        run_pipeline(config_path)
    audit_path = tmp_path / "cache" / "audit.jsonl"
    entries = [json.loads(line) for line in
               audit_path.read_text("utf-8").splitlines() if line.strip()]
    judge_entries = [e for e in entries if e["model_id"] == "judge-mock"]
    forbidden = re.compile(
        r"\b(alpha|beta|gamma|ext|self_reflection|combined_ext|"
        r"customised_ext)\b")
    leaks = [e for e in judge_entries if forbidden.search(e["prompt"])]
    verdict(f"blinding audit ({len(judge_entries)} judge requests, "
            f"{len(leaks)} leaks)", judge_entries and not leaks)


def test_tier_routing(tmp_path):
    store = run_pipeline(write_config(tmp_path))
    config = RunConfig.from_file(tmp_path / "config.json")
    review = ReviewStore(store.run_id)
    routed = 0
    for record in store.iter_records():
        if record.strategy is not Strategy.COMBINED_EXT:
            continue
        gt = store.load_ground_truth(record.doc_id)
        items = route_fields(record, gt.category_of, config.tier_policy)
        review.add_document(record, items)
        routed += len(items)
    t3_auto = [it for it in review.queue(tier="T3")
               if it.status == AUTO_ACCEPTED]

    refused = False
    try:
        review.finalize()
    except PendingItemsRemain:
        refused = True

    corrected = review.queue(tier="T3", status=PENDING)[0]
    rejected = review.queue(tier="T2", status=PENDING)[0]
    review.submit_decision(corrected.item_id, CORRECTED, "r1", "t1",
                           corrected_value="amended")
    review.submit_decision(rejected.item_id, REJECTED, "r1", "t2")
    for item in review.queue(status=PENDING):
        review.submit_decision(item.item_id, ACCEPTED, "r1",
                               f"tok-{item.item_id}")
    finals, _ = review.finalize()

    diff_ok = True
    records = {r.doc_id: r for r in store.iter_records()
               if r.strategy is Strategy.COMBINED_EXT}
    expected_changes = {
        corrected.doc_id: {corrected.path.render()},
        rejected.doc_id: {rejected.path.render()},
    }
    if corrected.doc_id == rejected.doc_id:
        expected_changes = {corrected.doc_id: {corrected.path.render(),
                                               rejected.path.render()}}
    for doc_id, final_tree in finals.items():
        before = {p.render(): v
                  for p, v in enumerate_leaves(records[doc_id].tree)}
        after = {p.render(): v for p, v in enumerate_leaves(final_tree)}
        changed = {k for k in set(before) | set(after)
                   if before.get(k) != after.get(k)}
        if changed != expected_changes.get(doc_id, set()):
            diff_ok = False
    verdict(f"tier routing ({routed} items, {len(t3_auto)} T3 auto-accepts, "
            f"finalize refused={refused}, diff exact={diff_ok})",
            routed > 0 and not t3_auto and refused and diff_ok)


def test_prompt_goldens():
    profile = DomainProfile(profile_id="ma1-glycemic",
                            expertise="clinical nutrition",
                            focus_outcomes=("HbA1c", "BMI"))
    record = ExtractionRecord(
        doc_id="doc1", model_id="alpha", strategy=Strategy.EXT,
        tree=parse_json((FIXTURES / "reflection_example_input.json"
                         ).read_text("utf-8")),
        pdf_status=PdfStatus.PROCESSED, prompt_hash="0" * 64)
    gt = {"sample_size": {"intervention_group": 29, "control_group": 28}}
    ext = {"sample_size": {"intervention_group": 29, "control_group": 30}}
    renders = {
        "baseline.txt": render_baseline(),
        "customised.txt": render_customised(profile),
        "reflection.txt": render_reflection(record),
        "merge.txt": render_merge(
            {"sample_size": {"total": 60}, "confidence": "High"},
            {"sample_size": {"total": 61}, "confidence": "Medium"},
            {"sample_size": {"total": 60}, "confidence": "High"}),
        "eval_statistics.txt": render_evaluation(Category.STATISTICS, gt, ext),
        "eval_quality.txt": render_evaluation(
            Category.QUALITY_ASSESSMENT, gt, ext),
        "eval_study_info.txt": render_evaluation(Category.STUDY_INFO, gt, ext),
    }
    mismatched = [name for name, text in renders.items()
                  if (GOLDEN / "prompts" / name).read_text("utf-8") != text]

    body = load_template("extraction").body
    head, rest = body.split("<!-- EXPERTISE -->")
    middle, tail = rest.split("<!-- FOCUS_OUTCOMES -->")
    baseline, customised = renders["baseline.txt"], renders["customised.txt"]
    two_regions = all(
        text.startswith(head) and text.endswith(tail) and middle in text
        for text in (baseline, customised)
    ) and baseline != customised
    verdict(f"prompt goldens ({len(renders)} templates, "
            f"mismatched={mismatched}, two-region={two_regions})",
            not mismatched and two_regions)
