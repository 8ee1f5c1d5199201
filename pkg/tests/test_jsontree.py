from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from metaextract.jsontree import (
    META_KEYS,
    Category,
    ConfidenceLevel,
    EvalLabel,
    EvalStatus,
    ErrorType,
    FieldPath,
    GroundTruthDoc,
    canonical_equal,
    canonicalize_value,
    dumps_canonical,
    enumerate_leaves,
    format_number,
    is_leaf,
    nearest_enclosing_meta,
    parse_json,
    resolve,
    tree_digest,
)


def test_parse_json_numbers_are_exact_decimals():
    tree = parse_json('{"a": 0.1, "b": 2, "c": 1e2}')
    assert tree["a"] == Decimal("0.1")
    assert tree["b"] == 2
    assert isinstance(tree["c"], Decimal)


def test_canonical_dump_sorts_keys_and_strips_trailing_zeros():
    tree = {"b": Decimal("1.50"), "a": Decimal("2.0"), "c": "x"}
    assert dumps_canonical(tree) == '{"a":2,"b":1.5,"c":"x"}'


def test_canonical_dump_preserves_unicode():
    assert dumps_canonical({"u": "kg/m²"}) == '{"u":"kg/m²"}'


def test_canonical_dump_rejects_non_finite():
    with pytest.raises(ValueError):
        dumps_canonical({"x": float("nan")})


def test_canonical_roundtrip_is_stable():
    text = '{"a":[1,2.5,null,true],"b":{"c":"hi"}}'
    assert dumps_canonical(parse_json(text)) == text


def test_format_number():
    assert format_number(Decimal("2.0")) == "2"
    assert format_number(Decimal("0.500")) == "0.5"
    assert format_number(7) == "7"


def test_tree_digest_is_order_insensitive():
    assert tree_digest({"a": 1, "b": 2}) == tree_digest({"b": 2, "a": 1})
    assert tree_digest({"a": 1}) != tree_digest({"a": 2})


class TestFieldPath:
    def test_render_simple(self):
        path = FieldPath(("statistics", "sample_size", "control_group"))
        assert path.render() == "statistics.sample_size.control_group"

    def test_render_indices_and_quoting(self):
        path = FieldPath(("outcomes", 0, "6-month follow-up.value"))
        assert path.render() == 'outcomes[0]["6-month follow-up.value"]'

    def test_parse_roundtrip(self):
        for text in ("a.b.c", "a[0].b", 'a["weird key!"].c[2]'):
            assert FieldPath.parse(text).render() == text

    def test_starts_with(self):
        path = FieldPath(("a", "b", "c"))
        assert path.starts_with(FieldPath(("a", "b")))
        assert not path.starts_with(FieldPath(("a", "c")))

    @given(st.lists(
        st.one_of(st.integers(min_value=0, max_value=20),
                  st.text(min_size=1).filter(lambda s: "\x00" not in s)),
        min_size=1, max_size=5))
    def test_parse_render_roundtrip_property(self, segments):
        path = FieldPath(tuple(segments))
        assert FieldPath.parse(path.render()) == path


class TestCanonicalValue:
    def test_numeric_text_becomes_decimal(self):
        assert canonicalize_value("6.10") == Decimal("6.1")
        assert canonicalize_value(6.1) == Decimal("6.1")

    def test_text_normalization(self):
        assert canonicalize_value("  Double-Blind  ") == "double-blind"
        assert canonicalize_value("a\n  b") == "a b"

    def test_bool_is_not_numeric(self):
        assert canonicalize_value(True) is True

    def test_canonical_equal(self):
        assert canonical_equal("50", 50)
        assert canonical_equal("Iran ", "iran")
        assert not canonical_equal(True, 1)
        assert not canonical_equal("a", None)

    def test_non_leaf_equality(self):
        assert canonical_equal({"a": 1}, {"a": 1})
        assert not canonical_equal({"a": 1}, {"a": 2})


def test_enumerate_leaves_document_order_and_meta_skip():
    tree = {"a": {"source": "Table 1", "x": 1}, "b": [2, {"y": 3}]}
    paths = [p.render() for p, _ in enumerate_leaves(tree, skip_meta=True)]
    assert paths == ["a.x", "b[0]", "b[1].y"]
    all_paths = [p.render() for p, _ in enumerate_leaves(tree)]
    assert "a.source" in all_paths


def test_resolve():
    tree = {"a": [{"b": 5}]}
    assert resolve(tree, FieldPath(("a", 0, "b"))) == (True, 5)
    assert resolve(tree, FieldPath(("a", 1)))[0] is False
    assert resolve(tree, FieldPath(("z",)))[0] is False


def test_nearest_enclosing_meta_prefers_deepest():
    tree = {
        "confidence": "Low",
        "stats": {"confidence": "High", "group": {"mean": 5}},
    }
    value = nearest_enclosing_meta(tree, FieldPath(("stats", "group", "mean")),
                                   "confidence")
    assert value == "High"
    assert nearest_enclosing_meta(tree, FieldPath(("other",)),
                                  "confidence") == "Low"


def test_confidence_ordering():
    assert ConfidenceLevel.LOW < ConfidenceLevel.MEDIUM < ConfidenceLevel.HIGH
    assert max([ConfidenceLevel.LOW, ConfidenceLevel.HIGH]) is ConfidenceLevel.HIGH
    assert ConfidenceLevel.parse("high") is ConfidenceLevel.HIGH
    assert ConfidenceLevel.parse("banana") is None


def test_eval_label_invariants():
    with pytest.raises(ValueError):
        EvalLabel(EvalStatus.CORRECT, ErrorType.INCORRECT_VALUE)
    with pytest.raises(ValueError):
        EvalLabel(EvalStatus.HALLUCINATED)
    with pytest.raises(ValueError):
        EvalLabel(EvalStatus.MISSING, ErrorType.INCORRECT_UNIT)


def test_ground_truth_category_lookup():
    doc = GroundTruthDoc(
        doc_id="d", tree={"stats": {"n": 3}, "info": {"year": 2020}},
        category_map={"stats": Category.STATISTICS,
                      "info": Category.STUDY_INFO})
    assert doc.category_of(FieldPath(("stats", "n"))) is Category.STATISTICS
    assert doc.category_of(FieldPath(("other",))) is None
    leaves = doc.scored_leaves(Category.STUDY_INFO)
    assert [p.render() for p, _ in leaves] == ["info.year"]


def test_meta_keys_frozen():
    assert "source" in META_KEYS and "confidence" in META_KEYS
    assert isinstance(META_KEYS, frozenset)


def test_is_leaf():
    assert is_leaf(None) and is_leaf(5) and is_leaf("x") and is_leaf(Decimal("1"))
    assert not is_leaf({}) and not is_leaf([])
