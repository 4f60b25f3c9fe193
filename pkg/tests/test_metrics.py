import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from wmbench.metrics import (
    EvalRecord,
    UndefinedMetricError,
    accuracy,
    aggregate,
    content_table,
    format_table,
    grade,
    parse_answer,
    pdr,
    position_table,
    unanswered_record,
    write_table_csv,
)
from wmbench.watermark import WatermarkContent, WatermarkSpec
from conftest import make_item

OPTIONS = {"A": "a bar chart", "B": "42%", "C": "Paris", "D": "all of the above"}

# Thirty reply styles, graded by hand against the priority rules before the
# parser was written.
REPLY_STYLES = [
    ("B", "TextS", {"B"}),
    ("b", "TextS", {"B"}),
    ("B.", "TextS", {"B"}),
    ("B)", "TextS", {"B"}),
    ("(B)", "TextS", {"B"}),
    ("Answer: B", "TextS", {"B"}),
    ("The answer is B.", "TextS", {"B"}),
    ("The answer is B. Because the value declines.", "TextS", {"B"}),
    ("**B**", "TextS", {"B"}),
    ("The answer is (c).", "TextS", {"C"}),
    ("The best option is B) 42%.", "TextS", {"B"}),
    ("42% (option D)", "TextS", {"D"}),
    ("D. All of the above", "TextS", {"D"}),
    ("Looking at the chart closely...\nB", "TextS", {"B"}),
    ("Neither A nor B", "TextS", {"A"}),
    ("A and C", "ChartM", {"A", "C"}),
    ("A, C", "ChartM", {"A", "C"}),
    ("A,C", "ChartM", {"A", "C"}),
    ("A C", "ChartM", {"A", "C"}),
    ("C and A", "ChartM", {"A", "C"}),
    ("Options A and C are correct.", "ChartM", {"A", "C"}),
    ("The correct options are B, C, and D.", "ChartM", {"B", "C", "D"}),
    ("B B", "ChartM", {"B"}),
    ("A.", "ChartM", {"A"}),
    ("B and D are shown", "ChartM", {"B", "D"}),
    ("", "TextS", set()),
    ("I cannot determine this.", "TextS", set()),
    ("E", "TextS", set()),
    ("The value is 42.", "TextS", set()),
    ("Paris", "TextS", {"C"}),  # exact option-text fallback
]


class TestParseAnswer:
    @pytest.mark.parametrize("raw,category,expected", REPLY_STYLES)
    def test_reply_styles(self, raw, category, expected):
        assert parse_answer(raw, category, OPTIONS) == frozenset(expected)

    def test_single_choice_keeps_first(self):
        assert parse_answer("Maybe C, though B fits too", "TextS") == {"C"}

    def test_chartm_sorted_distinct(self):
        assert sorted(parse_answer("D then A then D", "ChartM")) == ["A", "D"]

    def test_option_text_match_case_insensitive(self):
        assert parse_answer("  paris ", "TextS", OPTIONS) == {"C"}

    def test_total_function_on_junk(self):
        assert parse_answer("\x00\x01 nothing here", "TextS", OPTIONS) == frozenset()


class TestGrade:
    def test_exact_match_correct(self):
        item = make_item("x", "img.png", answer={"B"})
        assert grade(item, "B", "clean").correct

    def test_exhaustive_chartm_subsets(self):
        # All 2^4 parsed subsets against answer {A, C}: only the exact set scores.
        item = make_item("x", "img.png", category="ChartM", answer={"A", "C"})
        for r in range(5):
            for subset in itertools.combinations("ABCD", r):
                raw = " and ".join(subset)
                record = grade(item, raw, "clean")
                assert record.parsed_answer == frozenset(subset)
                assert record.correct == (set(subset) == {"A", "C"})

    def test_subset_of_answer_is_wrong(self):
        item = make_item("x", "img.png", category="ChartM", answer={"A", "C"})
        assert not grade(item, "A", "clean").correct


def _records(n_correct, n_wrong, n_unanswered=0, condition="clean"):
    recs = []
    for i in range(n_correct):
        recs.append(EvalRecord(f"c{i}", condition, frozenset({"B"}), True))
    for i in range(n_wrong):
        recs.append(EvalRecord(f"w{i}", condition, frozenset({"A"}), False))
    for i in range(n_unanswered):
        recs.append(EvalRecord(f"u{i}", condition, frozenset(), False, True))
    return recs


class TestAccuracy:
    def test_three_of_four(self):
        assert accuracy(_records(3, 1)) == 0.75

    def test_all_correct(self):
        assert accuracy(_records(5, 0)) == 1.0

    def test_unanswered_excluded_from_denominator(self):
        assert accuracy(_records(3, 1, n_unanswered=4)) == 0.75

    def test_all_unanswered_is_error(self):
        with pytest.raises(UndefinedMetricError):
            accuracy(_records(0, 0, n_unanswered=3))

    @settings(max_examples=50, deadline=None)
    @given(
        n_correct=st.integers(0, 20),
        n_wrong=st.integers(0, 20),
        seed=st.integers(0, 999),
    )
    def test_permutation_invariant(self, n_correct, n_wrong, seed):
        if n_correct + n_wrong == 0:
            return
        recs = _records(n_correct, n_wrong)
        shuffled = recs[:]
        random.Random(seed).shuffle(shuffled)
        assert accuracy(shuffled) == accuracy(recs)


class TestPdr:
    def test_paper_maximum_value(self):
        assert pdr(0.50, 0.32) == pytest.approx(36.0)

    def test_identity(self):
        for a in (0.2, 0.5, 1.0):
            assert pdr(a, a) == 0.0

    def test_total_drop(self):
        assert pdr(0.40, 0.0) == 100.0

    def test_negative_preserved(self):
        assert pdr(0.5, 0.6) == pytest.approx(-20.0)

    def test_zero_clean_is_error(self):
        with pytest.raises(UndefinedMetricError):
            pdr(0.0, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.floats(min_value=0.01, max_value=1.0),
        b1=st.floats(min_value=0.0, max_value=1.0),
        b2=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_antitone_in_watermarked_accuracy(self, a, b1, b2):
        lo, hi = sorted((b1, b2))
        assert pdr(a, hi) <= pdr(a, lo)


def _spec(position="center", content="text"):
    factories = {
        "text": WatermarkContent.text,
        "symbol": WatermarkContent.symbol,
        "mask": WatermarkContent.mask,
    }
    return WatermarkSpec(content=factories[content](), position=position)


def _report(model, cells):
    """cells: {dataset: {condition_id_or_clean: (n_correct, n_total)}}"""
    specs = {}
    records = {}
    for dataset, conds in cells.items():
        by_cond = {}
        for cond, (n_correct, n_total) in conds.items():
            if cond != "clean":
                position, content = cond.split("/")
                spec = _spec(position, content)
                specs[spec.condition_id] = spec
                cond_id = spec.condition_id
            else:
                cond_id = "clean"
            by_cond[cond_id] = _records(
                n_correct, n_total - n_correct, condition=cond_id
            )
        records[dataset] = by_cond
    return aggregate(records, specs, {"model": model})


class TestAggregate:
    def test_single_cell_pdr(self):
        report = _report("m1", {"TextS": {"clean": (8, 10), "center/text": (6, 10)}})
        cell = report.results["TextS"]
        cond_id = next(c for c in cell if c != "clean")
        assert cell[cond_id].pdr == pytest.approx(25.0)

    def test_missing_clean_is_error(self):
        with pytest.raises(UndefinedMetricError, match="clean"):
            aggregate({"TextS": {"x": _records(1, 0, condition="x")}}, {})

    def test_zero_clean_accuracy_reports_none(self):
        report = _report("m1", {"TextS": {"clean": (0, 10), "center/text": (5, 10)}})
        cond_id = next(c for c in report.results["TextS"] if c != "clean")
        assert report.results["TextS"][cond_id].pdr is None

    def test_avg_row_is_mean_of_model_rows(self):
        r1 = _report("m1", {"TextS": {"clean": (10, 10), "center/text": (8, 10)}})
        r2 = _report("m2", {"TextS": {"clean": (10, 10), "center/text": (6, 10)}})
        table = position_table([r1, r2])
        assert table.cell("m1", "TextS", "center") == pytest.approx(20.0)
        assert table.cell("m2", "TextS", "center") == pytest.approx(40.0)
        assert table.cell("AVG", "TextS", "center") == pytest.approx(30.0)

    def test_highlight_marks_position_argmax(self):
        report = _report(
            "m1",
            {
                "TextS": {
                    "clean": (10, 10),
                    "center/text": (8, 10),
                    "scattered/text": (5, 10),
                    "top_left/text": (9, 10),
                }
            },
        )
        table = position_table([report])
        assert ("m1", "TextS", "scattered") in table.highlights
        assert ("m1", "TextS", "center") not in table.highlights
        text = format_table(table)
        assert "50*" in text

    def test_content_table_columns(self):
        report = _report(
            "m1",
            {
                "ChartS": {
                    "clean": (10, 10),
                    "scattered/text": (7, 10),
                    "scattered/symbol": (8, 10),
                    "scattered/mask": (9, 10),
                }
            },
        )
        table = content_table([report])
        assert table.cell("m1", "ChartS", "text") == pytest.approx(30.0)
        assert table.cell("m1", "ChartS", "symbol") == pytest.approx(20.0)
        assert table.cell("m1", "ChartS", "mask") == pytest.approx(10.0)
        assert ("m1", "ChartS", "text") in table.highlights

    def test_csv_layout(self, tmp_path):
        report = _report(
            "m1",
            {"TextS": {"clean": (10, 10), "center/text": (8, 10)}},
        )
        path = tmp_path / "pos.csv"
        write_table_csv(position_table([report]), path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "Model,TextS:Center,TextS:Scattered,TextS:Top-left"
        assert lines[1].startswith("m1,20.0000,n/a,n/a")
        assert lines[2].startswith("AVG,")

    def test_always_wrong_never_crashes(self):
        report = _report(
            "m1",
            {"TextS": {"clean": (0, 10), "center/text": (0, 10)}},
        )
        table = position_table([report])
        assert table.cell("m1", "TextS", "center") is None
        assert "n/a" in format_table(table)

    def test_unanswered_counted_separately(self):
        records = {
            "TextS": {
                "clean": _records(4, 0, n_unanswered=2),
            }
        }
        report = aggregate(records, {}, {"model": "m"})
        cell = report.results["TextS"]["clean"]
        assert cell.accuracy == 1.0
        assert cell.graded == 4
        assert cell.unanswered == 2
