import pytest

from src.core.errors import SplitOverlapError
from src.core.geometry import BBox
from src.evaluation.metrics import (
    CLEAN, FAILED, REPAIRED, EvalReport, SampleOutcome, TermStats, acc_at_iou, build_report, check_disjoint,
    cycle_round_trip, emit_report, iou_csv_path, read_report, rec_requests, score_rec, split_views,
)
from src.evaluation.predictors import OraclePredictor


def _outcome(iou, status=CLEAN, qualifier="none", shape="circle", index=0):
    return SampleOutcome(f"scene-{index}", 0, "the red circle", qualifier, shape, "", iou, status)


class _FixedAnswers:
    """Predictor that returns the same answer for every REC request."""

    def __init__(self, answer):
        self.answer = answer

    def locate(self, requests):
        return [self.answer for _ in requests]

    def describe(self, requests):
        return ["" for _ in requests]


def test_acc_at_iou_counts_strictly_above_threshold():
    gt = BBox(0, 0, 10, 10)
    # IoUs 0.6, 0.49 and 0.51 against a 10x10 box
    predictions = [BBox(0, 0, 10, 6), BBox(0, 0, 10, 4.9), BBox(0, 0, 10, 5.1)]
    assert acc_at_iou(predictions, [gt] * 3) == pytest.approx(2 / 3)
    assert acc_at_iou([BBox(0, 0, 10, 5)], [gt]) == 0.0
    assert acc_at_iou([None], [gt]) == 0.0
    assert acc_at_iou([], []) == 0.0
    with pytest.raises(ValueError):
        acc_at_iou([None], [])


def test_report_formats_accuracy_with_four_decimals():
    report = build_report("val", [_outcome(0.6), _outcome(0.49), _outcome(0.51)])
    assert report.n_samples == 3
    assert "acc_at_05: 0.6667" in report.to_text()


def test_report_rates_and_qualifier_breakdown():
    outcomes = [
        _outcome(0.9, CLEAN, "left"),
        _outcome(0.7, REPAIRED, "left"),
        _outcome(0.0, FAILED, "largest"),
        _outcome(0.2, CLEAN, "none"),
    ]
    report = build_report("val", outcomes)
    assert report.parse_failure_rate == 0.25
    assert report.repaired_rate == 0.25
    assert report.clean_rate == 0.5
    assert report.per_qualifier["left"] == (2, 1.0)
    assert report.per_qualifier["largest"] == (1, 0.0)
    assert "cycle_box: n/a" in report.to_text()


def test_empty_split_rates_still_sum_to_one():
    report = build_report("val", [])
    assert report.n_samples == 0
    assert (report.parse_failure_rate, report.repaired_rate, report.clean_rate) == (0.0, 0.0, 1.0)
    assert report.acc_at_05 == 0.0


def test_report_text_round_trip():
    cycle = (TermStats.of([0.0, 2.0, 4.0]), TermStats.of([0.5], unparsed=2))
    report = build_report("test", [_outcome(0.8, qualifier="right"), _outcome(0.1)], cycle)
    report.checkpoint_id = "abc123"
    report.corpus_hash = "f00d"
    parsed = EvalReport.from_text(report.to_text())
    assert parsed.to_text() == report.to_text()
    assert parsed.cycle_box.n == 3
    assert parsed.cycle_text.unparsed == 2


def test_emit_report_is_byte_identical_and_writes_csv(tmp_path):
    report = build_report("val", [_outcome(0.75)])
    first = tmp_path / "a" / "val.txt"
    second = tmp_path / "b" / "val.txt"
    emit_report(report, str(first), [_outcome(0.75)])
    emit_report(report, str(second), [_outcome(0.75)])
    assert first.read_bytes() == second.read_bytes()
    assert read_report(str(first)).acc_at_05 == 1.0
    rows = open(iou_csv_path(str(first)), encoding="utf-8").read().splitlines()
    assert rows[0].startswith("record_id,target_index")
    assert "0.750000" in rows[1]


def test_split_views_add_test_subsets():
    outcomes = [_outcome(0.9, shape="circle"), _outcome(0.1, shape="square"), _outcome(0.8, shape="triangle")]
    views = split_views("test", outcomes, "circle")
    assert set(views) == {"test", "testA", "testB"}
    assert views["testA"][0].n_samples == 1 and views["testA"][0].acc_at_05 == 1.0
    assert views["testB"][0].n_samples == 2 and views["testB"][0].acc_at_05 == 0.5
    assert set(split_views("val", outcomes, "circle")) == {"val"}


def test_oracle_scores_perfect_accuracy(dataset):
    records = dataset.split("test")
    outcomes = score_rec(OraclePredictor(), rec_requests(dataset, records))
    assert len(outcomes) == sum(len(r.expressions) for r in records)
    report = build_report("test", outcomes)
    assert report.acc_at_05 == 1.0
    assert report.clean_rate == 1.0


def test_unparseable_answers_count_as_misses(dataset):
    requests = rec_requests(dataset, dataset.split("val"))
    outcomes = score_rec(_FixedAnswers("i do not know"), requests)
    report = build_report("val", outcomes)
    assert report.acc_at_05 == 0.0
    assert report.parse_failure_rate == 1.0
    assert all(o.iou == 0.0 for o in outcomes)


def test_oracle_cycle_terms_are_zero(dataset, vocab):
    box_stats, text_stats = cycle_round_trip(OraclePredictor(), dataset, dataset.split("val"), 50, vocab)
    assert box_stats.n > 0 and text_stats.n == box_stats.n
    assert box_stats.mean == 0.0 and text_stats.mean == 0.0
    assert box_stats.unparsed == 0 and text_stats.unparsed == 0


def test_check_disjoint_detects_leaked_records(dataset):
    train_hashes = [r.content_hash() for r in dataset.split("train")]
    check_disjoint(train_hashes, dataset.split("test"), "test")
    with pytest.raises(SplitOverlapError):
        check_disjoint(train_hashes, dataset.split("train")[:1], "test")
