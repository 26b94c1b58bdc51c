import csv
import io
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqemo.errors import DataError
from seqemo.evaluation import (
    EvalReport,
    accuracy,
    confusion_matrix,
    cv_summary_csv,
    cv_summary_table,
    emit_cv_summary,
    emit_report,
    micro_recall,
    precision_recall_f1,
)

SIX = ["neutral", "sadness", "happiness", "surprise", "questioning", "anger"]


class TestConfusion:
    def test_hand_example(self):
        np.testing.assert_array_equal(confusion_matrix([0, 0, 1], [0, 1, 1], 2), [[1, 1], [0, 1]])

    def test_perfect_is_diagonal(self):
        labels = [0, 1, 2, 2, 1]
        np.testing.assert_array_equal(confusion_matrix(labels, labels, 3), np.diag([1, 2, 2]))

    def test_row_sums_are_class_counts(self, rng):
        true = rng.integers(0, 4, 200)
        m = confusion_matrix(true, rng.integers(0, 4, 200), 4)
        np.testing.assert_array_equal(m.sum(axis=1), np.bincount(true, minlength=4))
        assert m.sum() == 200

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            confusion_matrix([0, 1], [0], 2)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            confusion_matrix([0, 2], [0, 1], 2)


class TestMetrics:
    def test_diagonal_all_ones(self):
        for m in precision_recall_f1(np.diag([3, 1, 4])):
            assert (m.precision, m.recall, m.f1, m.degenerate) == (1.0, 1.0, 1.0, False)

    def test_hand_tp2_fp1_fn1(self):
        # class 0: TP=2, FP=1 (a class-1 item predicted 0), FN=1 (a class-0 item predicted 1)
        m = precision_recall_f1(np.array([[2, 1], [1, 5]]))[0]
        assert m.precision == 2 / 3
        assert m.recall == 2 / 3
        assert m.f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_empty_column_is_degenerate(self):
        metrics = precision_recall_f1(np.array([[2, 0], [3, 0]]))
        assert metrics[1].precision == 0.0
        assert metrics[1].degenerate
        assert not metrics[0].degenerate

    def test_non_square(self):
        with pytest.raises(DataError):
            precision_recall_f1(np.zeros((2, 3)))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.int64, (5, 5), elements=st.integers(0, 50)))
    def test_micro_recall_equals_accuracy(self, matrix):
        assert micro_recall(matrix) == accuracy(matrix)
        total = int(matrix.sum())
        if total:
            assert Fraction(int(np.trace(matrix)), total) == Fraction(accuracy(matrix)).limit_denominator(10**9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=80))
    def test_accuracy_matches_direct_count(self, pairs):
        true, pred = map(np.array, zip(*pairs))
        assert accuracy(confusion_matrix(true, pred, 4)) == np.mean(true == pred)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 20)), st.permutations(range(4)))
    def test_permutation_consistency(self, matrix, perm):
        perm = list(perm)
        base = precision_recall_f1(matrix)
        permuted = precision_recall_f1(matrix[np.ix_(perm, perm)])
        for new_pos, old_pos in enumerate(perm):
            assert permuted[new_pos] == base[old_pos]
        assert accuracy(matrix[np.ix_(perm, perm)]) == accuracy(matrix)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, (3, 3), elements=st.integers(0, 30)))
    def test_f1_is_harmonic_mean(self, matrix):
        for m in precision_recall_f1(matrix):
            if m.precision + m.recall > 0:
                assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


class TestReports:
    @pytest.fixture
    def report(self, rng):
        return EvalReport.from_predictions(SIX, rng.integers(0, 6, 120), rng.integers(0, 6, 120))

    def test_csv_is_seven_by_seven(self, report, tmp_path):
        emit_report(report, tmp_path)
        rows = list(csv.reader(io.StringIO((tmp_path / "confusion_matrix.csv").read_text())))
        assert len(rows) == 7 and all(len(r) == 7 for r in rows)
        assert rows[0][1:] == SIX
        assert [r[0] for r in rows[1:]] == SIX
        np.testing.assert_array_equal(np.array([r[1:] for r in rows[1:]], dtype=int), report.matrix)

    def test_files_and_four_decimals(self, report, tmp_path):
        emit_report(report, tmp_path)
        assert {p.name for p in tmp_path.iterdir()} == {"confusion_matrix.csv", "metrics.txt", "metrics.json", "summary.txt"}
        summary = (tmp_path / "summary.txt").read_text()
        assert f"accuracy: {report.accuracy:.4f}" in summary
        data = json.loads((tmp_path / "metrics.json").read_text())
        assert data["items"] == 120
        assert data["confusion_matrix"] == report.matrix.tolist()
        table = (tmp_path / "metrics.txt").read_text().splitlines()
        assert len(table) == 7
        assert f"{report.metrics[0].precision:.4f}" in table[1]

    def test_reemit_byte_identical(self, report, tmp_path):
        emit_report(report, tmp_path / "a")
        emit_report(report, tmp_path / "b")
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_invariants(self, report):
        assert report.total == 120
        assert report.accuracy == np.trace(report.matrix) / 120


REFERENCE_FOLDS = {
    "CNN-BLSTM-DNN": [0.877, 0.866, 0.882, 0.860, 0.876],
    "CNN": [0.852, 0.856, 0.844, 0.852, 0.847],
}


class TestCvSummary:
    def test_layout_fold_rows_and_average(self):
        lines = cv_summary_table(REFERENCE_FOLDS).splitlines()
        assert lines[0].split(None, 1) == ["Fold", "Classification overall accuracy in %"]
        assert lines[1].split() == ["CNN-BLSTM-DNN", "CNN"]
        assert [l.split()[0] for l in lines[2:]] == ["1", "2", "3", "4", "5", "Average"]

    def test_reference_fold_values_give_reference_averages(self):
        average = cv_summary_table(REFERENCE_FOLDS).splitlines()[-1].split()
        assert [round(float(v), 1) for v in average[1:]] == [87.2, 85.0]

    def test_average_is_arithmetic_mean(self):
        rows = list(csv.reader(io.StringIO(cv_summary_csv({"a": [0.5, 0.75, 1.0]}))))
        assert rows[0] == ["fold", "a"]
        assert rows[-1] == ["Average", "75.0000"]

    def test_emit(self, tmp_path):
        emit_cv_summary(REFERENCE_FOLDS, tmp_path)
        assert (tmp_path / "summary.txt").read_text() == cv_summary_table(REFERENCE_FOLDS)
        assert (tmp_path / "summary.csv").read_text() == cv_summary_csv(REFERENCE_FOLDS)
