from __future__ import annotations

import math
import random

import pytest

from causaldx.metrics import (
    MetricsError,
    MetricsReport,
    compute_metrics,
    recall_at_k,
    weighted_f1,
)

from conftest import make_registry


@pytest.fixture
def two_thirds_fixture():
    """Two patients whose top-10 recalls are 1.0 and 1/3."""
    predictions = {
        "p1": ["A", "B"] + [f"X{i}" for i in range(8)],
        "p2": ["C"] + [f"Y{i}" for i in range(9)] + ["D", "E"],
    }
    truths = {"p1": {"A", "B"}, "p2": {"C", "D", "E"}}
    return predictions, truths


def brute_force_recall_at_k(predictions, truths, k):
    total = 0.0
    for pid, truth in truths.items():
        hits = sum(1 for code in predictions[pid][:k] if code in truth)
        total += hits / len(truth)
    return total / len(truths)


class TestRecallAtK:
    def test_two_patient_fixture_is_two_thirds(self, two_thirds_fixture):
        predictions, truths = two_thirds_fixture
        value = recall_at_k(predictions, truths, 10)
        assert abs(value - 2.0 / 3.0) < 1e-12

    def test_perfect_predictions_score_one(self):
        predictions = {"p": ["A", "B", "C"]}
        truths = {"p": {"A", "B", "C"}}
        assert recall_at_k(predictions, truths, 10) == 1.0

    def test_monotone_in_k(self):
        rng = random.Random(7)
        codes = [f"c{i}" for i in range(30)]
        predictions, truths = {}, {}
        for p in range(12):
            pid = f"p{p}"
            predictions[pid] = rng.sample(codes, k=20)
            truths[pid] = set(rng.sample(codes, k=rng.randint(1, 6)))
        previous = 0.0
        for k in range(1, 25):
            current = recall_at_k(predictions, truths, k)
            assert current >= previous - 1e-15
            assert abs(current - brute_force_recall_at_k(predictions, truths, k)) < 1e-12
            previous = current

    def test_prediction_order_matters_truth_order_does_not(self):
        truths = {"p": {"A", "B"}}
        good = recall_at_k({"p": ["A", "Z", "Y"]}, truths, 1)
        bad = recall_at_k({"p": ["Z", "A", "Y"]}, truths, 1)
        assert good == 0.5 and bad == 0.0

    def test_requires_aligned_patient_sets(self):
        with pytest.raises(MetricsError):
            recall_at_k({"p1": ["A"]}, {"p2": {"A"}}, 5)

    def test_rejects_empty_truth(self):
        with pytest.raises(MetricsError):
            recall_at_k({"p1": ["A"]}, {"p1": set()}, 5)

    def test_rejects_nonpositive_k(self):
        with pytest.raises(MetricsError):
            recall_at_k({"p1": ["A"]}, {"p1": {"A"}}, 0)


class TestWeightedF1:
    def test_two_code_fixture_is_five_sixths(self):
        registry = make_registry(["A", "B"])
        predictions = {"p1": ["A", "B"], "p2": ["B"]}
        truths = {"p1": {"A"}, "p2": {"B"}}
        # code A: tp=1 fp=0 fn=0 -> f1=1; code B: tp=1 fp=1 fn=0 -> f1=2/3
        # supports 1 and 2 -> (1*1 + 2*(2/3)) / 3 = 5/6
        value, scored = weighted_f1(predictions, truths, registry)
        assert abs(value - 5.0 / 6.0) < 1e-12
        assert scored == 2

    def test_zero_support_codes_excluded(self):
        registry = make_registry(["A", "B", "C"])
        predictions = {"p1": ["A", "C"]}
        truths = {"p1": {"A"}}
        value, scored = weighted_f1(predictions, truths, registry)
        assert scored == 1  # only A carries support; C is a false positive on
        assert value == 1.0  # a zero-support code and does not participate

    def test_perfect_predictions_score_one(self):
        registry = make_registry(["A", "B", "C"])
        predictions = {"p1": ["A", "B"], "p2": ["C"]}
        truths = {"p1": {"A", "B"}, "p2": {"C"}}
        value, _ = weighted_f1(predictions, truths, registry)
        assert value == 1.0

    def test_position_in_list_is_ignored(self):
        registry = make_registry(["A", "B"])
        truths = {"p1": {"B"}}
        first, _ = weighted_f1({"p1": ["B", "A"]}, truths, registry)
        last, _ = weighted_f1({"p1": ["A", "B"]}, truths, registry)
        assert first == last

    def test_codes_outside_registry_carry_no_weight(self):
        registry = make_registry(["A"])
        value, scored = weighted_f1({"p1": ["Z", "A"]}, {"p1": {"A"}}, registry)
        assert value == 1.0 and scored == 1

    def test_no_supported_codes_rejected(self):
        registry = make_registry(["A", "B"])
        with pytest.raises(MetricsError):
            weighted_f1({}, {}, registry)


class TestComputeMetrics:
    def test_report_fields(self, two_thirds_fixture):
        predictions, truths = two_thirds_fixture
        codes = sorted({c for t in truths.values() for c in t}
                       | {c for p in predictions.values() for c in p})
        registry = make_registry(codes)
        report = compute_metrics(predictions, truths, registry, ks=(1, 10))
        assert report.patient_count == 2
        assert set(report.recall_at) == {1, 10}
        assert abs(report.recall_at[10] - 2.0 / 3.0) < 1e-12
        assert set(report.per_patient_recall) == {"p1", "p2"}

    def test_round_trip_serialization(self, two_thirds_fixture):
        predictions, truths = two_thirds_fixture
        codes = sorted({c for t in truths.values() for c in t}
                       | {c for p in predictions.values() for c in p})
        registry = make_registry(codes)
        report = compute_metrics(predictions, truths, registry, ks=(10, 20))
        clone = MetricsReport.from_dict(report.to_dict())
        assert clone == report

    def test_bounds_validated(self):
        with pytest.raises(MetricsError):
            MetricsReport(
                w_f1=1.5, recall_at={10: 0.5}, per_patient_recall={"p": {10: 0.5}},
                patient_count=1, scored_code_count=1,
            )
        with pytest.raises(MetricsError):
            MetricsReport(
                w_f1=0.5, recall_at={10: -0.1}, per_patient_recall={"p": {10: 0.5}},
                patient_count=1, scored_code_count=1,
            )
        with pytest.raises(MetricsError):
            MetricsReport(
                w_f1=0.5, recall_at={10: 0.5}, per_patient_recall={"p": {10: 1.2}},
                patient_count=1, scored_code_count=1,
            )
