"""Evaluation metrics: top-k recall and support-weighted F1.

Both metrics compare ranked code predictions against per-patient truth
sets (the codes of each patient's held-out final visit).

- R@k is the fraction of a patient's true codes found in the top k of the
  ranked list, macro-averaged over patients.
- w-F1 scores each registry code as a binary label (a code counts as
  predicted when it appears anywhere in the ranked list), then averages
  per-code F1 weighted by test-set support. Codes no patient truly has
  carry zero weight and an undefined F1, so they are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import AbstractSet, Mapping, Sequence

from .ehr import CodeRegistry


class MetricsError(ValueError):
    """Inputs do not admit a well-defined metric."""


@dataclass(frozen=True)
class MetricsReport:
    """Summary metrics for one evaluated run."""

    w_f1: float
    recall_at: dict[int, float]
    per_patient_recall: dict[str, dict[int, float]] = field(default_factory=dict)
    patient_count: int = 0
    scored_code_count: int = 0

    def __post_init__(self) -> None:
        values = [self.w_f1, *self.recall_at.values()]
        for per_k in self.per_patient_recall.values():
            values.extend(per_k.values())
        for value in values:
            if not (0.0 <= value <= 1.0):
                raise MetricsError(f"metric value outside [0, 1]: {value}")

    def to_dict(self) -> dict:
        return {
            "w_f1": self.w_f1,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "per_patient_recall": {
                pid: {str(k): v for k, v in sorted(per_k.items())}
                for pid, per_k in sorted(self.per_patient_recall.items())
            },
            "patient_count": self.patient_count,
            "scored_code_count": self.scored_code_count,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "MetricsReport":
        return cls(
            w_f1=float(payload["w_f1"]),
            recall_at={int(k): float(v) for k, v in payload["recall_at"].items()},
            per_patient_recall={
                pid: {int(k): float(v) for k, v in per_k.items()}
                for pid, per_k in payload.get("per_patient_recall", {}).items()
            },
            patient_count=int(payload.get("patient_count", 0)),
            scored_code_count=int(payload.get("scored_code_count", 0)),
        )


def _check_alignment(
    predictions: Mapping[str, Sequence[str]],
    truths: Mapping[str, AbstractSet[str]],
) -> None:
    if not predictions:
        raise MetricsError("no patients to evaluate")
    if set(predictions) != set(truths):
        missing = sorted(set(truths) - set(predictions))
        extra = sorted(set(predictions) - set(truths))
        raise MetricsError(
            f"prediction/truth patient sets differ (missing={missing}, extra={extra})"
        )
    for pid, truth in truths.items():
        if not truth:
            raise MetricsError(f"patient {pid!r} has an empty truth set")


def patient_recall_at_k(prediction: Sequence[str], truth: AbstractSet[str], k: int) -> float:
    """|truth ∩ top-k| / |truth| for one patient."""
    if k < 1:
        raise MetricsError(f"k must be >= 1: {k}")
    if not truth:
        raise MetricsError("truth set is empty")
    top = set(prediction[:k])
    return len(top & set(truth)) / len(truth)


def recall_at_k(
    predictions: Mapping[str, Sequence[str]],
    truths: Mapping[str, AbstractSet[str]],
    k: int,
) -> float:
    """Macro average of per-patient R@k over all patients."""
    _check_alignment(predictions, truths)
    total = sum(patient_recall_at_k(predictions[pid], truths[pid], k) for pid in predictions)
    return total / len(predictions)


def weighted_f1(
    predictions: Mapping[str, Sequence[str]],
    truths: Mapping[str, AbstractSet[str]],
    registry: CodeRegistry,
) -> tuple[float, int]:
    """Support-weighted mean per-code F1; returns (score, scored code count).

    A code is "predicted" for a patient when it appears anywhere in that
    patient's ranked list, making this a binary multilabel F1 regardless
    of list length.
    """
    _check_alignment(predictions, truths)
    patient_ids = sorted(predictions)
    predicted_sets = {pid: set(predictions[pid]) for pid in patient_ids}

    weighted_sum = 0.0
    total_support = 0
    scored = 0
    for code in registry.codes:
        support = sum(1 for pid in patient_ids if code in truths[pid])
        if support == 0:
            continue
        tp = fp = fn = 0
        for pid in patient_ids:
            in_truth = code in truths[pid]
            in_pred = code in predicted_sets[pid]
            if in_pred and in_truth:
                tp += 1
            elif in_pred:
                fp += 1
            elif in_truth:
                fn += 1
        f1 = 2 * tp / (2 * tp + fp + fn)
        weighted_sum += support * f1
        total_support += support
        scored += 1
    if total_support == 0:
        raise MetricsError("no registry code has positive support in the truth sets")
    return weighted_sum / total_support, scored


def compute_metrics(
    predictions: Mapping[str, Sequence[str]],
    truths: Mapping[str, AbstractSet[str]],
    registry: CodeRegistry,
    ks: Sequence[int] = (10, 20),
) -> MetricsReport:
    """Full report: w-F1 plus R@k for every requested k."""
    _check_alignment(predictions, truths)
    if not ks:
        raise MetricsError("at least one k is required")
    per_patient: dict[str, dict[int, float]] = {
        pid: {k: patient_recall_at_k(predictions[pid], truths[pid], k) for k in ks}
        for pid in sorted(predictions)
    }
    recall_avg = {
        k: sum(per_patient[pid][k] for pid in per_patient) / len(per_patient) for k in ks
    }
    w_f1, scored = weighted_f1(predictions, truths, registry)
    return MetricsReport(
        w_f1=w_f1,
        recall_at=dict(recall_avg),
        per_patient_recall=per_patient,
        patient_count=len(predictions),
        scored_code_count=scored,
    )
