from __future__ import annotations

import json

import numpy as np
import pytest

from causaldx.ehr import (
    CohortFormatError,
    DuplicatePatientError,
    EmptyCohortError,
    EmptyHistoryError,
    PatientRecord,
    UnknownCodeError,
    build_diagnosis_matrix,
    build_transition_matrix,
    load_cohort,
    load_diagnosis_matrix,
    load_registry,
    load_transition_matrix,
    save_diagnosis_matrix,
    save_transition_matrix,
    select_candidates,
)

from conftest import make_cohort, make_registry


def brute_force_transition(cohort):
    """Independent counter straight from the definitions (oracle)."""
    codes = cohort.registry.codes
    num = {(a, b): 0 for a in codes for b in codes}
    den = {a: 0 for a in codes}
    for patient in cohort.patients:
        visits = patient.visits
        for i in range(len(visits) - 1):
            union = visits[i] | visits[i + 1]
            for a in visits[i]:
                den[a] += 1
                for b in codes:
                    if b in union:
                        num[(a, b)] += 1
    entries = np.zeros((len(codes), len(codes)))
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            if den[a]:
                entries[i, j] = num[(a, b)] / den[a]
    return entries


def brute_force_diagnosis(cohort):
    codes = cohort.registry.codes
    entries = np.zeros((len(cohort.patients), len(codes)), dtype=np.uint8)
    for r, patient in enumerate(cohort.patients):
        seen = set()
        for visit in patient.visits:
            seen |= visit
        for j, code in enumerate(codes):
            entries[r, j] = 1 if code in seen else 0
    return entries


class TestLoading:
    def test_registry_round_trip(self, tmp_path):
        path = tmp_path / "reg.jsonl"
        path.write_text(
            '{"code": "428.0", "name": "Heart failure"}\n{"code": "584.9", "name": ""}\n'
        )
        registry = load_registry(path)
        assert registry.codes == ["428.0", "584.9"]
        assert registry.name("428.0") == "Heart failure"
        assert registry.label("428.0") == "428.0 (Heart failure)"
        assert registry.label("584.9") == "584.9"

    def test_registry_rejects_duplicates(self, tmp_path):
        path = tmp_path / "reg.jsonl"
        path.write_text('{"code": "A"}\n{"code": "A"}\n')
        with pytest.raises(CohortFormatError):
            load_registry(path)

    def test_cohort_parses_visits(self, tmp_path, abc_registry):
        path = tmp_path / "cohort.jsonl"
        path.write_text('{"patient_id": "p1", "visits": [["A"], ["B", "C"]]}\n')
        cohort = load_cohort(path, abc_registry)
        assert cohort.patients[0].visits == (frozenset({"A"}), frozenset({"B", "C"}))

    def test_cohort_rejects_unknown_code(self, tmp_path, abc_registry):
        path = tmp_path / "cohort.jsonl"
        path.write_text('{"patient_id": "p1", "visits": [["Z"]]}\n')
        with pytest.raises(UnknownCodeError):
            load_cohort(path, abc_registry)

    def test_cohort_rejects_duplicate_patient(self, tmp_path, abc_registry):
        path = tmp_path / "cohort.jsonl"
        path.write_text(
            '{"patient_id": "p1", "visits": [["A"]]}\n'
            '{"patient_id": "p1", "visits": [["B"]]}\n'
        )
        with pytest.raises(DuplicatePatientError):
            load_cohort(path, abc_registry)

    def test_cohort_rejects_duplicate_code_in_visit(self, tmp_path, abc_registry):
        path = tmp_path / "cohort.jsonl"
        path.write_text('{"patient_id": "p1", "visits": [["A", "A"]]}\n')
        with pytest.raises(CohortFormatError):
            load_cohort(path, abc_registry)

    def test_empty_cohort_rejected(self, tmp_path, abc_registry):
        path = tmp_path / "cohort.jsonl"
        path.write_text("\n")
        with pytest.raises(EmptyCohortError):
            load_cohort(path, abc_registry)

    def test_patient_history_and_target(self):
        record = PatientRecord(
            patient_id="p",
            visits=(frozenset({"A"}), frozenset({"B"}), frozenset({"C"})),
        )
        assert record.history_codes() == {"A", "B"}
        assert record.target_codes() == {"C"}

    def test_single_visit_history_is_empty(self):
        record = PatientRecord(patient_id="p", visits=(frozenset({"A"}),))
        assert record.history_codes() == frozenset()


class TestTransitionMatrix:
    def test_hand_counted_fixture(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        idx = {c: i for i, c in enumerate(at.codes)}
        a, b, c = idx["A"], idx["B"], idx["C"]
        # denominator for A: p1 visit 1 and p2 visit 1 both contain A
        assert at.entries[a, b] == 0.5
        assert at.entries[a, c] == 0.5
        assert at.entries[a, a] == 1.0
        # B never appears in a non-final visit
        assert np.all(at.entries[b, :] == 0)
        # C never appears in a non-final visit either
        assert np.all(at.entries[c, :] == 0)

    def test_matches_brute_force_on_random_cohorts(self):
        rng = np.random.default_rng(1201)
        for _ in range(25):
            n_codes = int(rng.integers(2, 9))
            codes = [f"c{i}" for i in range(n_codes)]
            registry = make_registry(codes)
            patients = []
            for p in range(int(rng.integers(1, 12))):
                n_visits = int(rng.integers(1, 5))
                visits = []
                for _v in range(n_visits):
                    size = int(rng.integers(1, min(4, n_codes) + 1))
                    visits.append(list(rng.choice(codes, size=size, replace=False)))
                patients.append((f"p{p}", visits))
            cohort = make_cohort(registry, patients)
            at = build_transition_matrix(cohort)
            expected = brute_force_transition(cohort)
            np.testing.assert_array_equal(at.entries, expected)

    def test_diagonal_is_one_where_code_has_followups(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        idx = {c: i for i, c in enumerate(at.codes)}
        assert at.entries[idx["A"], idx["A"]] == 1.0

    def test_entries_are_read_only(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        with pytest.raises(ValueError):
            at.entries[0, 0] = 9.0


class TestDiagnosisMatrix:
    def test_union_over_visits(self, c1_cohort):
        ad = build_diagnosis_matrix(c1_cohort)
        assert ad.patient_ids == ("p1", "p2", "p3")
        idx = {c: i for i, c in enumerate(ad.codes)}
        assert ad.entries[0, idx["A"]] == 1 and ad.entries[0, idx["B"]] == 1
        assert ad.entries[1, idx["C"]] == 1
        assert ad.entries[2, idx["A"]] == 0 and ad.entries[2, idx["B"]] == 1

    def test_matches_brute_force(self, c1_cohort):
        ad = build_diagnosis_matrix(c1_cohort)
        np.testing.assert_array_equal(ad.entries, brute_force_diagnosis(c1_cohort))


class TestCandidateSelection:
    def test_existential_over_history(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        # one history code with probability above threshold is enough
        candidates = select_candidates(["A", "B"], at, epsilon=0.4)
        assert set(candidates) == {"A", "B", "C"}

    def test_ranked_by_best_probability_then_registry_order(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        candidates = select_candidates(["A"], at, epsilon=0.01)
        assert candidates == ["A", "B", "C"]  # 1.0, then 0.5 tie broken by order

    def test_threshold_is_strict(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        assert select_candidates(["A"], at, epsilon=0.5) == ["A"]

    def test_max_candidates_truncates(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        assert select_candidates(["A"], at, epsilon=0.01, max_candidates=2) == ["A", "B"]

    def test_empty_history_rejected(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        with pytest.raises(EmptyHistoryError):
            select_candidates([], at)

    def test_unknown_history_code_rejected(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        with pytest.raises(UnknownCodeError):
            select_candidates(["Z"], at)

    def test_epsilon_range_validated(self, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        with pytest.raises(ValueError):
            select_candidates(["A"], at, epsilon=1.0)


class TestPersistence:
    def test_transition_round_trip_bit_exact(self, tmp_path, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        path = tmp_path / "at.json"
        save_transition_matrix(at, path)
        loaded = load_transition_matrix(path)
        assert loaded.codes == at.codes
        assert np.array_equal(loaded.entries, at.entries)

    def test_irrational_entries_survive_round_trip(self, tmp_path):
        registry = make_registry(["A", "B", "C"])
        cohort = make_cohort(
            registry,
            [
                ("p1", [["A"], ["B"]]),
                ("p2", [["A"], ["A"]]),
                ("p3", [["A"], ["C"]]),
            ],
        )
        at = build_transition_matrix(cohort)  # contains thirds
        path = tmp_path / "at.json"
        save_transition_matrix(at, path)
        assert np.array_equal(load_transition_matrix(path).entries, at.entries)

    def test_diagnosis_round_trip(self, tmp_path, c1_cohort):
        ad = build_diagnosis_matrix(c1_cohort)
        path = tmp_path / "ad.json"
        save_diagnosis_matrix(ad, path)
        loaded = load_diagnosis_matrix(path)
        assert loaded.patient_ids == ad.patient_ids
        assert np.array_equal(loaded.entries, ad.entries)

    def test_kind_mismatch_rejected(self, tmp_path, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        path = tmp_path / "at.json"
        save_transition_matrix(at, path)
        with pytest.raises(Exception):
            load_diagnosis_matrix(path)

    def test_header_is_json(self, tmp_path, c1_cohort):
        at = build_transition_matrix(c1_cohort)
        path = tmp_path / "at.json"
        save_transition_matrix(at, path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header["kind"] == "transition"
        assert header["codes"] == list(at.codes)
