"""Cohort loading, EHR-derived matrices, and candidate-disease selection.

A cohort is an ordered list of patients, each an ordered list of visits,
each visit a set of diagnosis codes drawn from a fixed code registry.
Two matrices are derived from a training cohort:

- the transition matrix: for each ordered code pair (a, b), the
  probability that b appears in the same or the next visit, conditioned
  on a appearing in a non-final visit;
- the diagnosis matrix: a binary patient x code occurrence matrix
  (1 iff the code appears in any of the patient's visits).

Candidate selection keeps every code whose transition probability from
at least one history code exceeds a threshold, ranked by the best such
probability.

All types are immutable after construction. Matrix files round-trip
bit-exactly: a JSON header line carrying the registry order, then one
JSON row per line (floats serialize via shortest-round-trip repr).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kernels import transition_counts

logger = logging.getLogger(__name__)

MATRIX_FORMAT_VERSION = 1

DEFAULT_EPSILON = 0.01
DEFAULT_MAX_CANDIDATES = 50


class CohortError(ValueError):
    """Invalid cohort or registry content."""


class CohortFormatError(CohortError):
    """A cohort/registry line failed to parse or violates record shape."""


class UnknownCodeError(CohortError):
    """A visit references a code absent from the registry."""


class DuplicatePatientError(CohortError):
    """Two cohort lines share a patient_id."""


class EmptyCohortError(CohortError):
    """The cohort file holds no patient records."""


class EmptyHistoryError(CohortError):
    """Candidate selection was asked to rank from an empty history."""


@dataclass(frozen=True)
class DiseaseCode:
    """One registry entry: an ICD-9-style code plus a display name."""

    code: str
    name: str = ""

    def __post_init__(self) -> None:
        if not self.code:
            raise CohortFormatError("disease code must be nonempty")


class CodeRegistry:
    """Ordered, unique set of disease codes; order fixes matrix axes."""

    def __init__(self, entries: Iterable[DiseaseCode]):
        self._entries: list[DiseaseCode] = []
        self._index: dict[str, int] = {}
        for entry in entries:
            if entry.code in self._index:
                raise CohortFormatError(f"duplicate code in registry: {entry.code!r}")
            self._index[entry.code] = len(self._entries)
            self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def __iter__(self):
        return iter(self._entries)

    @property
    def codes(self) -> list[str]:
        return [e.code for e in self._entries]

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise UnknownCodeError(f"unknown code: {code!r}") from None

    def name(self, code: str) -> str:
        return self._entries[self.index(code)].name

    def label(self, code: str) -> str:
        """``code (name)`` when a name exists, else the bare code."""
        name = self.name(code)
        return f"{code} ({name})" if name else code

    def sort_key(self, code: str):
        return self.index(code)

    def sha256(self) -> str:
        """Content hash over codes and names in registry order."""
        payload = json.dumps(
            [[e.code, e.name] for e in self._entries], separators=(",", ":")
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PatientRecord:
    """One patient: an ordered sequence of visit code-sets."""

    patient_id: str
    visits: tuple[frozenset[str], ...]

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise CohortFormatError("patient_id must be nonempty")
        if len(self.visits) < 1:
            raise CohortFormatError(f"patient {self.patient_id!r} has no visits")
        for i, visit in enumerate(self.visits):
            if not visit:
                raise CohortFormatError(
                    f"patient {self.patient_id!r} visit {i + 1} is empty"
                )

    @property
    def visit_count(self) -> int:
        return len(self.visits)

    def all_codes(self) -> frozenset[str]:
        out: set[str] = set()
        for visit in self.visits:
            out |= visit
        return frozenset(out)

    def history_codes(self) -> frozenset[str]:
        """Union of every visit except the last (the prediction input)."""
        out: set[str] = set()
        for visit in self.visits[:-1]:
            out |= visit
        return frozenset(out)

    def target_codes(self) -> frozenset[str]:
        """Codes of the last visit (the prediction target)."""
        return self.visits[-1]


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...]
    registry: CodeRegistry

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for patient in self.patients:
            if patient.patient_id in seen:
                raise DuplicatePatientError(
                    f"duplicate patient_id: {patient.patient_id!r}"
                )
            seen.add(patient.patient_id)
            for visit in patient.visits:
                for code in visit:
                    if code not in self.registry:
                        raise UnknownCodeError(
                            f"patient {patient.patient_id!r} references unknown "
                            f"code {code!r}"
                        )

    def __len__(self) -> int:
        return len(self.patients)

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def get(self, patient_id: str) -> PatientRecord:
        for patient in self.patients:
            if patient.patient_id == patient_id:
                return patient
        raise KeyError(patient_id)


def load_registry(path: str | Path) -> CodeRegistry:
    """Read a registry file: one ``{"code", "name"}`` JSON object per line."""
    entries: list[DiseaseCode] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "code" not in record:
                raise CohortFormatError(f"{path}:{lineno}: expected a code record")
            entries.append(
                DiseaseCode(code=str(record["code"]), name=str(record.get("name", "")))
            )
    if not entries:
        raise EmptyCohortError(f"{path}: registry holds no codes")
    return CodeRegistry(entries)


def load_cohort(path: str | Path, registry: CodeRegistry) -> Cohort:
    """Read a cohort file: one patient JSON record per line.

    Each line is ``{"patient_id": str, "visits": [[code, ...], ...]}``.
    Rejects malformed lines, unknown codes, duplicate patient ids,
    duplicate codes inside one visit, and empty files.
    """
    patients: list[PatientRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise CohortFormatError(f"{path}:{lineno}: expected an object")
            patient_id = record.get("patient_id")
            visits_raw = record.get("visits")
            if not isinstance(patient_id, str) or not isinstance(visits_raw, list):
                raise CohortFormatError(
                    f"{path}:{lineno}: record needs 'patient_id' and 'visits'"
                )
            visits: list[frozenset[str]] = []
            for vi, visit_raw in enumerate(visits_raw, start=1):
                if not isinstance(visit_raw, list):
                    raise CohortFormatError(
                        f"{path}:{lineno}: visit {vi} is not a list"
                    )
                codes = [str(c) for c in visit_raw]
                if len(set(codes)) != len(codes):
                    raise CohortFormatError(
                        f"{path}:{lineno}: visit {vi} repeats a code"
                    )
                visits.append(frozenset(codes))
            patients.append(PatientRecord(patient_id=patient_id, visits=tuple(visits)))
    if not patients:
        raise EmptyCohortError(f"{path}: cohort holds no patients")
    return Cohort(patients=tuple(patients), registry=registry)


@dataclass(frozen=True)
class TransitionMatrix:
    """Per-pair succession probabilities over the registry's code order."""

    codes: tuple[str, ...]
    entries: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        n = len(self.codes)
        if self.entries.shape != (n, n):
            raise ValueError("transition matrix shape does not match code count")
        self.entries.setflags(write=False)

    def prob(self, from_code: str, to_code: str) -> float:
        idx = {c: i for i, c in enumerate(self.codes)}
        return float(self.entries[idx[from_code], idx[to_code]])


@dataclass(frozen=True)
class DiagnosisMatrix:
    """Binary patient x code occurrence matrix."""

    patient_ids: tuple[str, ...]
    codes: tuple[str, ...]
    entries: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.entries.shape != (len(self.patient_ids), len(self.codes)):
            raise ValueError("diagnosis matrix shape does not match axes")
        self.entries.setflags(write=False)

    def column_index(self, code: str) -> int:
        try:
            return self.codes.index(code)
        except ValueError:
            raise UnknownCodeError(f"unknown code: {code!r}") from None


def _flatten_cohort(cohort: Cohort):
    """Pack visits into the flat arrays the counting kernel consumes."""
    registry = cohort.registry
    codes: list[int] = []
    visit_ptr: list[int] = [0]
    patient_ptr: list[int] = [0]
    for patient in cohort.patients:
        for visit in patient.visits:
            codes.extend(sorted(registry.index(c) for c in visit))
            visit_ptr.append(len(codes))
        patient_ptr.append(len(visit_ptr) - 1)
    return (
        np.asarray(codes, dtype=np.int32),
        np.asarray(visit_ptr, dtype=np.int64),
        np.asarray(patient_ptr, dtype=np.int64),
    )


def build_transition_matrix(cohort: Cohort) -> TransitionMatrix:
    """Succession probabilities: same-or-next-visit counts over occurrences.

    entry[a, b] = (# non-final visits holding a whose own or next visit
    holds b) / (# non-final visits holding a); an empty denominator
    yields 0 for the whole row, including the diagonal.
    """
    n = len(cohort.registry)
    codes, visit_ptr, patient_ptr = _flatten_cohort(cohort)
    num, den = transition_counts(codes, visit_ptr, patient_ptr, n)
    entries = np.zeros((n, n), dtype=np.float64)
    observed = den > 0
    entries[observed] = num[observed] / den[observed, None]
    return TransitionMatrix(codes=tuple(cohort.registry.codes), entries=entries)


def build_diagnosis_matrix(cohort: Cohort) -> DiagnosisMatrix:
    """Binary occurrence matrix: 1 iff the code appears in any visit."""
    registry = cohort.registry
    entries = np.zeros((len(cohort.patients), len(registry)), dtype=np.uint8)
    for row, patient in enumerate(cohort.patients):
        for code in patient.all_codes():
            entries[row, registry.index(code)] = 1
    return DiagnosisMatrix(
        patient_ids=tuple(cohort.patient_ids()),
        codes=tuple(registry.codes),
        entries=entries,
    )


def select_candidates(
    history: Iterable[str],
    at: TransitionMatrix,
    epsilon: float = DEFAULT_EPSILON,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
) -> list[str]:
    """Codes whose transition probability from any history code exceeds epsilon.

    Ranked by the best probability over the history (descending), ties broken
    by registry order, truncated to ``max_candidates``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1): {epsilon}")
    if max_candidates < 1:
        raise ValueError(f"max_candidates must be >= 1: {max_candidates}")
    history = list(history)
    if not history:
        raise EmptyHistoryError("history is empty; nothing to rank from")
    index = {c: i for i, c in enumerate(at.codes)}
    rows = []
    for code in history:
        if code not in index:
            raise UnknownCodeError(f"history code not in registry: {code!r}")
        rows.append(index[code])
    best = at.entries[rows].max(axis=0)
    picked = [
        (-(best[j]), j) for j in range(len(at.codes)) if best[j] > epsilon
    ]
    picked.sort()
    return [at.codes[j] for _, j in picked[:max_candidates]]


def _write_matrix(path: Path, header: dict, rows: np.ndarray, as_int: bool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for row in rows:
            values = [int(v) for v in row] if as_int else [float(v) for v in row]
            fh.write(json.dumps(values, separators=(",", ":")) + "\n")


def _read_matrix(path: Path, kind: str) -> tuple[dict, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise CohortFormatError(f"{path}: empty matrix file")
        header = json.loads(header_line)
        if header.get("version") != MATRIX_FORMAT_VERSION:
            raise CohortFormatError(
                f"{path}: unsupported matrix format version {header.get('version')}"
            )
        if header.get("kind") != kind:
            raise CohortFormatError(
                f"{path}: expected kind {kind!r}, found {header.get('kind')!r}"
            )
        rows = [json.loads(line) for line in fh if line.strip()]
    return header, np.asarray(rows)


def save_transition_matrix(at: TransitionMatrix, path: str | Path) -> None:
    header = {
        "version": MATRIX_FORMAT_VERSION,
        "kind": "transition",
        "codes": list(at.codes),
    }
    _write_matrix(Path(path), header, at.entries, as_int=False)


def load_transition_matrix(path: str | Path) -> TransitionMatrix:
    header, rows = _read_matrix(Path(path), "transition")
    return TransitionMatrix(
        codes=tuple(header["codes"]), entries=rows.astype(np.float64)
    )


def save_diagnosis_matrix(ad: DiagnosisMatrix, path: str | Path) -> None:
    header = {
        "version": MATRIX_FORMAT_VERSION,
        "kind": "diagnosis",
        "codes": list(ad.codes),
        "patient_ids": list(ad.patient_ids),
    }
    _write_matrix(Path(path), header, ad.entries, as_int=True)


def load_diagnosis_matrix(path: str | Path) -> DiagnosisMatrix:
    header, rows = _read_matrix(Path(path), "diagnosis")
    return DiagnosisMatrix(
        patient_ids=tuple(header["patient_ids"]),
        codes=tuple(header["codes"]),
        entries=rows.astype(np.uint8),
    )
