"""End-to-end correctness gates for the whole package.

Each test here pins one externally checkable property of the system:
matrix construction against brute-force counting, likelihood fitting
against a direct reference scorer, structure recovery on planted graphs,
byte-level run determinism, the hand-computed metric fixtures, the
ablation switches, cost arithmetic, and the discovery loop's stop rules.
Runtime limits are asserted where a test is randomized at scale.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import time

import numpy as np
import pytest

from causaldx.agents import RuleBasedProvider, StopReason, causal_discovery
from causaldx.ehr import (
    DiagnosisMatrix,
    build_diagnosis_matrix,
    build_transition_matrix,
)
from causaldx.engine import CausalDag, brute_force_best_dag, fit_loglikelihood
from causaldx.gateway import (
    LlmRuntime,
    ScriptedProvider,
    UsageLedger,
    estimate_cost,
)
from causaldx.metrics import recall_at_k, weighted_f1
from causaldx.pipeline import RunConfig, evaluate, evaluate_and_save, run_inference

from conftest import make_cohort, make_registry


# --- independent oracles -------------------------------------------------

def oracle_transition(cohort):
    """Direct per-definition counting, no vectorization shared with the code."""
    codes = list(cohort.registry.codes)
    n = len(codes)
    num = [[0] * n for _ in range(n)]
    den = [0] * n
    for patient in cohort.patients:
        visits = [set(v) for v in patient.visits]
        for i in range(len(visits) - 1):
            window = visits[i] | visits[i + 1]
            for a in visits[i]:
                ai = codes.index(a)
                den[ai] += 1
                for b in window:
                    num[ai][codes.index(b)] += 1
    out = [[0.0] * n for _ in range(n)]
    for ai in range(n):
        if den[ai]:
            for bi in range(n):
                out[ai][bi] = num[ai][bi] / den[ai]
    return out


def oracle_diagnosis(cohort):
    codes = list(cohort.registry.codes)
    rows = []
    for patient in cohort.patients:
        seen = set().union(*[set(v) for v in patient.visits])
        rows.append([1 if c in seen else 0 for c in codes])
    return rows


def oracle_loglik(graph, ad, alpha=1.0):
    """Group-by-parent-configuration scorer written straight from the rule."""
    index = {c: i for i, c in enumerate(ad.codes)}
    total = 0.0
    for node in graph.nodes:
        child = index[node]
        parent_cols = sorted(index[a] for a, b in graph.edges if b == node)
        groups: dict[tuple, list[int]] = {}
        for row in ad.entries:
            key = tuple(int(row[c]) for c in parent_cols)
            groups.setdefault(key, []).append(int(row[child]))
        for values in groups.values():
            ones = sum(values)
            count = len(values)
            p1 = (ones + alpha) / (count + 2 * alpha)
            total += ones * math.log(p1) + (count - ones) * math.log(1.0 - p1)
    return total


def random_cohort(rng, max_patients=20, max_codes=10):
    n_codes = rng.randint(2, max_codes)
    codes = [f"c{i:02d}" for i in range(n_codes)]
    registry = make_registry(codes)
    patients = []
    for p in range(rng.randint(1, max_patients)):
        visits = []
        for _v in range(rng.randint(1, 5)):
            size = rng.randint(1, min(4, n_codes))
            visits.append(rng.sample(codes, size))
        patients.append((f"p{p:03d}", visits))
    return make_cohort(registry, patients)


def random_dag(rng, nodes, max_edges=8):
    order = list(nodes)
    rng.shuffle(order)
    possible = [
        (order[i], order[j]) for i in range(len(order)) for j in range(i + 1, len(order))
    ]
    rng.shuffle(possible)
    edges = possible[: rng.randint(0, min(max_edges, len(possible)))]
    return CausalDag(nodes=tuple(nodes), edges=tuple(edges))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- acceptance gates ----------------------------------------------------

def test_matrix_oracle():
    """Both matrix builders match brute-force counting on 100 random cohorts."""
    started = time.monotonic()
    rng = random.Random(1001)
    for _ in range(100):
        cohort = random_cohort(rng)
        at = build_transition_matrix(cohort)
        ad = build_diagnosis_matrix(cohort)
        expected_at = oracle_transition(cohort)
        expected_ad = oracle_diagnosis(cohort)
        assert np.array_equal(np.asarray(expected_ad, dtype=np.uint8), ad.entries)
        got = np.asarray(at.entries)
        want = np.asarray(expected_at)
        assert got.shape == want.shape
        assert np.array_equal(got, want), "transition matrix diverges from oracle"

    # the three-patient worked fixture, entries counted by hand
    registry = make_registry(["A", "B", "C"])
    cohort = make_cohort(
        registry,
        [("p1", [["A"], ["B"]]), ("p2", [["A"], ["A", "C"]]), ("p3", [["B"]])],
    )
    at = build_transition_matrix(cohort)
    a, b, c = (registry.index(x) for x in "ABC")
    entries = np.asarray(at.entries)
    assert entries[a][b] == 0.5
    assert entries[a][c] == 0.5
    assert entries[a][a] == 1.0
    assert np.all(entries[b] == 0.0)
    assert np.all(entries[c] == 0.0)
    assert time.monotonic() - started < 5.0


def test_likelihood_oracle():
    """Fitted scores match the direct-count reference on random pairs."""
    started = time.monotonic()
    rng = random.Random(2002)
    np_rng = np.random.default_rng(2002)
    for _ in range(60):
        n_codes = rng.randint(2, 6)
        codes = [f"d{i}" for i in range(n_codes)]
        n_patients = rng.randint(3, 16)
        entries = np_rng.integers(0, 2, size=(n_patients, n_codes)).astype(np.uint8)
        ad = DiagnosisMatrix(
            patient_ids=tuple(f"p{i}" for i in range(n_patients)),
            codes=tuple(codes),
            entries=entries,
        )
        graph = random_dag(rng, codes, max_edges=8)
        score, _ = fit_loglikelihood(graph, ad)
        assert abs(score - oracle_loglik(graph, ad)) < 1e-9

    # worked four-patient example: same score for the empty graph and A->B
    entries = np.array([[1, 1], [1, 0], [0, 1], [0, 0]], dtype=np.uint8)
    ad = DiagnosisMatrix(
        patient_ids=("p1", "p2", "p3", "p4"), codes=("A", "B"), entries=entries
    )
    empty_score, _ = fit_loglikelihood(CausalDag.empty(["A", "B"]), ad)
    edge_score, _ = fit_loglikelihood(
        CausalDag(nodes=("A", "B"), edges=(("A", "B"),)), ad
    )
    assert abs(empty_score - (-5.5452)) < 1e-3
    assert abs(edge_score - (-5.5452)) < 1e-3
    assert time.monotonic() - started < 10.0


def test_structure_recovery():
    """Exhaustive search finds a planted chain; the greedy loop never overshoots it."""
    started = time.monotonic()
    rng = np.random.default_rng(3003)
    n = 96
    per_hop = 5
    # disjoint flip sets keep every adjacent pair strictly closer than any
    # skip pair, so the chain skeleton is identifiable from the sample
    x0 = rng.integers(0, 2, size=n)
    positions = rng.permutation(n)[: 3 * per_hop]
    x1 = x0.copy()
    x1[positions[:per_hop]] ^= 1
    x2 = x1.copy()
    x2[positions[per_hop : 2 * per_hop]] ^= 1
    x3 = x2.copy()
    x3[positions[2 * per_hop :]] ^= 1
    samples = np.stack([x0, x1, x2, x3], axis=1).astype(np.uint8)

    codes = ["A", "B", "C", "D"]
    registry = make_registry(codes)
    patients = []
    for i, row in enumerate(samples):
        present = [codes[j] for j in range(4) if row[j]] or ["A"]
        patients.append((f"p{i:03d}", [present, present]))
    cohort = make_cohort(registry, patients)
    ad = DiagnosisMatrix(
        patient_ids=tuple(f"p{i:03d}" for i in range(n)),
        codes=tuple(codes),
        entries=samples,
    )

    best_graph, best_score = brute_force_best_dag(ad, codes)
    skeleton = {frozenset(e) for e in best_graph.edge_set}
    for pair in ({"A", "B"}, {"B", "C"}, {"C", "D"}):
        assert frozenset(pair) in skeleton, f"missing planted adjacency {pair}"

    provider = RuleBasedProvider(registry, build_transition_matrix(cohort), ad)
    runtime = LlmRuntime(provider=provider, ledger=UsageLedger())
    trace = causal_discovery(["A"], ["B", "C", "D"], "", ad, runtime, registry)
    initial = trace.iterations[0].score
    final = trace.iterations[-1].score
    assert final >= initial
    assert final <= best_score + 1e-9
    assert time.monotonic() - started < 30.0


def test_determinism(demo_test, demo_context, tmp_path):
    """Two identical offline runs leave byte-identical artifacts and metrics."""
    config = RunConfig(seed=7)
    runs = []
    for sub in ("first", "second"):
        result = run_inference(demo_test, demo_context, config, out_dir=tmp_path / sub)
        evaluate_and_save(result, demo_test)
        runs.append(result)
    assert len(runs[0].patients) == len(demo_test.patients)
    assert runs[0].failure_count() == 0
    for name in ("config.json", "artifacts.jsonl", "transcript.jsonl",
                 "usage.json", "metrics.json"):
        assert digest(runs[0].run_dir / name) == digest(runs[1].run_dir / name), name
    assert evaluate(runs[0], demo_test) == evaluate(runs[1], demo_test)


def test_metrics_fixtures():
    """Hand-computed recall and weighted-F1 values, plus monotonicity in k."""
    predictions = {
        "p1": ["A", "B"] + [f"X{i}" for i in range(8)],
        "p2": ["C"] + [f"Y{i}" for i in range(9)] + ["D", "E"],
    }
    truths = {"p1": {"A", "B"}, "p2": {"C", "D", "E"}}
    assert abs(recall_at_k(predictions, truths, 10) - 2.0 / 3.0) < 1e-12

    registry = make_registry(["A", "B"])
    value, _ = weighted_f1({"p1": ["A", "B"], "p2": ["B"]}, {"p1": {"A"}, "p2": {"B"}}, registry)
    assert abs(value - 5.0 / 6.0) < 1e-12

    rng = random.Random(4004)
    codes = [f"c{i}" for i in range(40)]
    for _ in range(100):
        preds = {}
        truth = {}
        for p in range(rng.randint(1, 6)):
            pid = f"p{p}"
            preds[pid] = rng.sample(codes, k=rng.randint(1, 25))
            truth[pid] = set(rng.sample(codes, k=rng.randint(1, 8)))
        previous = 0.0
        for k in (1, 2, 3, 5, 8, 13, 21, 34):
            current = recall_at_k(preds, truth, k)
            assert current >= previous - 1e-15
            previous = current


def test_ablation_contract(demo_test, demo_context):
    """Each ablation switch removes exactly its stage and nothing else."""
    base = run_inference(demo_test, demo_context, RunConfig())
    no_knowledge = run_inference(
        demo_test, demo_context, RunConfig(disable_knowledge=True)
    )
    no_causal = run_inference(demo_test, demo_context, RunConfig(disable_causal=True))

    for result in (base, no_knowledge, no_causal):
        assert result.failure_count() == 0
        assert all(a.prediction is not None for a in result.patients)

    for artifact in base.patients:
        assert artifact.synthesis is not None and artifact.trace is not None
    for artifact in no_knowledge.patients:
        record = artifact.to_record()
        assert record["synthesis"] is None
        assert record["trace"] is not None and record["prediction"] is not None
    for artifact in no_causal.patients:
        record = artifact.to_record()
        assert record["trace"] is None
        assert record["synthesis"] is not None and record["prediction"] is not None
        assert record["graph"] == {"nodes": sorted(record["graph"]["nodes"]), "edges": []}


def test_cost_accounting():
    """The published token volumes price out to the expected total."""
    assert abs(estimate_cost(4871, 2932, 0.0003, 0.0004) - 0.00263) < 0.00001


def test_loop_bounds():
    """Stop rules: fixed point converges at t=2, restless scripts hit the budget."""
    rng = np.random.default_rng(5005)
    n = 80
    a = rng.integers(0, 2, size=n)
    b = np.where(rng.random(n) < 0.05, 1 - a, a)
    c = rng.integers(0, 2, size=n)
    ad = DiagnosisMatrix(
        patient_ids=tuple(f"p{i}" for i in range(n)),
        codes=("A", "B", "C"),
        entries=np.stack([a, b, c], axis=1).astype(np.uint8),
    )
    registry = make_registry(["A", "B", "C"])

    def wire(nodes, edges):
        return json.dumps({"nodes": sorted(nodes), "edges": [list(e) for e in edges]})

    fixed = wire("AB", [("A", "B")])
    runtime = LlmRuntime(provider=ScriptedProvider([fixed, fixed]), ledger=UsageLedger())
    trace = causal_discovery(["A"], ["B"], "", ad, runtime, registry)
    assert trace.stop_reason is StopReason.CONVERGED_GRAPH
    assert len(trace.iterations) == 2
    assert all(it.graph.is_acyclic() for it in trace.iterations)

    t_max = 5
    g1 = wire("ABC", [("A", "B")])
    g2 = wire("ABC", [("B", "C")])
    script = [wire("ABC", [])] + [g1 if i % 2 == 0 else g2 for i in range(t_max)]
    runtime = LlmRuntime(provider=ScriptedProvider(script), ledger=UsageLedger())
    trace = causal_discovery(["A"], ["B", "C"], "", ad, runtime, registry, t_max=t_max)
    assert trace.stop_reason is StopReason.BUDGET
    assert len(trace.iterations) == t_max + 1
    assert all(it.graph.is_acyclic() for it in trace.iterations)
