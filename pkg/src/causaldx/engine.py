"""Causal DAG representation, agent-reply parsing, and likelihood fitting.

The fitting model is a per-node Bernoulli conditional-probability table
over full parent configurations, estimated from the binary diagnosis
matrix with Laplace smoothing:

    P(node=1 | config) = (count(node=1, config) + alpha) / (count(config) + 2*alpha)

and the graph score is the total data log-likelihood, summed over the
graph's nodes and all patients. Parent sets above ``parent_cap`` are
truncated, dropping the weakest absolute marginal association first, so
table sizes stay bounded no matter how dense a proposed graph is.

A brute-force enumerator over all DAGs on <= 5 nodes serves as the
independent oracle for both the score and the search loop built on it.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from ._kernels import node_config_counts
from .ehr import DiagnosisMatrix

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1.0
DEFAULT_PARENT_CAP = 5
DEFAULT_REPROMPT_BUDGET = 3
DEFAULT_T_MAX = 5
DEFAULT_SCORE_TOL = 1e-6
BRUTE_FORCE_NODE_LIMIT = 5


class EngineError(ValueError):
    """Base class for graph/fitting failures."""


class DagParseError(EngineError):
    """No parseable graph object in the agent reply."""


class NodeSetMismatchError(EngineError):
    """Two graphs compared over different node sets."""


class TooManyNodesError(EngineError):
    """Brute-force enumeration asked for more nodes than it can afford."""


class UnknownNodeError(EngineError):
    """A graph node is absent from the diagnosis matrix's code set."""


@dataclass(frozen=True)
class CausalDag:
    """Directed graph over disease codes; edge order preserves insertion.

    Construction keeps whatever edges it is given (minus duplicates), so a
    freshly parsed graph may still hold cycles; ``enforce_acyclic`` is the
    operation that establishes acyclicity. Self-edges are rejected outright
    by ``validated()`` but tolerated in raw parses as one-node cycles.
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise EngineError("duplicate nodes in graph")
        for src, dst in self.edges:
            if src not in node_set or dst not in node_set:
                raise EngineError(f"edge ({src!r}, {dst!r}) references unknown node")
        seen = set()
        for edge in self.edges:
            if edge in seen:
                raise EngineError(f"duplicate edge {edge!r}")
            seen.add(edge)

    @property
    def edge_set(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.edges)

    def parents(self, node: str) -> list[str]:
        return [src for src, dst in self.edges if dst == node]

    def is_acyclic(self) -> bool:
        return self._find_cycle() is None

    def _find_cycle(self) -> Optional[list[tuple[str, str]]]:
        """DFS for a cycle; returns its edges in cycle order, or None."""
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for src, dst in self.edges:
            out[src].append(dst)
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {n: WHITE for n in self.nodes}
        stack: list[str] = []

        def visit(node: str) -> Optional[list[str]]:
            color[node] = GRAY
            stack.append(node)
            for nxt in out[node]:
                if color[nxt] == GRAY:
                    return stack[stack.index(nxt):] + [nxt]
                if color[nxt] == WHITE:
                    found = visit(nxt)
                    if found is not None:
                        return found
            stack.pop()
            color[node] = BLACK
            return None

        for node in self.nodes:
            if color[node] == WHITE:
                path = visit(node)
                if path is not None:
                    return list(zip(path, path[1:]))
        return None

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; raises if the graph is cyclic."""
        indeg = {n: 0 for n in self.nodes}
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for src, dst in self.edges:
            indeg[dst] += 1
            out[src].append(dst)
        ready = [n for n in self.nodes if indeg[n] == 0]
        order: list[str] = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for nxt in out[node]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
        if len(order) != len(self.nodes):
            raise EngineError("graph is cyclic; no topological order exists")
        return order

    def validated(self) -> "CausalDag":
        """Assert the full DAG invariants (no self-loops, acyclic)."""
        for src, dst in self.edges:
            if src == dst:
                raise EngineError(f"self-loop on {src!r}")
        self.topological_order()
        return self

    def to_wire_dict(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": sorted([list(e) for e in self.edges]),
        }

    def to_wire(self) -> str:
        return json.dumps(self.to_wire_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_wire_dict(cls, payload: Mapping) -> "CausalDag":
        nodes = tuple(str(n) for n in payload.get("nodes", []))
        edges = tuple((str(e[0]), str(e[1])) for e in payload.get("edges", []))
        return cls(nodes=nodes, edges=edges)

    @classmethod
    def empty(cls, nodes: Iterable[str]) -> "CausalDag":
        return cls(nodes=tuple(nodes), edges=())


def _edges_from_payload(payload, allowed: set[str]) -> Optional[list[tuple[str, str]]]:
    """Pull an edge list out of one decoded JSON object, or None if shapeless."""
    if not isinstance(payload, dict):
        return None
    raw_edges = None
    if "edges" in payload and isinstance(payload["edges"], list):
        raw_edges = []
        for item in payload["edges"]:
            if isinstance(item, (list, tuple)) and len(item) == 2:
                raw_edges.append((str(item[0]), str(item[1])))
            elif isinstance(item, dict) and "from" in item and "to" in item:
                raw_edges.append((str(item["from"]), str(item["to"])))
            else:
                return None
    elif "nodes" in payload and "edges" not in payload:
        raw_edges = []
    elif payload and all(isinstance(v, list) for v in payload.values()):
        # adjacency form: {"A": ["B", "C"], ...}
        raw_edges = [
            (str(src), str(dst)) for src, targets in payload.items() for dst in targets
        ]
    if raw_edges is None:
        return None
    kept: list[tuple[str, str]] = []
    for src, dst in raw_edges:
        if src not in allowed or dst not in allowed:
            logger.warning("dropping edge (%s -> %s): node not in graph scope", src, dst)
            continue
        if (src, dst) not in kept:
            kept.append((src, dst))
    return kept


def parse_dag(text: str, allowed_nodes: Iterable[str]) -> CausalDag:
    """Extract a graph from an agent reply, tolerating surrounding prose.

    Scans for the first well-formed JSON object shaped like an edge list
    (``{"edges": [[a, b], ...]}``, with from/to dicts also accepted) or an
    adjacency map. Edges naming nodes outside ``allowed_nodes`` are dropped
    with a warning. The result is NOT yet guaranteed acyclic.
    """
    allowed = list(dict.fromkeys(allowed_nodes))
    allowed_set = set(allowed)
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("{", pos)
        if start < 0:
            break
        try:
            payload, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            pos = start + 1
            continue
        edges = _edges_from_payload(payload, allowed_set)
        if edges is not None:
            return CausalDag(nodes=tuple(allowed), edges=tuple(edges))
        pos = start + 1
    raise DagParseError("no parseable graph object in reply")


def enforce_acyclic(
    graph: CausalDag,
    reprompt_budget: int = DEFAULT_REPROMPT_BUDGET,
    reprompter: Optional[Callable[[CausalDag], CausalDag]] = None,
) -> CausalDag:
    """Guarantee a DAG, re-asking the proposer first, then cutting cycles.

    While the graph is cyclic and the budget allows, ``reprompter`` is
    called for a replacement proposal. If cycles remain afterwards, the
    latest-inserted edge on each remaining cycle is removed (self-loops
    are cycles of length one), each removal logged, until acyclic.
    """
    attempts = 0
    while not graph.is_acyclic() and reprompter is not None and attempts < reprompt_budget:
        attempts += 1
        logger.info("graph cyclic; reprompting (%d/%d)", attempts, reprompt_budget)
        graph = reprompter(graph)
    edges = list(graph.edges)
    while True:
        candidate = CausalDag(nodes=graph.nodes, edges=tuple(edges))
        cycle = candidate._find_cycle()
        if cycle is None:
            return candidate.validated()
        drop = max(cycle, key=edges.index)
        logger.warning("removing edge (%s -> %s) to break a cycle", drop[0], drop[1])
        edges.remove(drop)


@dataclass(frozen=True)
class Cpt:
    """Fitted Bernoulli tables: per node, P(node=1) for each parent config.

    ``tables[node]`` has one probability per configuration of
    ``parents_used[node]``; configuration c sets bit j when parent j (in
    ``parents_used`` order) equals 1. Probabilities stay inside (0, 1)
    for any positive smoothing.
    """

    alpha: float
    parents_used: dict[str, tuple[str, ...]]
    tables: dict[str, np.ndarray] = field(repr=False)

    def prob(self, node: str, parent_values: Mapping[str, int]) -> float:
        parents = self.parents_used[node]
        cfg = 0
        for j, parent in enumerate(parents):
            if parent_values[parent]:
                cfg |= 1 << j
        return float(self.tables[node][cfg])


@dataclass
class FitMemory:
    """Fitting memory: the current and previous graph with their scores."""

    current_graph: CausalDag
    current_score: float
    previous_graph: Optional[CausalDag] = None
    previous_score: Optional[float] = None
    iteration: int = 0

    def advance(self, graph: CausalDag, score: float) -> "FitMemory":
        return FitMemory(
            current_graph=graph,
            current_score=score,
            previous_graph=self.current_graph,
            previous_score=self.current_score,
            iteration=self.iteration + 1,
        )

    def to_wire_dict(self) -> dict:
        payload: dict = {
            "current": {
                "graph": self.current_graph.to_wire_dict(),
                "score": round(self.current_score, 4),
            },
            "iteration": self.iteration,
        }
        if self.previous_graph is None:
            payload["previous"] = None
        else:
            assert self.previous_score is not None
            payload["previous"] = {
                "graph": self.previous_graph.to_wire_dict(),
                "score": round(self.previous_score, 4),
            }
        return payload

    def to_wire(self) -> str:
        return json.dumps(self.to_wire_dict(), sort_keys=True, separators=(",", ":"))


def _association_strengths(ad: np.ndarray, node_col: int, parent_cols: Sequence[int]) -> list[float]:
    """|phi coefficient| between the node column and each parent column."""
    n = ad.shape[0]
    x = ad[:, node_col].astype(np.float64)
    out = []
    for col in parent_cols:
        y = ad[:, col].astype(np.float64)
        n11 = float(x @ y)
        n1x, n1y = float(x.sum()), float(y.sum())
        denom = math.sqrt(n1x * (n - n1x) * n1y * (n - n1y))
        if denom == 0.0:
            out.append(0.0)
        else:
            out.append(abs((n * n11 - n1x * n1y) / denom))
    return out


def _truncate_parents(
    ad: np.ndarray, node_col: int, parent_cols: list[int], cap: int
) -> list[int]:
    if len(parent_cols) <= cap:
        return parent_cols
    strengths = _association_strengths(ad, node_col, parent_cols)
    ranked = sorted(
        range(len(parent_cols)), key=lambda i: (-strengths[i], parent_cols[i])
    )
    kept = sorted(ranked[:cap])
    logger.warning(
        "truncating parent set of column %d from %d to %d parents",
        node_col,
        len(parent_cols),
        cap,
    )
    return [parent_cols[i] for i in kept]


def _family_score(
    ad: np.ndarray, node_col: int, parent_cols: Sequence[int], alpha: float
) -> tuple[float, np.ndarray]:
    """Log-likelihood contribution of one node plus its fitted table."""
    counts, ones = node_config_counts(
        ad, node_col, np.asarray(parent_cols, dtype=np.int32)
    )
    counts = counts.astype(np.float64)
    ones = ones.astype(np.float64)
    zeros = counts - ones
    p1 = (ones + alpha) / (counts + 2.0 * alpha)
    p0 = (zeros + alpha) / (counts + 2.0 * alpha)
    score = float(np.sum(ones * np.log(p1) + zeros * np.log(p0)))
    return score, p1


def fit_loglikelihood(
    graph: CausalDag,
    ad: DiagnosisMatrix,
    alpha: float = DEFAULT_ALPHA,
    parent_cap: int = DEFAULT_PARENT_CAP,
) -> tuple[float, Cpt]:
    """Smoothed-ML CPTs from the diagnosis matrix and the resulting score.

    The score sums log P(observation | fitted parent config) over every
    patient and every node IN THE GRAPH; codes outside the graph's node
    set contribute nothing. Parent sets above ``parent_cap`` are truncated
    before fitting.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive: {alpha}")
    col_of = {code: i for i, code in enumerate(ad.codes)}
    for node in graph.nodes:
        if node not in col_of:
            raise UnknownNodeError(f"graph node {node!r} not in diagnosis matrix")
    entries = np.ascontiguousarray(ad.entries, dtype=np.uint8)
    code_of = {v: k for k, v in col_of.items()}
    total = 0.0
    parents_used: dict[str, tuple[str, ...]] = {}
    tables: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        parent_codes = sorted(graph.parents(node), key=lambda c: col_of[c])
        parent_cols = _truncate_parents(
            entries, col_of[node], [col_of[c] for c in parent_codes], parent_cap
        )
        score, table = _family_score(entries, col_of[node], parent_cols, alpha)
        total += score
        parents_used[node] = tuple(code_of[c] for c in parent_cols)
        tables[node] = table
    return total, Cpt(alpha=alpha, parents_used=parents_used, tables=tables)


def graph_diff(g1: CausalDag, g2: CausalDag) -> int:
    """Size of the symmetric difference between the two edge sets."""
    if set(g1.nodes) != set(g2.nodes):
        raise NodeSetMismatchError("graphs cover different node sets")
    return len(g1.edge_set ^ g2.edge_set)


def _all_dag_edge_sets(nodes: Sequence[str]) -> set[frozenset[tuple[str, str]]]:
    """Every DAG edge set on ``nodes``, via topological-order enumeration."""
    n = len(nodes)
    pair_positions = [(i, j) for i in range(n) for j in range(i + 1, n)]
    seen: set[frozenset[tuple[str, str]]] = set()
    for perm in itertools.permutations(range(n)):
        ordered = [nodes[k] for k in perm]
        for mask in range(1 << len(pair_positions)):
            edges = frozenset(
                (ordered[i], ordered[j])
                for bit, (i, j) in enumerate(pair_positions)
                if mask >> bit & 1
            )
            seen.add(edges)
    return seen


def brute_force_best_dag(
    ad: DiagnosisMatrix,
    nodes: Sequence[str],
    alpha: float = DEFAULT_ALPHA,
) -> tuple[CausalDag, float]:
    """Exhaustive search over every DAG on ``nodes`` for the best score.

    Ties go to the graph with fewer edges, then the lexicographically
    smallest sorted edge list. Scores reuse per-(node, parent-set) family
    contributions, so enumeration dominates the cost. Limited to
    ``BRUTE_FORCE_NODE_LIMIT`` nodes.
    """
    nodes = list(nodes)
    if len(nodes) > BRUTE_FORCE_NODE_LIMIT:
        raise TooManyNodesError(
            f"{len(nodes)} nodes exceed the enumeration bound "
            f"({BRUTE_FORCE_NODE_LIMIT})"
        )
    if alpha <= 0:
        raise ValueError(f"alpha must be positive: {alpha}")
    col_of = {code: i for i, code in enumerate(ad.codes)}
    for node in nodes:
        if node not in col_of:
            raise UnknownNodeError(f"node {node!r} not in diagnosis matrix")
    entries = np.ascontiguousarray(ad.entries, dtype=np.uint8)

    cache: dict[tuple[str, tuple[str, ...]], float] = {}

    def family(node: str, parents: tuple[str, ...]) -> float:
        key = (node, parents)
        if key not in cache:
            cols = [col_of[p] for p in parents]
            cache[key], _ = _family_score(entries, col_of[node], cols, alpha)
        return cache[key]

    best: Optional[tuple[float, int, list, frozenset]] = None
    for edge_set in _all_dag_edge_sets(nodes):
        score = 0.0
        for node in nodes:
            parents = tuple(sorted(src for src, dst in edge_set if dst == node))
            score += family(node, parents)
        ranking = (-score, len(edge_set), sorted(edge_set))
        if best is None or ranking < (best[0], best[1], best[2]):
            best = (-score, len(edge_set), sorted(edge_set), edge_set)
    assert best is not None
    winner = CausalDag(nodes=tuple(nodes), edges=tuple(best[2]))
    return winner.validated(), -best[0]
