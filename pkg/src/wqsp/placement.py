"""Greedy sensor placement over hydraulic steps and demand profiles."""

from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .dynamics import assemble
from .errors import EmptyCandidates, ShapeMismatch, TooLarge
from .hydraulics import plan_discretization
from .observability import FactorCache, LogDetObjective, cholesky_pd

TIE_RTOL = 1e-10


@dataclass(frozen=True)
class MetricConfig:
    """Which set function to minimise.

    ``variant="kf_degenerate"`` uses ``-log det(I + W(k_f))``;
    ``"general"`` uses the batch posterior ``log det Sigma_z``.
    """

    variant: str = "kf_degenerate"
    sigma: float = 0.1
    prior_var: float = 5e-3
    process_var: float = 0.0

    def objective(self, system, nodes=None, cache=None) -> LogDetObjective:
        return LogDetObjective(system, nodes, None, self.variant, self.sigma,
                               self.prior_var, self.process_var, cache)


@dataclass
class GreedyTrace:
    """Result of one greedy run: chosen nodes in order with their gains."""

    nodes: list
    gains: list
    values: list                 # f(S_j) for j = 0..len(nodes)
    evaluations: int = 0
    fallbacks: int = 0

    @property
    def value(self) -> float:
        return self.values[-1]


class _Candidate:
    __slots__ = ("name", "pos", "X", "schur", "done", "gain")

    def __init__(self, name, pos, diag_block):
        self.name = name
        self.pos = pos
        self.X = None                      # rows: L^-1 K(S, name)
        self.schur = np.eye(diag_block.shape[0]) + diag_block
        self.done = 0
        self.gain = None


def greedy_step(objective: LogDetObjective, r: int, candidates: Sequence[str] | None = None,
                lazy: bool = False) -> GreedyTrace:
    """Greedily pick ``r`` nodes minimising ``objective.value``.

    The gain of adding ``e`` to ``S`` is ``log det`` of the Schur
    complement of ``I + K`` restricted to ``S + e``; Schur complements are
    updated with one block-Cholesky row per selection.  Ties within a
    relative ``TIE_RTOL`` go to the earliest candidate in canonical order.
    ``lazy=True`` defers updates using the diminishing-gain bound.
    """
    names = list(objective.nodes if candidates is None else candidates)
    if not names:
        raise EmptyCandidates("no candidate nodes")
    if r < 0:
        raise ValueError("r must be >= 0")
    r = min(int(r), len(names))
    k1 = objective.k1
    node_pos = {n: i for i, n in enumerate(objective.nodes)}
    cands = [_Candidate(n, node_pos[n], objective.block(n, n)) for n in names]
    crosses = []          # per selected a: (L_aa, X_a, cross row block vs all nodes)
    trace = GreedyTrace([], [], [objective.const])
    remaining = list(range(len(cands)))

    def refresh(c: _Candidate):
        for j in range(c.done, len(crosses)):
            L_aa, X_a, cross = crosses[j]
            G = cross[:, c.pos * k1:(c.pos + 1) * k1].copy()
            if X_a is not None:
                G -= X_a.T @ c.X[:X_a.shape[0]]
            Y = sla.solve_triangular(L_aa, G, lower=True)
            c.X = Y if c.X is None else np.vstack([c.X, Y])
            c.schur = c.schur - Y.T @ Y
        c.done = len(crosses)
        L, jit = cholesky_pd(c.schur)
        trace.fallbacks += int(jit)
        trace.evaluations += 1
        c.gain = 2.0 * float(np.sum(np.log(np.diag(L))))
        return L

    def choose(c: _Candidate, L):
        cross = objective.cross(c.name)
        crosses.append((L, c.X, cross))
        trace.nodes.append(c.name)
        trace.gains.append(c.gain)
        trace.values.append(trace.values[-1] - c.gain)
        remaining.remove(cands.index(c))

    if not lazy:
        for _ in range(r):
            factors = {}
            for i in remaining:
                factors[i] = refresh(cands[i])
            best = max(cands[i].gain for i in remaining)
            tol = TIE_RTOL * max(1.0, abs(best))
            pick = next(i for i in remaining if cands[i].gain >= best - tol)
            choose(cands[pick], factors[pick])
        return trace

    heap = []
    for i in remaining:
        refresh(cands[i])
        heap.append((-cands[i].gain, i))
    heapq.heapify(heap)
    while len(trace.nodes) < r:
        _, i = heapq.heappop(heap)
        c = cands[i]
        if c.done == len(crosses):
            L = cholesky_pd(c.schur)[0]
            # a stale entry tied with this one must be checked first
            if heap and -heap[0][0] >= c.gain - TIE_RTOL * max(1.0, abs(c.gain)) and heap[0][1] < i:
                j = heap[0][1]
                if cands[j].done != len(crosses):
                    heapq.heappush(heap, (-c.gain, i))
                    _, j = heapq.heappop(heap)
                    refresh(cands[j])
                    heapq.heappush(heap, (-cands[j].gain, j))
                    continue
            choose(c, L)
        else:
            refresh(c)
            heapq.heappush(heap, (-c.gain, i))
    return trace


@dataclass
class PlacementResult:
    """Outcome of the multi-step, multi-profile placement."""

    selected: list
    occupation: dict
    nodes: list
    step_sets: list               # winning set per hydraulic step
    step_values: list             # f of the winning set per step
    step_profiles: list           # index of the winning demand profile
    traces: dict = field(default_factory=dict)   # (k, i) -> GreedyTrace
    r: int = 0
    final_rule: str = "occupation"
    config: dict = field(default_factory=dict)

    def indicator_matrix(self) -> np.ndarray:
        """Binary ``nodes x steps`` matrix of per-step winning sets."""
        pos = {n: i for i, n in enumerate(self.nodes)}
        P = np.zeros((len(self.nodes), len(self.step_sets)), dtype=np.int8)
        for k, S in enumerate(self.step_sets):
            for n in S:
                P[pos[n], k] = 1
        return P

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "r": self.r,
            "final_rule": self.final_rule,
            "occupation": {n: self.occupation[n] for n in self.nodes},
            "steps": [
                {"step": k, "profile": self.step_profiles[k], "nodes": list(S),
                 "f": self.step_values[k]}
                for k, S in enumerate(self.step_sets)
            ],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def occupation_csv(self) -> str:
        lines = ["node,occupation,selected"]
        chosen = set(self.selected)
        for n in self.nodes:
            lines.append(f"{n},{self.occupation[n]!r},{int(n in chosen)}")
        return "\n".join(lines) + "\n"


def _final_selection(nodes, step_sets, r, rule):
    T = len(step_sets)
    counts = {n: 0 for n in nodes}
    for S in step_sets:
        for n in S:
            counts[n] += 1
    occupation = {n: counts[n] / T if T else 0.0 for n in nodes}
    if rule == "occupation":
        order = sorted(range(len(nodes)), key=lambda i: (-counts[nodes[i]], i))
        chosen = {nodes[i] for i in order[:r]}
        selected = [n for n in nodes if n in chosen]
    elif rule == "set":
        pos = {n: i for i, n in enumerate(nodes)}
        tally = {}
        for S in step_sets:
            key = tuple(sorted(S, key=pos.__getitem__))
            tally[key] = tally.get(key, 0) + 1
        selected = list(min(tally, key=lambda s: (-tally[s], [pos[n] for n in s]))) if tally else []
    else:
        raise ValueError(f"unknown final rule {rule!r}")
    return selected, occupation


def solve_wqsp(model, hydraulics: Sequence, policy, r: int, *, window_s: float = 300.0,
               metric: MetricConfig | None = None, lazy: bool = False,
               final_rule: str = "occupation", workers: int = 1,
               cache: FactorCache | None = None, steps: Sequence[int] | None = None,
               candidates: Sequence[str] | None = None) -> PlacementResult:
    """Sensor placement across hydraulic steps and demand profiles.

    Parameters
    ----------
    model : NetworkModel
    hydraulics : sequence of HydraulicProfile
        One hydraulic profile per demand scenario, all with the same
        number of steps.
    policy : Fixed or Dynamic
        Pipe segmentation policy.
    r : int
        Number of sensors.
    window_s : float
        Estimation horizon in seconds; ``k_f = window_s / dt``.
    metric : MetricConfig, optional
    lazy : bool
        Use lazy greedy evaluation.
    final_rule : {"occupation", "set"}
        ``"occupation"`` keeps the ``r`` nodes most often chosen across
        steps; ``"set"`` keeps the most frequent per-step winning set.
    workers : int
        Threads used over (step, profile) pairs.  Results do not depend on it.
    steps : sequence of int, optional
        Subset of hydraulic steps; all by default.

    Returns
    -------
    PlacementResult
    """
    if not hydraulics:
        raise ValueError("at least one hydraulic profile is required")
    metric = metric or MetricConfig()
    n_steps = hydraulics[0].n_steps
    if any(h.n_steps != n_steps for h in hydraulics):
        raise ValueError("hydraulic profiles differ in step count")
    steps = list(range(n_steps)) if steps is None else [int(k) for k in steps]
    nodes = list(model.node_ids)
    cand = nodes if candidates is None else list(candidates)
    if not cand:
        raise EmptyCandidates("no candidate nodes")
    plans = [plan_discretization(model, h, policy, window_s) for h in hydraulics]
    cache = cache if cache is not None else FactorCache()

    def run(task):
        k, i = task
        system = assemble(model, hydraulics[i], plans[i][k], k)
        obj = metric.objective(system, nodes, cache)
        return greedy_step(obj, r, cand, lazy=lazy)

    tasks = [(k, i) for k in steps for i in range(len(hydraulics))]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    traces = dict(zip(tasks, results))

    step_sets, step_values, step_profiles = [], [], []
    for k in steps:
        best_i = min(range(len(hydraulics)), key=lambda i: (traces[(k, i)].value, i))
        step_sets.append(list(traces[(k, best_i)].nodes))
        step_values.append(traces[(k, best_i)].value)
        step_profiles.append(best_i)
    r_eff = min(int(r), len(cand))
    selected, occupation = _final_selection(nodes, step_sets, r_eff, final_rule)
    return PlacementResult(selected, occupation, nodes, step_sets, step_values,
                           step_profiles, traces, r_eff, final_rule)


def similarity(P1, P2) -> int:
    """Negative Hamming distance between two binary placement matrices."""
    A = np.asarray(P1).astype(bool)
    B = np.asarray(P2).astype(bool)
    if A.shape != B.shape:
        raise ShapeMismatch(f"shapes differ: {A.shape} vs {B.shape}")
    return -int(np.count_nonzero(A ^ B))


@dataclass
class BaselineResult:
    """Random-placement comparison: ``delta[k, s] = f(random) - f(selected)``."""

    deltas: np.ndarray
    samples: list
    selected_values: list

    def to_csv(self) -> str:
        lines = ["step,sample,nodes,delta_f"]
        for k, row in enumerate(self.samples):
            for s, S in enumerate(row):
                lines.append(f"{k},{s},{' '.join(S)},{float(self.deltas[k, s])!r}")
        return "\n".join(lines) + "\n"


def random_baseline(objectives: Sequence[LogDetObjective], selected: Sequence[str],
                    count: int, seed=None, candidates: Sequence[str] | None = None
                    ) -> BaselineResult:
    """Compare ``selected`` with ``count`` random sets of the same size per step.

    ``objectives`` holds one objective per hydraulic step.
    """
    rng = np.random.default_rng(seed)
    r = len(selected)
    deltas = np.zeros((len(objectives), count))
    samples, sel_values = [], []
    for k, obj in enumerate(objectives):
        pool = list(obj.nodes if candidates is None else candidates)
        base = obj.value(list(selected))
        sel_values.append(base)
        row = []
        for s in range(count):
            idx = np.sort(rng.choice(len(pool), size=r, replace=False))
            S = [pool[i] for i in idx]
            row.append(S)
            deltas[k, s] = obj.value(S) - base
        samples.append(row)
    return BaselineResult(deltas, samples, sel_values)


def brute_force_optimal(objective: LogDetObjective, r: int,
                        candidates: Sequence[str] | None = None, limit: int = 10 ** 6):
    """Exhaustive minimiser of ``objective.value`` over ``r``-subsets."""
    names = list(objective.nodes if candidates is None else candidates)
    if math.comb(len(names), r) > limit:
        raise TooLarge(f"C({len(names)}, {r}) exceeds {limit}")
    best, best_val = None, math.inf
    for S in combinations(names, r):
        v = objective.value(list(S))
        if v < best_val - TIE_RTOL * max(1.0, abs(best_val) if math.isfinite(best_val) else 1.0):
            best, best_val = list(S), v
    return best, best_val
