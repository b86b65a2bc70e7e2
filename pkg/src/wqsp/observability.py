"""Observability Gramian factors and log-det estimation metrics.

A sensor at node ``e`` contributes the rows ``e^T A^tau`` for
``tau = 0..k_f`` (its *factor*).  Stacking the factors of a sensor set
gives ``R`` with ``W(k_f) = R^T R``; every log-det is evaluated on the
small ``m x m`` matrix ``I + R R^T`` (``m = (k_f + 1) |S|``) through
``det(I + R^T R) = det(I + R R^T)``, so no ``n_x x n_x`` matrix is formed.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NonFiniteLogDet, TooLargeForDense

JITTER = 1e-12
DEFAULT_SIGMA = 0.1
DEFAULT_PRIOR_VAR = 5e-3


def logdet_pd(M) -> tuple[float, str]:
    """``log det`` of a symmetric positive definite matrix.

    Cholesky first; on failure the matrix gets ``JITTER * I`` and is LU
    factorised, summing ``log|u_ii|``.  Returns ``(value, method)``.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0, "empty"
    try:
        L = sla.cholesky(M, lower=True, check_finite=True)
        value = 2.0 * float(np.sum(np.log(np.diag(L))))
        if math.isfinite(value):
            return value, "cholesky"
    except (np.linalg.LinAlgError, ValueError):
        pass
    try:
        lu, _ = sla.lu_factor(M + JITTER * np.eye(M.shape[0]), check_finite=True)
        value = float(np.sum(np.log(np.abs(np.diag(lu)))))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NonFiniteLogDet(f"log det failed: {exc}") from exc
    if not math.isfinite(value):
        raise NonFiniteLogDet("log det is not finite")
    return value, "lu"


def cholesky_pd(M) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor, retrying once with jitter. Returns ``(L, jittered)``."""
    try:
        return sla.cholesky(M, lower=True), False
    except np.linalg.LinAlgError:
        pass
    try:
        return sla.cholesky(M + JITTER * np.eye(M.shape[0]), lower=True), True
    except np.linalg.LinAlgError as exc:
        raise NonFiniteLogDet(f"Cholesky failed after jitter: {exc}") from exc


class _PlainIndex:
    """State index where every state is a candidate sensor location."""

    def __init__(self, labels):
        self.node_ids = list(labels)
        self.position = {n: i for i, n in enumerate(self.node_ids)}

    def __getitem__(self, label) -> int:
        return self.position[label]

    @property
    def n_x(self) -> int:
        return len(self.node_ids)


class LinearSystem:
    """A bare ``x(k+1) = A x(k)`` with every state measurable.

    Stands in for an assembled water-quality system when the metric is
    needed for an arbitrary matrix.
    """

    def __init__(self, A, k_f: int, labels: Sequence[str] | None = None, dt: float = 1.0):
        self.A = sp.csr_matrix(A, dtype=float)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        self.k_f = int(k_f)
        self.dt = dt
        self.index = _PlainIndex(labels if labels is not None else [f"x{i}" for i in range(n)])
        if self.index.n_x != n:
            raise ValueError("one label per state is required")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def content_hash(self) -> str:
        A = self.A
        h = hashlib.sha1()
        for arr in (A.indptr, A.indices):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.data, dtype=np.float64).tobytes())
        h.update(str(A.shape).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class GramianFactor:
    node: str
    k_f: int
    rows: sp.csr_matrix   # (k_f + 1) x n_x, row tau = e^T A^tau


@dataclass(frozen=True)
class MetricValue:
    value: float
    variant: str          # "kf_degenerate" | "general"
    method: str = "cholesky"

    def __float__(self):
        return self.value


class FactorCache:
    """Factor rows keyed by (content hash of A, state position, k_f).

    Safe for concurrent use; a second insert of the same key keeps the
    later (identical) value.
    """

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            value = self._data.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def put(self, key, value):
        with self._lock:
            self._data[key] = value

    def __len__(self):
        return len(self._data)


def _powers_rows(A, positions, k_f):
    """Rows ``e_i^T A^tau`` for every position, stacked node-major."""
    n_x = A.shape[0]
    n_c = len(positions)
    E = sp.csr_matrix((np.ones(n_c), (np.arange(n_c), np.asarray(positions))),
                      shape=(n_c, n_x))
    blocks = [E]
    R = E
    for _ in range(k_f):
        R = (R @ A).tocsr()
        blocks.append(R)
    stacked = sp.vstack(blocks, format="csr")
    perm = (np.arange(k_f + 1)[None, :] * n_c + np.arange(n_c)[:, None]).ravel()
    return stacked[perm]


def gramian_factors(system, nodes: Sequence[str], k_f: int | None = None,
                    cache: FactorCache | None = None) -> dict:
    """Factors for several sensor nodes, computed by batched sparse products."""
    k_f = system.k_f if k_f is None else int(k_f)
    if k_f < 0:
        raise ValueError("k_f must be >= 0")
    A = system.A.tocsr()
    out = {}
    todo = []
    for node in nodes:
        pos = system.index[node]
        if cache is not None:
            hit = cache.get((system.content_hash, pos, k_f))
            if hit is not None:
                out[node] = GramianFactor(node, k_f, hit)
                continue
        todo.append((node, pos))
    if todo:
        rows = _powers_rows(A, [p for _, p in todo], k_f)
        k1 = k_f + 1
        for c, (node, pos) in enumerate(todo):
            block = rows[c * k1:(c + 1) * k1]
            block.sort_indices()
            if cache is not None:
                cache.put((system.content_hash, pos, k_f), block)
            out[node] = GramianFactor(node, k_f, block)
    return {node: out[node] for node in nodes}


def gramian_factor(system, node: str, k_f: int | None = None, cache=None) -> GramianFactor:
    """Rows ``[e^T; e^T A; ...; e^T A^k_f]`` by repeated sparse products."""
    return gramian_factors(system, [node], k_f, cache)[node]


def stack_factors(factors: Sequence[GramianFactor]) -> sp.csr_matrix:
    if not factors:
        raise ValueError("no factors")
    return sp.vstack([f.rows for f in factors], format="csr")


def gramian_dense(factors: Sequence[GramianFactor], n_x: int) -> np.ndarray:
    """``W(k_f) = R^T R`` as a dense matrix; small systems only."""
    if not factors:
        return np.zeros((n_x, n_x))
    R = stack_factors(factors)
    return (R.T @ R).toarray()


def metric_kf_degenerate(factors: Sequence[GramianFactor]) -> MetricValue:
    """``-log det(I + W(k_f))`` evaluated as ``-log det(I_m + R R^T)``."""
    if not factors:
        return MetricValue(0.0, "kf_degenerate", "empty")
    R = stack_factors(factors)
    G = (R @ R.T).toarray()
    value, method = logdet_pd(np.eye(G.shape[0]) + G)
    return MetricValue(-value, "kf_degenerate", method)


def _as_diag(values, n_x, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n_x, float(arr))
    if arr.shape != (n_x,):
        raise ValueError(f"{name} must be a scalar or length-{n_x} vector")
    return arr


def _shifted_cumsum(G):
    """``M[k, l] = sum_{t=1..min(k,l)} G[k-t, l-t]`` (process-noise coupling)."""
    n, m = G.shape
    M = np.zeros((n, m))
    for k in range(1, n):
        M[k, 1:] = M[k - 1, :-1] + G[k - 1, :-1]
    return M


class LogDetObjective:
    """Set function ``f(S) = const - log det(I + K_S)`` over sensor nodes.

    ``K_S`` is the block matrix of per-pair kernels; for the Kalman-filter
    degenerate metric ``K(a, b) = R_a R_b^T`` and ``const = 0``.  With
    ``sigma``/``prior_var``/``process_var`` given, ``f`` is ``log det`` of
    the batch posterior covariance of ``z = {x0, w(0..k_f-1)}``::

        log det Sigma_z = sum log Lambda_ii - log det(I + sigma^-2 O Lambda O^T)

    and the process-noise block is dropped when ``process_var == 0``.
    """

    def __init__(self, system, nodes: Sequence[str] | None = None, k_f: int | None = None,
                 variant: str = "kf_degenerate", sigma: float = DEFAULT_SIGMA,
                 prior_var=DEFAULT_PRIOR_VAR, process_var=0.0, cache=None):
        self.system = system
        self.k_f = system.k_f if k_f is None else int(k_f)
        self.nodes = list(system.index.node_ids if nodes is None else nodes)
        self.variant = variant
        self.fallbacks = 0
        n_x = system.n_x
        if variant == "kf_degenerate":
            self.const = 0.0
            self._w0 = None
            self._ww = None
            self._scale = 1.0
        elif variant == "general":
            if not sigma > 0:
                raise ValueError("sigma must be > 0")
            lam0 = _as_diag(prior_var, n_x, "prior_var")
            lamw = _as_diag(process_var, n_x, "process_var")
            if np.any(lam0 <= 0) or np.any(lamw < 0):
                raise ValueError("prior variances must be > 0, process variances >= 0")
            self.const = float(np.sum(np.log(lam0)))
            if np.any(lamw > 0):
                if np.any(lamw == 0):
                    raise ValueError("process_var must be all zero or all positive")
                self.const += self.k_f * float(np.sum(np.log(lamw)))
                self._ww = sp.diags(lamw)
            else:
                self._ww = None
            self._w0 = sp.diags(lam0)
            self._scale = 1.0 / sigma ** 2
        else:
            raise ValueError(f"unknown metric variant {variant!r}")
        self.factors = gramian_factors(system, self.nodes, self.k_f, cache)
        self._pos = {n: i for i, n in enumerate(self.nodes)}
        self._R_all = None

    @property
    def k1(self) -> int:
        return self.k_f + 1

    def _kernel_from_products(self, G0, Gw):
        K = G0
        if Gw is not None:
            K = K + _shifted_cumsum(Gw)
        return self._scale * K

    def block(self, a: str, b: str) -> np.ndarray:
        Ra, Rb = self.factors[a].rows, self.factors[b].rows
        if self._w0 is None:
            return (Ra @ Rb.T).toarray()
        G0 = (Ra @ self._w0 @ Rb.T).toarray()
        Gw = (Ra @ self._ww @ Rb.T).toarray() if self._ww is not None else None
        return self._kernel_from_products(G0, Gw)

    def cross(self, a: str) -> np.ndarray:
        """``[K(a, n) for n in nodes]`` side by side: ``k1 x (len(nodes) * k1)``."""
        if self._R_all is None:
            self._R_all = sp.vstack([self.factors[n].rows for n in self.nodes], format="csr")
            self._R_all_T = self._R_all.T.tocsc()
        Ra = self.factors[a].rows
        if self._w0 is None:
            return (Ra @ self._R_all_T).toarray()
        G0 = (Ra @ self._w0 @ self._R_all_T).toarray()
        if self._ww is None:
            return self._scale * G0
        Gw = (Ra @ self._ww @ self._R_all_T).toarray()
        k1 = self.k1
        out = np.empty_like(G0)
        for j in range(len(self.nodes)):
            sl = slice(j * k1, (j + 1) * k1)
            out[:, sl] = self._kernel_from_products(G0[:, sl], Gw[:, sl])
        return out

    def kernel_matrix(self, S: Sequence[str]) -> np.ndarray:
        k1 = self.k1
        R = sp.vstack([self.factors[n].rows for n in S], format="csr")
        if self._w0 is None:
            return (R @ R.T).toarray()
        G0 = (R @ self._w0 @ R.T).toarray()
        if self._ww is None:
            return self._scale * G0
        Gw = (R @ self._ww @ R.T).toarray()
        K = np.empty_like(G0)
        for i in range(len(S)):
            for j in range(len(S)):
                bi, bj = slice(i * k1, (i + 1) * k1), slice(j * k1, (j + 1) * k1)
                K[bi, bj] = self._kernel_from_products(G0[bi, bj], Gw[bi, bj])
        return K

    def value(self, S: Sequence[str]) -> float:
        S = list(S)
        if not S:
            return self.const
        K = self.kernel_matrix(S)
        ld, method = logdet_pd(np.eye(K.shape[0]) + K)
        if method == "lu":
            self.fallbacks += 1
        return self.const - ld

    def metric(self, S: Sequence[str]) -> MetricValue:
        return MetricValue(self.value(S), "kf_degenerate" if self._w0 is None else "general")


def metric_general(factors: Sequence[GramianFactor], system, sigma: float = DEFAULT_SIGMA,
                   prior_var=DEFAULT_PRIOR_VAR, process_var=0.0) -> MetricValue:
    """``log det Sigma_z`` of the batch posterior over ``z = {x0, w}``.

    Equals ``2 n_z log(sigma) - log det(sigma^2 C(z)^-1 + O^T O)`` with a
    diagonal prior ``C(z)``; evaluated through the ``m x m`` identity.
    """
    nodes = [f.node for f in factors]
    k_f = factors[0].k_f if factors else system.k_f
    obj = LogDetObjective(system, nodes, k_f, "general", sigma, prior_var, process_var)
    if factors:
        obj.factors = {f.node: f for f in factors}
    if not nodes:
        return MetricValue(obj.const, "general", "empty")
    K = obj.kernel_matrix(nodes)
    ld, method = logdet_pd(np.eye(K.shape[0]) + K)
    return MetricValue(obj.const - ld, "general", method)


def observability_matrix_dense(A, positions: Sequence[int], k_f: int) -> np.ndarray:
    """``{C, CA, ..., C A^(k_f - 1)}`` as a dense array."""
    A = sp.csr_matrix(A)
    n_x = A.shape[0]
    n_y = len(positions)
    O = np.zeros((k_f * n_y, n_x))
    if n_y == 0:
        return O
    rows = np.zeros((n_y, n_x))
    rows[np.arange(n_y), list(positions)] = 1.0
    for tau in range(k_f):
        O[tau * n_y:(tau + 1) * n_y] = rows
        rows = np.asarray(rows @ A)
    return O


def rank_check(A, positions: Sequence[int], k_f: int, max_size: int = 5000) -> dict:
    """Numerical rank of the stacked observability matrix.

    ``positions`` are the sensor state indices (rows of ``C``).  Guarded by
    ``n_x * k_f <= max_size``.
    """
    n_x = A.shape[0]
    if n_x * k_f > max_size:
        raise TooLargeForDense(f"n_x * k_f = {n_x * k_f} exceeds {max_size}")
    O = observability_matrix_dense(A, positions, k_f)
    rank = int(np.linalg.matrix_rank(O)) if O.size else 0
    return {"rank": rank, "n_x": n_x, "observable": rank == n_x}
