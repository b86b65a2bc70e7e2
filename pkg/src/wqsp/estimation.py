"""Kalman filtering and batch MMSE estimation of water-quality states."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DimensionMismatch, SingularInnovation, TooLargeForDense

DENSE_LIMIT = 2000
BATCH_LIMIT = 5000


@dataclass
class EstimationReport:
    """Per-step filter accuracy.

    RMSE values compare the filtered estimate with the true state over all
    states (``rmse``) and over the sensed states only (``rmse_sensed``).
    """

    times: np.ndarray
    rmse: np.ndarray
    rmse_sensed: np.ndarray
    innovation_mean: float
    nis_mean: float
    sensors: list
    metric: float | None = None
    extra: dict = field(default_factory=dict)
    p_diag: np.ndarray | None = None     # final error variances

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse)) if len(self.rmse) else 0.0

    def to_dict(self) -> dict:
        return {
            "sensors": list(self.sensors),
            "mean_rmse": self.mean_rmse,
            "final_rmse": float(self.rmse[-1]) if len(self.rmse) else 0.0,
            "innovation_mean": self.innovation_mean,
            "nis_mean": self.nis_mean,
            "metric": self.metric,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rmse_csv(self) -> str:
        lines = ["time_s,rmse,rmse_sensed"]
        for t, a, b in zip(self.times, self.rmse, self.rmse_sensed):
            lines.append(f"{t!r},{a!r},{b!r}")
        return "\n".join(lines) + "\n"


def _transition_for(systems, dt_hydraulic_s, t, dt):
    h = min(int(math.floor(t * dt / dt_hydraulic_s + 1e-9)), len(systems) - 1)
    return systems[h].A


def kf_run(systems: Sequence, sensors: Sequence[str], truth, measurements, x0_hat, P0,
           process_std: float = 0.0, sensor_std: float = 0.1,
           dt_hydraulic_s: float | None = None, diagonal: bool = False) -> EstimationReport:
    """Time-varying Kalman filter over a recorded trajectory.

    Parameters
    ----------
    systems : sequence of WqSystem
        One system per hydraulic step, all with the same state index.
    sensors : sequence of str
        Sensor node ids; may be empty (open-loop prediction).
    truth : array (T + 1, n_x)
        True states ``x(0..T)``.
    measurements : array (T + 1, n_y)
        ``y(k) = C x(k) + v(k)``.
    x0_hat, P0 : array
        Prior mean and covariance (``P0`` may be a scalar or a vector of
        variances).
    process_std, sensor_std : float
        Noise standard deviations; ``Q = process_std**2 I``.
    dt_hydraulic_s : float, optional
        Hydraulic step length; defaults to ``k_f * dt`` of the first system.
    diagonal : bool
        Keep only the diagonal of ``P`` (cheap approximation).

    Returns
    -------
    EstimationReport
    """
    index = systems[0].index
    if any(s.index != index for s in systems):
        raise DimensionMismatch("systems must share one state index")
    n_x = index.n_x
    if not diagonal and n_x > DENSE_LIMIT:
        raise TooLargeForDense(f"dense covariance needs n_x <= {DENSE_LIMIT}, got {n_x}")
    dt = systems[0].dt
    dt_h = dt_hydraulic_s or systems[0].k_f * dt
    truth = np.asarray(truth, dtype=float)
    Y = np.asarray(measurements, dtype=float).reshape(len(truth), len(sensors))
    pos = np.array([index[s] for s in sensors], dtype=int)
    q = process_std ** 2
    rm = sensor_std ** 2

    x = np.asarray(x0_hat, dtype=float).copy()
    P0 = np.asarray(P0, dtype=float)
    if diagonal:
        p = np.full(n_x, float(P0)) if P0.ndim == 0 else (np.diag(P0).copy() if P0.ndim == 2 else P0.copy())
    else:
        P = (float(P0) * np.eye(n_x)) if P0.ndim == 0 else (np.diag(P0) if P0.ndim == 1 else P0.copy())

    rmse, rmse_s, innov, nis = [], [], [], []
    for k in range(len(truth)):
        if k > 0:
            A = _transition_for(systems, dt_h, k - 1, dt)
            x = A @ x
            if diagonal:
                p = A.multiply(A) @ p + q
            else:
                P = A @ (A @ P).T
                P = 0.5 * (P + P.T) + q * np.eye(n_x)
        if len(pos):
            resid = Y[k] - x[pos]
            if diagonal:
                s = p[pos] + rm
                if np.any(s <= 0):
                    raise SingularInnovation("innovation variance is zero")
                gain = p[pos] / s
                x[pos] = x[pos] + gain * resid
                p[pos] = p[pos] * (1.0 - gain)
                nis.append(float(np.sum(resid ** 2 / s)))
            else:
                PCt = P[:, pos]
                S = PCt[pos] + rm * np.eye(len(pos))
                try:
                    cf = sla.cho_factor(S)
                except np.linalg.LinAlgError as exc:
                    raise SingularInnovation(f"innovation covariance not invertible at step {k}") from exc
                K = sla.cho_solve(cf, PCt.T).T
                x = x + K @ resid
                # Joseph form keeps P symmetric PSD
                IKC = np.eye(n_x)
                IKC[:, pos] -= K
                P = IKC @ P @ IKC.T + rm * (K @ K.T)
                P = 0.5 * (P + P.T)
                nis.append(float(resid @ sla.cho_solve(cf, resid)))
            innov.append(float(np.mean(resid)))
        err = x - truth[k]
        rmse.append(float(np.sqrt(np.mean(err ** 2))))
        rmse_s.append(float(np.sqrt(np.mean(err[pos] ** 2))) if len(pos) else 0.0)
    times = np.arange(len(truth)) * dt
    return EstimationReport(times, np.array(rmse), np.array(rmse_s),
                            float(np.mean(innov)) if innov else 0.0,
                            float(np.mean(nis)) if nis else 0.0, list(sensors),
                            p_diag=p.copy() if diagonal else np.diag(P).copy())


def augmented_observability(A, positions: Sequence[int], k_f: int,
                            process: bool = True) -> np.ndarray:
    """Dense map from ``z = {x0, w(0..k_f-1)}`` to ``{y(0), ..., y(k_f)}``.

    Block row ``k`` holds ``C A^k`` under ``x0`` and ``C A^(k-1-j)`` under
    ``w(j)`` for ``j < k``.  With ``process=False`` only the ``x0`` column
    block is returned.
    """
    A = sp.csr_matrix(A)
    n_x = A.shape[0]
    n_y = len(positions)
    n_z = n_x * (k_f + 1 if process else 1)
    if n_z > BATCH_LIMIT:
        raise TooLargeForDense(f"n_z = {n_z} exceeds {BATCH_LIMIT}")
    powers = []
    rows = np.zeros((n_y, n_x))
    rows[np.arange(n_y), list(positions)] = 1.0
    for _ in range(k_f + 1):
        powers.append(rows)
        rows = np.asarray(rows @ A)
    O = np.zeros(((k_f + 1) * n_y, n_z))
    for k in range(k_f + 1):
        r = slice(k * n_y, (k + 1) * n_y)
        O[r, :n_x] = powers[k]
        if process:
            for j in range(k):
                O[r, (j + 1) * n_x:(j + 2) * n_x] = powers[k - 1 - j]
    return O


def batch_mmse(O, y, sigma: float, prior_var, prior_mean=None):
    """Posterior mean and covariance of ``z`` given ``y = O z + v``.

    Uses the measurement-space form so ``sigma = 0`` is allowed when
    ``O Lambda O^T`` is nonsingular.

    Returns
    -------
    z_hat : ndarray
    Sigma_z : ndarray
    """
    O = np.asarray(O, dtype=float)
    n_y, n_z = O.shape
    if n_z > BATCH_LIMIT:
        raise TooLargeForDense(f"n_z = {n_z} exceeds {BATCH_LIMIT}")
    lam = np.asarray(prior_var, dtype=float)
    lam = np.full(n_z, float(lam)) if lam.ndim == 0 else lam
    mu = np.zeros(n_z) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    Sigma0 = np.diag(lam)
    if n_y == 0:
        return mu.copy(), Sigma0
    y = np.asarray(y, dtype=float).ravel()
    LOt = lam[:, None] * O.T
    S = O @ LOt + sigma ** 2 * np.eye(n_y)
    try:
        cf = sla.cho_factor(S)
        solve = lambda b: sla.cho_solve(cf, b)
    except np.linalg.LinAlgError:
        Sp = np.linalg.pinv(S)
        solve = lambda b: Sp @ b
    z_hat = mu + LOt @ solve(y - O @ mu)
    Sigma = Sigma0 - LOt @ solve(LOt.T)
    return z_hat, 0.5 * (Sigma + Sigma.T)


def batch_logdet(A, positions: Sequence[int], k_f: int, sigma: float = 1.0,
                 prior_var=1.0, process_var=0.0) -> float:
    """``log det Sigma_z`` from the dense batch posterior (reference path)."""
    process = np.any(np.asarray(process_var) > 0)
    O = augmented_observability(A, positions, k_f, process=bool(process))
    n_x = sp.csr_matrix(A).shape[0]
    lam0 = np.broadcast_to(np.asarray(prior_var, dtype=float), (n_x,))
    lam = lam0
    if process:
        lamw = np.broadcast_to(np.asarray(process_var, dtype=float), (n_x,))
        lam = np.concatenate([lam0] + [lamw] * k_f)
    _, Sigma = batch_mmse(O, np.zeros(O.shape[0]), sigma, lam)
    sign, ld = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ArithmeticError("posterior covariance is not positive definite")
    return float(ld)
