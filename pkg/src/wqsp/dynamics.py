"""Sparse time-varying chlorine transport model ``x(k+1) = A(k) x(k) + w(k)``.

State ordering is junctions, reservoirs, tanks, pipe segments (pipe by
pipe, segments from the declared start node), pumps, valves.

Pipe segments follow Lax-Wendroff for interior cells.  The inflow face of
the first segment carries the upstream node's concentration and the
outflow face of the last segment copies that segment (first-order upwind),
so total pipe mass changes exactly by ``q dt (c_in - c_out)``.  The
first-order reaction enters the diagonal as ``r * dt``; a literal ``+ r``
without the time step is not dimensionally consistent.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    BetaOutOfRange,
    DimensionMismatch,
    DynamicsError,
    NegativeMixingDenominator,
    ZeroTankVolume,
)
from .hydraulics import GPM_TO_M3S, ZERO_FLOW_GPM, Discretization, HydraulicProfile
from .network import NetworkModel

_BETA_SLACK = 1e-9


def lax_coefficients(beta: float) -> tuple[float, float, float]:
    """Lax-Wendroff weights (previous, current, next) for Courant number ``beta``."""
    if not (beta > 0) or beta > 1 + _BETA_SLACK:
        raise BetaOutOfRange(f"Courant number {beta!r} outside (0, 1]")
    beta = min(beta, 1.0)
    return 0.5 * beta * (1 + beta), 1 - beta * beta, -0.5 * beta * (1 - beta)


class StateIndex:
    """Bijection between state symbols and positions in ``x``."""

    def __init__(self, model: NetworkModel, segments: dict):
        symbols = []
        symbols += [j.id for j in model.junctions]
        symbols += [r.id for r in model.reservoirs]
        symbols += [t.id for t in model.tanks]
        self.pipe_offset = {}
        for p in model.pipes:
            self.pipe_offset[p.id] = len(symbols)
            symbols += [(p.id, s) for s in range(int(segments[p.id]))]
        symbols += [m.id for m in model.pumps]
        symbols += [v.id for v in model.valves]
        self.symbols = symbols
        self.segments = {p.id: int(segments[p.id]) for p in model.pipes}
        self.position = {s: i for i, s in enumerate(symbols)}
        if len(self.position) != len(symbols):
            raise DynamicsError("state symbols are not unique")
        self.n_nodes = len(model.node_ids)
        self.node_ids = model.node_ids

    def __len__(self):
        return len(self.symbols)

    @property
    def n_x(self) -> int:
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, StateIndex) and self.symbols == other.symbols

    def __hash__(self):
        return hash(tuple(self.symbols))

    def __getitem__(self, symbol) -> int:
        return self.position[symbol]

    def pipe_slice(self, pipe_id) -> slice:
        start = self.pipe_offset[pipe_id]
        return slice(start, start + self.segments[pipe_id])

    def labels(self) -> list[str]:
        return [s if isinstance(s, str) else f"{s[0]}[{s[1]}]" for s in self.symbols]


@dataclass(frozen=True, eq=False)
class WqSystem:
    """Transition matrix of one hydraulic step plus its bookkeeping."""

    A: sp.csr_matrix
    index: StateIndex
    dt: float
    k_f: int
    step: int = 0
    lax: dict = field(default_factory=dict)          # pipe -> (beta, lo, mid, hi)
    reaction_rates: dict = field(default_factory=dict)
    diagnostics: tuple = ()

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def density(self) -> float:
        n = self.A.shape[0]
        return self.A.nnz / float(n * n)

    @cached_property
    def content_hash(self) -> str:
        A = self.A
        h = hashlib.sha1()
        h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.indptr, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.indices, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(A.data, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NoiseSpec:
    process_std: float = 0.0
    sensor_std: float = 0.1

    def __post_init__(self):
        if self.process_std < 0 or not self.sensor_std > 0:
            raise ValueError("need process_std >= 0 and sensor_std > 0")


def _pipe_order(index, pipe_id, forward):
    base = index.pipe_offset[pipe_id]
    n = index.segments[pipe_id]
    if forward:
        return [base + p for p in range(n)]
    return [base + n - 1 - p for p in range(n)]


def assemble(model: NetworkModel, profile: HydraulicProfile, disc: Discretization,
             step: int) -> WqSystem:
    """Build the sparse transition matrix for hydraulic step ``step``."""
    hyd = profile.steps[step]
    index = StateIndex(model, disc.segments)
    dt = disc.dt
    rows, cols, vals = [], [], []
    diagnostics = []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for r in model.reservoirs:
        i = index[r.id]
        put(i, i, 1.0)

    # downstream end of each active link: (node, source state column, q [m3/s])
    arrivals = {n: [] for n in model.node_ids}
    hosted = {}
    lax = {}
    rates = {}
    for p in model.pipes:
        rates[p.id] = p.reaction_rate
        v = hyd.velocities.get(p.id, 0.0)
        order = _pipe_order(index, p.id, v >= 0)
        n = len(order)
        react = p.reaction_rate * dt
        if v == 0.0:
            for i in order:
                put(i, i, 1.0 + react)
            hosted[p.id] = None
            continue
        forward = v > 0
        beta = abs(v) * dt / disc.dx[p.id]
        lo, mid, hi = lax_coefficients(beta)
        beta = min(beta, 1.0)
        lax[p.id] = (beta, lo, mid, hi)
        up, down = (p.start, p.end) if forward else (p.end, p.start)
        u = index[up]
        if n == 1:
            put(order[0], u, beta)
            put(order[0], order[0], 1.0 - beta + react)
        else:
            put(order[0], u, beta)
            put(order[0], order[0], 1.0 - lo + react)
            put(order[0], order[1], hi)
            for s in range(1, n - 1):
                put(order[s], order[s - 1], lo)
                put(order[s], order[s], mid + react)
                put(order[s], order[s + 1], hi)
            put(order[-1], order[-2], lo)
            put(order[-1], order[-1], mid + hi + react)
        q = abs(hyd.flows.get(p.id, 0.0)) * GPM_TO_M3S or abs(v) * p.area
        arrivals[down].append((order[-1], q))
        hosted[p.id] = order[-1]

    for link in list(model.pumps) + [v for v in model.valves if v.host_pipe is None]:
        i = index[link.id]
        q = hyd.flows.get(link.id, 0.0)
        if abs(q) <= ZERO_FLOW_GPM:
            put(i, i, 1.0)
            continue
        up, down = (link.start, link.end) if q > 0 else (link.end, link.start)
        put(i, index[up], 1.0)
        arrivals[down].append((i, abs(q) * GPM_TO_M3S))

    for valve in model.valves:
        if valve.host_pipe is None:
            continue
        i = index[valve.id]
        src = hosted.get(valve.host_pipe)
        put(i, src if src is not None else i, 1.0)

    for j in model.junctions:
        i = index[j.id]
        inflow = arrivals[j.id]
        total = sum(q for _, q in inflow)
        if not total >= 0:
            raise NegativeMixingDenominator(f"junction {j.id!r}: inflow sum {total}")
        if total == 0:
            put(i, i, 1.0)
            continue
        for c, q in inflow:
            put(i, c, q / total)

    for t in model.tanks:
        i = index[t.id]
        vol = hyd.tank_volumes.get(t.id, t.initial_volume)
        if not vol > 0:
            raise ZeroTankVolume(f"tank {t.id!r} volume {vol} at step {step}")
        rates[t.id] = t.reaction_rate
        inflow = arrivals[t.id]
        q_in = sum(q for _, q in inflow)
        keep = 1.0 - dt * q_in / vol + dt * t.reaction_rate
        if keep < 0:
            diagnostics.append(f"tank {t.id!r}: dt*Q_in/V > 1 at step {step}")
        put(i, i, keep)
        for c, q in inflow:
            put(i, c, dt * q / vol)

    n_x = index.n_x
    A = sp.csr_matrix((np.asarray(vals, dtype=float), (np.asarray(rows), np.asarray(cols))),
                      shape=(n_x, n_x))
    A.sum_duplicates()
    A.sort_indices()
    if not np.all(np.isfinite(A.data)):
        raise DynamicsError(f"non-finite entries in A at step {step}")
    return WqSystem(A, index, dt, disc.k_f, step, lax, rates, tuple(diagnostics))


def assemble_all(model, profile, plans, workers=None) -> list[WqSystem]:
    """Assemble every hydraulic step (independent, optionally threaded)."""
    steps = range(profile.n_steps)
    if workers is None or workers <= 1:
        return [assemble(model, profile, plans[k], k) for k in steps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: assemble(model, profile, plans[k], k), steps))


def initial_state(model: NetworkModel, index: StateIndex) -> np.ndarray:
    """Source concentrations at reservoirs, declared initial quality elsewhere."""
    x = np.zeros(index.n_x)
    for j in model.junctions:
        x[index[j.id]] = j.initial_concentration
    for r in model.reservoirs:
        x[index[r.id]] = r.source_concentration
    for t in model.tanks:
        x[index[t.id]] = t.initial_concentration
    return x


def remap_state(x, old: StateIndex, new: StateIndex) -> np.ndarray:
    """Carry a state across a change of segmentation.

    Non-pipe states copy by symbol; pipe states are resampled by linear
    interpolation over segment centres along the pipe.
    """
    if old == new:
        return np.array(x, copy=True)
    y = np.zeros(new.n_x)
    for sym in new.symbols:
        if isinstance(sym, str):
            y[new[sym]] = x[old[sym]]
    for pid, n_new in new.segments.items():
        n_old = old.segments[pid]
        src = np.asarray(x[old.pipe_slice(pid)])
        if n_old == n_new:
            y[new.pipe_slice(pid)] = src
            continue
        xo = (np.arange(n_old) + 0.5) / n_old
        xn = (np.arange(n_new) + 0.5) / n_new
        y[new.pipe_slice(pid)] = np.interp(xn, xo, src)
    return y


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    indices: list
    steps: int
    dt: float

    def __len__(self):
        return len(self.states)

    @property
    def constant_index(self) -> bool:
        return all(ix == self.indices[0] for ix in self.indices)

    def as_array(self) -> np.ndarray:
        if not self.constant_index:
            raise DimensionMismatch("state dimension varies along the trajectory")
        return np.vstack(self.states)

    def node_series(self, node_id) -> np.ndarray:
        return np.array([x[ix[node_id]] for x, ix in zip(self.states, self.indices)])

    def to_csv(self, fh, columns="all", include_initial=False):
        """Write ``time_s`` plus one column per state symbol.

        ``columns="nodes"`` keeps node and pump/valve states only, which is
        what a trajectory with changing segmentation can still export.
        """
        if not self.indices:
            return
        ref = self.indices[0]
        if columns == "all":
            if not self.constant_index:
                raise DimensionMismatch("use columns='nodes' when segmentation varies")
            symbols = ref.symbols
        else:
            symbols = [s for s in ref.symbols if isinstance(s, str)]
        labels = [s if isinstance(s, str) else f"{s[0]}[{s[1]}]" for s in symbols]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_s"] + labels)
        start = 0 if include_initial else 1
        for t, x, ix in zip(self.times[start:], self.states[start:], self.indices[start:]):
            writer.writerow([f"{t:.10g}"] + [f"{x[ix[s]]:.10g}" for s in symbols])

    def to_csv_string(self, **kw) -> str:
        buf = io.StringIO()
        self.to_csv(buf, **kw)
        return buf.getvalue()


def simulate(systems: Sequence[WqSystem], x0, duration_s: float, dt_hydraulic_s: float,
             noise: NoiseSpec | None = None, seed=None, record_every: int = 1) -> Trajectory:
    """Forward-simulate the time-varying model.

    ``systems[h]`` governs ``[h * dt_hydraulic_s, (h + 1) * dt_hydraulic_s)``.
    ``x0`` is expressed in ``systems[0].index``.  The result holds
    ``duration_s / dt + 1`` states when ``record_every == 1``.
    """
    if not systems:
        raise DimensionMismatch("no systems to simulate")
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(seed)
    dt = systems[0].dt
    if any(abs(s.dt - dt) > 1e-12 * dt for s in systems):
        raise DimensionMismatch("all systems must share one time step")
    x = np.asarray(x0, dtype=float).copy()
    index = systems[0].index
    if x.shape != (index.n_x,):
        raise DimensionMismatch(f"x0 has shape {x.shape}, expected ({index.n_x},)")
    n_steps = int(math.floor(duration_s / dt + 1e-9))
    if n_steps < 0:
        raise ValueError("duration must be >= 0")
    horizon = len(systems) * dt_hydraulic_s
    if n_steps * dt > horizon + 1e-9 * max(horizon, 1):
        raise ValueError(f"duration {duration_s} s exceeds the hydraulic horizon {horizon} s")
    record_every = max(1, int(record_every))
    times, states, indices = [0.0], [x.copy()], [index]
    for n in range(n_steps):
        h = min(int(math.floor(n * dt / dt_hydraulic_s + 1e-9)), len(systems) - 1)
        sysk = systems[h]
        if sysk.index != index:
            x = remap_state(x, index, sysk.index)
            index = sysk.index
        x = sysk.A @ x
        if noise.process_std > 0:
            x = x + rng.normal(0.0, noise.process_std, size=x.shape)
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            times.append((n + 1) * dt)
            states.append(x.copy())
            indices.append(index)
    return Trajectory(np.array(times), states, indices, n_steps, dt)


def bound_violations(trajectory: Trajectory, lo: float, hi: float, tol: float = 1e-9) -> list:
    """``(time, symbol, value)`` for states outside ``[lo, hi]``.

    Lax-Wendroff is dispersive, so small over- and undershoots are
    reported rather than clamped (clamping would make the model nonlinear).
    """
    out = []
    for t, x, ix in zip(trajectory.times, trajectory.states, trajectory.indices):
        bad = np.flatnonzero((x < lo - tol) | (x > hi + tol))
        out += [(float(t), ix.symbols[i], float(x[i])) for i in bad]
    return out


def measure(trajectory: Trajectory, sensors, sigma: float, seed=None) -> np.ndarray:
    """Noisy node readings ``y = C x + v`` for every recorded state."""
    rng = np.random.default_rng(seed)
    clean = np.array([[x[ix[s]] for s in sensors]
                      for x, ix in zip(trajectory.states, trajectory.indices)])
    clean = clean.reshape(len(trajectory.states), len(sensors))
    return clean + rng.normal(0.0, sigma, size=clean.shape) if sigma > 0 else clean


def export_coo(A, fh):
    """Write ``row col value`` lines (0-based) for debugging."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        fh.write(f"{r} {c} {v:.17g}\n")
