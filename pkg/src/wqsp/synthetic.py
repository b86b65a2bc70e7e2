"""Bundled example networks and a linear flow-split hydraulics generator.

The generator is not a hydraulic solver.  It spreads the nodal
injections (sources, demands, tank exchange) over the graph with a
weighted Laplacian whose conductance is ``D**4.87 / L`` per pipe, which
gives mass-balanced, plausibly distributed flows with reversals when
pumps switch off.  All numbers produced here are synthetic.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .hydraulics import GPM_TO_M3S, HydraulicProfile, HydraulicStep
from .network import (Junction, NetworkModel, Pipe, Pump, Reservoir, Tank, Valve)

FT = 0.3048
INCH = 0.0254
BULK_RATE = -0.5 / 86400.0          # 1/s, a typical chlorine bulk decay

PATTERN_I = (1.0, 1.0, 1.2, 1.2, 1.4, 1.4, 1.6, 1.6, 1.4, 1.4, 1.2, 1.2,
             1.0, 1.0, 0.8, 0.8, 0.6, 0.6, 0.4, 0.4, 0.6, 0.6, 0.8, 0.8)
PATTERN_II = (0.5, 0.4, 0.4, 0.5, 0.8, 1.3, 1.8, 1.9, 1.6, 1.2, 1.0, 0.9,
              0.9, 0.8, 0.8, 0.9, 1.1, 1.5, 1.9, 1.8, 1.4, 1.0, 0.7, 0.6)
PATTERN_III = tuple(round(2.0 - v, 2) for v in PATTERN_II)
PATTERN_FLAT = tuple(round(1.0 + 0.05 * math.sin(2 * math.pi * h / 24), 4) for h in range(24))


def three_node() -> NetworkModel:
    """Reservoir R1 -> pump M1 -> junction J2 -> pipe P1 -> tank T3."""
    return NetworkModel.build(
        junctions=[Junction("J2", 2000.0, "PAT1", 0.0, 0.0)],
        reservoirs=[Reservoir("R1", 0.8, 0.0)],
        tanks=[Tank("T3", 8.0, 10.0, 0.0, 20.0, 0.0, 0.0, BULK_RATE)],
        pipes=[Pipe("P1", "J2", "T3", 500.0, 0.25, BULK_RATE, 100.0)],
        pumps=[Pump("M1", "R1", "J2")],
        patterns={"PAT1": PATTERN_I},
        title="three-node example",
    )


_NET1_PIPES = [
    ("P10", "J10", "J11", 10530, 18), ("P11", "J11", "J12", 5280, 14),
    ("P12", "J12", "J13", 5280, 10), ("P21", "J21", "J22", 5280, 10),
    ("P22", "J22", "J23", 5280, 12), ("P31", "J31", "J32", 5280, 6),
    ("P110", "T2", "J12", 200, 18), ("P111", "J11", "J21", 5280, 10),
    ("P112", "J12", "J22", 5280, 12), ("P113", "J13", "J23", 5280, 8),
    ("P121", "J21", "J31", 5280, 8), ("P122", "J22", "J32", 5280, 6),
]
NET1_BASE_DEMANDS = {
    1: {"J10": 0, "J11": 150, "J12": 150, "J13": 100, "J21": 150,
        "J22": 200, "J23": 150, "J31": 100, "J32": 100},
    # heavier on the east side of the grid
    2: {"J10": 0, "J11": 80, "J12": 250, "J13": 220, "J21": 80,
        "J22": 250, "J23": 230, "J31": 60, "J32": 230},
    # heavier on the west side
    3: {"J10": 0, "J11": 260, "J12": 90, "J13": 60, "J21": 260,
        "J22": 110, "J23": 70, "J31": 250, "J32": 100},
}


def net1(base: int = 1, pattern: Sequence[float] = PATTERN_I) -> NetworkModel:
    """Looped 9-junction network with one reservoir, one tank and one pump."""
    dem = NET1_BASE_DEMANDS[base]
    return NetworkModel.build(
        junctions=[Junction(j, float(d), "PAT1", 0.0, 0.0) for j, d in dem.items()],
        reservoirs=[Reservoir("R9", 1.0, 0.0)],
        tanks=[Tank("T2", 50.5 * FT, 120 * FT, 100 * FT, 150 * FT, 0.0, 0.5, BULK_RATE)],
        pipes=[Pipe(pid, a, b, L * FT, D * INCH, BULK_RATE, 100.0)
               for pid, a, b, L, D in _NET1_PIPES],
        pumps=[Pump("PU9", "R9", "J10")],
        patterns={"PAT1": tuple(pattern)},
        title="Net1-like looped network (synthetic data)",
    )


GRID_ROWS, GRID_COLS = 9, 10
GRID_TANKS = {"T1": "J0505", "T2": "J0210", "T3": "J0801"}
GRID_SOURCES = {"R1": "J0101", "R2": "J0910"}


def _jid(r, c):
    return f"J{r + 1:02d}{c + 1:02d}"


def grid(seed: int = 3, pattern: Sequence[float] = PATTERN_FLAT,
         length_range=(150.0, 450.0)) -> NetworkModel:
    """90-junction grid with 2 pumped reservoirs and 3 tanks (95 nodes).

    Geometry and demands are drawn from ``numpy.random.default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    junctions = []
    for r in range(GRID_ROWS):
        for c in range(GRID_COLS):
            d = float(np.round(rng.uniform(10.0, 60.0), 1))
            junctions.append(Junction(_jid(r, c), d, "PAT1", 0.0, 0.0))
    diameters = (0.15, 0.2, 0.25, 0.3)
    pipes = []

    def add(pid, a, b):
        L = float(np.round(rng.uniform(*length_range), 1))
        D = float(diameters[rng.integers(len(diameters))])
        pipes.append(Pipe(pid, a, b, L, D, BULK_RATE, 100.0))

    for r in range(GRID_ROWS):
        for c in range(GRID_COLS - 1):
            add(f"PH{r + 1:02d}{c + 1:02d}", _jid(r, c), _jid(r, c + 1))
    for r in range(GRID_ROWS - 1):
        for c in range(GRID_COLS):
            add(f"PV{r + 1:02d}{c + 1:02d}", _jid(r, c), _jid(r + 1, c))
    for t, j in GRID_TANKS.items():
        pipes.append(Pipe(f"P{t}", t, j, 100.0, 0.3, BULK_RATE, 100.0))
    return NetworkModel.build(
        junctions=junctions,
        reservoirs=[Reservoir(rid, 1.0, 0.0) for rid in GRID_SOURCES],
        tanks=[Tank(t, 15.0, 5.0, 1.0, 10.0, 0.0, 0.5, BULK_RATE) for t in GRID_TANKS],
        pipes=pipes,
        pumps=[Pump(f"PU{rid[1:]}", rid, j) for rid, j in GRID_SOURCES.items()],
        patterns={"PAT1": tuple(pattern)},
        title="grid network, 95 nodes (synthetic data)",
    )


def _conductances(model, active_pumps):
    gp = {p.id: p.diameter ** 4.87 / p.length for p in model.pipes}
    big = 1e3 * max(gp.values()) if gp else 1.0
    g = dict(gp)
    for m in model.pumps:
        g[m.id] = big if m.id in active_pumps else 0.0
    for v in model.valves:
        if v.host_pipe is None:
            g[v.id] = big
    return g


def generate_hydraulics(model: NetworkModel, n_steps: int = 24, dt_hydraulic_s: float = 3600.0,
                        pump_schedule: Mapping[str, Sequence[int]] | None = None,
                        tank_fraction: float = 0.1, demand_scale: float = 1.0
                        ) -> HydraulicProfile:
    """Synthetic hydraulics by Laplacian flow splitting.

    Parameters
    ----------
    model : NetworkModel
    n_steps : int
        Number of hydraulic steps.
    dt_hydraulic_s : float
        Step length in seconds.
    pump_schedule : mapping pump id -> sequence of 0/1, optional
        On/off per step (cycled).  Pumps run continuously by default.
    tank_fraction : float
        While any pump runs, tanks absorb this fraction of total demand on
        top of it.  With all pumps off the tanks supply the demand.
    demand_scale : float
        Multiplier on every junction demand.

    Returns
    -------
    HydraulicProfile
        Flows in GPM, velocities in m/s, tank volumes in m3.
    """
    nodes = list(model.node_ids)
    pos = {n: i for i, n in enumerate(nodes)}
    links = list(model.links())
    pump_src = {m.id: m.start for m in model.pumps}
    volumes = {t.id: t.initial_volume for t in model.tanks}
    hosted = {v.id: v.host_pipe for v in model.valves if v.host_pipe is not None}
    steps = []
    for k in range(n_steps):
        on = set()
        for m in model.pumps:
            sched = (pump_schedule or {}).get(m.id)
            if sched is None or sched[k % len(sched)]:
                on.add(m.id)
        g = _conductances(model, on)
        demands = {}
        inj = np.zeros(len(nodes))
        for j in model.junctions:
            pat = model.pattern_of(j)
            mult = pat[k % len(pat)] if pat else 1.0
            d = j.base_demand * mult * demand_scale
            demands[j.id] = d
            inj[pos[j.id]] -= d
        total = sum(demands.values())
        sources = sorted({pump_src[m] for m in on})
        if sources:
            for rid in sources:
                inj[pos[rid]] += total * (1 + tank_fraction) / len(sources)
            for t in model.tanks:
                inj[pos[t.id]] -= total * tank_fraction / max(1, len(model.tanks))
        elif model.tanks:
            for t in model.tanks:
                inj[pos[t.id]] += total / len(model.tanks)
        rows, cols, vals = [], [], []
        for l in links:
            gl = g.get(l.id, 0.0)
            if gl <= 0.0:
                continue
            a, b = pos[l.start], pos[l.end]
            rows += [a, b, a, b]
            cols += [a, b, b, a]
            vals += [gl, gl, -gl, -gl]
        Lap = sp.csr_matrix((vals, (rows, cols)), shape=(len(nodes), len(nodes)))
        n_comp, labels = csgraph.connected_components(Lap != 0, directed=False)
        head = np.zeros(len(nodes))
        for c in range(n_comp):
            members = np.flatnonzero(labels == c)
            if len(members) < 2:
                continue
            free = members[1:]
            sub = Lap[free][:, free].tocsc()
            head[free] = spla.spsolve(sub, inj[free]) if len(free) > 1 else inj[free] / sub[0, 0]
        flows, vels = {}, {}
        for l in links:
            if l.id in hosted:
                continue
            gl = g.get(l.id, 0.0)
            q = gl * (head[pos[l.start]] - head[pos[l.end]]) if gl > 0 else 0.0
            q = float(np.round(q, 9)) + 0.0
            flows[l.id] = q
        for p in model.pipes:
            vels[p.id] = flows[p.id] * GPM_TO_M3S / p.area
        for vid, host in hosted.items():
            flows[vid] = flows[host]
        step_vols = dict(volumes)
        steps.append(HydraulicStep(flows, vels, step_vols, demands))
        for t in model.tanks:
            net = 0.0
            for l in links:
                if l.id in hosted:
                    continue
                if l.end == t.id:
                    net += flows[l.id]
                elif l.start == t.id:
                    net -= flows[l.id]
            volumes[t.id] = max(volumes[t.id] + net * GPM_TO_M3S * dt_hydraulic_s,
                                0.1 * t.initial_volume)
    return HydraulicProfile(dt_hydraulic_s, tuple(steps), ())


NET1_PUMP_SCHEDULE = {"PU9": (1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1,
                              1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1)}

BUNDLES = ("three_node", "net1", "grid")


def bundle(name: str) -> tuple[NetworkModel, list[tuple[str, HydraulicProfile]]]:
    """A bundled network with its synthetic hydraulic profiles.

    Returns ``(model, [(profile_name, hydraulics), ...])``.  Profiles of one
    bundle may use different demand data; their model is the same graph.
    """
    if name == "three_node":
        m = three_node()
        return m, [("pattern1", generate_hydraulics(m, tank_fraction=0.1))]
    if name == "net1":
        m = net1()
        out = []
        variants = [("base1", 1, PATTERN_I), ("base2", 2, PATTERN_I), ("base3", 3, PATTERN_I),
                    ("pattern2", 1, PATTERN_II), ("pattern3", 1, PATTERN_III)]
        for label, base, pat in variants:
            hm = net1(base, pat)
            out.append((label, generate_hydraulics(hm, pump_schedule=NET1_PUMP_SCHEDULE,
                                                   tank_fraction=0.3)))
        return m, out
    if name == "grid":
        m = grid()
        return m, [("flat", generate_hydraulics(m, tank_fraction=0.1))]
    raise KeyError(f"unknown bundle {name!r}; choose from {BUNDLES}")
