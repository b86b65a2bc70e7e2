"""Hydraulic profiles, demand expansion and pipe discretization planning.

Hydraulic states are inputs here, never solved.  Flows arrive in GPM (the
unit of the demand data) and are converted to m3/s for all water-quality
arithmetic; velocities are m/s and tank volumes m3.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyPattern,
    HydraulicsError,
    NonfiniteValue,
    StepCountMismatch,
    UnknownLinkId,
    UnstableRequest,
)
from .network import NetworkModel

log = logging.getLogger(__name__)

#: US gallons per minute to cubic metres per second.
GPM_TO_M3S = 3.785411784e-3 / 60.0

ZERO_FLOW_GPM = 1e-9
_BETA_SLACK = 1e-9


@dataclass(frozen=True)
class DemandProfile:
    """Junction demands [GPM] over ``n_steps * k_f`` columns."""

    junction_ids: tuple[str, ...]
    values: np.ndarray
    n_steps: int
    k_f: int

    def column(self, k: int) -> np.ndarray:
        return self.values[:, k]

    def step(self, h: int) -> dict:
        """Demands during hydraulic step ``h`` (constant within the step)."""
        col = self.values[:, h * self.k_f]
        return dict(zip(self.junction_ids, col.tolist()))


def expand_demands(base, pattern: Sequence[float], n_steps: int, k_f: int = 1,
                   junction_ids=None) -> DemandProfile:
    """Base demand times pattern multiplier, held constant within each step.

    ``base`` may be a mapping junction -> GPM, a sequence, or a scalar.  The
    pattern is tiled when shorter than ``n_steps``.
    """
    pattern = [float(p) for p in pattern]
    if not pattern:
        raise EmptyPattern("demand pattern has no multipliers")
    if any(p < 0 or not math.isfinite(p) for p in pattern):
        raise HydraulicsError("pattern multipliers must be finite and >= 0")
    if n_steps < 0 or k_f < 1:
        raise HydraulicsError("need n_steps >= 0 and k_f >= 1")
    if isinstance(base, Mapping):
        ids = tuple(base)
        base_vec = np.array([float(base[j]) for j in ids])
    else:
        base_vec = np.atleast_1d(np.asarray(base, dtype=float))
        ids = tuple(junction_ids) if junction_ids is not None else tuple(
            str(i) for i in range(base_vec.size))
    if np.any(base_vec < 0):
        raise HydraulicsError("base demands must be >= 0")
    mult = np.array([pattern[h % len(pattern)] for h in range(n_steps)])
    cols = np.repeat(mult, k_f)
    return DemandProfile(ids, np.outer(base_vec, cols), n_steps, k_f)


def network_demands(model: NetworkModel, n_steps: int, k_f: int = 1, scale=None) -> DemandProfile:
    """Demand profile from the junctions' own base demands and patterns."""
    scale = scale or {}
    ids = tuple(j.id for j in model.junctions)
    values = np.zeros((len(ids), n_steps * k_f))
    for row, j in enumerate(model.junctions):
        prof = expand_demands([j.base_demand * scale.get(j.id, 1.0)], model.pattern_of(j),
                              n_steps, k_f)
        values[row] = prof.values[0]
    return DemandProfile(ids, values, n_steps, k_f)


@dataclass(frozen=True)
class HydraulicStep:
    flows: dict        # link -> GPM, signed relative to declared start->end
    velocities: dict   # link -> m/s, signed
    tank_volumes: dict  # tank -> m3
    demands: dict      # junction -> GPM

    def flow_m3s(self, link_id) -> float:
        return self.flows.get(link_id, 0.0) * GPM_TO_M3S


@dataclass(frozen=True)
class HydraulicProfile:
    dt_hydraulic_s: float
    steps: tuple[HydraulicStep, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_document(self) -> dict:
        return {
            "dt_hydraulic_s": self.dt_hydraulic_s,
            "steps": [{"flows": s.flows, "velocities": s.velocities,
                       "tank_volumes": s.tank_volumes, "demands": s.demands}
                      for s in self.steps],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=1, sort_keys=True)


def _finite(value, where):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise NonfiniteValue(f"{where}: not a number: {value!r}") from None
    if not math.isfinite(v):
        raise NonfiniteValue(f"{where}: non-finite value {value!r}")
    return v


def load_hydraulics(document, model: NetworkModel, expected_steps: int | None = None
                    ) -> HydraulicProfile:
    """Validate a hydraulics JSON document (str, bytes or parsed dict).

    Schema::

        {"dt_hydraulic_s": 3600,
         "steps": [{"flows": {link: GPM}, "velocities": {link: m/s},
                    "tank_volumes": {tank: m3}, "demands": {junction: GPM}}, ...]}

    Missing pipe velocities are derived from flow / area; missing flows are
    taken as zero and missing tank volumes as the tank's initial volume, each
    with a warning.  Junction mass imbalance and flow/velocity sign conflicts
    are reported as warnings, not raised.
    """
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    if "steps" not in document:
        raise HydraulicsError("hydraulics document needs a 'steps' list")
    dt_h = _finite(document.get("dt_hydraulic_s", 3600.0), "dt_hydraulic_s")
    if dt_h <= 0:
        raise HydraulicsError("dt_hydraulic_s must be > 0")
    raw_steps = document["steps"]
    declared = document.get("n_steps")
    if declared is not None and int(declared) != len(raw_steps):
        raise StepCountMismatch(f"document declares {declared} steps but lists {len(raw_steps)}")
    if expected_steps is not None and expected_steps != len(raw_steps):
        raise StepCountMismatch(f"expected {expected_steps} hydraulic steps, got {len(raw_steps)}")

    links = {l.id: l for l in model.links()}
    pipes = {p.id: p for p in model.pipes}
    tanks = {t.id: t for t in model.tanks}
    junctions = {j.id for j in model.junctions}
    hosted = {v.id for v in model.valves if v.host_pipe is not None}
    warnings = []
    steps = []
    for k, raw in enumerate(raw_steps):
        flows, vels, vols, dems = {}, {}, {}, {}
        for lid, q in (raw.get("flows") or {}).items():
            if lid not in links:
                raise UnknownLinkId(f"step {k}: flow for unknown link {lid!r}")
            flows[lid] = _finite(q, f"step {k} flow {lid}")
        for lid, v in (raw.get("velocities") or {}).items():
            if lid not in links:
                raise UnknownLinkId(f"step {k}: velocity for unknown link {lid!r}")
            vels[lid] = _finite(v, f"step {k} velocity {lid}")
        for tid, vol in (raw.get("tank_volumes") or {}).items():
            if tid not in tanks:
                raise HydraulicsError(f"step {k}: volume for unknown tank {tid!r}")
            vols[tid] = _finite(vol, f"step {k} tank volume {tid}")
        for jid, d in (raw.get("demands") or {}).items():
            if jid not in junctions:
                raise HydraulicsError(f"step {k}: demand for unknown junction {jid!r}")
            dems[jid] = _finite(d, f"step {k} demand {jid}")

        for lid in links:
            if lid not in flows:
                if lid not in hosted:
                    warnings.append(f"step {k}: no flow for link {lid!r}; assuming 0")
                flows[lid] = 0.0
        for pid, pipe in pipes.items():
            q = flows[pid] * GPM_TO_M3S
            if pid not in vels:
                vels[pid] = q / pipe.area
            elif abs(flows[pid]) > ZERO_FLOW_GPM and vels[pid] != 0 and \
                    math.copysign(1, flows[pid]) != math.copysign(1, vels[pid]):
                warnings.append(f"step {k}: flow and velocity signs disagree on {pid!r}")
        for tid, tank in tanks.items():
            if tid not in vols:
                warnings.append(f"step {k}: no volume for tank {tid!r}; using initial volume")
                vols[tid] = tank.initial_volume
        for jid in junctions:
            dems.setdefault(jid, 0.0)

        # junction balance diagnostic
        inflow = {j: 0.0 for j in junctions}
        outflow = {j: 0.0 for j in junctions}
        for lid, link in links.items():
            if lid in hosted:
                continue
            q = flows[lid]
            src, dst = (link.start, link.end) if q >= 0 else (link.end, link.start)
            if dst in inflow:
                inflow[dst] += abs(q)
            if src in outflow:
                outflow[src] += abs(q)
        for j in junctions:
            scale = max(inflow[j], 1.0)
            if abs(inflow[j] - outflow[j] - dems[j]) > 1e-6 * scale:
                warnings.append(f"step {k}: junction {j!r} imbalance "
                                f"{inflow[j] - outflow[j] - dems[j]:.3g} GPM")
        steps.append(HydraulicStep(flows, vels, vols, dems))
    for w in warnings[:20]:
        log.warning(w)
    return HydraulicProfile(dt_h, tuple(steps), tuple(warnings))


def read_hydraulics(path, model, expected_steps=None) -> HydraulicProfile:
    with open(path, encoding="utf-8") as fh:
        return load_hydraulics(fh.read(), model, expected_steps)


# ---------------------------------------------------------------------------
# discretization


@dataclass(frozen=True)
class Fixed:
    """Same segment count(s) for every step; ``dt`` optional."""

    segments: int | Mapping[str, int]
    dt: float | None = None


@dataclass(frozen=True)
class Dynamic:
    """Segment counts chosen from the velocity and a target time step.

    ``scope="step"`` re-segments every hydraulic step; ``scope="horizon"``
    sizes each pipe once from its peak speed over all steps, so the state
    vector keeps one layout for the whole run.
    """

    dt_target: float
    max_segments: int = 1000
    scope: str = "step"


@dataclass(frozen=True)
class Discretization:
    """Pipe segmentation and time stepping for one hydraulic step."""

    segments: dict   # pipe -> s_L
    dx: dict         # pipe -> m
    dt: float
    k_f: int         # metric horizon in water-quality steps
    steps_per_hydraulic: float

    def courant(self, pipe_id, velocity) -> float:
        return abs(velocity) * self.dt / self.dx[pipe_id]

    @property
    def n_pipe_states(self) -> int:
        return int(sum(self.segments.values()))


def _horizon(window_s, dt):
    k = window_s / dt
    k_round = round(k)
    return max(1, int(k_round if abs(k - k_round) < 1e-9 else math.floor(k)))


def plan_discretization(model: NetworkModel, profile: HydraulicProfile, policy,
                        window_s: float = 300.0) -> list[Discretization]:
    """Per-step discretization satisfying ``dt <= dx / |v|`` on every pipe.

    ``Fixed``: the given counts are used; ``dt`` defaults to the largest
    stable step that divides ``window_s``; an explicit unstable ``dt`` raises
    :class:`UnstableRequest`.

    ``Dynamic``: ``s_L = floor(L / (|v| dt))`` clipped to ``[1, max_segments]``
    (stagnant pipes get ``max_segments``), so ``dt`` itself stays stable and
    doubling ``dt_target`` halves the counts.  With ``scope="horizon"`` the
    peak speed over all steps replaces the per-step speed.
    """
    pipes = model.pipes
    plans = []
    if isinstance(policy, Fixed):
        if isinstance(policy.segments, Mapping):
            seg = {p.id: int(policy.segments[p.id]) for p in pipes}
        else:
            seg = {p.id: int(policy.segments) for p in pipes}
        if any(s < 1 for s in seg.values()):
            raise HydraulicsError("segment counts must be >= 1")
        dx = {p.id: p.length / seg[p.id] for p in pipes}
        bound = math.inf
        for step in profile.steps:
            for p in pipes:
                v = abs(step.velocities.get(p.id, 0.0))
                if v > 0:
                    bound = min(bound, dx[p.id] / v)
        if policy.dt is not None:
            dt = float(policy.dt)
            if dt <= 0:
                raise UnstableRequest("dt must be > 0")
            if dt > bound * (1 + _BETA_SLACK):
                raise UnstableRequest(f"dt={dt} s exceeds the stability bound {bound:.6g} s")
        elif math.isinf(bound):
            dt = 1.0
        else:
            dt = window_s / math.ceil(window_s / bound - 1e-12)
        k_f = _horizon(window_s, dt)
        for _ in profile.steps:
            plans.append(Discretization(dict(seg), dict(dx), dt, k_f,
                                        profile.dt_hydraulic_s / dt))
        return plans

    if isinstance(policy, Dynamic):
        if policy.dt_target <= 0 or policy.max_segments < 1:
            raise UnstableRequest("dynamic policy needs dt_target > 0 and max_segments >= 1")
        if policy.scope not in ("step", "horizon"):
            raise HydraulicsError(f"unknown segmentation scope {policy.scope!r}")
        dt = float(policy.dt_target)
        for step in profile.steps:
            for p in pipes:
                v = abs(step.velocities.get(p.id, 0.0))
                if v > 0:
                    dt = min(dt, p.length / v)
        k_f = _horizon(window_s, dt)
        peak = {p.id: max((abs(st.velocities.get(p.id, 0.0)) for st in profile.steps), default=0.0)
                for p in pipes}
        for step in profile.steps:
            seg = {}
            for p in pipes:
                v = abs(step.velocities.get(p.id, 0.0))
                if policy.scope == "horizon":
                    v = peak[p.id]
                if v > 0:
                    # clip before flooring: tiny speeds give an infinite ratio
                    ratio = min(p.length / (v * dt) * (1 + _BETA_SLACK), policy.max_segments)
                    seg[p.id] = int(max(math.floor(ratio), 1))
                else:
                    seg[p.id] = int(policy.max_segments)
            dx = {p.id: p.length / seg[p.id] for p in pipes}
            plans.append(Discretization(seg, dx, dt, k_f, profile.dt_hydraulic_s / dt))
        return plans
    raise TypeError(f"unknown discretization policy {policy!r}")
