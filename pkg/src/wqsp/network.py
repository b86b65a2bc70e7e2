"""Water-network graph types and the INP-subset text format.

Units used throughout the format: lengths, diameters and tank levels in
metres, junction demands in GPM, reaction rates in 1/s, concentrations in
mg/L.  See ``docs/inp_format.md`` for the grammar table.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

from .errors import (
    DanglingEndpoint,
    DuplicateId,
    MalformedRow,
    MissingSection,
)

REQUIRED_SECTIONS = ("JUNCTIONS", "RESERVOIRS", "TANKS", "PIPES")
OPTIONAL_SECTIONS = (
    "PUMPS", "VALVES", "DEMANDS", "PATTERNS", "QUALITY", "REACTIONS", "TITLE", "END",
)

_TOKEN = re.compile(r"^[^\s;\[\]]+$")


@dataclass(frozen=True)
class Junction:
    id: str
    base_demand: float = 0.0
    pattern_id: str | None = None
    elevation: float = 0.0
    initial_concentration: float = 0.0


@dataclass(frozen=True)
class Reservoir:
    id: str
    source_concentration: float = 0.0
    head: float = 0.0


@dataclass(frozen=True)
class Tank:
    id: str
    diameter: float
    init_level: float
    min_level: float = 0.0
    max_level: float = 0.0
    elevation: float = 0.0
    initial_concentration: float = 0.0
    reaction_rate: float = 0.0

    @property
    def initial_volume(self) -> float:
        """Initial water volume [m3] of a cylindrical tank."""
        return math.pi * self.diameter ** 2 / 4.0 * self.init_level


@dataclass(frozen=True)
class Pipe:
    id: str
    start: str
    end: str
    length: float
    diameter: float
    reaction_rate: float = 0.0
    roughness: float = 100.0

    @property
    def area(self) -> float:
        return math.pi * self.diameter ** 2 / 4.0


@dataclass(frozen=True)
class Pump:
    id: str
    start: str
    end: str


@dataclass(frozen=True)
class Valve:
    id: str
    start: str
    end: str
    host_pipe: str | None = None
    diameter: float = 0.0
    kind: str = "TCV"
    setting: float = 0.0


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    subject: str | None = None

    def __str__(self):
        return f"{self.severity}: {self.code}: {self.message}"


@dataclass(frozen=True)
class NetworkModel:
    """Typed water network.

    Component tuples are kept in canonical (lexicographic by id) order, which
    fixes every downstream matrix index.
    """

    junctions: tuple[Junction, ...] = ()
    reservoirs: tuple[Reservoir, ...] = ()
    tanks: tuple[Tank, ...] = ()
    pipes: tuple[Pipe, ...] = ()
    pumps: tuple[Pump, ...] = ()
    valves: tuple[Valve, ...] = ()
    patterns: dict = field(default_factory=dict)
    title: str = ""
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def build(cls, junctions=(), reservoirs=(), tanks=(), pipes=(), pumps=(),
              valves=(), patterns=None, title="", warnings=()):
        key = lambda c: c.id  # noqa: E731
        return cls(
            junctions=tuple(sorted(junctions, key=key)),
            reservoirs=tuple(sorted(reservoirs, key=key)),
            tanks=tuple(sorted(tanks, key=key)),
            pipes=tuple(sorted(pipes, key=key)),
            pumps=tuple(sorted(pumps, key=key)),
            valves=tuple(sorted(valves, key=key)),
            patterns={k: tuple(v) for k, v in (patterns or {}).items()},
            title=title,
            warnings=tuple(warnings),
        )

    # -- node views -------------------------------------------------------
    @property
    def node_ids(self) -> list[str]:
        """Canonical node order: junctions, reservoirs, tanks."""
        return ([j.id for j in self.junctions] + [r.id for r in self.reservoirs]
                + [t.id for t in self.tanks])

    @property
    def link_ids(self) -> list[str]:
        return ([p.id for p in self.pipes] + [m.id for m in self.pumps]
                + [v.id for v in self.valves])

    def node_kind(self, node_id: str) -> str:
        return self._node_kinds[node_id]

    def link_kind(self, link_id: str) -> str:
        return self._link_kinds[link_id]

    @cached_property
    def _node_kinds(self):
        kinds = {}
        for kind, group in (("junction", self.junctions), ("reservoir", self.reservoirs),
                            ("tank", self.tanks)):
            for c in group:
                kinds.setdefault(c.id, kind)
        return kinds

    @cached_property
    def _link_kinds(self):
        kinds = {}
        for kind, group in (("pipe", self.pipes), ("pump", self.pumps), ("valve", self.valves)):
            for c in group:
                kinds.setdefault(c.id, kind)
        return kinds

    def links(self) -> Iterable:
        yield from self.pipes
        yield from self.pumps
        yield from self.valves

    def get_link(self, link_id):
        for link in self.links():
            if link.id == link_id:
                return link
        raise KeyError(link_id)

    def get_node(self, node_id):
        for group in (self.junctions, self.reservoirs, self.tanks):
            for c in group:
                if c.id == node_id:
                    return c
        raise KeyError(node_id)

    @property
    def counts(self) -> dict:
        return {
            "n_J": len(self.junctions), "n_R": len(self.reservoirs), "n_TK": len(self.tanks),
            "n_P": len(self.pipes), "n_M": len(self.pumps), "n_V": len(self.valves),
            "n_N": len(self.junctions) + len(self.reservoirs) + len(self.tanks),
        }

    def pattern_of(self, junction: Junction) -> tuple[float, ...]:
        if junction.pattern_id is None:
            return (1.0,)
        return self.patterns[junction.pattern_id]


# ---------------------------------------------------------------------------
# parsing


def _float(tok, lineno, what):
    try:
        value = float(tok)
    except ValueError:
        raise MalformedRow(f"{what}: expected a number, got {tok!r}", lineno) from None
    if not math.isfinite(value):
        raise MalformedRow(f"{what}: non-finite value {tok!r}", lineno)
    return value


def _split_sections(text):
    """Yield (section, lineno, tokens) for every data row."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise MalformedRow(f"bad section header {line!r}", lineno)
            section = line[1:-1].strip().upper()
            yield section, lineno, None
            if section == "END":
                return
            continue
        if section is None:
            raise MalformedRow("data row outside any section", lineno)
        yield section, lineno, line.split()


def parse_network(text: str) -> NetworkModel:
    """Parse an INP-subset document into a :class:`NetworkModel`.

    Raises
    ------
    MissingSection, DuplicateId, DanglingEndpoint, MalformedRow
        Each carries the offending line number in ``.line``.
    """
    seen = set()
    warnings = []
    junctions, reservoirs, tanks = {}, {}, {}
    pipes, pumps, valves = {}, {}, {}
    patterns = {}
    demand_rows, quality_rows, reaction_rows = [], [], []
    node_lines, link_lines = {}, {}
    title = []

    def claim_node(node_id, lineno):
        if not _TOKEN.match(node_id):
            raise MalformedRow(f"bad id {node_id!r}", lineno)
        if node_id in node_lines:
            raise DuplicateId(f"node id {node_id!r} already declared on line "
                              f"{node_lines[node_id]}", lineno)
        node_lines[node_id] = lineno

    def claim_link(link_id, lineno):
        if link_id in link_lines:
            raise DuplicateId(f"link id {link_id!r} already declared on line "
                              f"{link_lines[link_id]}", lineno)
        link_lines[link_id] = lineno

    def need(tokens, n, lineno, section):
        if len(tokens) < n:
            raise MalformedRow(f"[{section}] row needs at least {n} columns, got {len(tokens)}",
                               lineno)

    last_line = 0
    for section, lineno, tokens in _split_sections(text):
        last_line = lineno
        if tokens is None:
            seen.add(section)
            if section not in REQUIRED_SECTIONS + OPTIONAL_SECTIONS:
                warnings.append(f"line {lineno}: unknown section [{section}] skipped")
            continue
        if section == "TITLE":
            title.append(" ".join(tokens))
        elif section == "JUNCTIONS":
            need(tokens, 3, lineno, section)
            jid = tokens[0]
            claim_node(jid, lineno)
            demand = _float(tokens[2], lineno, "demand")
            junctions[jid] = Junction(jid, demand, tokens[3] if len(tokens) > 3 else None,
                                      _float(tokens[1], lineno, "elevation"))
        elif section == "RESERVOIRS":
            need(tokens, 2, lineno, section)
            claim_node(tokens[0], lineno)
            reservoirs[tokens[0]] = Reservoir(tokens[0], 0.0, _float(tokens[1], lineno, "head"))
        elif section == "TANKS":
            need(tokens, 6, lineno, section)
            claim_node(tokens[0], lineno)
            elev, init, lo, hi, diam = (_float(t, lineno, "tank") for t in tokens[1:6])
            tanks[tokens[0]] = Tank(tokens[0], diameter=diam, init_level=init, min_level=lo,
                                    max_level=hi, elevation=elev)
        elif section == "PIPES":
            need(tokens, 5, lineno, section)
            claim_link(tokens[0], lineno)
            rough = _float(tokens[5], lineno, "roughness") if len(tokens) > 5 else 100.0
            pipes[tokens[0]] = (lineno, Pipe(tokens[0], tokens[1], tokens[2],
                                             _float(tokens[3], lineno, "length"),
                                             _float(tokens[4], lineno, "diameter"),
                                             roughness=rough))
        elif section == "PUMPS":
            need(tokens, 3, lineno, section)
            claim_link(tokens[0], lineno)
            pumps[tokens[0]] = (lineno, Pump(tokens[0], tokens[1], tokens[2]))
        elif section == "VALVES":
            need(tokens, 3, lineno, section)
            claim_link(tokens[0], lineno)
            host = None
            rest = []
            for tok in tokens[3:]:
                if tok.lower().startswith("host="):
                    host = tok.split("=", 1)[1]
                else:
                    rest.append(tok)
            diam = _float(rest[0], lineno, "valve diameter") if len(rest) > 0 else 0.0
            kind = rest[1].upper() if len(rest) > 1 else "TCV"
            setting = _float(rest[2], lineno, "valve setting") if len(rest) > 2 else 0.0
            valves[tokens[0]] = (lineno, Valve(tokens[0], tokens[1], tokens[2], host, diam,
                                               kind, setting))
        elif section == "PATTERNS":
            need(tokens, 2, lineno, section)
            values = [_float(t, lineno, "pattern multiplier") for t in tokens[1:]]
            patterns.setdefault(tokens[0], []).extend(values)
        elif section == "DEMANDS":
            need(tokens, 2, lineno, section)
            demand_rows.append((lineno, tokens))
        elif section == "QUALITY":
            need(tokens, 2, lineno, section)
            quality_rows.append((lineno, tokens))
        elif section == "REACTIONS":
            reaction_rows.append((lineno, tokens))
        else:
            # rows of unknown sections are ignored; the header already warned
            pass

    if not seen:
        raise MissingSection("document has no sections; [JUNCTIONS], [RESERVOIRS], "
                             "[TANKS] and [PIPES] are required", max(last_line, 1))
    for name in REQUIRED_SECTIONS:
        if name not in seen:
            raise MissingSection(f"required section [{name}] not found", last_line)

    for group in (pipes, pumps, valves):
        for lineno, link in group.values():
            for end in (link.start, link.end):
                if end not in node_lines:
                    raise DanglingEndpoint(end, lineno)
    for lineno, valve in valves.values():
        if valve.host_pipe is not None and valve.host_pipe not in pipes:
            raise MalformedRow(f"valve {valve.id!r} host pipe {valve.host_pipe!r} unknown",
                               lineno)

    for lineno, tokens in demand_rows:
        jid = tokens[0]
        if jid not in junctions:
            raise MalformedRow(f"[DEMANDS] references unknown junction {jid!r}", lineno)
        j = junctions[jid]
        junctions[jid] = Junction(j.id, _float(tokens[1], lineno, "demand"),
                                  tokens[2] if len(tokens) > 2 else j.pattern_id,
                                  j.elevation, j.initial_concentration)

    for lineno, tokens in quality_rows:
        nid, value = tokens[0], _float(tokens[1], lineno, "quality")
        if nid in junctions:
            j = junctions[nid]
            junctions[nid] = Junction(j.id, j.base_demand, j.pattern_id, j.elevation, value)
        elif nid in reservoirs:
            reservoirs[nid] = Reservoir(nid, value, reservoirs[nid].head)
        elif nid in tanks:
            t = tanks[nid]
            tanks[nid] = Tank(t.id, t.diameter, t.init_level, t.min_level, t.max_level,
                              t.elevation, value, t.reaction_rate)
        else:
            raise MalformedRow(f"[QUALITY] references unknown node {nid!r}", lineno)

    pipe_rates, tank_rates, global_bulk = {}, {}, None
    for lineno, tokens in reaction_rows:
        head = tokens[0].upper()
        if head == "GLOBAL" and len(tokens) == 3 and tokens[1].upper() == "BULK":
            global_bulk = _float(tokens[2], lineno, "reaction rate")
        elif head == "BULK" and len(tokens) == 3:
            if tokens[1] not in pipes:
                raise MalformedRow(f"[REACTIONS] unknown pipe {tokens[1]!r}", lineno)
            pipe_rates[tokens[1]] = _float(tokens[2], lineno, "reaction rate")
        elif head == "TANK" and len(tokens) == 3:
            if tokens[1] not in tanks:
                raise MalformedRow(f"[REACTIONS] unknown tank {tokens[1]!r}", lineno)
            tank_rates[tokens[1]] = _float(tokens[2], lineno, "reaction rate")
        else:
            raise MalformedRow("[REACTIONS] expects 'GLOBAL BULK r', 'BULK id r' or "
                               "'TANK id r'", lineno)

    pipe_list = []
    for pid, (_, p) in pipes.items():
        rate = pipe_rates.get(pid, global_bulk if global_bulk is not None else 0.0)
        pipe_list.append(Pipe(p.id, p.start, p.end, p.length, p.diameter, rate, p.roughness))
    tank_list = []
    for tid, t in tanks.items():
        rate = tank_rates.get(tid, global_bulk if global_bulk is not None else 0.0)
        tank_list.append(Tank(t.id, t.diameter, t.init_level, t.min_level, t.max_level,
                              t.elevation, t.initial_concentration, rate))

    return NetworkModel.build(
        junctions=junctions.values(), reservoirs=reservoirs.values(), tanks=tank_list,
        pipes=pipe_list, pumps=[p for _, p in pumps.values()],
        valves=[v for _, v in valves.values()], patterns=patterns,
        title=" ".join(title), warnings=warnings,
    )


def load_network(path) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


def _fmt(x):
    return repr(float(x))


def serialize(model: NetworkModel) -> str:
    """Render a model back to INP-subset text (parse(serialize(m)) == m)."""
    out = []
    if model.title:
        out += ["[TITLE]", model.title, ""]
    out.append("[JUNCTIONS]")
    out.append(";ID  Elev  Demand[GPM]  Pattern")
    for j in model.junctions:
        row = f"{j.id} {_fmt(j.elevation)} {_fmt(j.base_demand)}"
        if j.pattern_id is not None:
            row += f" {j.pattern_id}"
        out.append(row)
    out += ["", "[RESERVOIRS]", ";ID  Head"]
    out += [f"{r.id} {_fmt(r.head)}" for r in model.reservoirs]
    out += ["", "[TANKS]", ";ID  Elev  InitLevel  MinLevel  MaxLevel  Diameter"]
    out += [f"{t.id} {_fmt(t.elevation)} {_fmt(t.init_level)} {_fmt(t.min_level)} "
            f"{_fmt(t.max_level)} {_fmt(t.diameter)}" for t in model.tanks]
    out += ["", "[PIPES]", ";ID  Node1  Node2  Length[m]  Diameter[m]  Roughness"]
    out += [f"{p.id} {p.start} {p.end} {_fmt(p.length)} {_fmt(p.diameter)} {_fmt(p.roughness)}"
            for p in model.pipes]
    out += ["", "[PUMPS]"]
    out += [f"{m.id} {m.start} {m.end}" for m in model.pumps]
    out += ["", "[VALVES]"]
    for v in model.valves:
        row = f"{v.id} {v.start} {v.end} {_fmt(v.diameter)} {v.kind} {_fmt(v.setting)}"
        if v.host_pipe is not None:
            row += f" host={v.host_pipe}"
        out.append(row)
    out += ["", "[PATTERNS]"]
    for pid, values in model.patterns.items():
        out.append(f"{pid} " + " ".join(_fmt(v) for v in values))
    out += ["", "[QUALITY]"]
    for j in model.junctions:
        out.append(f"{j.id} {_fmt(j.initial_concentration)}")
    for r in model.reservoirs:
        out.append(f"{r.id} {_fmt(r.source_concentration)}")
    for t in model.tanks:
        out.append(f"{t.id} {_fmt(t.initial_concentration)}")
    out += ["", "[REACTIONS]"]
    out += [f"BULK {p.id} {_fmt(p.reaction_rate)}" for p in model.pipes]
    out += [f"TANK {t.id} {_fmt(t.reaction_rate)}" for t in model.tanks]
    out += ["", "[END]", ""]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# validation


def validate(model: NetworkModel) -> list[Diagnostic]:
    """Check model invariants; returns an empty list iff all hold."""
    diags = []

    def err(code, msg, subject=None):
        diags.append(Diagnostic("error", code, msg, subject))

    def warn(code, msg, subject=None):
        diags.append(Diagnostic("warning", code, msg, subject))

    nodes = {}
    for c in list(model.junctions) + list(model.reservoirs) + list(model.tanks):
        if not c.id or not _TOKEN.match(c.id):
            err("BadId", f"invalid node id {c.id!r}", c.id)
        if c.id in nodes:
            err("DuplicateId", f"node id {c.id!r} appears more than once", c.id)
        nodes[c.id] = c
    links = set()
    for link in model.links():
        if link.id in links:
            err("DuplicateId", f"link id {link.id!r} appears more than once", link.id)
        links.add(link.id)
        for end in (link.start, link.end):
            if end not in nodes:
                err("DanglingEndpoint", f"link {link.id!r} references missing node {end!r}",
                    link.id)
        if link.start == link.end:
            warn("SelfLoop", f"link {link.id!r} starts and ends at {link.start!r}", link.id)

    for p in model.pipes:
        if not (p.length > 0 and math.isfinite(p.length)):
            err("NonpositiveLength", f"pipe {p.id!r} length {p.length} must be > 0", p.id)
        if not (p.diameter > 0 and math.isfinite(p.diameter)):
            err("NonpositiveDiameter", f"pipe {p.id!r} diameter {p.diameter} must be > 0", p.id)
        if not math.isfinite(p.reaction_rate):
            err("NonfiniteReaction", f"pipe {p.id!r} reaction rate is not finite", p.id)

    pipe_ids = {p.id for p in model.pipes}
    for v in model.valves:
        if v.host_pipe is not None and v.host_pipe not in pipe_ids:
            err("UnknownHostPipe", f"valve {v.id!r} host pipe {v.host_pipe!r} missing", v.id)

    for j in model.junctions:
        if not math.isfinite(j.base_demand) or j.base_demand < 0:
            err("NegativeDemand", f"junction {j.id!r} base demand {j.base_demand}", j.id)
        if j.pattern_id is not None and j.pattern_id not in model.patterns:
            err("UnknownPattern", f"junction {j.id!r} uses undefined pattern "
                f"{j.pattern_id!r}", j.id)
        if j.initial_concentration < 0:
            err("NegativeConcentration", f"junction {j.id!r} initial quality < 0", j.id)
    for r in model.reservoirs:
        if not (r.source_concentration >= 0):
            err("NegativeConcentration", f"reservoir {r.id!r} source quality < 0", r.id)
    for t in model.tanks:
        if not (t.initial_volume > 0):
            err("NonpositiveTankVolume", f"tank {t.id!r} initial volume must be > 0", t.id)
        if not math.isfinite(t.reaction_rate):
            err("NonfiniteReaction", f"tank {t.id!r} reaction rate is not finite", t.id)
        if t.initial_concentration < 0:
            err("NegativeConcentration", f"tank {t.id!r} initial quality < 0", t.id)
    for pid, values in model.patterns.items():
        if not values:
            err("EmptyPattern", f"pattern {pid!r} has no multipliers", pid)
        elif any(v < 0 for v in values):
            err("NegativeMultiplier", f"pattern {pid!r} has negative multipliers", pid)
    return diags
