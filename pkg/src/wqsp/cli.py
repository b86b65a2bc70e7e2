"""Command-line entry point: ``wqsp <command> [--config FILE] [options]``.

Commands: place, simulate, evaluate, estimate, inspect, gen-hydraulics.
Exit codes: 0 ok, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, WqspError

DEFAULTS = {
    "network": None,
    "hydraulics": None,
    "policy": "fixed",
    "segments": 10,
    "dt": None,
    "max_segments": 1000,
    "scope": "step",
    "window_s": 300.0,
    "r": 1,
    "metric": "kf_degenerate",
    "sigma": 0.1,
    "prior_var": 5e-3,
    "process_std": 0.0,
    "seed": None,
    "output": "out",
    "workers": None,
    "lazy": False,
    "final_rule": "occupation",
    "steps": None,
    "count": 10,
    "duration_s": None,
    "record_every": 1,
    "columns": "nodes",
    "placement": None,
    "sensors": None,
    "profile": 0,
    "plots": True,
}
# keys that never change results; kept out of placement.json
_RUN_ONLY = {"output", "workers", "plots"}


def _bundled_config(name: str) -> Path:
    path = resources.files("wqsp") / "data" / name / "config.json"
    if not path.is_file():
        raise ConfigError(f"no bundled config {name!r}")
    return Path(str(path))


def _coerce(key, text):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve_paths(values: dict, base: Path):
    """Make input paths absolute relative to ``base`` (in place)."""
    for key in ("network", "placement"):
        if values.get(key) and not os.path.isabs(values[key]):
            values[key] = str((base / values[key]).resolve())
    if values.get("hydraulics"):
        hs = values["hydraulics"] if isinstance(values["hydraulics"], list) else [values["hydraulics"]]
        values["hydraulics"] = [h if os.path.isabs(h) else str((base / h).resolve()) for h in hs]


def load_config(args) -> dict:
    """Merge defaults, the JSON config file, ``--set`` pairs and flags."""
    cfg = dict(DEFAULTS)
    src = None
    if getattr(args, "bundle", None):
        src = _bundled_config(args.bundle)
    elif getattr(args, "config", None):
        src = Path(args.config)
    if src is not None:
        try:
            data = json.loads(src.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {src}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        _resolve_paths(data, src.parent)
        cfg.update(data)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _coerce(k, v)
    for key in ("network", "hydraulics", "output", "r", "seed", "placement", "workers",
                "duration_s", "count", "policy", "segments", "dt", "window_s", "metric"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    _resolve_paths(overrides, Path.cwd())
    cfg.update(overrides)
    if getattr(args, "no_plots", False):
        cfg["plots"] = False
    return cfg


def _check(cfg, need=("network", "hydraulics"), seeded=False):
    for key in need:
        if not cfg.get(key):
            raise ConfigError(f"config key {key!r} is required")
    r = cfg["r"]
    if not isinstance(r, int) or isinstance(r, bool) or r < 1:
        raise ConfigError(f"r must be a positive integer, got {r!r}")
    if cfg["policy"] not in ("fixed", "dynamic"):
        raise ConfigError("policy must be 'fixed' or 'dynamic'")
    if cfg["metric"] not in ("kf_degenerate", "general"):
        raise ConfigError("metric must be 'kf_degenerate' or 'general'")
    if cfg["final_rule"] not in ("occupation", "set"):
        raise ConfigError("final_rule must be 'occupation' or 'set'")
    if not (isinstance(cfg["window_s"], (int, float)) and cfg["window_s"] > 0):
        raise ConfigError("window_s must be > 0")
    if seeded and cfg["seed"] is None:
        raise ConfigError("seed is required for this command")
    if not isinstance(cfg["count"], int) or cfg["count"] < 1:
        raise ConfigError("count must be a positive integer")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory plus the manifest being collected."""

    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.timing = {}
        self.files = []
        self.diagnostics = []

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        yield
        self.timing[name] = round(time.perf_counter() - t0, 6)

    def write(self, name, text):
        path = self.out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        self.files.append(name)
        return path

    def figure(self, fn, name, *a, **kw):
        if self.cfg.get("plots"):
            fn(*a, self.out / name, **kw)
            self.files.append(name)

    def finish(self):
        inputs = {}
        for key in ("network", "placement"):
            if self.cfg.get(key) and Path(self.cfg[key]).is_file():
                inputs[self.cfg[key]] = _sha256(self.cfg[key])
        for h in self.cfg.get("hydraulics") or []:
            if Path(h).is_file():
                inputs[h] = _sha256(h)
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg,
            "inputs_sha256": inputs,
            "timing_s": self.timing,
            "outputs": sorted(self.files),
            "diagnostics": self.diagnostics,
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _policy(cfg):
    from .hydraulics import Dynamic, Fixed
    if cfg["policy"] == "fixed":
        return Fixed(cfg["segments"], dt=cfg["dt"])
    if cfg["dt"] is None:
        raise ConfigError("dynamic policy needs dt (the target time step)")
    return Dynamic(float(cfg["dt"]), int(cfg["max_segments"]), cfg["scope"])


def _load_inputs(cfg):
    from .hydraulics import read_hydraulics
    from .network import load_network
    model = load_network(cfg["network"])
    profiles = [read_hydraulics(h, model) for h in cfg["hydraulics"]]
    return model, profiles


def _metric(cfg):
    from .placement import MetricConfig
    return MetricConfig(cfg["metric"], float(cfg["sigma"]), float(cfg["prior_var"]),
                        float(cfg["process_std"]) ** 2)


def _workers(cfg):
    return int(cfg["workers"]) if cfg.get("workers") else (os.cpu_count() or 1)


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_place(cfg) -> int:
    _check(cfg)
    from . import plotting
    from .placement import solve_wqsp
    run = Run("place", cfg)
    with run.phase("load"):
        model, profiles = _load_inputs(cfg)
    with run.phase("place"):
        res = solve_wqsp(model, profiles, _policy(cfg), cfg["r"], window_s=float(cfg["window_s"]),
                         metric=_metric(cfg), lazy=bool(cfg["lazy"]),
                         final_rule=cfg["final_rule"], workers=_workers(cfg), steps=cfg["steps"])
    res.config = {k: v for k, v in sorted(cfg.items()) if k not in _RUN_ONLY}
    run.write("placement.json", res.to_json())
    run.write("occupation.csv", res.occupation_csv())
    lines = ["step,profile,rank,node,gain,f"]
    for (k, i), tr in sorted(res.traces.items()):
        lines.append(f"{k},{i},0,,,{_fmt(tr.values[0])}")
        for j, (n, g) in enumerate(zip(tr.nodes, tr.gains), start=1):
            lines.append(f"{k},{i},{j},{n},{_fmt(g)},{_fmt(tr.values[j])}")
    run.write("metric_trace.csv", "\n".join(lines) + "\n")
    with run.phase("plots"):
        run.figure(plotting.occupation_bar, "occupation.png", res)
        run.figure(plotting.placement_matrix, "placement_matrix.png", res)
        run.figure(plotting.metric_trace, "metric_trace.png", res.traces)
    run.finish()
    print("selected: " + " ".join(res.selected))
    return 0


def cmd_simulate(cfg) -> int:
    _check(cfg, seeded=True)
    from . import plotting
    from .dynamics import NoiseSpec, assemble_all, bound_violations, initial_state, simulate
    from .hydraulics import plan_discretization
    run = Run("simulate", cfg)
    with run.phase("load"):
        model, profiles = _load_inputs(cfg)
        prof = profiles[int(cfg["profile"])]
    duration = cfg["duration_s"]
    if duration is None:
        duration = prof.n_steps * prof.dt_hydraulic_s
    if duration < 0:
        raise ConfigError("duration_s must be >= 0")
    with run.phase("assemble"):
        plans = plan_discretization(model, prof, _policy(cfg), float(cfg["window_s"]))
        systems = assemble_all(model, prof, plans, workers=_workers(cfg))
    with run.phase("simulate"):
        x0 = initial_state(model, systems[0].index)
        traj = simulate(systems, x0, float(duration), prof.dt_hydraulic_s,
                        NoiseSpec(float(cfg["process_std"]), float(cfg["sigma"])),
                        seed=cfg["seed"], record_every=int(cfg["record_every"]))
    run.write("states.csv", traj.to_csv_string(columns=cfg["columns"]))
    if float(cfg["process_std"]) == 0.0:
        lo = 0.0
        hi = max([r.source_concentration for r in model.reservoirs] + [float(np.max(x0, initial=0.0))])
        bad = bound_violations(traj, lo, hi, tol=1e-9)
        if bad:
            worst = max(bad, key=lambda b: max(lo - b[2], b[2] - hi))
            run.diagnostics.append(
                f"{len(bad)} state values outside [{lo}, {hi}] (dispersive overshoot); "
                f"worst {worst[1]} = {worst[2]:.6g} at t = {worst[0]:g} s")
    if len(traj) and cfg.get("plots"):
        run.figure(plotting.node_series, "states.png", traj, model.node_ids[:12])
    run.finish()
    print(f"wrote {len(traj)} rows")
    return 0


def _read_placement(cfg, model):
    if not cfg.get("placement"):
        raise ConfigError("config key 'placement' is required")
    try:
        doc = json.loads(Path(cfg["placement"]).read_text(encoding="utf-8"))
        nodes = list(doc["selected"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise WqspError(f"cannot read placement {cfg['placement']}: {exc}") from exc
    unknown = [n for n in nodes if n not in set(model.node_ids)]
    if unknown:
        raise WqspError(f"placement names nodes not in the network: {unknown}")
    return nodes


def _objectives(model, prof, cfg):
    from .dynamics import assemble
    from .hydraulics import plan_discretization
    plans = plan_discretization(model, prof, _policy(cfg), float(cfg["window_s"]))
    metric = _metric(cfg)
    steps = cfg["steps"] if cfg["steps"] is not None else range(prof.n_steps)
    return [metric.objective(assemble(model, prof, plans[k], k)) for k in steps]


def cmd_evaluate(cfg) -> int:
    _check(cfg, need=("network", "hydraulics", "placement"), seeded=True)
    from . import plotting
    from .placement import random_baseline
    run = Run("evaluate", cfg)
    with run.phase("load"):
        model, profiles = _load_inputs(cfg)
        selected = _read_placement(cfg, model)
        prof = profiles[int(cfg["profile"])]
    with run.phase("assemble"):
        objs = _objectives(model, prof, cfg)
    with run.phase("baseline"):
        base = random_baseline(objs, selected, int(cfg["count"]), seed=cfg["seed"])
    steps = cfg["steps"] if cfg["steps"] is not None else list(range(prof.n_steps))
    lines = ["step,f_selected"] + [f"{k},{_fmt(v)}" for k, v in zip(steps, base.selected_values)]
    run.write("f_per_step.csv", "\n".join(lines) + "\n")
    run.write("baseline.csv", base.to_csv())
    run.figure(plotting.step_values, "evaluate.png", base.selected_values, deltas=base.deltas)
    run.finish()
    print(f"min delta f = {base.deltas.min():.6g}")
    return 0


def cmd_estimate(cfg) -> int:
    _check(cfg, seeded=True)
    from . import plotting
    from .dynamics import NoiseSpec, assemble_all, initial_state, measure, simulate
    from .estimation import DENSE_LIMIT, kf_run
    from .hydraulics import Fixed, plan_discretization
    run = Run("estimate", cfg)
    with run.phase("load"):
        model, profiles = _load_inputs(cfg)
        prof = profiles[int(cfg["profile"])]
        sensors = cfg["sensors"] if cfg.get("sensors") is not None else _read_placement(cfg, model)
        bad = [n for n in sensors if n not in set(model.node_ids)]
        if bad:
            raise WqspError(f"unknown sensor nodes: {bad}")
    policy = _policy(cfg)
    plans = plan_discretization(model, prof, policy, float(cfg["window_s"]))
    reduced = False
    if (isinstance(policy, Fixed) and plans[0].n_pipe_states + len(model.node_ids) + len(model.pumps)
            + len(model.valves) > DENSE_LIMIT) or not isinstance(policy, Fixed):
        # a coarse, fixed layout keeps the covariance dense and the index constant
        reduced = True
        plans = plan_discretization(model, prof, Fixed(10), float(cfg["window_s"]))
    duration = cfg["duration_s"] if cfg["duration_s"] is not None else prof.n_steps * prof.dt_hydraulic_s
    with run.phase("simulate"):
        systems = assemble_all(model, prof, plans, workers=_workers(cfg))
        noise = NoiseSpec(float(cfg["process_std"]), float(cfg["sigma"]))
        x0 = initial_state(model, systems[0].index)
        traj = simulate(systems, x0, float(duration), prof.dt_hydraulic_s, noise, seed=cfg["seed"])
        truth = traj.as_array()
    reports = {}
    rng = np.random.default_rng(cfg["seed"])
    runs = {"selected": list(sensors)}
    nodes = model.node_ids
    for s in range(int(cfg["count"]) if sensors else 0):
        idx = np.sort(rng.choice(len(nodes), size=len(sensors), replace=False))
        runs[f"random{s}"] = [nodes[i] for i in idx]
    with run.phase("filter"):
        for label, S in runs.items():
            Y = measure(traj, S, float(cfg["sigma"]), seed=cfg["seed"])
            reports[label] = kf_run(systems, S, truth, Y, np.zeros_like(x0),
                                    float(cfg["prior_var"]), float(cfg["process_std"]),
                                    max(float(cfg["sigma"]), 1e-12),
                                    dt_hydraulic_s=prof.dt_hydraulic_s,
                                    diagonal=systems[0].n_x > DENSE_LIMIT)
    sel = reports["selected"]
    sel.extra = {"reduced_model": reduced, "n_x": systems[0].n_x,
                 "note": "RMSE validation is an addition to the metric-based placement",
                 "random_mean_rmse": [reports[k].mean_rmse for k in runs if k != "selected"]}
    run.write("estimation.json", sel.to_json())
    run.write("rmse.csv", sel.rmse_csv())
    run.figure(plotting.rmse_series, "rmse.png",
               {k: reports[k] for k in list(reports)[:6]})
    run.finish()
    print(f"mean RMSE = {sel.mean_rmse:.6g}")
    return 0


def cmd_inspect(cfg) -> int:
    _check(cfg)
    from .dynamics import assemble
    from .hydraulics import plan_discretization
    model, profiles = _load_inputs(cfg)
    prof = profiles[int(cfg["profile"])]
    plans = plan_discretization(model, prof, _policy(cfg), float(cfg["window_s"]))
    rows = []
    steps = cfg["steps"] if cfg["steps"] is not None else range(prof.n_steps)
    for k in steps:
        sys_k = assemble(model, prof, plans[k], k)
        seg = plans[k].segments
        rows.append({"step": k, "n_x": sys_k.n_x, "nnz": int(sys_k.A.nnz),
                     "sparsity": 1.0 - sys_k.density, "dt": plans[k].dt, "k_f": plans[k].k_f,
                     "segments_min": min(seg.values()) if seg else 0,
                     "segments_max": max(seg.values()) if seg else 0,
                     "segments_total": sum(seg.values())})
    print("step,n_x,nnz,sparsity,dt,k_f,segments_min,segments_max,segments_total")
    for r in rows:
        print(",".join(str(r[c]) for c in ("step", "n_x", "nnz", "sparsity", "dt", "k_f",
                                           "segments_min", "segments_max", "segments_total")))
    if cfg.get("output"):
        run = Run("inspect", cfg)
        run.write("inspect.json", json.dumps({"counts": model.counts, "steps": rows,
                                              "segments": [plans[k].segments for k in steps]},
                                             indent=2, sort_keys=True) + "\n")
        run.finish()
    return 0


def cmd_gen_hydraulics(args) -> int:
    """Write a bundled network, its synthetic hydraulics and a config."""
    from . import synthetic
    from .network import load_network, serialize
    out = Path(args.output or "out")
    out.mkdir(parents=True, exist_ok=True)
    if args.network:
        model = load_network(args.network)
        profiles = [("generated", synthetic.generate_hydraulics(
            model, n_steps=args.steps, dt_hydraulic_s=args.dt_hydraulic,
            tank_fraction=args.tank_fraction, demand_scale=args.demand_scale))]
    else:
        if args.bundle not in synthetic.BUNDLES:
            raise ConfigError(f"--bundle must be one of {synthetic.BUNDLES}")
        model, profiles = synthetic.bundle(args.bundle)
    (out / "network.inp").write_text(serialize(model), encoding="utf-8")
    names = []
    for label, prof in profiles:
        name = f"hydraulics_{label}.json"
        (out / name).write_text(prof.dumps() + "\n", encoding="utf-8")
        names.append(name)
    cfg_path = out / "config.json"
    if not cfg_path.exists():
        cfg_path.write_text(json.dumps({"network": "network.inp", "hydraulics": names},
                                       indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wqsp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--bundle", help="use a bundled config (three_node, net1, grid)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (JSON value)")
        sp.add_argument("--network")
        sp.add_argument("--hydraulics", nargs="+")
        sp.add_argument("--output", "-o")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="thread cap (default: all cores)")
        sp.add_argument("--policy", choices=("fixed", "dynamic"))
        sp.add_argument("--segments", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--window-s", dest="window_s", type=float)
        sp.add_argument("--metric", choices=("kf_degenerate", "general"))
        sp.add_argument("--no-plots", action="store_true")

    for name, helptext in (("place", "greedy sensor placement"),
                           ("simulate", "forward water-quality simulation"),
                           ("evaluate", "metric of a placement against random placements"),
                           ("estimate", "Kalman filter run for a placement"),
                           ("inspect", "state dimensions and sparsity per step")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        if name == "place":
            sp.add_argument("-r", "--r", type=int)
        if name in ("evaluate", "estimate"):
            sp.add_argument("--placement")
            sp.add_argument("--count", type=int)
        if name in ("simulate", "estimate"):
            sp.add_argument("--duration-s", dest="duration_s", type=float)
    g = sub.add_parser("gen-hydraulics", help="write a synthetic network and hydraulics")
    g.add_argument("--bundle", default="three_node")
    g.add_argument("--network", help="generate for this INP file instead of a bundle")
    g.add_argument("--steps", type=int, default=24)
    g.add_argument("--dt-hydraulic", type=float, default=3600.0)
    g.add_argument("--tank-fraction", type=float, default=0.1)
    g.add_argument("--demand-scale", type=float, default=1.0)
    g.add_argument("--output", "-o")
    return p


COMMANDS = {"place": cmd_place, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "estimate": cmd_estimate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-hydraulics":
            return cmd_gen_hydraulics(args)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (WqspError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
