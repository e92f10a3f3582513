"""Command-line entry points: scenario runs, robustness checks, and parameter sweeps.

Exit codes form the CI contract: 0 success (run safe, converged, and free
of constraint-violation events; graph robust), 1 runtime failure or a
negative verdict, 2 invalid configuration, 3 graph too large for
exhaustive checking.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

from . import __version__
from .graph import (
    GraphSizeError,
    degree_robustness_bound,
    is_rs_robust,
    read_edge_list,
)
from .sim import (
    SCENARIO_BIASES,
    ConfigError,
    FormationError,
    SimulationError,
    WorldConfig,
    config_from_mapping,
    run_scenario,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CAPACITY = 3

OUTPUT_ROOT_ENV = "RESILIENT_SWARM_OUT"

_REQUIRED_FILE_KEYS = ("n", "f", "radius", "delta_d")
_FILE_KEY_ALIASES = {"n": ("n",), "f": ("f", "F"), "radius": ("radius", "R"), "delta_d": ("delta_d",)}


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a config as JSON or as ``key = value`` lines with ``#`` comments."""
    raw = path.read_text()
    stripped = raw.lstrip()
    if stripped.startswith("{"):
        data = json.loads(raw)
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path}: top-level JSON value must be an object")
        return data
    mapping: dict[str, Any] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("config", f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        mapping[key.strip()] = _parse_scalar(value.strip())
    return mapping


def _apply_overrides(mapping: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override", f"expected key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = _parse_scalar(value.strip())
    return mapping


def _build_config(args) -> WorldConfig:
    """Resolve preset, config file, seed, and overrides into one world config."""
    mapping: dict[str, Any] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"config file not found: {path}")
        mapping = load_config_file(path)
        for canon in _REQUIRED_FILE_KEYS:
            if not any(alias in mapping for alias in _FILE_KEY_ALIASES[canon]):
                raise ConfigError(canon, "required field missing from config file")
    if getattr(args, "scenario", None) is not None:
        mapping["scenario"] = args.scenario
    if args.seed is not None:
        mapping["seed"] = args.seed
    _apply_overrides(mapping, args.override or [])
    if "scenario" not in mapping and args.config is None:
        mapping["scenario"] = "nominal"
    return config_from_mapping(mapping)


def _config_hash(effective: dict[str, Any]) -> str:
    canonical = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _resolve_outdir(args, default_name: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def write_run_outputs(outdir: Path, cfg: WorldConfig, log, verdict, config_path: str | None) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    effective = cfg.to_dict()
    manifest = {
        "config_path": config_path,
        "seed": cfg.seed,
        "output_dir": str(outdir),
        "config_hash": _config_hash(effective),
        "tool_version": __version__,
        "effective_config": effective,
    }
    log.to_csv(outdir / "trajectory.csv")
    log.write_summary_json(outdir / "verdict.json", verdict)
    log.write_h_traces(outdir / "plot_h.csv")
    log.write_consensus_traces(outdir / "plot_consensus.csv")
    log.write_consensus_csv(outdir / "consensus.csv")
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_run(args) -> int:
    try:
        cfg = _build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = _resolve_outdir(args, f"run-{cfg.scenario}-seed{cfg.seed}")
    try:
        log, verdict = run_scenario(cfg)
    except (SimulationError, FormationError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_run_outputs(outdir, cfg, log, verdict, args.config)
    ok = verdict.converged and verdict.safety_held and log.fallback_event_count == 0
    print(
        f"scenario={cfg.scenario} seed={cfg.seed} converged={verdict.converged} "
        f"safe={verdict.safety_held} final_spread={verdict.final_spread:.3g} "
        f"min_normal_h={log.min_normal_h():.4f} min_dist={log.min_distance():.4f} "
        f"fallback_events={log.fallback_event_count} -> {outdir}"
    )
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_check_robustness(args) -> int:
    path = Path(args.edge_list)
    if not path.is_file():
        print(f"config error: edge-list file not found: {path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        snapshot = read_edge_list(path, n=args.nodes)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.degree_bound:
        bound = degree_robustness_bound(snapshot)
        if bound is None:
            print("degree bound: not applicable (minimum degree below floor(n/2) - 1)")
            return EXIT_RUNTIME
        print(f"degree bound: r = {bound} for every s in 1..{snapshot.n}")
        if bound < 1:
            print("bound below 1; nothing to confirm")
            return EXIT_RUNTIME
        try:
            for s in range(1, snapshot.n + 1):
                check = is_rs_robust(snapshot, bound, s, cap=args.cap)
                if not check:
                    print(f"counterexample at s={s}: witness {sorted(check.witness[0])}, {sorted(check.witness[1])}")
                    return EXIT_RUNTIME
        except GraphSizeError as exc:
            print(f"capacity error: {exc}", file=sys.stderr)
            return EXIT_CAPACITY
        print("confirmed by exhaustive enumeration")
        return EXIT_OK

    if args.r is None or args.s is None:
        print("config error: provide --r and --s, or --degree-bound", file=sys.stderr)
        return EXIT_CONFIG
    try:
        check = is_rs_robust(snapshot, args.r, args.s, cap=args.cap)
    except GraphSizeError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    if check:
        print(f"graph is ({args.r},{args.s})-robust")
        return EXIT_OK
    s1, s2 = check.witness
    print(f"graph is NOT ({args.r},{args.s})-robust; witness subsets {sorted(s1)} and {sorted(s2)}")
    return EXIT_RUNTIME


def _parse_seed_spec(spec: str) -> list[int]:
    seeds: list[int] = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ".." in chunk:
            lo, _, hi = chunk.partition("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(chunk))
    return seeds


def _run_sweep_cell(payload: tuple[dict[str, Any], str]) -> dict[str, Any]:
    mapping, outdir = payload
    cfg = config_from_mapping(mapping)
    row: dict[str, Any] = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "epsilon": cfg.attack.connectivity_bias,
    }
    try:
        log, verdict = run_scenario(cfg)
    except (SimulationError, FormationError) as exc:
        row.update(status="error", error=str(exc))
        return row
    write_run_outputs(Path(outdir), cfg, log, verdict, None)
    window = max(cfg.t_end - 2.0, 0.0)
    ok = verdict.converged and verdict.safety_held and log.fallback_event_count == 0
    row.update(
        converged=verdict.converged,
        safety_held=verdict.safety_held,
        final_spread=verdict.final_spread,
        min_normal_h=log.min_normal_h(),
        min_malicious_h=log.min_malicious_h(),
        min_pairwise_distance=log.min_distance(),
        mean_pairwise_last2s=log.mean_pairwise_distance(window, cfg.t_end),
        fallback_events=log.fallback_event_count,
        status="ok" if ok else "failed",
    )
    return row


_SWEEP_COLUMNS = [
    "scenario",
    "seed",
    "epsilon",
    "converged",
    "safety_held",
    "final_spread",
    "min_normal_h",
    "min_malicious_h",
    "min_pairwise_distance",
    "mean_pairwise_last2s",
    "fallback_events",
    "status",
]


def cmd_sweep(args) -> int:
    base: dict[str, Any] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            print(f"config error: config file not found: {path}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            base = load_config_file(path)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        _apply_overrides(base, args.override or [])
        seeds = _parse_seed_spec(args.seeds)
        scenarios = [s.strip() for s in args.scenarios.split(",") if s.strip()]
        grid_axes: list[tuple[str, list[Any]]] = []
        for item in args.grid or []:
            if "=" not in item:
                raise ConfigError("grid", f"expected key=v1,v2,..., got {item!r}")
            key, _, values = item.partition("=")
            parsed = [_parse_scalar(v) for v in values.split(",") if v]
            if not parsed:
                raise ConfigError("grid", f"no values for {key!r}")
            grid_axes.append((key.strip(), parsed))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if not seeds or not scenarios:
        print("config error: sweep grid is empty (no seeds or no scenarios)", file=sys.stderr)
        return EXIT_CONFIG

    outroot = _resolve_outdir(args, "sweep")
    outroot.mkdir(parents=True, exist_ok=True)

    cells: list[tuple[dict[str, Any], str]] = []
    for scenario, seed, *grid_values in itertools.product(scenarios, seeds, *(vals for _, vals in grid_axes)):
        mapping = dict(base)
        mapping["scenario"] = scenario
        mapping["seed"] = seed
        suffix = ""
        for (key, _), value in zip(grid_axes, grid_values):
            mapping[key] = value
            suffix += f"-{key}{value}"
        try:
            config_from_mapping(mapping)
        except ConfigError as exc:
            print(f"config error in cell {scenario}/seed{seed}{suffix}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        cells.append((mapping, str(outroot / f"cell-{scenario}-seed{seed}{suffix}")))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, cells))
    else:
        rows = [_run_sweep_cell(cell) for cell in cells]

    aggregate = outroot / "aggregate.csv"
    with aggregate.open("w", newline="") as fh:
        fh.write(",".join(_SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(col, "")) for col in _SWEEP_COLUMNS) + "\n")

    failures = [row for row in rows if row.get("status") != "ok"]
    print(f"sweep: {len(rows)} cells, {len(rows) - len(failures)} ok -> {aggregate}")
    for row in failures:
        print(f"  failed: scenario={row['scenario']} seed={row['seed']} ({row.get('error', row['status'])})")
    return EXIT_OK if not failures else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resilient-swarm",
        description="Resilient-consensus swarm simulation and graph robustness tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario and write its artifacts")
    run_p.add_argument("--config", help="JSON or key=value config file")
    run_p.add_argument(
        "--scenario",
        choices=sorted(SCENARIO_BIASES) + sorted(_alias for _alias in ("understating", "overstating")),
        help="attack scenario preset",
    )
    run_p.add_argument("--seed", type=int, help="override the run seed")
    run_p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override a config field")
    run_p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    run_p.set_defaults(func=cmd_run)

    chk_p = sub.add_parser("check-robustness", help="exhaustively check (r,s)-robustness of an edge list")
    chk_p.add_argument("edge_list", help="text file of 'i j' pairs, 0-based")
    chk_p.add_argument("--r", type=int, help="reachability threshold r")
    chk_p.add_argument("--s", type=int, help="count threshold s")
    chk_p.add_argument("--degree-bound", action="store_true", help="report the minimum-degree bound and confirm it")
    chk_p.add_argument("--nodes", type=int, help="node count when isolated trailing nodes exist")
    chk_p.add_argument("--cap", type=int, default=12, help="maximum node count for enumeration")
    chk_p.set_defaults(func=cmd_check_robustness)

    sweep_p = sub.add_parser("sweep", help="run a grid of scenarios/seeds and aggregate results")
    sweep_p.add_argument("--config", help="base config file applied to every cell")
    sweep_p.add_argument("--scenarios", default="nominal,understate,overstate", help="comma-separated scenario list")
    sweep_p.add_argument("--seeds", default="1..10", help="comma list and/or lo..hi ranges")
    sweep_p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="extra grid axis over a config field")
    sweep_p.add_argument("--override", action="append", metavar="KEY=VALUE", help="fixed override for every cell")
    sweep_p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep_p.add_argument("--out", help=f"output root (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    sweep_p.set_defaults(func=cmd_sweep)

    ver_p = sub.add_parser("version", help="print the tool version")
    ver_p.set_defaults(func=lambda args: (print(__version__), EXIT_OK)[1])

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
