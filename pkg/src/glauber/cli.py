"""Experiment orchestration: configs, subcommands, reproducible grids.

Configuration precedence is flags > TOML file > defaults. Every run writes a
manifest (resolved config, config hash, seed, versions, wall time) next to its
artifacts; identical config and seed give byte-identical artifacts, with
timing confined to the manifest.

Exit codes: 0 ok, 2 usage, 3 capacity, 4 transport.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from .bounds import (
    exact_chain_analysis,
    influence_coefficients,
    oscillation_matrix,
    save_matrix,
    write_analysis_json,
)
from .core import SeqState, normalized_hamming, random_state
from .dynamics import (
    GlauberKernel,
    GridCell,
    coupling_meeting_time,
    distance_observer,
    grid_summary,
    hitting_time,
    run_chain,
    write_grid_csv,
    write_trajectory_ndjson,
)
from .errors import CapacityError, DomainError, InputError, TransportError
from .incompatibility import (
    run_rectangle_campaign,
    write_campaign_csv,
    write_campaign_summary,
)
from .metastability import (
    CountBasin,
    boundary_drift_report,
    check_margin_assumption,
    detect_traps,
    margin_report,
    sample_boundary_states,
    write_traps_csv,
)
from .rng import substream
from .scorers import (
    FixedConditionalScorer,
    PerturbedScorer,
    PottsGibbsScorer,
    RemoteScorer,
    TabularScorer,
    UniformScorer,
)
from .stateio import read_states

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CAPACITY = 3
EXIT_TRANSPORT = 4


# ---------------------------------------------------------------------------
# Scorer and basin specs
# ---------------------------------------------------------------------------

def _parse_kv(spec: str) -> tuple[str, dict]:
    kind, _, rest = spec.partition(":")
    params: dict = {}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if not key or not value:
                raise InputError(f"bad scorer spec item {item!r} in {spec!r}")
            params[key.strip()] = value.strip()
    return kind.strip(), params


def _num(params: dict, key: str, default=None, cast=float):
    if key not in params:
        if default is None:
            raise InputError(f"scorer spec missing required field {key!r}")
        return default
    try:
        return cast(params[key])
    except (TypeError, ValueError):
        raise InputError(f"scorer spec field {key!r} must be {cast.__name__}") from None


def build_scorer(spec, n: int | None = None):
    """Build a scorer from a TOML table or a compact ``kind:k=v,...`` string."""
    if isinstance(spec, str):
        kind, params = _parse_kv(spec)
    elif isinstance(spec, dict):
        params = dict(spec)
        kind = params.pop("kind", None)
        if kind is None:
            raise InputError("scorer table needs a 'kind' field")
    else:
        raise InputError(f"scorer spec must be a string or table, got {type(spec).__name__}")

    if kind == "potts":
        nn = int(_num(params, "n", n, int))
        return PottsGibbsScorer.random_instance(
            nn, int(_num(params, "V", 2, int)),
            substream(int(_num(params, "seed", 0, int))),
            coupling_scale=_num(params, "coupling", 0.5),
            field_scale=_num(params, "field", 0.5))
    if kind == "potts-chain":
        nn = int(_num(params, "n", n, int))
        return PottsGibbsScorer.aligned_chain(nn, int(_num(params, "V", 2, int)),
                                              beta=_num(params, "beta", 1.0))
    if kind == "uniform":
        return UniformScorer(int(_num(params, "V", 2, int)))
    if kind == "fixed":
        return FixedConditionalScorer.concentrated(
            int(_num(params, "V", 2, int)), int(_num(params, "target", 0, int)),
            _num(params, "mass", 0.9))
    if kind == "tabular":
        path = params.get("path")
        if not path:
            raise InputError("tabular scorer needs path=...")
        return TabularScorer.load(path)
    if kind == "perturbed":
        base = dict(params)
        base["kind"] = base.pop("base_kind", "potts")
        eps = _num(params, "eps", 0.0)
        pseed = int(_num(params, "pseed", 0, int))
        for drop in ("eps", "pseed"):
            base.pop(drop, None)
        return PerturbedScorer(build_scorer(base, n), eps, pseed)
    if kind == "remote":
        endpoint = params.get("endpoint")
        if not endpoint:
            raise InputError("remote scorer needs endpoint=...")
        return RemoteScorer(endpoint)
    raise InputError(f"unknown scorer kind {kind!r}")


def build_basin(spec) -> CountBasin:
    if isinstance(spec, str):
        kind, params = _parse_kv(spec)
    elif isinstance(spec, dict):
        params = dict(spec)
        kind = params.pop("kind", "count")
    else:
        raise InputError("basin spec must be a string or table")
    if kind != "count":
        raise InputError(f"unknown basin kind {kind!r}")
    return CountBasin(int(_num(params, "token", 0, int)), _num(params, "fraction", None))


# ---------------------------------------------------------------------------
# Config resolution and manifest
# ---------------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {path}")
    with open(p, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"config: {exc}") from exc


def resolve(config: dict, args: argparse.Namespace, overrides: dict) -> dict:
    """Merge defaults, file values, then non-None flags."""
    merged = dict(overrides.pop("_defaults", {}))
    merged.update(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def config_hash(resolved: dict) -> str:
    # where results land and how many workers ran are execution details, not
    # experiment identity
    hashed = {k: v for k, v in resolved.items() if k not in ("out", "workers")}
    return hashlib.sha256(
        json.dumps(hashed, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, resolved: dict, seed: int, wall_time: float,
                   artifacts: list[str], partial: bool = False,
                   error: str | None = None) -> None:
    manifest = {
        "tool": "glauber",
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "seed": seed,
        "artifacts": sorted(artifacts),
        "partial": partial,
        # timing is excluded from reproducibility guarantees
        "wall_time_s": round(wall_time, 3),
    }
    if error:
        manifest["error"] = error
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _initial_states(resolved: dict, scorer, n: int, count: int, seed: int) -> list[SeqState]:
    if resolved.get("states"):
        states = read_states(resolved["states"])
        if not states:
            raise InputError(f"state file {resolved['states']} is empty")
        return states
    rng = substream(seed, 983)
    return [random_state(n, scorer.vocab_size, rng) for _ in range(count)]


def _require_grids(resolved: dict) -> tuple[list[float], list[int]]:
    taus = resolved.get("taus") or ([resolved["tau"]] if resolved.get("tau") else [])
    ns = resolved.get("ns") or ([resolved["n"]] if resolved.get("n") else [])
    taus = [float(t) for t in taus]
    ns = [int(v) for v in ns]
    if not taus or not ns:
        raise InputError("grid commands need tau/taus and n/ns")
    if any(t <= 0 for t in taus):
        raise InputError("taus: temperatures must be positive")
    if any(v < 1 for v in ns):
        raise InputError("ns: lengths must be >= 1")
    return taus, ns


# ---------------------------------------------------------------------------
# Grid workers (picklable top-level functions)
# ---------------------------------------------------------------------------

def _couple_cell(task) -> GridCell:
    spec, tau, n, s, n_idx, t_idx, budget, master_seed = task
    scorer = build_scorer(spec, n)
    kernel = GlauberKernel(scorer, tau)
    init_rng = substream(master_seed, n_idx, t_idx, s, 0)
    x0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
    y0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
    cell_seed = int(substream(master_seed, n_idx, t_idx, s, 1).integers(2**63))
    res = coupling_meeting_time(x0, y0, kernel, budget, seed=cell_seed)
    return GridCell(tau, n, s, res.meeting_step, budget)


def _hit_cell(task) -> GridCell:
    spec, tau, n, s, n_idx, t_idx, budget, master_seed, threshold = task
    scorer = build_scorer(spec, n)
    kernel = GlauberKernel(scorer, tau)
    init_rng = substream(master_seed, n_idx, t_idx, s, 0)
    x0 = SeqState(init_rng.integers(0, scorer.vocab_size, size=n))
    cell_seed = int(substream(master_seed, n_idx, t_idx, s, 1).integers(2**63))
    step = hitting_time(x0, kernel, normalized_hamming, threshold, budget, seed=cell_seed)
    return GridCell(tau, n, s, step, budget)


def _run_grid(worker, tasks, workers: int) -> list[GridCell]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(worker, tasks, chunksize=1))
    else:
        cells = [worker(t) for t in tasks]
    return sorted(cells, key=lambda c: (c.n, c.tau, c.seed))


def _write_summary_csv(rows: list[dict], path: Path, step_name: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tau", "n", f"median_{step_name}", "timeout_fraction", "count"])
        for row in rows:
            writer.writerow([row["tau"], row["n"], row["median_steps"],
                             row["timeout_fraction"], row["count"]])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    n = int(resolved.get("n") or 0)
    scorer = build_scorer(resolved["scorer"], n or None)
    x0 = _initial_states(resolved, scorer, n or 16, 1, seed)[0]
    kernel = GlauberKernel(scorer, float(resolved["tau"]))
    result = run_chain(x0, kernel, int(resolved["steps"]),
                       observers=[distance_observer("nhamming_to_start", normalized_hamming)],
                       record_every=int(resolved["record_every"]), seed=seed)
    write_trajectory_ndjson(result, out / "trajectory.ndjson")
    if not result.completed:
        raise TransportError(result.error or "scorer transport failed")
    return ["trajectory.ndjson"]


def cmd_couple(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    taus, ns = _require_grids(resolved)
    budget = int(resolved["budget"])
    tasks = [(resolved["scorer"], tau, n, s, n_idx, t_idx, budget, seed)
             for n_idx, n in enumerate(ns)
             for t_idx, tau in enumerate(taus)
             for s in range(int(resolved["seeds"]))]
    cells = _run_grid(_couple_cell, tasks, int(resolved["workers"]))
    write_grid_csv(cells, out / "cells.csv", "meeting_step")
    _write_summary_csv(grid_summary(cells), out / "summary.csv", "meeting_step")
    return ["cells.csv", "summary.csv"]


def cmd_hit(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    taus, ns = _require_grids(resolved)
    budget = int(resolved["budget"])
    threshold = float(resolved["threshold"])
    if threshold <= 0:
        raise InputError("threshold must be positive")
    tasks = [(resolved["scorer"], tau, n, s, n_idx, t_idx, budget, seed, threshold)
             for n_idx, n in enumerate(ns)
             for t_idx, tau in enumerate(taus)
             for s in range(int(resolved["seeds"]))]
    cells = _run_grid(_hit_cell, tasks, int(resolved["workers"]))
    write_grid_csv(cells, out / "cells.csv", "hitting_step")
    _write_summary_csv(grid_summary(cells), out / "summary.csv", "hitting_step")
    return ["cells.csv", "summary.csv"]


def cmd_rect(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    n = int(resolved.get("n") or 0)
    scorer = build_scorer(resolved["scorer"], n or None)
    states = _initial_states(resolved, scorer, n or 16, int(resolved["state_count"]), seed)
    exclude = [int(t) for t in resolved.get("exclude_ids", [])]
    if isinstance(scorer, RemoteScorer) and scorer.mask_id >= 0:
        exclude.append(scorer.mask_id)
    campaign = run_rectangle_campaign(
        scorer, states, int(resolved["count"]), int(resolved["k"]),
        tau=float(resolved["tau"]), seed=seed, exclude_ids=exclude,
        compute_influence=bool(resolved.get("influence", False)),
        scorer_id=str(resolved["scorer"]))
    write_campaign_csv(campaign, out / "rectangles.csv")
    write_campaign_summary(campaign, out / "summary.json")
    return ["rectangles.csv", "summary.json"]


def cmd_influence(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    n = int(resolved.get("n") or 0)
    scorer = build_scorer(resolved["scorer"], n or None)
    tau = float(resolved["tau"])
    mode = resolved.get("mode", "exact")
    if mode == "exact":
        infl = influence_coefficients(scorer, tau, n=n or None,
                                      capacity=int(resolved["capacity"]))
        osc = oscillation_matrix(scorer, n=n or None, capacity=int(resolved["capacity"]))
    else:
        states = _initial_states(resolved, scorer, n or 16,
                                 int(resolved["state_count"]), int(resolved["seed"]))
        infl = influence_coefficients(scorer, tau, mode="sampled-lower-bound",
                                      base_states=states, k=int(resolved["k"]),
                                      seed=int(resolved["seed"]))
        osc = oscillation_matrix(scorer, mode="sampled-lower-bound",
                                 base_states=states, k=int(resolved["k"]))
    obj = {
        "alpha": infl.alpha,
        "mode": infl.mode,
        "tau": tau,
        "c_matrix": infl.c.tolist(),
        "delta_matrix": osc.delta.tolist(),
        "oscillation_row_sum_max": osc.row_sum_max,
    }
    with open(out / "influence.json", "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return ["influence.json"]


def cmd_exact(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    n = int(resolved["n"])
    scorer = build_scorer(resolved["scorer"], n)
    analysis = exact_chain_analysis(
        scorer, n, float(resolved["tau"]),
        eps_grid=tuple(float(e) for e in resolved["eps_grid"]),
        capacity=int(resolved["capacity"]))
    infl = osc = None
    if resolved.get("with_influence", False):
        infl = influence_coefficients(scorer, float(resolved["tau"]), n=n,
                                      capacity=int(resolved["capacity"]))
        osc = oscillation_matrix(scorer, n=n, capacity=int(resolved["capacity"]))
    write_analysis_json(analysis, out / "analysis.json", infl, osc)
    artifacts = ["analysis.json"]
    if resolved.get("dump_matrices", False):
        save_matrix(analysis.P, out / "kernel.glmx")
        artifacts.append("kernel.glmx")
        if infl is not None:
            save_matrix(infl.c, out / "influence.glmx")
            save_matrix(osc.delta, out / "oscillation.glmx")
            artifacts += ["influence.glmx", "oscillation.glmx"]
    return artifacts


def cmd_drift(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    n = int(resolved["n"])
    scorer = build_scorer(resolved["scorer"], n)
    basin = build_basin(resolved["basin"])
    artifacts = []
    taus = resolved.get("taus") or [resolved["tau"]]
    reports = {}
    for tau in taus:
        rep = boundary_drift_report(scorer, basin, n, int(resolved["samples"]),
                                    float(tau), seed=int(resolved["seed"]))
        reports[str(tau)] = rep.to_json_obj()
    with open(out / "drift.json", "w", encoding="utf-8") as f:
        json.dump(reports, f, indent=2, sort_keys=True)
        f.write("\n")
    artifacts.append("drift.json")
    return artifacts


def cmd_margin(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    n = int(resolved.get("n") or 0)
    scorer = build_scorer(resolved["scorer"], n or None)
    if resolved.get("basin"):
        basin = build_basin(resolved["basin"])
        rng = substream(seed, 211)
        samples = sample_boundary_states(basin, n, scorer.vocab_size,
                                         int(resolved["samples"]), rng)
        cert = check_margin_assumption(scorer, basin, samples,
                                       float(resolved["required_gap"]))
        obj = cert.to_json_obj()
    else:
        states = _initial_states(resolved, scorer, n or 16, 1, seed)
        obj = {"reports": [margin_report(scorer, s).to_json_obj() for s in states]}
    with open(out / "margin.json", "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return ["margin.json"]


def cmd_traps(resolved: dict) -> list[str]:
    out = _out_dir(resolved)
    seed = int(resolved["seed"])
    n = int(resolved.get("n") or 0)
    scorer = build_scorer(resolved["scorer"], n or None)
    x0 = _initial_states(resolved, scorer, n or 16, 1, seed)[0]
    kernel = GlauberKernel(scorer, float(resolved["tau"]))
    result = run_chain(x0, kernel, int(resolved["steps"]),
                       record_every=int(resolved["record_every"]), seed=seed)
    events = detect_traps(result.states(), normalized_hamming,
                          int(resolved["window"]), float(resolved["threshold"]),
                          scorer=scorer)
    write_traps_csv(events, out / "traps.csv")
    if not result.completed:
        raise TransportError(result.error or "scorer transport failed")
    return ["traps.csv"]


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "run": {"tau": 1.0, "steps": 10_000, "record_every": 1, "seed": 0, "workers": 1},
    "couple": {"seeds": 20, "budget": 10_000, "seed": 0, "workers": 1},
    "hit": {"seeds": 20, "budget": 10_000, "threshold": 0.5, "seed": 0, "workers": 1},
    "rect": {"tau": 1.0, "count": 300, "k": 50, "state_count": 10, "seed": 0, "workers": 1},
    "influence": {"tau": 1.0, "mode": "exact", "capacity": 4096, "k": 10,
                  "state_count": 5, "seed": 0, "workers": 1},
    "exact": {"tau": 1.0, "eps_grid": [0.25, 0.1, 0.01], "capacity": 4096,
              "seed": 0, "workers": 1},
    "drift": {"tau": 1.0, "samples": 200, "seed": 0, "workers": 1},
    "margin": {"samples": 200, "required_gap": 1.0, "seed": 0, "workers": 1},
    "traps": {"tau": 1.0, "steps": 10_000, "record_every": 1, "window": 300,
              "threshold": 0.25, "seed": 0, "workers": 1},
}

_COMMANDS = {
    "run": cmd_run,
    "couple": cmd_couple,
    "hit": cmd_hit,
    "rect": cmd_rect,
    "influence": cmd_influence,
    "exact": cmd_exact,
    "drift": cmd_drift,
    "margin": cmd_margin,
    "traps": cmd_traps,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glauber",
        description="Glauber dynamics diagnostics for local conditional scorers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--scorer", help="scorer spec, e.g. potts:n=8,V=3,seed=1")
        p.add_argument("--endpoint", help="remote scorer endpoint (host:port or command)")
        p.add_argument("--tau", type=float)
        p.add_argument("--taus", type=float, nargs="+")
        p.add_argument("--n", type=int)
        p.add_argument("--ns", type=int, nargs="+")
        p.add_argument("--steps", type=int)
        p.add_argument("--record-every", dest="record_every", type=int)
        p.add_argument("--states", help="NDJSON state file for initial states")
        if name in ("couple", "hit"):
            p.add_argument("--seeds", type=int)
            p.add_argument("--budget", type=int)
        if name == "hit":
            p.add_argument("--threshold", type=float)
        if name == "rect":
            p.add_argument("--count", type=int)
            p.add_argument("--k", type=int)
            p.add_argument("--state-count", dest="state_count", type=int)
            p.add_argument("--influence", action="store_true", default=None)
        if name == "influence":
            p.add_argument("--mode", choices=["exact", "sampled"])
            p.add_argument("--capacity", type=int)
            p.add_argument("--k", type=int)
            p.add_argument("--state-count", dest="state_count", type=int)
        if name == "exact":
            p.add_argument("--capacity", type=int)
            p.add_argument("--eps-grid", dest="eps_grid", type=float, nargs="+")
            p.add_argument("--with-influence", dest="with_influence",
                           action="store_true", default=None)
            p.add_argument("--dump-matrices", dest="dump_matrices",
                           action="store_true", default=None)
        if name in ("drift", "margin"):
            p.add_argument("--basin", help="basin spec, e.g. count:token=0,fraction=0.9")
            p.add_argument("--samples", type=int)
        if name == "margin":
            p.add_argument("--required-gap", dest="required_gap", type=float)
        if name == "traps":
            p.add_argument("--window", type=int)
            p.add_argument("--threshold", type=float)
    return parser


def dispatch(args: argparse.Namespace) -> int:
    command = args.command
    file_config = load_config(args.config)
    section = dict(file_config.get(command, {}))
    for key in ("seed", "workers", "out", "scorer", "states"):
        if key in file_config and key not in section:
            section[key] = file_config[key]
    if "scorer" in file_config and isinstance(file_config["scorer"], dict):
        section.setdefault("scorer", file_config["scorer"])
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    if overrides.pop("endpoint", None):
        overrides["scorer"] = f"remote:endpoint={args.endpoint}"
    resolved = dict(_DEFAULTS[command])
    resolved.update(section)
    resolved.update(overrides)
    resolved.setdefault("out", f"out-{command}")
    if "scorer" not in resolved and command != "exact":
        raise InputError("missing scorer: pass --scorer, --endpoint, or set [scorer] in the config")
    if "scorer" not in resolved:
        raise InputError("missing scorer")
    out = _out_dir(resolved)
    started = time.monotonic()
    try:
        artifacts = _COMMANDS[command](resolved)
    except TransportError as exc:
        write_manifest(out, resolved, int(resolved.get("seed", 0)),
                       time.monotonic() - started, [], partial=True, error=str(exc))
        raise
    write_manifest(out, resolved, int(resolved.get("seed", 0)),
                   time.monotonic() - started, artifacts)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return dispatch(args)
    except (InputError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
