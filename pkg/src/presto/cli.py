"""Command line front end: ``presto {solve,stop,verify,oracle-compare,sweep}``.

Exit codes: 0 ok, 1 configuration or validation error, 2 solver failure,
3 comparison mismatch.  Every command computes all of its outputs before
writing any file, and each file is written to a temporary name then renamed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from . import instances
from .drivers import driver_from_spec
from .errors import BudgetExceeded, NoContraction, NoConvergence, PrestoError
from .filtration import FiltrationTree, validate_tree
from .oracle import DOUBLED, GRID, EnumerationBudget, brute_force_value, count_stopping_times
from .process import LadlagPredictableProcess, regularity_report
from .rbsde import LOWER, UPPER, solution_csv, solve_rbsde, solve_rbsde_picard, verify_rbsde
from .stopping import optimality_report, tau_alpha, tau_tilde, theta_alpha

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_MISMATCH = 0, 1, 2, 3
ORACLE_TOL = 1e-9
COMMANDS = ("solve", "stop", "verify", "oracle-compare", "sweep")

_INT = {"type": "integer"}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"type": "string"},
        "fixture": {"enum": sorted(instances.FIXTURES)},
        "generate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": _INT,
                "stages": {"type": "integer", "minimum": 1},
                "branches": {"type": "integer", "minimum": 2},
                "marks": {"type": "integer", "minimum": 1},
                "obstacle": {"enum": list(instances.OBSTACLE_MODES)},
            },
        },
        "driver": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"type": "string"}, "params": {"type": "object"}},
        },
        "seed": _INT,
        "seeds": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
        "stage": {"type": "integer", "minimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "mode": {"enum": [DOUBLED, GRID]},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "budget": {"type": "integer", "minimum": 1},
        "barrier_side": {"enum": [LOWER, UPPER]},
        "out": {"type": "string"},
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stages": {"type": "integer", "minimum": 1},
                "branches": {"type": "integer", "minimum": 2},
                "marks": {"type": "integer", "minimum": 1},
                "oracle_cap": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class Mismatch(Exception):
    """Raised after outputs are written when a comparison fails."""


# ------------------------------------------------------------------ parsing
def _number(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def _keyvals(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = _number(v.strip())
    return out


def parse_driver(text: str) -> dict:
    """``name=discount,rho=0.2`` or a JSON object ``{"name": ..., "params": {...}}``."""
    text = text.strip()
    if text.startswith("{"):
        return json.loads(text)
    kv = _keyvals(text)
    if "name" not in kv:
        raise argparse.ArgumentTypeError("driver spec needs name=...")
    name = kv.pop("name")
    return {"name": str(name), "params": kv}


def parse_seeds(text: str) -> list[int]:
    a, sep, b = text.partition("..")
    return [int(a), int(b) if sep else int(a)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="presto", description="Reflected BSDEs and optimal stopping on filtration trees.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", help="model JSON with 'tree', 'obstacle' and optional 'driver'")
    p.add_argument("--fixture", help="named fixture (FIX-A ... FIX-E)")
    p.add_argument("--generate", help="seed=..,stages=..,branches=..,marks=..,obstacle=..")
    p.add_argument("--driver", help="name=..,param=.. or JSON")
    p.add_argument("--seeds", help="inclusive seed range a..b")
    p.add_argument("--stage", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=[DOUBLED, GRID])
    p.add_argument("--tol", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--barrier-side", choices=[LOWER, UPPER], dest="barrier_side")
    p.add_argument("--out", help="output directory (default: current directory)")
    return p


def load_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise PrestoError("config must be a JSON object")
    if args.model:
        cfg["model"] = args.model
    if args.fixture:
        cfg["fixture"] = args.fixture
    if args.generate:
        cfg["generate"] = _keyvals(args.generate)
    if args.driver:
        cfg["driver"] = parse_driver(args.driver)
    if args.seeds:
        cfg["seeds"] = parse_seeds(args.seeds)
    for key in ("stage", "alpha", "mode", "tol", "budget", "barrier_side", "out"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    env_seed = os.environ.get("PRESTO_SEED")
    if env_seed is not None:
        seed = int(env_seed)
        cfg["seed"] = seed
        if "generate" in cfg:
            cfg["generate"]["seed"] = seed
        if "seeds" in cfg:
            span = cfg["seeds"][1] - cfg["seeds"][0]
            cfg["seeds"] = [seed, seed + span]
    return cfg


# ---------------------------------------------------------------- instances
def load_model(path: str) -> instances.Instance:
    data = json.loads(Path(path).read_text())
    extra = set(data) - {"tree", "obstacle", "driver"}
    if extra or "tree" not in data or "obstacle" not in data:
        raise PrestoError(f"model needs 'tree' and 'obstacle' (optional 'driver'); unexpected keys {sorted(extra)}")
    tree = FiltrationTree.from_dict(data["tree"])
    report = validate_tree(tree)
    if not report.ok:
        raise PrestoError("invalid tree: " + ", ".join(sorted(set(report.rules()))))
    obstacle = LadlagPredictableProcess.from_dict(tree, data["obstacle"])
    driver = driver_from_spec(data["driver"]) if "driver" in data else instances.drv.zero()
    return instances.Instance(tree, driver, obstacle, meta={"model": str(path)})


def model_dict(inst: instances.Instance) -> dict:
    out = {"tree": inst.tree.to_dict(), "obstacle": inst.obstacle.to_dict()}
    if hasattr(inst.driver, "to_dict"):
        out["driver"] = inst.driver.to_dict()
    return out


def instance_from_config(cfg: dict) -> instances.Instance:
    if "model" in cfg:
        inst = load_model(cfg["model"])
    elif "fixture" in cfg:
        inst = instances.FIXTURES[cfg["fixture"]]()
    elif "generate" in cfg:
        g = cfg["generate"]
        stages = g.get("stages", 3)
        inst = instances.random_instance(
            g.get("seed", cfg.get("seed", 0)), max_stages=stages, n_stages=stages,
            max_w_branches=g.get("branches", 2), max_marks=g.get("marks", 2),
            obstacle_mode=g.get("obstacle", "uniform"))
    else:
        raise PrestoError("one of model, fixture or generate is required")
    if "driver" in cfg:
        inst.driver = driver_from_spec(cfg["driver"])
    return inst


# ------------------------------------------------------------------- output
def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj)}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_plain) + "\n"


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file atomically (temp file in the target directory, then rename)."""
    for rel, text in files.items():
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# ----------------------------------------------------------------- commands
def cmd_solve(cfg: dict) -> tuple[dict[str, str], bool]:
    inst = instance_from_config(cfg)
    side = cfg.get("barrier_side", LOWER)
    sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle, side)
    report = verify_rbsde(inst.tree, inst.driver, inst.obstacle, sol, cfg.get("tol", 1e-10))
    S = cfg.get("stage", 0)
    _check_stage(inst.tree, S)
    summary = {
        "n_stages": inst.tree.n_stages,
        "driver": model_dict(inst).get("driver"),
        "barrier_side": side,
        "Y0": sol.Y0,
        "stage": S,
        "Y_S": sol.Y.value[S],
        "residuals": sol.residuals(),
        "regularity": regularity_report(inst.tree, inst.obstacle).to_dict(),
        "verified": report.ok,
    }
    return {"solution.csv": solution_csv(sol), "summary.json": dumps(summary)}, True


def _check_stage(tree: FiltrationTree, S: int) -> None:
    if not 0 <= S <= tree.n_stages:
        raise PrestoError(f"stage {S} outside [0, {tree.n_stages}]")


def cmd_stop(cfg: dict) -> tuple[dict[str, str], bool]:
    inst = instance_from_config(cfg)
    tree, driver, obstacle = inst.tree, inst.driver, inst.obstacle
    S = cfg.get("stage", 0)
    _check_stage(tree, S)
    sol = solve_rbsde(tree, driver, obstacle)
    rules = {"tau_tilde": tau_tilde(sol, S, cfg.get("mode", DOUBLED))}
    if "alpha" in cfg:
        alpha = cfg["alpha"]
        if alpha < 1:
            rules["tau_alpha"] = tau_alpha(sol, driver, S, alpha)
        rules["theta_alpha"] = theta_alpha(sol, S, alpha)
    times = {name: tau.to_dict(tree) for name, tau in rules.items()}
    diags = {name: optimality_report(tree, driver, obstacle, sol, S, tau).to_dict(tree) for name, tau in rules.items()}
    return {"stopping.json": dumps(times), "diagnostics.json": dumps(diags)}, True


def cmd_verify(cfg: dict) -> tuple[dict[str, str], bool]:
    inst = instance_from_config(cfg)
    sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle, cfg.get("barrier_side", LOWER))
    report = verify_rbsde(inst.tree, inst.driver, inst.obstacle, sol, cfg.get("tol", 1e-10))
    return {"verify.json": dumps(report.to_dict())}, report.ok


def _compare_one(inst: instances.Instance, S: int, budget: int) -> dict:
    sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle)
    doubled = brute_force_value(inst.tree, inst.driver, inst.obstacle, S, EnumerationBudget(budget, DOUBLED))
    grid = brute_force_value(inst.tree, inst.driver, inst.obstacle, S, EnumerationBudget(budget, GRID))
    y = sol.Y.value[S]
    return {
        "n_stages": inst.tree.n_stages,
        "n_rules": doubled.count,
        "value": y,
        "oracle": doubled.values,
        "gap": float(np.max(np.abs(y - doubled.values))),
        "grid_oracle": grid.values,
        "grid_excess": float(np.max(grid.values - y)),
    }


def cmd_oracle_compare(cfg: dict) -> tuple[dict[str, str], bool]:
    S = cfg.get("stage", 0)
    budget = cfg.get("budget", 1_000_000)
    tol = cfg.get("tol", ORACLE_TOL)
    rows = []
    if "seeds" in cfg and not any(k in cfg for k in ("model", "fixture", "generate")):
        lo, hi = cfg["seeds"]
        cap = cfg.get("sweep", {}).get("oracle_cap", 50_000)
        for seed in range(lo, hi + 1):
            inst = instances.oracle_instance(seed, cap=cap, max_stages=cfg.get("sweep", {}).get("stages", 3))
            if "driver" in cfg:
                inst.driver = driver_from_spec(cfg["driver"])
            if S > inst.tree.n_stages:
                continue
            rows.append({"seed": seed, **_compare_one(inst, S, budget)})
    else:
        inst = instance_from_config(cfg)
        _check_stage(inst.tree, S)
        rows.append({"seed": cfg.get("seed"), **_compare_one(inst, S, budget)})
    ok = all(r["gap"] <= tol and r["grid_excess"] <= 1e-12 for r in rows)
    lines = ["seed,n_stages,n_rules,max_gap,grid_excess"]
    for r in rows:
        lines.append(f"{r['seed']},{r['n_stages']},{r['n_rules']},{r['gap']:.17g},{r['grid_excess']:.17g}")
    summary = {"stage": S, "tolerance": tol, "all_within_tolerance": ok, "instances": rows}
    return {"oracle_compare.csv": "\n".join(lines) + "\n", "oracle_compare.json": dumps(summary)}, ok


def sweep_checks(inst: instances.Instance, oracle_cap: int) -> dict:
    """The invariant suite run on one instance; every entry is a boolean or a number."""
    tree, driver, obstacle = inst.tree, inst.driver, inst.obstacle
    sol = solve_rbsde(tree, driver, obstacle)
    rep = verify_rbsde(tree, driver, obstacle, sol)
    reg = regularity_report(tree, obstacle)
    res = sol.residuals()
    out = {
        "verified": rep.ok,
        "max_identity_residual": rep.max_identity_residual,
        "martingale_residuals": res,
        "martingale_ok": max(res.values()) <= 1e-12,
        "lusc": reg.lusc,
        "p_right_dominated": reg.p_right_dominated,
        "single_mark": tree.is_single_mark(),
    }
    if reg.lusc:
        out["lusc_implies_no_dA"] = all(np.all(a == 0) for a in sol.dA)
    if tree.is_single_mark():
        out["single_mark_no_dMeta"] = all(np.all(m == 0) for m in sol.dMeta)
    picard, iters = solve_rbsde_picard(tree, driver, obstacle)
    gap = max(float(np.max(np.abs(a - b))) for a, b in zip(picard.Y.value + picard.Y.left, sol.Y.value + sol.Y.left))
    out["picard_iterations"] = iters
    out["picard_ok"] = gap <= 1e-8
    if count_stopping_times(tree, 0) <= oracle_cap:
        oracle = brute_force_value(tree, driver, obstacle, 0)
        out["oracle_gap"] = float(abs(oracle.values[0] - sol.Y0))
        out["oracle_ok"] = out["oracle_gap"] <= ORACLE_TOL
    tt = tau_tilde(sol, 0)
    out["tau_tilde_ok"] = bool(np.all(np.abs(sol.Y.at(tree, tt) - obstacle.at(tree, tt)) <= 1e-10))
    out["ok"] = all(v for k, v in out.items() if k.endswith("_ok") or k in ("verified", "lusc_implies_no_dA",
                                                                           "single_mark_no_dMeta"))
    return out


def cmd_sweep(cfg: dict) -> tuple[dict[str, str], bool]:
    lo, hi = cfg.get("seeds", [cfg.get("seed", 0), cfg.get("seed", 0) + 19])
    opts = cfg.get("sweep", {})
    files: dict[str, str] = {}
    results = []
    for seed in range(lo, hi + 1):
        for mode in instances.OBSTACLE_MODES:
            inst = instances.random_instance(seed, max_stages=opts.get("stages", 3),
                                             max_w_branches=opts.get("branches", 2),
                                             max_marks=opts.get("marks", 2), obstacle_mode=mode)
            if "driver" in cfg:
                inst.driver = driver_from_spec(cfg["driver"])
            checks = sweep_checks(inst, opts.get("oracle_cap", 20_000))
            key = f"seed_{seed}_{mode}"
            sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle)
            files[f"sweep/{key}/model.json"] = dumps(model_dict(inst))
            files[f"sweep/{key}/solution.csv"] = solution_csv(sol)
            files[f"sweep/{key}/report.json"] = dumps(checks)
            results.append({"seed": seed, "obstacle": mode, "ok": checks["ok"]})
    ok = all(r["ok"] for r in results)
    files["sweep/summary.json"] = dumps({"all_ok": ok, "instances": results})
    return files, ok


HANDLERS = {
    "solve": cmd_solve,
    "stop": cmd_stop,
    "verify": cmd_verify,
    "oracle-compare": cmd_oracle_compare,
    "sweep": cmd_sweep,
}


def run(command: str, cfg: dict) -> int:
    files, ok = HANDLERS[command](cfg)
    write_outputs(Path(cfg.get("out", ".")), files)
    return EXIT_OK if ok else EXIT_MISMATCH


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return run(args.command, cfg)
    except (NoContraction, NoConvergence, BudgetExceeded) as exc:
        print(f"presto: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PrestoError as exc:
        print(f"presto: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError, jsonschema.ValidationError, argparse.ArgumentTypeError,
            OSError, KeyError, TypeError, ValueError) as exc:
        print(f"presto: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
