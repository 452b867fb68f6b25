"""Command-line front end.

Subcommands read one JSON config (``--config``) and write into its output
directory.  Failures exit with 2 (configuration) or 3 (runtime).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import grassmann as gr
from .config import ConfigError, PipelineConfig, load_config
from .dynamics import SimCounter, export_trajectory
from .fem import MeshError, ModalError, assemble, build_mesh, modal_basis
from .mpc import mpc_run
from .pipeline import (DatasetError, Problem, compare_bo_vs_boca, identity_baseline,
                   load_dataset, rbbo)
from .rom import SCHEMA_VERSION, ReducedModel, reduce

log = logging.getLogger("softspace")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ROM_FILE = "rom.json"
EIG_FILE = "eigenvalues.json"
MESH_FILE = "mesh.json"
DATASET_FILE = "dataset.jsonl"


class RuntimeFailure(RuntimeError):
    pass


def _write_json(path: Path, obj: dict) -> None:
    obj = {"schema_version": SCHEMA_VERSION, **obj}
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ build-rom


def cmd_build_rom(cfg: PipelineConfig, args) -> int:
    mesh = build_mesh(cfg.mesh)
    ndof = mesh.dim * mesh.node_count
    if cfg.modes > ndof:
        raise ConfigError(f"modes M = {cfg.modes} exceeds the mesh's degrees of freedom dN = {ndof}")
    full = assemble(mesh, cfg.material)
    basis = modal_basis(full, cfg.modes)
    red = reduce(full, basis)
    if cfg.control_dim > red.control_dim:
        raise ConfigError(f"control_dim C = {cfg.control_dim} exceeds the {red.control_dim} actuated "
                          f"(elastic) modes of M = {cfg.modes}")
    out = _out(cfg)
    rom = red.to_dict()
    rom["config_digest"] = cfg.rom_digest()
    (out / ROM_FILE).write_text(json.dumps(rom, sort_keys=True) + "\n", encoding="utf-8")
    _write_json(out / EIG_FILE, {"eigenvalues": basis.eigenvalues.tolist(), "labels": basis.labels,
                                 "n_rigid": basis.n_rigid})
    _write_json(out / MESH_FILE, json.loads(mesh.to_json()))
    print(f"{'mode':>4}  {'kind':<8}{'eigenvalue':>14}{'freq [Hz]':>12}")
    for i, (lam, lab) in enumerate(zip(basis.eigenvalues, basis.labels)):
        freq = np.sqrt(max(lam, 0.0)) / (2 * np.pi)
        print(f"{i:>4}  {lab:<8}{lam:>14.6g}{freq:>12.4g}")
    print(f"wrote {out / ROM_FILE} ({mesh.node_count} nodes, M = {cfg.modes})")
    return EXIT_OK


def load_rom(cfg: PipelineConfig) -> ReducedModel:
    path = Path(cfg.output_dir) / ROM_FILE
    if not path.exists():
        raise RuntimeFailure(f"missing {path}; run 'build-rom' with this config first")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RuntimeFailure(f"{path} is not valid JSON: {exc}") from None
    if data.get("config_digest") != cfg.rom_digest():
        raise RuntimeFailure(f"{path} was built from a different mesh/material/modes; rerun 'build-rom'")
    red = ReducedModel.from_dict(data)
    if cfg.control_dim > red.control_dim:
        raise ConfigError(f"control_dim C = {cfg.control_dim} exceeds the {red.control_dim} actuated modes")
    return red


def _problem(cfg: PipelineConfig) -> Problem:
    return Problem(load_rom(cfg), cfg.environment, cfg.task)


# ------------------------------------------------------------------ run-mpc


def _load_basis(source: str, M: int, C: int) -> np.ndarray:
    if source == "identity":
        return gr.identity_point(M, C)
    path = Path(source)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeFailure(f"cannot read basis file {path}: {exc}") from None
    B = np.asarray(data["b_c"] if isinstance(data, dict) else data, float)
    if B.ndim == 1 and isinstance(data, dict) and "m" in data:
        B = B.reshape(int(data["m"]), int(data["c"]))
    if B.ndim != 2 or B.shape[0] != M:
        raise ConfigError(f"basis in {path} has shape {B.shape}; the control space needs {M} rows")
    if B.shape[1] != C:
        raise ConfigError(f"basis in {path} has {B.shape[1]} columns; control_dim is {C}")
    if not gr.is_orthonormal(B):
        raise ConfigError(f"basis in {path} does not have orthonormal columns")
    return B


def cmd_run_mpc(cfg: PipelineConfig, args) -> int:
    prob = _problem(cfg)
    B = _load_basis(args.basis, prob.model.control_dim, cfg.control_dim)
    counter = SimCounter()
    t0 = time.perf_counter()
    res = mpc_run(prob.model, prob.start, B, cfg.steps, cfg.mpc, prob.env, prob.task, seed=cfg.seed,
                  counter=counter)
    wall = time.perf_counter() - t0
    out = _out(cfg)
    summary = {
        "reward": res.total_reward,
        "regularizer": res.total_regularizer,
        "steps": res.trajectory.length,
        "wall_time_s": wall,
        "seed": cfg.seed,
        "basis": args.basis,
        "counters": counter.snapshot(),
    }
    export_trajectory(res.trajectory, out / "trajectory.csv", out / "trajectory.json", extra=summary)
    print(f"reward {res.total_reward:.6g}  regularizer {res.total_regularizer:.6g}  "
          f"steps {res.trajectory.length}  wall {wall:.2f}s")
    return EXIT_OK


# ------------------------------------------------------------------ run-rbbo / compare


def _write_series(path: Path, series: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["evaluation", "time_s", "T", "reward", "best_normalized", "best_at_T_max"])
        for s in series:
            best = "" if s["best_at_T_max"] is None else repr(s["best_at_T_max"])
            w.writerow([s["evaluations"], repr(s["time_s"]), s["T"], repr(s["reward"]),
                        repr(s["best_normalized"]), best])


def _baseline(cfg: PipelineConfig, prob: Problem, out: Path, resume: bool) -> dict:
    path = out / "baseline.json"
    if resume and path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    rec = identity_baseline(prob, cfg.rbbo, cfg.mpc)
    data = rec.to_dict()
    _write_json(path, data)
    return data


def cmd_run_rbbo(cfg: PipelineConfig, args) -> int:
    prob = _problem(cfg)
    out = _out(cfg)
    base = _baseline(cfg, prob, out, args.resume)
    counter = SimCounter()
    res = rbbo(prob, cfg.rbbo, cfg.mpc, path=out / DATASET_FILE, resume=args.resume, counter=counter)
    best = res.best
    _write_json(out / "best_basis.json", best.to_dict())
    _write_series(out / "convergence.csv", res.series)
    r0 = base["reward"]
    improvement = best.reward / r0 - 1.0 if r0 != 0 else None
    _write_json(out / "report.json", {
        "baseline_reward": r0,
        "best_reward": best.reward,
        "improvement": improvement,
        "evaluations": res.evaluations,
        "kernel_params": res.params.to_dict() if res.params else None,
        "counters": counter.snapshot(),
        "series": res.series,
    })
    imp = "n/a" if improvement is None else f"{100 * improvement:+.1f}%"
    print(f"baseline {r0:.6g}  best {best.reward:.6g}  improvement {imp}  evaluations {res.evaluations}")
    return EXIT_OK


def cmd_compare(cfg: PipelineConfig, args) -> int:
    prob = _problem(cfg)
    out = _out(cfg)
    report = compare_bo_vs_boca(prob, cfg.rbbo, cfg.mpc, cfg.compare_budget_s)
    for name in ("bo", "boca"):
        _write_series(out / f"convergence_{name}.csv", report[name]["series"])
    report = {k: v for k, v in report.items() if k != "schema_version"}
    _write_json(out / "compare.json", report)
    for name in ("bo", "boca"):
        r = report[name]
        print(f"{name:<5} evaluations {r['evaluations']:>4}  best {r['best_reward']:.6g}")
    return EXIT_OK


# ------------------------------------------------------------------ export


def cmd_export(cfg: PipelineConfig, args) -> int:
    """Flatten the dataset into CSV and replay the best basis into a trajectory CSV."""
    out = _out(cfg)
    ds_path = out / DATASET_FILE
    if not ds_path.exists():
        raise RuntimeFailure(f"missing {ds_path}; run 'run-rbbo' first")
    records = load_dataset(ds_path)
    with open(out / "dataset.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "phase", "T", "reward", "lambda", "seed", "controller", "wall_time_s"])
        for r in records:
            w.writerow([r.index, r.phase, r.T, repr(r.reward), repr(r.regularizer), r.seed, r.controller,
                        repr(r.wall_time_s)])
    print(f"wrote {out / 'dataset.csv'} ({len(records)} records)")
    best_path = out / "best_basis.json"
    if best_path.exists():
        prob = _problem(cfg)
        B = _load_basis(str(best_path), prob.model.control_dim, cfg.control_dim)
        res = mpc_run(prob.model, prob.start, B, cfg.steps, cfg.mpc, prob.env, prob.task, seed=cfg.seed)
        export_trajectory(res.trajectory, out / "best_trajectory.csv", out / "best_trajectory.json",
                          extra={"reward": res.total_reward, "regularizer": res.total_regularizer})
        print(f"wrote {out / 'best_trajectory.csv'}")
    return EXIT_OK


COMMANDS = {
    "build-rom": cmd_build_rom,
    "run-mpc": cmd_run_mpc,
    "run-rbbo": cmd_run_rbbo,
    "compare": cmd_compare,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softspace", description="Reduced-order soft-robot MPC with control-space optimization.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="override the output directory")
        sp.add_argument("--resume", action="store_true", help="continue from an existing dataset")
        sp.add_argument("--threads", type=int, help="cap on concurrent rollouts")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "run-mpc":
            sp.add_argument("--basis", default="identity", help="'identity' or a JSON basis file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out, threads=args.threads)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, DatasetError, ModalError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
