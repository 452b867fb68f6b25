"""Run configuration: one JSON file describes a full pipeline run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .dynamics import Environment, Task
from .fem import Material, MeshError, build_mesh
from .mpc import MPCConfig
from .pipeline import RbboConfig

TASK_MODES = {"walk": "ground", "swim": "fluid"}


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str, exclude: tuple = ()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    mesh: dict
    modes: int  # M
    control_dim: int  # C
    task_mode: str = "walk"
    material: Material = field(default_factory=Material)
    environment: Environment = field(default_factory=Environment)
    task: Task = field(default_factory=Task)
    mpc: MPCConfig = field(default_factory=MPCConfig)
    rbbo: RbboConfig = field(default_factory=RbboConfig)
    compare_budget_s: float = 60.0
    run_steps: int | None = None  # run-mpc length; default T_max
    output_dir: str = "out"
    seed: int = 0

    @property
    def steps(self) -> int:
        return self.run_steps if self.run_steps is not None else self.rbbo.T_max

    def rom_source(self) -> dict:
        """The inputs that determine the reduced model."""
        return {"mesh": self.mesh, "material": asdict(self.material), "modes": self.modes}

    def rom_digest(self) -> str:
        blob = json.dumps(self.rom_source(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, *, seed=None, output_dir=None, threads=None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed), rbbo=replace(cfg.rbbo, seed=int(seed)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {threads}")
            cfg = replace(cfg, mpc=replace(cfg.mpc, threads=int(threads)))
        return cfg


_TOP = {"schema_version", "mesh", "material", "modes", "control_dim", "environment", "task", "mpc",
        "rbbo", "compare_budget_s", "run_steps", "output_dir", "seed"}


def parse_config(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(data) - _TOP)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    for key in ("mesh", "modes", "control_dim"):
        if key not in data:
            raise ConfigError(f"missing required field {key!r}")
    mesh = data["mesh"]
    if not isinstance(mesh, dict):
        raise ConfigError("mesh: expected an object")
    try:
        dim = build_mesh(mesh).dim
    except (MeshError, TypeError, ValueError) as exc:
        raise ConfigError(f"mesh: {exc}") from None
    M, C = data["modes"], data["control_dim"]
    if not (isinstance(M, int) and isinstance(C, int)) or not 1 <= C <= M:
        raise ConfigError(f"need integers 1 <= control_dim <= modes, got control_dim = {C}, modes = {M}")
    seed = int(data.get("seed", 0))

    task_data = dict(data.get("task") or {})
    task_mode = task_data.pop("mode", "walk")
    if task_mode not in TASK_MODES:
        raise ConfigError(f"task.mode must be 'walk' or 'swim', got {task_mode!r}")
    task = _build(Task, task_data, "task")

    env_data = dict(data.get("environment") or {})
    env_mode = env_data.setdefault("mode", TASK_MODES[task_mode])
    if env_mode != TASK_MODES[task_mode]:
        raise ConfigError(f"task mode {task_mode!r} requires environment mode {TASK_MODES[task_mode]!r}, got {env_mode!r}")
    if "normal" in env_data:
        n = np.asarray(env_data["normal"], float)
        if not np.linalg.norm(n) > 0:
            raise ConfigError("environment.normal must be non-zero")
        env_data["normal"] = tuple(n / np.linalg.norm(n))
    env = _build(Environment, env_data, "environment")

    if len(task.direction) != dim or len(env.normal) != dim:
        raise ConfigError(f"task.direction and environment.normal must have {dim} components for this mesh")

    rbbo_data = dict(data.get("rbbo") or {})
    for key in ("C", "seed"):
        if key in rbbo_data:
            raise ConfigError(f"rbbo.{key} is set at the top level ({'control_dim' if key == 'C' else 'seed'})")
    rbbo_cfg = _build(RbboConfig, {**rbbo_data, "C": C, "seed": seed}, "rbbo")
    mpc_cfg = _build(MPCConfig, data.get("mpc"), "mpc")
    material = _build(Material, data.get("material"), "material")

    out = data.get("output_dir", "out")
    if base_dir is not None and not Path(out).is_absolute():
        out = str(Path(base_dir) / out)
    budget = float(data.get("compare_budget_s", 60.0))
    if not budget > 0:
        raise ConfigError("compare_budget_s must be positive")
    run_steps = data.get("run_steps")
    if run_steps is not None and (not isinstance(run_steps, int) or run_steps < 1):
        raise ConfigError("run_steps must be a positive integer")
    return PipelineConfig(mesh=mesh, modes=M, control_dim=C, task_mode=task_mode, material=material,
                          environment=env, task=task, mpc=mpc_cfg, rbbo=rbbo_cfg, compare_budget_s=budget,
                          run_steps=run_steps, output_dir=out, seed=seed)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data, base_dir=path.parent)
