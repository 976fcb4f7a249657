"""Experiment configuration: a YAML file describing model, numerics and checks."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from ..errors import ConfigError
from ..mechanism import LevyMeasure, Mechanism
from ..model import Model
from ..motion import DisplacementKernel, Grid, MotionSpec

__all__ = ["ExperimentConfig", "load_config", "default_config", "PRESETS", "build_mechanism", "config_hash"]

# Reference mechanisms.  "m0" is the quadratic reference case; the others
# exercise atoms, exponential densities, non-local jumps and (jumps_nogrey)
# a mechanism without a quadratic part.
PRESETS = {
    "m0": {"alpha": -0.5, "beta": 1.0, "gamma": 1.0, "displacement": {"normal": [0.0, 1.0]}},
    "jumps_mixed": {
        "alpha": -1.2,
        "beta": 0.5,
        "gamma": 0.6,
        "pi_L": {"atoms": [[0.4, 1.0]], "exp": [0.3, 2.0]},
        "pi_NL": {"atoms": [[0.5, 0.7]]},
        "displacement": {"normal": [0.0, 1.0]},
    },
    "jumps_exp": {
        "alpha": -1.0,
        "beta": 0.3,
        "gamma": 0.5,
        "pi_L": {"exp": [1.0, 1.0]},
        "pi_NL": {"exp": [0.2, 1.0]},
        "displacement": {"atoms": [[0.5, -1.0], [0.5, 1.0]]},
    },
    "jumps_atoms": {
        "alpha": -0.8,
        "beta": 1.0,
        "gamma": 0.0,
        "pi_L": {"atoms": [[0.5, 0.5], [0.2, 3.0]]},
        "pi_NL": {"atoms": [[0.3, 1.5]]},
        "displacement": {"normal": [0.5, 0.25]},
    },
    "jumps_heavy_quadratic": {
        "alpha": -1.0,
        "beta": 2.0,
        "gamma": 1.0,
        "pi_L": {"exp": [0.5, 3.0]},
        "displacement": {"atoms": [[0.3, 0.0]], "normal_weight": 0.7},
    },
    "jumps_nogrey": {"alpha": -0.7, "beta": 0.0, "gamma": 0.8, "pi_L": {"atoms": [[1.0, 2.0]]}},
}

_DEFAULTS = {
    "seed": 20240917,
    "mechanism": {"preset": "m0"},
    "motion": {"diffusion": 1.0, "drift": 0.0, "dimension": 1, "grid": {"half_width": 10.0, "spacing": 0.05}},
    "solver": {"dt": 1e-3, "picard_tol": 1e-12, "picard_max_iters": 100},
    "simulation": {
        "replicates": 100_000,
        "dt": 0.01,
        "cap": 1_000_000,
        "epsilon": 1e-3,
        "m": 1e-3,
        "step": 0.05,
        "workers": 1,
    },
    "checks": [
        {"name": "constants"},
        {"name": "lambda_shift_identity"},
        {"name": "scalar_oracle"},
        {"name": "conditional_laplace_mc"},
        {"name": "backbone_split_identity"},
        {"name": "poissonized_laplace_mc"},
        {"name": "backbone_laws"},
        {"name": "subordinator"},
        {"name": "particle_dressing"},
    ],
}


def _levy(block) -> LevyMeasure:
    if not block:
        return LevyMeasure()
    atoms = tuple((float(w), float(y)) for w, y in block.get("atoms", []))
    c, r = block.get("exp", [0.0, 1.0])
    return LevyMeasure(atoms=atoms, exp_coeff=float(c), exp_rate=float(r))


def _displacement(block) -> DisplacementKernel:
    if not block:
        return DisplacementKernel.identity()
    if "normal" in block:
        mean, var = block["normal"]
        return DisplacementKernel.normal(float(mean), float(var))
    return DisplacementKernel(
        atoms=tuple((float(p), float(a)) for p, a in block.get("atoms", [])),
        normal_weight=float(block.get("normal_weight", 0.0)),
        normal_mean=float(block.get("normal_mean", 0.0)),
        normal_var=float(block.get("normal_var", 1.0)),
    )


def build_mechanism(block: dict) -> Mechanism:
    """Mechanism from a config block; ``preset`` keys are expanded first."""
    block = dict(block)
    if "preset" in block:
        name = block.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"unknown mechanism preset {name!r}")
        block = {**PRESETS[name], **block}
    try:
        return Mechanism(
            alpha=float(block["alpha"]),
            beta=float(block["beta"]),
            gamma=float(block.get("gamma", 0.0)),
            pi_L=_levy(block.get("pi_L")),
            pi_NL=_levy(block.get("pi_NL")),
            displacement=_displacement(block.get("displacement")),
        )
    except KeyError as exc:
        raise ConfigError(f"mechanism block is missing {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid mechanism: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "mechanism":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_hash(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self):
        if "seed" not in self.raw or not isinstance(self.raw["seed"], int):
            raise ConfigError("config needs an integer seed")
        for name in ("mechanism", "motion", "solver", "simulation"):
            if not isinstance(self.raw.get(name), dict):
                raise ConfigError(f"config block {name!r} missing or not a mapping")
        self.mechanism = build_mechanism(self.raw["mechanism"])
        mo = self.raw["motion"]
        try:
            self.motion = MotionSpec(float(mo["diffusion"]), mo.get("drift", 0.0), int(mo.get("dimension", 1)))
            g = mo.get("grid")
            self.grid = Grid(float(g["half_width"]), float(g["spacing"])) if g else None
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid motion block: {exc}") from exc

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def solver(self) -> dict:
        return self.raw["solver"]

    @property
    def simulation(self) -> dict:
        return self.raw["simulation"]

    @property
    def checks(self) -> list:
        return [c if isinstance(c, dict) else {"name": c} for c in self.raw.get("checks", [])]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def model(self, require_grey: bool = True) -> Model:
        return Model(self.mechanism, self.motion, require_grey=require_grey)

    def with_overrides(self, seed: Optional[int] = None, replicates: Optional[int] = None) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if replicates is not None:
            raw["simulation"]["replicates"] = int(replicates)
            for check in raw.get("checks", []):
                if isinstance(check, dict) and "replicates" in check.get("params", {}):
                    check["params"]["replicates"] = int(replicates)
        return ExperimentConfig(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig(_merge(_DEFAULTS, overrides))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig(_merge(_DEFAULTS, data))
