"""Orchestration behind the command-line interface."""

from __future__ import annotations

import io
import logging
import math
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..backbone_sim import AtomicMeasure, BackboneTree, evaluate_Z, poissonize, sample_tree
from ..dressing import analytic_conditional_laplace
from ..errors import PopulationExplosion
from ..mild_solver import solve_backbone, solve_u, solve_u_star, solve_v, solve_w
from .checks import CHECKS, _solver
from .config import ExperimentConfig
from .report import ReportRecord, write_results, write_summary
from .rng import map_replicates

__all__ = ["run_derive", "run_verify", "run_report", "run_solve", "run_simulate", "results_text"]

log = logging.getLogger(__name__)


def run_derive(cfg: ExperimentConfig) -> str:
    """Table of derived constants and offspring laws; raises on invalid mechanisms."""
    model = cfg.model(require_grey=False)
    c = model.constants
    laws = model.laws
    lines = ["quantity\tvalue"]
    for key in ("lambda_star", "q", "mean_rate", "backbone_rate", "grey_lower_ok", "grey_upper_ok", "supercritical_ok"):
        lines.append(f"{key}\t{getattr(c, key)}")
    lines.append(f"normalization_error\t{abs(laws.local_mass + laws.nonlocal_mass - 1):.3e}")
    lines.append(f"truncation\t{laws.n_max}")
    lines.append(f"tail_mass\t{laws.tail_mass:.3e}")
    lines.append("")
    lines.append("type\tn\tprobability")
    for is_local, n, p in zip(*laws.categories):
        lines.append(f"{'local' if is_local else 'nonlocal'}\t{n}\t{p:.17g}")
    return "\n".join(lines) + "\n"


def run_verify(cfg: ExperimentConfig, only: Optional[List[str]] = None) -> List[ReportRecord]:
    """Run the configured checks; errors become failed records."""
    records: List[ReportRecord] = []
    chash = cfg.hash
    for entry in cfg.checks:
        name = entry["name"]
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            if name not in CHECKS:
                raise KeyError(f"no registered check named {name!r}")
            recs = CHECKS[name](cfg, entry.get("params", {}), name)
        except Exception as exc:  # a broken check must not stop the suite
            log.exception("check %s failed", name)
            recs = [ReportRecord.failure(name, exc)]
        elapsed = time.perf_counter() - start
        for r in recs:
            r.runtime = elapsed
            r.config_hash = chash
        records.extend(recs)
    return records


def results_text(records: List[ReportRecord]) -> str:
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        return write_results(records, Path(tmp) / "r.tsv").read_text()


def run_report(records: List[ReportRecord], out_dir) -> dict:
    """results.tsv (deterministic), summary.txt and timings.tsv under ``out_dir``."""
    out = Path(out_dir)
    paths = {
        "results": write_results(records, out / "results.tsv"),
        "summary": write_summary(records, out / "summary.txt"),
    }
    timings = ["name\truntime_s"] + [f"{r.name}\t{r.runtime:.3f}" for r in records]
    paths["timings"] = out / "timings.tsv"
    paths["timings"].write_text("\n".join(timings) + "\n")
    return paths


def run_solve(cfg: ExperimentConfig, kind: str, f: float, h: float, t: float, out_dir, grid: bool = False) -> Path:
    """Solve one of the equations with constant data and write its levels."""
    model = cfg.model()
    scfg = _solver(cfg, grid=cfg.grid if grid else None, dt=None if not grid else max(cfg.solver.get("dt", 1e-3), 1e-2))
    if kind == "u":
        field = solve_u(model, f, t, scfg)
    elif kind == "u_star":
        field = solve_u_star(model, f, t, scfg)
    elif kind == "v":
        field = solve_v(model, f, h, t, scfg)
    elif kind == "w":
        field = solve_w(model, f, h, t, scfg, g="subordinator")
    elif kind == "backbone":
        field = solve_backbone(model, h, t, scfg)
    else:
        raise ValueError(f"unknown equation {kind!r}")
    path = Path(out_dir) / f"solve_{kind}.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    field.write(path)
    return path


def _simulate_one(rng, i, model, t, f, h, field, dt, cap):
    mu = AtomicMeasure.dirac(np.zeros(model.motion.dimension))
    nu = poissonize(mu, model.lambda_star, rng)
    try:
        tree = sample_tree(nu, t, model, rng, dt, cap) if nu.n_atoms else BackboneTree({}, t, nu, dt)
    except PopulationExplosion:
        return i, math.nan, -1, None
    value = analytic_conditional_laplace(tree, f, h, t, field, model, mu=mu).value
    lines = tree.to_lines() if i < 5 else None
    return i, value, evaluate_Z(tree, t).n_atoms, lines


def run_simulate(cfg: ExperimentConfig, t: float, f: float, h: float, out_dir) -> dict:
    """Poissonised backbones from a unit mass at the origin with analytic dressing.

    Writes per-replicate conditional Laplace values and backbone sizes, and
    the first trees in line format.
    """
    model = cfg.model()
    sim = cfg.simulation
    field = solve_u_star(model, f, t, _solver(cfg), check=False)
    res = map_replicates(
        lambda rng, i: _simulate_one(rng, i, model, t, f, h, field, float(sim["dt"]), int(sim["cap"])),
        int(sim["replicates"]), cfg.seed, "simulate", 1,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("replicate\tconditional_laplace\tbackbone_size\n")
    for i, v, k, _ in res:
        buf.write(f"{i}\t{v:.17g}\t{k}\n")
    (out / "replicates.tsv").write_text(buf.getvalue())
    trees = [f"# replicate {i}\n" + "\n".join(lines) for i, _, _, lines in res if lines is not None]
    (out / "trees.txt").write_text("\n".join(trees) + "\n")
    vals = np.array([v for _, v, _, _ in res])
    return {"mean": float(np.nanmean(vals)), "replicates": len(res), "dir": str(out)}
