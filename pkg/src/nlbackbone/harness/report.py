"""Report records and their on-disk formats."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List

__all__ = ["ReportRecord", "decide", "write_results", "read_results", "write_summary", "RESULT_COLUMNS"]

RESULT_COLUMNS = ("name", "target", "target_source", "estimate", "se", "tolerance", "rule", "passed", "config_hash", "details")

RULES = {
    "abs": "|estimate - target| <= tolerance",
    "at_least": "estimate >= tolerance",
}


def decide(rule: str, estimate: float, target: float, tolerance: float) -> bool:
    if not all(math.isfinite(v) for v in (estimate, tolerance)):
        return False
    if rule == "abs":
        return math.isfinite(target) and abs(estimate - target) <= tolerance
    if rule == "at_least":
        return estimate >= tolerance
    raise ValueError(f"unknown rule {rule!r}")


@dataclass
class ReportRecord:
    name: str
    target: float
    target_source: str
    estimate: float
    se: float
    tolerance: float
    rule: str = "abs"
    passed: bool = False
    runtime: float = 0.0
    config_hash: str = ""
    details: dict = field(default_factory=dict)

    @classmethod
    def make(cls, name, target, source, estimate, tolerance, se=0.0, rule="abs", **details) -> "ReportRecord":
        target, estimate, tolerance, se = float(target), float(estimate), float(tolerance), float(se)
        return cls(name, target, source, estimate, se, tolerance, rule, decide(rule, estimate, target, tolerance), details=details)

    @classmethod
    def failure(cls, name: str, error: BaseException) -> "ReportRecord":
        return cls(name, math.nan, "none", math.nan, math.nan, math.nan, "abs", False,
                   details={"error": f"{type(error).__name__}: {error}"})

    def line(self) -> str:
        def num(x):
            return f"{x:.17g}"

        details = json.dumps(self.details, sort_keys=True, default=_jsonable)
        return "\t".join(
            [self.name, num(self.target), self.target_source, num(self.estimate), num(self.se),
             num(self.tolerance), self.rule, "PASS" if self.passed else "FAIL", self.config_hash, details]
        )


def _jsonable(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return str(x)


def write_results(records: Iterable[ReportRecord], path) -> Path:
    """One tab-separated record per line under a comment and a column header.

    Runtimes are not written here so that equal seeds give equal files.
    """
    path = Path(path)
    lines = ["# nlbackbone verification results; rules: "
             + "; ".join(f"{k}: {v}" for k, v in RULES.items()), "\t".join(RESULT_COLUMNS)]
    lines += [r.line() for r in records]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def read_results(path) -> List[ReportRecord]:
    path = Path(path)
    try:
        rows = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    out = []
    for row in rows:
        if row.startswith("#") or row.startswith("name\t") or not row.strip():
            continue
        name, target, source, est, se, tol, rule, passed, chash, details = row.split("\t")
        out.append(ReportRecord(name, float(target), source, float(est), float(se), float(tol), rule,
                                passed == "PASS", 0.0, chash, json.loads(details)))
    return out


def write_summary(records: List[ReportRecord], path, timings: bool = True) -> Path:
    """Human-readable table; includes runtimes unless ``timings`` is false."""
    path = Path(path)
    width = max([len(r.name) for r in records] + [4])
    lines = [f"{'check'.ljust(width)}  result  estimate             target               tolerance"]
    for r in records:
        row = (f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    "
               f"{r.estimate:<20.12g} {r.target:<20.12g} {r.tolerance:<.3g}")
        if timings:
            row += f"   ({r.runtime:.2f} s)"
        lines.append(row)
    failed = sum(not r.passed for r in records)
    lines.append(f"{len(records) - failed}/{len(records)} checks passed")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc}") from exc
    return path
