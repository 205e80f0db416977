"""Run a validated scenario, expand sweeps, write each run's outputs."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

from .config import ScenarioCfg, apply_override, dump_resolved, load_raw, validate
from .metrics import RunResult
from .output import write_outputs

log = logging.getLogger(__name__)


def run_scenario(cfg: ScenarioCfg, record_trace: bool = False) -> RunResult:
    if cfg.scenario == "t0t1":
        from ..scenarios.t0t1 import run_t0t1
        return run_t0t1(cfg, record_trace)
    from ..scenarios.proof import run_proof
    return run_proof(cfg, record_trace)


def sweep_points(sweeps: list[tuple[str, list[Any]]]) -> list[dict[str, Any]]:
    """Cartesian product of sweep axes, in the order given."""
    if not sweeps:
        return [{}]
    keys = [k for k, _ in sweeps]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in sweeps))]


def point_dirname(point: dict[str, Any]) -> str:
    return "__".join(f"{k}={v}" for k, v in point.items()).replace("/", "_") or "run"


def build_config(path: str | Path, overrides: dict[str, Any]) -> ScenarioCfg:
    data, lines, source = load_raw(path)
    for k, v in overrides.items():
        apply_override(data, k, v)
    return validate(data, lines, source)


def run_point(path: str, overrides: dict[str, Any], outdir: str) -> tuple[str, dict]:
    cfg = build_config(path, overrides)
    result = run_scenario(cfg)
    write_outputs(result, outdir, dump_resolved(cfg))
    return outdir, {"report": result.report, "extra": result.extra,
                    "violations": sum(len(v) for v in result.audits.values())}


def run_all(path: str, overrides: dict[str, Any], sweeps: list[tuple[str, list[Any]]], outdir: str,
            jobs: int = 1) -> list[tuple[str, dict]]:
    """One run per sweep point.  Points are independent, so ``jobs > 1`` runs them in worker processes."""
    points = sweep_points(sweeps)
    tasks = []
    for point in points:
        ov = dict(overrides)
        ov.update(point)
        out = Path(outdir) / point_dirname(point) if sweeps else Path(outdir)
        tasks.append((str(path), ov, str(out)))
    # validate every point before spending time on any of them
    for p, ov, _ in tasks:
        build_config(p, ov)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_point, *zip(*tasks)))
    return [run_point(*t) for t in tasks]
