"""Fixed-step reference integrator over a declarative claim trace.

A trace is a mapping::

    resources: {cpu: 10}
    claims:
      - {id: A, work: 100, join: 0}
      - {id: B, work: 50, join: 4, weight: 1, cap: .inf, resources: [cpu]}

``resources`` on a claim defaults to every resource when there is exactly one.
Rates are re-solved every step with an allocation written independently of
the engine's (bottleneck fixing rather than progressive filling).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import yaml

from .. import kernels
from ..engine import Claim, SharedResource, Simulator


def load_trace(path: str | Path) -> dict:
    with open(path) as fh:
        trace = yaml.safe_load(fh)
    if not isinstance(trace, dict) or "resources" not in trace or "claims" not in trace:
        raise ValueError(f"{path}: trace needs 'resources' and 'claims'")
    return trace


def _arrays(trace: dict):
    names = list(trace["resources"])
    res_cap = np.array([float(trace["resources"][n]) for n in names])
    pos = {n: i for i, n in enumerate(names)}
    ids, join, work, weight, cap, ptr, idx = [], [], [], [], [], [0], []
    for c in trace["claims"]:
        used = c.get("resources")
        if used is None:
            if len(names) != 1:
                raise ValueError(f"claim {c['id']}: name its resources")
            used = names
        ids.append(str(c["id"]))
        join.append(float(c.get("join", 0.0)))
        work.append(float(c["work"]))
        weight.append(float(c.get("weight", 1.0)))
        cap.append(float(c.get("cap", math.inf)))
        idx.extend(pos[r] for r in used)
        ptr.append(len(idx))
    return (ids, np.array(join), np.array(work), np.array(weight), np.array(cap),
            np.array(ptr, dtype=np.int64), np.array(idx, dtype=np.int64), res_cap)


def horizon(trace: dict) -> float:
    """A time by which every claim must have finished.

    Each claim always gets at least its weighted equal share of every resource
    it uses (or its cap), so join + work / that share bounds its finish.
    """
    _ids, join, work, weight, cap, ptr, idx, res_cap = _arrays(trace)
    wsum = np.bincount(idx, weights=np.repeat(weight, np.diff(ptr)), minlength=res_cap.size)
    bound = 0.0
    for i in range(join.size):
        share = cap[i]
        for k in idx[ptr[i]:ptr[i + 1]]:
            share = min(share, res_cap[k] * weight[i] / wsum[k])
        bound = max(bound, join[i] + work[i] / share)
    return bound


def timestep_oracle(trace: dict, dt: float, t_max: float | None = None) -> dict[str, float]:
    """Completion time of every claim, stepping ``dt`` at a time."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    ids, join, work, weight, cap, ptr, idx, res_cap = _arrays(trace)
    if t_max is None:
        t_max = horizon(trace) + 2 * dt
    finish = kernels.integrate_fixed_step(join, work, weight, cap, ptr, idx, res_cap, dt, t_max)
    return dict(zip(ids, (float(x) for x in finish)))


def event_driven(trace: dict) -> dict[str, float]:
    """Completion times from the engine, for traces whose claims use one resource each."""
    sim = Simulator()
    resources = {n: SharedResource(sim, n, float(c)) for n, c in trace["resources"].items()}
    names = list(resources)
    done: dict[str, float] = {}
    for c in trace["claims"]:
        used = c.get("resources") or names
        if len(used) != 1:
            raise ValueError(f"claim {c['id']}: the engine path handles single-resource claims only")
        res = resources[used[0]]
        claim = Claim(str(c["id"]), float(c["work"]), float(c.get("weight", 1.0)), float(c.get("cap", math.inf)),
                      on_done=lambda cl: done.__setitem__(cl.owner, sim.now))
        sim.at(float(c.get("join", 0.0)), res.join, claim)
    sim.run_until(horizon(trace) * (1 + 1e-9) + 1.0)
    return {str(c["id"]): done.get(str(c["id"]), math.nan) for c in trace["claims"]}
