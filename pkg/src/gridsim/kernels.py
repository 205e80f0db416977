"""Hot numeric kernels: rate allocation and the fixed-step reference integrator.

Every kernel exists twice: an explicit-loop version compiled with numba's
``@njit`` and a vectorised numpy version.  The numba path is used when numba
imports cleanly and ``GRIDSIM_DISABLE_JIT`` is unset (or ``0``); otherwise the
numpy path is bound to the public names.  Both paths must agree to rounding.

Flow paths are passed in CSR form: flow ``f`` crosses links
``idx[ptr[f]:ptr[f + 1]]``.
"""

from __future__ import annotations

import os

import numpy as np

# Links whose residual capacity falls below this fraction of their capacity
# count as saturated; caps closer than this are treated as reached.
REL_TOL = 1e-10

_env = os.environ.get("GRIDSIM_DISABLE_JIT", "").strip().lower()
JIT_REQUESTED = _env in ("", "0", "false", "no")

try:
    if not JIT_REQUESTED:
        raise ImportError("jit disabled by GRIDSIM_DISABLE_JIT")
    from numba import njit
except ImportError:
    njit = None

USING_NUMBA = njit is not None
BACKEND = "numba" if USING_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# progressive filling (engine and network allocation)
# ---------------------------------------------------------------------------

def _progressive_fill_loop(ptr, idx, link_cap, flow_cap, weight):
    n = ptr.shape[0] - 1
    nl = link_cap.shape[0]
    rate = np.zeros(n)
    frozen = np.zeros(n, dtype=np.bool_)
    rem = link_cap.copy()
    wsum = np.zeros(nl)
    saturated = np.zeros(nl, dtype=np.bool_)
    active = n
    while active > 0:
        for l in range(nl):
            wsum[l] = 0.0
        for f in range(n):
            if not frozen[f]:
                for k in range(ptr[f], ptr[f + 1]):
                    wsum[idx[k]] += weight[f]
        delta = np.inf
        for l in range(nl):
            if wsum[l] > 0.0:
                share = rem[l] / wsum[l]
                if share < delta:
                    delta = share
        for f in range(n):
            if not frozen[f]:
                head = (flow_cap[f] - rate[f]) / weight[f]
                if head < delta:
                    delta = head
        if delta == np.inf:
            # nothing constrains the remaining flows
            for f in range(n):
                if not frozen[f]:
                    rate[f] = np.inf
            break
        if delta < 0.0:
            delta = 0.0
        for f in range(n):
            if not frozen[f]:
                rate[f] += weight[f] * delta
        for l in range(nl):
            if wsum[l] > 0.0:
                rem[l] -= wsum[l] * delta
                saturated[l] = rem[l] <= REL_TOL * link_cap[l]
                if saturated[l]:
                    rem[l] = 0.0
            else:
                saturated[l] = False
        for f in range(n):
            if frozen[f]:
                continue
            if flow_cap[f] < np.inf and flow_cap[f] - rate[f] <= REL_TOL * flow_cap[f]:
                rate[f] = flow_cap[f]
                frozen[f] = True
                active -= 1
                continue
            for k in range(ptr[f], ptr[f + 1]):
                if saturated[idx[k]]:
                    frozen[f] = True
                    active -= 1
                    break
    return rate


def _progressive_fill_numpy(ptr, idx, link_cap, flow_cap, weight):
    n = ptr.shape[0] - 1
    nl = link_cap.shape[0]
    lens = np.diff(ptr)
    owner = np.repeat(np.arange(n), lens)
    rate = np.zeros(n)
    active = np.ones(n, dtype=bool)
    rem = link_cap.astype(float).copy()
    while active.any():
        wsum = np.bincount(idx, weights=(weight * active)[owner], minlength=nl)
        used = wsum > 0.0
        shares = np.full(nl, np.inf)
        shares[used] = rem[used] / wsum[used]
        heads = np.where(active, (flow_cap - rate) / weight, np.inf)
        delta = min(shares.min(initial=np.inf), heads.min(initial=np.inf))
        if delta == np.inf:
            rate[active] = np.inf
            break
        delta = max(delta, 0.0)
        rate[active] += weight[active] * delta
        rem[used] -= wsum[used] * delta
        saturated = used & (rem <= REL_TOL * link_cap)
        rem[saturated] = 0.0
        at_cap = active & np.isfinite(flow_cap) & (flow_cap - rate <= REL_TOL * flow_cap)
        rate[at_cap] = flow_cap[at_cap]
        crosses = np.bincount(owner, weights=saturated[idx].astype(float), minlength=n) > 0
        active &= ~(at_cap | crosses)
    return rate


# ---------------------------------------------------------------------------
# bottleneck allocation + fixed-step integrator (reference oracle)
#
# Deliberately a different algorithm from progressive filling: each round
# finds the single tightest constraint and fixes every flow behind it.
# ---------------------------------------------------------------------------

def _bottleneck_loop(active, weight, cap, ptr, idx, res_cap, out):
    n = active.shape[0]
    nl = res_cap.shape[0]
    rem = res_cap.copy()
    fixed = np.empty(n, dtype=np.bool_)
    for f in range(n):
        fixed[f] = not active[f]
        out[f] = 0.0
    wsum = np.zeros(nl)
    while True:
        for l in range(nl):
            wsum[l] = 0.0
        left = 0
        for f in range(n):
            if not fixed[f]:
                left += 1
                for k in range(ptr[f], ptr[f + 1]):
                    wsum[idx[k]] += weight[f]
        if left == 0:
            break
        best = np.inf
        best_link = -1
        best_flow = -1
        for l in range(nl):
            if wsum[l] > 0.0:
                lev = max(rem[l], 0.0) / wsum[l]
                if lev < best:
                    best = lev
                    best_link = l
                    best_flow = -1
        for f in range(n):
            if not fixed[f]:
                lev = cap[f] / weight[f]
                if lev < best:
                    best = lev
                    best_flow = f
                    best_link = -1
        if best_link < 0 and best_flow < 0:
            for f in range(n):
                if not fixed[f]:
                    out[f] = np.inf
                    fixed[f] = True
            break
        if best_flow >= 0:
            out[best_flow] = cap[best_flow]
            fixed[best_flow] = True
            for k in range(ptr[best_flow], ptr[best_flow + 1]):
                rem[idx[k]] -= cap[best_flow]
            continue
        for f in range(n):
            if fixed[f]:
                continue
            on_link = False
            for k in range(ptr[f], ptr[f + 1]):
                if idx[k] == best_link:
                    on_link = True
                    break
            if on_link:
                r = weight[f] * best
                out[f] = r
                fixed[f] = True
                for k in range(ptr[f], ptr[f + 1]):
                    rem[idx[k]] -= r


def _integrate_loop(join, work, weight, cap, ptr, idx, res_cap, dt, t_max):
    n = join.shape[0]
    remaining = work.copy()
    finish = np.full(n, np.nan)
    done = np.zeros(n, dtype=np.bool_)
    active = np.zeros(n, dtype=np.bool_)
    rates = np.zeros(n)
    n_steps = int(np.ceil(t_max / dt))
    n_done = 0
    for step in range(n_steps):
        t0 = step * dt
        t1 = t0 + dt
        any_active = False
        for f in range(n):
            active[f] = (not done[f]) and join[f] < t1
            if active[f]:
                any_active = True
        if not any_active:
            continue
        _bottleneck_loop(active, weight, cap, ptr, idx, res_cap, rates)
        for f in range(n):
            if not active[f]:
                continue
            start = t0 if join[f] < t0 else join[f]
            r = rates[f]
            if r <= 0.0:
                continue
            chunk = r * (t1 - start)
            if remaining[f] <= chunk:
                finish[f] = start + remaining[f] / r
                remaining[f] = 0.0
                done[f] = True
                n_done += 1
            else:
                remaining[f] -= chunk
        if n_done == n:
            break
    return finish


def _bottleneck_numpy(active, weight, cap, ptr, idx, res_cap, out):
    n = active.shape[0]
    nl = res_cap.shape[0]
    owner = np.repeat(np.arange(n), np.diff(ptr))
    rem = res_cap.astype(float).copy()
    out[:] = 0.0
    free = active.copy()
    while free.any():
        wsum = np.bincount(idx, weights=(weight * free)[owner], minlength=nl)
        used = wsum > 0.0
        levels = np.full(nl, np.inf)
        levels[used] = np.maximum(rem[used], 0.0) / wsum[used]
        flow_levels = np.where(free, cap / weight, np.inf)
        l_star = int(np.argmin(levels))
        f_star = int(np.argmin(flow_levels))
        if levels[l_star] == np.inf and flow_levels[f_star] == np.inf:
            out[free] = np.inf
            break
        if flow_levels[f_star] < levels[l_star]:
            fix = np.zeros(n, dtype=bool)
            fix[f_star] = True
            out[f_star] = cap[f_star]
        else:
            fix = free & (np.bincount(owner, weights=(idx == l_star).astype(float), minlength=n) > 0)
            out[fix] = weight[fix] * levels[l_star]
        rem -= np.bincount(idx, weights=(out * fix)[owner], minlength=nl)
        free &= ~fix


def _integrate_numpy(join, work, weight, cap, ptr, idx, res_cap, dt, t_max):
    n = join.shape[0]
    remaining = work.astype(float).copy()
    finish = np.full(n, np.nan)
    done = np.zeros(n, dtype=bool)
    rates = np.zeros(n)
    n_steps = int(np.ceil(t_max / dt))
    for step in range(n_steps):
        t0 = step * dt
        t1 = t0 + dt
        active = ~done & (join < t1)
        if not active.any():
            continue
        _bottleneck_numpy(active, weight, cap, ptr, idx, res_cap, rates)
        start = np.maximum(join, t0)
        movable = active & (rates > 0.0)
        chunk = np.where(movable, rates * (t1 - start), 0.0)
        ending = movable & (remaining <= chunk)
        with np.errstate(divide="ignore", invalid="ignore"):
            finish[ending] = start[ending] + remaining[ending] / rates[ending]
        remaining = np.where(ending, 0.0, remaining - chunk)
        done |= ending
        if done.all():
            break
    return finish


if USING_NUMBA:
    _progressive_fill_impl = njit(cache=True)(_progressive_fill_loop)
    _bottleneck_loop = njit(cache=True)(_bottleneck_loop)
    _integrate_loop_jit = njit(cache=True)(_integrate_loop)
else:
    _progressive_fill_impl = _progressive_fill_numpy
    _integrate_loop_jit = None


def progressive_fill(ptr, idx, link_cap, flow_cap, weight) -> np.ndarray:
    """Weighted max-min fair rates by progressive filling.

    Flows with an empty path and an infinite cap get ``inf``.
    """
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    link_cap = np.ascontiguousarray(link_cap, dtype=np.float64)
    flow_cap = np.ascontiguousarray(flow_cap, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    if ptr.shape[0] <= 1:
        return np.zeros(0)
    return _progressive_fill_impl(ptr, idx, link_cap, flow_cap, weight)


def integrate_fixed_step(join, work, weight, cap, ptr, idx, res_cap, dt, t_max) -> np.ndarray:
    """Advance every claim by ``rate * dt`` per step, re-solving rates each step.

    Returns completion times, NaN for claims unfinished at ``t_max``.
    """
    args = (
        np.ascontiguousarray(join, dtype=np.float64),
        np.ascontiguousarray(work, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64),
        np.ascontiguousarray(cap, dtype=np.float64),
        np.ascontiguousarray(ptr, dtype=np.int64),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(res_cap, dtype=np.float64),
        float(dt),
        float(t_max),
    )
    if args[0].shape[0] == 0:
        return np.zeros(0)
    if USING_NUMBA:
        return _integrate_loop_jit(*args)
    return _integrate_numpy(*args)


def warmup() -> None:
    """Trigger compilation of every jitted kernel on a tiny input."""
    ptr = np.array([0, 1, 2])
    idx = np.array([0, 0])
    progressive_fill(ptr, idx, np.array([1.0]), np.array([np.inf, 0.25]), np.ones(2))
    integrate_fixed_step(
        np.zeros(2), np.ones(2), np.ones(2), np.full(2, np.inf), ptr, idx, np.array([1.0]), 0.5, 4.0
    )
