import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsim import kernels
from oracles import bottleneck_condition, maxmin_violations, waterfill


def _csr(paths):
    ptr = np.zeros(len(paths) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(p) for p in paths])
    idx = np.array([l for p in paths for l in p], dtype=np.int64)
    return ptr, idx


def random_instance(rng, max_flows=8, max_links=6):
    nl = int(rng.integers(1, max_links + 1))
    nf = int(rng.integers(1, max_flows + 1))
    link_cap = rng.uniform(1.0, 20.0, nl)
    paths = []
    for _ in range(nf):
        k = int(rng.integers(1, nl + 1))
        paths.append(sorted(rng.choice(nl, size=k, replace=False).tolist()))
    caps = np.where(rng.random(nf) < 0.3, rng.uniform(0.5, 10.0, nf), np.inf)
    return paths, caps, link_cap


def test_worked_example_three_flows_two_links():
    # link 0 (cap 10): flows 0 and 1; link 1 (cap 4): flows 1 and 2
    ptr, idx = _csr([[0], [0, 1], [1]])
    rates = kernels.progressive_fill(ptr, idx, np.array([10.0, 4.0]), np.full(3, np.inf), np.ones(3))
    assert rates == pytest.approx([8.0, 2.0, 2.0])


def test_flow_cap_frees_capacity_for_others():
    ptr, idx = _csr([[0], [0]])
    rates = kernels.progressive_fill(ptr, idx, np.array([10.0]), np.array([1.0, np.inf]), np.ones(2))
    assert rates == pytest.approx([1.0, 9.0])


def test_uncapped_flow_with_empty_path_is_unbounded():
    ptr, idx = _csr([[], [0]])
    rates = kernels.progressive_fill(ptr, idx, np.array([10.0]), np.full(2, np.inf), np.ones(2))
    assert rates[0] == np.inf and rates[1] == pytest.approx(10.0)


def test_fifty_random_topologies_are_max_min_fair():
    rng = np.random.default_rng(11)
    for _ in range(50):
        paths, caps, link_cap = random_instance(rng)
        ptr, idx = _csr(paths)
        rates = kernels.progressive_fill(ptr, idx, link_cap, caps, np.ones(len(paths)))
        assert maxmin_violations(list(rates), paths, list(caps), list(link_cap)) == []
        assert bottleneck_condition(list(rates), paths, list(caps), list(link_cap))
        assert rates == pytest.approx(waterfill(paths, list(caps), list(link_cap)), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_weighted_fill_matches_reference(seed):
    rng = np.random.default_rng(seed)
    paths, caps, link_cap = random_instance(rng)
    w = rng.uniform(0.2, 5.0, len(paths))
    ptr, idx = _csr(paths)
    rates = kernels.progressive_fill(ptr, idx, link_cap, caps, w)
    assert rates == pytest.approx(waterfill(paths, list(caps), list(link_cap), list(w)), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rates_do_not_depend_on_flow_order(seed):
    rng = np.random.default_rng(seed)
    paths, caps, link_cap = random_instance(rng)
    perm = rng.permutation(len(paths))
    ptr, idx = _csr(paths)
    base = kernels.progressive_fill(ptr, idx, link_cap, caps, np.ones(len(paths)))
    ptr2, idx2 = _csr([paths[i] for i in perm])
    shuffled = kernels.progressive_fill(ptr2, idx2, link_cap, caps[perm], np.ones(len(paths)))
    assert shuffled == pytest.approx(base[perm], rel=1e-12)


@pytest.mark.skipif(not kernels.USING_NUMBA, reason="numba backend not active")
def test_numba_and_numpy_fill_agree():
    rng = np.random.default_rng(5)
    for _ in range(200):
        paths, caps, link_cap = random_instance(rng, max_flows=30, max_links=12)
        ptr, idx = _csr(paths)
        w = rng.uniform(0.5, 2.0, len(paths))
        a = kernels._progressive_fill_impl(ptr, idx, link_cap, caps, w)
        b = kernels._progressive_fill_numpy(ptr, idx, link_cap, caps, w)
        np.testing.assert_allclose(a, b, rtol=1e-12)


@pytest.mark.skipif(not kernels.USING_NUMBA, reason="numba backend not active")
def test_numba_and_numpy_integrators_agree():
    rng = np.random.default_rng(9)
    n = 40
    ptr = np.arange(n + 1)
    idx = rng.integers(0, 3, n)
    args = (rng.uniform(0, 20, n), rng.uniform(1, 50, n), rng.uniform(0.5, 2, n), np.full(n, np.inf),
            ptr, idx, np.array([5.0, 8.0, 3.0]), 0.01, 500.0)
    a = kernels._integrate_loop_jit(*args)
    b = kernels._integrate_numpy(*args)
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_jit_flag_selects_numpy_backend_with_same_results():
    code = (
        "import json, numpy as np; from gridsim import kernels;"
        "r = kernels.progressive_fill(np.array([0,1,3,4]), np.array([0,0,1,1]),"
        " np.array([10.0,4.0]), np.full(3, np.inf), np.ones(3));"
        "print(json.dumps([kernels.BACKEND, r.tolist()]))"
    )
    env = dict(os.environ, GRIDSIM_DISABLE_JIT="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    backend, rates = json.loads(out.stdout)
    assert backend == "numpy"
    assert rates == pytest.approx([8.0, 2.0, 2.0])


def test_fixed_step_integrator_two_claims():
    ptr = np.arange(3)
    finish = kernels.integrate_fixed_step(np.array([0.0, 4.0]), np.array([100.0, 50.0]), np.ones(2),
                                          np.full(2, np.inf), ptr, np.zeros(2, dtype=np.int64),
                                          np.array([10.0]), 0.001, 30.0)
    assert finish == pytest.approx([15.0, 14.0], abs=0.002)
