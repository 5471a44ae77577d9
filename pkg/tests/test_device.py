import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from spatialreuse.admm_common import threshold
from spatialreuse.device import (
    NO_PARTIAL_UPDATES,
    TRACE_COLUMNS,
    ChannelEvent,
    EventSchedule,
    LocalChannel,
    PartialUpdatePolicy,
    _user_groups,
    bandwidth_projection,
    dual_updates,
    init_state,
    node_subproblem,
    prune_links,
    run_device_admm,
    stopping_check,
)
from spatialreuse.kernels import capacity
from spatialreuse.netmodel import reuse_classes
from spatialreuse.reference import seed_models, solve_joint, verify_solution


def _level(c, cap):
    """Water level tau >= 0 with sum(max(c - tau, 0)) = cap (or 0 when slack)."""
    if np.maximum(c, 0).sum() <= cap:
        return 0.0
    # scan breakpoints from the top; the level lies between two sorted values
    u = np.sort(c)[::-1]
    for k in range(1, len(u) + 1):
        tau = (u[:k].sum() - cap) / k
        if k == len(u) or u[k] <= tau:
            return tau


def projection_oracle(c, groups, f, W_max):
    """Nested bisection on the KKT system of the group-bandwidth projection.

    Group levels tau_g(W) fall as the class width W grows; at the optimum the
    levels of each class with positive width sum to a common price mu.
    """
    c = np.asarray(c, dtype=float)
    cls = reuse_classes(len(groups), f)
    C = cls.max() + 1
    members = [[np.asarray(groups[g]) for g in np.flatnonzero(cls == k)] for k in range(C)]
    demand = [max(np.maximum(c[m], 0).sum() for m in ms) for ms in members]

    def width(k, mu):
        lo, hi = 0.0, demand[k]
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            price = sum(_level(c[m], mid) for m in members[k])
            lo, hi = (mid, hi) if price > mu else (lo, mid)
        return hi

    if sum(demand) <= W_max:
        mu = 0.0
    else:
        lo, hi = 0.0, float(sum(max(c.max(), 0) for _ in range(len(groups))))
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if sum(width(k, mid) for k in range(C)) > W_max else (lo, mid)
        mu = hi
    v = np.zeros_like(c)
    for k in range(C):
        Wk = width(k, mu)
        for m in members[k]:
            v[m] = np.maximum(c[m] - _level(c[m], Wk), 0)
    return v


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 4, math.inf]), st.floats(0.5, 20.0))
def test_projection_matches_nested_bisection(seed, f, W_max):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 7))
    sizes = rng.integers(1, 4, M)
    groups, k = [], 0
    for s in sizes:
        groups.append(list(range(k, k + s)))
        k += s
    b = rng.uniform(0, 4, k)
    y = rng.normal(0, 1, k)
    v, Wg = bandwidth_projection(b, y, 0.5, groups, f, W_max)
    assert_allclose(v, projection_oracle(b - y, groups, f, W_max), atol=1e-6)
    cls = reuse_classes(M, f)
    assert Wg.shape == (M,)
    W_class = np.array([Wg[cls == c][0] for c in range(cls.max() + 1)])
    assert_allclose(W_class.sum(), W_max, rtol=1e-9)
    for g, m in enumerate(groups):
        assert v[m].sum() <= Wg[g] * (1 + 1e-9) + 1e-12


@pytest.fixture(scope="module")
def device_run(small_instance):
    topo, ch = small_instance
    return run_device_admm(topo, ch)


def test_run_outputs(small_instance, device_run):
    topo, ch = small_instance
    sol, trace, log = device_run
    assert sol.converged
    assert verify_solution(sol, topo, ch, tol=1e-4)["ok"]
    assert list(trace[0]) == list(TRACE_COLUMNS)
    assert len(log) == len(trace) == sol.iterations
    st = sol.info["state"]
    eps = {"eps1": threshold(st.x, st.t), "eps2": threshold(st.v, st.b)}
    assert stopping_check(trace[-1], eps)
    # objective is a lower bound on the optimum
    assert sol.objective <= solve_joint(topo, ch).objective * (1 + 1e-6)


def test_channel_argument_untouched(small_instance):
    topo, ch = small_instance
    before = ch.noise.copy()
    sched = EventSchedule([ChannelEvent(3, {n: 2.0 for n in topo.users})])
    sol, _, _ = run_device_admm(topo, ch, schedule=sched, stop={"max_iters": 6})
    assert_array_equal(ch.noise, before)
    assert_allclose(sol.info["channel"].noise, 2 * before)
    assert sol.info["events_at"] == [3]


def test_message_counts(small_instance, device_run):
    topo, _ = small_instance
    _, _, log = device_run
    per_node = sum(len(topo.out_links[n]) + 1 for n in topo.users)
    policy = PartialUpdatePolicy()
    for k in range(policy.window + 1, len(log) + 1):
        assert log.payload_counts(k) == {"cu1": topo.num_links, "cu2": topo.num_nodes - 1, "nodes": per_node}
    # during the warm-in window nodes may skip, so counts can only be lower
    for k in range(1, policy.window + 1):
        assert log.payload_counts(k)["nodes"] <= per_node


def test_message_counts_without_skips(small_instance):
    topo, ch = small_instance
    _, _, log = run_device_admm(topo, ch, stop={"max_iters": 4}, partial_update_policy=NO_PARTIAL_UPDATES)
    per_node = sum(len(topo.out_links[n]) + 1 for n in topo.users)
    for k in range(1, len(log) + 1):
        counts = log.payload_counts(k)
        assert counts["cu1"] + counts["cu2"] == topo.num_links + topo.num_nodes - 1
        assert counts["nodes"] == per_node


def test_messages_jsonl(tmp_path, small_instance):
    topo, ch = small_instance
    _, _, log = run_device_admm(topo, ch, stop={"max_iters": 2})
    path = tmp_path / "m.jsonl"
    log.to_jsonl(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2]
    assert rows[1]["bytes"] == log.bytes(2)
    assert all(m["read"] == r["iteration"] for r in rows for m in r["nodes"].values())


def _perturb_elsewhere(topo, ch, n, factor=3.7):
    other = ch.copy()
    mask = np.ones(topo.num_links, dtype=bool)
    mask[topo.out_links[n]] = False
    other.q[mask] *= factor
    return other


def test_node_subproblem_locality_bit_exact(small_instance):
    topo, ch = small_instance
    n = max(topo.users, key=lambda m: len(topo.out_links[m]))
    out = topo.out_links[n]
    other = _perturb_elsewhere(topo, ch, n)
    models_a = seed_models(topo, ch, budget=10, grid=9)
    models_b = seed_models(topo, other, budget=10, grid=9)
    targets = np.linspace(0.01, 0.05, len(out))
    ra = node_subproblem(targets, 1.5, LocalChannel.of(ch, out), 0.5, [models_a[l] for l in out])
    rb = node_subproblem(targets, 1.5, LocalChannel.of(other, out), 0.5, [models_b[l] for l in out])
    for field in ("t", "p", "w"):
        assert np.array_equal(getattr(ra, field), getattr(rb, field))
    assert ra.b == rb.b


def test_first_round_locality_in_full_run(small_instance):
    topo, ch = small_instance
    n = topo.users[0]
    other = _perturb_elsewhere(topo, ch, n)
    _, _, la = run_device_admm(topo, ch, stop={"max_iters": 1}, partial_update_policy=NO_PARTIAL_UPDATES)
    _, _, lb = run_device_admm(topo, other, stop={"max_iters": 1}, partial_update_policy=NO_PARTIAL_UPDATES)
    assert la.records[0]["nodes"][n] == lb.records[0]["nodes"][n]


def test_node_subproblem_respects_limits(small_instance):
    topo, ch = small_instance
    n = topo.users[-1]
    out = topo.out_links[n]
    models = seed_models(topo, ch, budget=10, grid=9)
    res = node_subproblem(np.full(len(out), 10.0), 4.0, LocalChannel.of(ch, out), 0.5, [models[l] for l in out])
    assert res.p.sum() <= ch.P_max * (1 + 1e-9)
    assert np.all(res.p <= ch.gamma * res.w + 1e-9)
    assert_allclose(res.w.sum(), res.b, atol=1e-9)
    assert np.all(res.t <= capacity(res.w, res.p, ch.q[out], ch.noise[out]) + 1e-15)


def test_dual_update_arithmetic(small_instance):
    topo, ch = small_instance
    st = init_state(topo, ch)
    st.x = np.full(topo.num_links, 2.0)
    st.t = np.full(topo.num_links, 0.5)
    st.v = np.arange(len(topo.users), dtype=float)
    st.b = np.ones(len(topo.users))
    u, y = dual_updates(st)
    assert_allclose(u, 1.5)
    assert_allclose(y, np.arange(len(topo.users)) - 1.0)


def test_event_schedule_from_config(small_instance):
    topo, _ = small_instance
    sched = EventSchedule.from_config(
        [{"iteration": 5, "noise_scale": 2.0}, {"iteration": 9, "noise_scale": {"uniform": [0.5, 2.5]}},
         {"iteration": 12, "noise_scale": {"3": 0.25}}], topo, seed=1)
    assert [e.iteration for e in sched.events] == [5, 9, 12]
    assert set(sched.events[0].noise_scale.values()) == {2.0}
    draws = np.array(list(sched.events[1].noise_scale.values()))
    assert np.all((draws >= 0.5) & (draws <= 2.5)) and len(draws) == len(topo.users)
    assert sched.events[2].noise_scale == {3: 0.25}
    assert sched.pending(12) and not sched.pending(13)
    with pytest.raises(ValueError):
        EventSchedule([ChannelEvent(4, {}), ChannelEvent(4, {})])


def test_no_stop_right_after_event(small_instance):
    topo, ch = small_instance
    sched = EventSchedule([ChannelEvent(60, {n: 1.0 for n in topo.users})])
    sol, trace, _ = run_device_admm(topo, ch, schedule=sched)
    assert sol.iterations >= 62


def test_partial_update_policy():
    pol = PartialUpdatePolicy(window=3, skip_prob=1.0)
    assert pol.active(1, [1, 2, 3]) == [] and pol.active(4, [1, 2, 3]) == [1, 2, 3]
    assert PartialUpdatePolicy(**NO_PARTIAL_UPDATES).active(1, [1, 2]) == [1, 2]
    with pytest.raises(ValueError):
        PartialUpdatePolicy(skip_prob=1.5)


def test_partial_updates_still_converge(small_instance):
    topo, ch = small_instance
    sol, _, log = run_device_admm(topo, ch, partial_update_policy=PartialUpdatePolicy(window=10, skip_prob=0.5, seed=4))
    assert sol.converged
    assert verify_solution(sol, topo, ch, tol=1e-4)["ok"]


def test_user_groups(small_instance):
    topo, _ = small_instance
    groups = _user_groups(topo)
    flat = sorted(i for g in groups for i in g)
    assert flat == list(range(len(topo.users)))


def test_prune_links(small_instance, device_run):
    topo, _ = small_instance
    sol, _, _ = device_run
    reduced, kept, flagged = prune_links(sol, topo, flow_floor=0.01)
    assert reduced.num_links == len(kept) <= topo.num_links
    assert all(reduced.out_links[n] for n in reduced.users)
    dropped = set(range(topo.num_links)) - set(kept)
    assert all(sol.x[l] < 0.01 for l in dropped)
    assert all(sol.x[l] < 0.01 for l in flagged)
    # an absurd floor keeps a spanning set and flags what it could not drop
    reduced, kept, flagged = prune_links(sol, topo, flow_floor=1e9)
    assert len(kept) >= len(topo.users) and set(flagged) <= set(kept)
