"""Semi-distributed ADMM: per-node resource QPs plus two central units.

CU1 solves the routing QP and CU2 projects per-node bandwidths onto the
group/reuse constraints. Every node solves a small QP over its own
outgoing links using only its local channel state. The fabric between
them is simulated in memory and recorded in a :class:`MessageLog`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .admm_common import EPS_ABS, EPS_REL, MAX_ITERS, restore, routing_qp, threshold
from .kernels import capacity
from .netmodel import ChannelModel, NetworkTopology, reuse_classes
from .qp import QpError, QpProblem, project_capped_simplex, solve_qp
from .reference import SolverError, _empty_solution, _num_classes, seed_models

DEFAULT_RHO = 0.5
PLANE_BUDGET = 10
SEED_GRID = PLANE_BUDGET - 1
BYTES_PER_VALUE = 8
DEFAULT_FLOW_FLOOR = 0.01  # Mbps
TRACE_COLUMNS = ("iteration", "objective", "h1", "h2", "s1", "s2")


@dataclass
class LocalChannel:
    """What a node knows about its outgoing links."""

    q: np.ndarray
    noise: np.ndarray
    gamma: float
    P_max: float

    @classmethod
    def of(cls, channel: ChannelModel, links) -> "LocalChannel":
        return cls(channel.q[links].copy(), channel.noise[links].copy(), channel.gamma, channel.P_max)


@dataclass
class NodeResult:
    t: np.ndarray
    p: np.ndarray
    w: np.ndarray
    b: float


def node_subproblem(targets, b_target, local: LocalChannel, rho: float, planes) -> NodeResult:
    """Proximal QP of one node over ``(t_l, p_l, w_l)`` for its links and ``b_n``.

    ``targets`` holds ``x_l + u_l`` and ``b_target`` is ``v_n + y_n``.
    Capacity enters through the min-of-planes models in ``planes``, which
    are refined in place where the solution overshoots true capacity.
    Raises :class:`~spatialreuse.qp.QpError` on solver failure.
    """
    a = np.asarray(targets, dtype=float)
    k = a.size
    if k == 0:
        return NodeResult(np.zeros(0), np.zeros(0), np.zeros(0), 0.0)
    P_max = local.P_max
    gamma = local.gamma
    if P_max > 0:
        unit = min(P_max, gamma * max(b_target, 1e-300)) if math.isfinite(gamma) else P_max
        unit = unit if unit > 0 else P_max
    else:
        unit = 1.0
    n = 3 * k + 1
    it, ip, iw, ib = np.arange(k), k + np.arange(k), 2 * k + np.arange(k), 3 * k
    rows, rhs = [], []
    for j, m in enumerate(planes):
        for gp, gw, a2 in m.planes:
            g = np.zeros(n)
            g[it[j]] = 1.0
            g[ip[j]] = -gp * unit
            g[iw[j]] = -gw
            rows.append(g)
            rhs.append(a2)
    g = np.zeros(n)
    g[ip] = 1.0
    rows.append(g)
    rhs.append(P_max / unit)
    if math.isfinite(gamma):
        for j in range(k):
            g = np.zeros(n)
            g[ip[j]] = unit
            g[iw[j]] = -gamma
            rows.append(g)
            rhs.append(0.0)
    A = np.zeros((1, n))
    A[0, iw] = 1.0
    A[0, ib] = -1.0
    P = np.zeros(n)
    P[it] = rho
    P[ib] = rho
    c = np.zeros(n)
    c[it] = -rho * a
    c[ib] = -rho * b_target
    sol = solve_qp(QpProblem(c=c, P=P, A=A, b=np.zeros(1), G=np.array(rows), h=np.array(rhs), lb=np.zeros(n)), tol=1e-10)
    z = np.maximum(sol.x, 0.0)
    t, p, w, b = z[it], z[ip] * unit, z[iw], float(z[ib])
    cap = capacity(w, p, local.q, local.noise)
    for j in np.flatnonzero(t > cap + 1e-9 * np.maximum(cap, 1e-6)):
        planes[j].refine(p[j], w[j])
    return NodeResult(np.minimum(t, cap), p, w, b)


def bandwidth_projection(b, y, rho, groups, f, W_max):
    """Project ``b - y`` onto the per-group bandwidth constraints.

    ``groups`` lists, for groups 1..M, the positions of their nodes in
    ``b``. Group ``g`` may use ``W`` of its reuse class and class widths sum
    to ``W_max``. Returns ``(v, W_groups)``. ``rho`` scales the objective
    only and does not change the minimizer.
    """
    c = np.asarray(b, dtype=float) - np.asarray(y, dtype=float)
    M = len(groups)
    cls = reuse_classes(M, f)
    C = int(cls.max()) + 1 if M else 0
    if C == 0:
        return np.zeros_like(c), np.zeros(0)
    members = [np.asarray(gr, dtype=int) for gr in groups]
    per_class = np.bincount(cls, minlength=C)
    if np.all(per_class <= 1):
        v = project_capped_simplex(c, W_max)
        used = np.array([v[m].sum() for m in members])
        W_class = np.zeros(C)
        W_class[cls] = used
        W_class += (W_max - W_class.sum()) / C
        return v, W_class[cls]
    nv = c.size
    nvar = nv + C
    rows = []
    for g, m in enumerate(members):
        r = np.zeros(nvar)
        r[m] = 1.0
        r[nv + cls[g]] = -1.0
        rows.append(r)
    A = np.zeros((1, nvar))
    A[0, nv:] = 1.0
    P = np.concatenate([np.ones(nv), np.zeros(C)])
    q = np.concatenate([-c, np.zeros(C)])
    sol = solve_qp(QpProblem(c=q, P=P, A=A, b=np.array([W_max]), G=np.array(rows), h=np.zeros(M), lb=np.zeros(nvar)), tol=1e-12)
    v = np.maximum(sol.x[:nv], 0.0)
    W_class = np.maximum(sol.x[nv:], 0.0)
    W_class *= W_max / W_class.sum() if W_class.sum() > 0 else 0.0
    for g, m in enumerate(members):
        v[m] = project_capped_simplex(v[m], W_class[cls[g]])
    return v, W_class[cls]


@dataclass
class ChannelEvent:
    """Rescale the noise seen by some transmitters at a given iteration."""

    iteration: int
    noise_scale: dict  # node -> factor


@dataclass
class EventSchedule:
    events: list = field(default_factory=list)

    def __post_init__(self):
        its = [e.iteration for e in self.events]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("event iterations must be strictly increasing")

    @classmethod
    def from_config(cls, specs, topology: NetworkTopology, seed: int = 0) -> "EventSchedule":
        """Build events from scenario entries.

        Each entry has ``iteration`` and ``noise_scale``; the latter is a
        number, a per-node mapping, or ``{"uniform": [lo, hi]}`` drawn once
        per user from a generator seeded with ``seed``.
        """
        rng = np.random.default_rng(seed)
        events = []
        for spec in specs or []:
            scale = spec["noise_scale"]
            if isinstance(scale, dict) and "uniform" in scale:
                lo, hi = scale["uniform"]
                draws = rng.uniform(lo, hi, size=len(topology.users))
                mapping = dict(zip(topology.users, draws.tolist()))
            elif isinstance(scale, dict):
                mapping = {int(k): float(v) for k, v in scale.items()}
            else:
                mapping = {n: float(scale) for n in topology.users}
            events.append(ChannelEvent(int(spec["iteration"]), mapping))
        return cls(events)

    def due(self, k: int) -> list:
        return [e for e in self.events if e.iteration == k]

    def pending(self, k: int) -> bool:
        return any(e.iteration >= k for e in self.events)


@dataclass
class PartialUpdatePolicy:
    """Let each node skip an update with ``skip_prob`` during the first ``window`` iterations."""

    window: int = 5
    skip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.skip_prob <= 1.0:
            raise ValueError("skip_prob must lie in [0, 1]")
        self._rng = np.random.default_rng(self.seed)

    def active(self, k: int, nodes) -> list:
        nodes = list(nodes)
        if k > self.window or self.skip_prob == 0.0:
            return nodes
        keep = self._rng.random(len(nodes)) >= self.skip_prob
        return [n for n, on in zip(nodes, keep) if on]


NO_PARTIAL_UPDATES = dict(window=0, skip_prob=0.0)


class MessageLog:
    """Per-iteration broadcast record of the simulated fabric."""

    def __init__(self):
        self.records = []

    def start(self, k: int, x_plus_u, v_plus_y):
        self.records.append({
            "iteration": k,
            "cu1": np.asarray(x_plus_u, dtype=float).tolist(),
            "cu2": np.asarray(v_plus_y, dtype=float).tolist(),
            "nodes": {},
        })

    def node(self, n: int, t, b: float, snapshot: int):
        self.records[-1]["nodes"][int(n)] = {"t": np.asarray(t, dtype=float).tolist(), "b": float(b), "read": snapshot}

    def payload_counts(self, k: int | None = None) -> dict:
        rec = self.records[-1] if k is None else self.records[k - 1]
        nodes = sum(len(m["t"]) + 1 for m in rec["nodes"].values())
        return {"cu1": len(rec["cu1"]), "cu2": len(rec["cu2"]), "nodes": nodes}

    def bytes(self, k: int | None = None) -> int:
        return BYTES_PER_VALUE * sum(self.payload_counts(k).values())

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for i, rec in enumerate(self.records, start=1):
                out = dict(rec)
                out["nodes"] = {str(n): m for n, m in rec["nodes"].items()}
                out["bytes"] = self.bytes(i)
                fh.write(json.dumps(out) + "\n")


@dataclass
class DeviceAdmmState:
    """``psi = (x, v)``, ``z = (t, b)``, ``xi = (u, y)``; ``v``, ``b``, ``y`` are per user."""

    x: np.ndarray
    v: np.ndarray
    t: np.ndarray
    b: np.ndarray
    u: np.ndarray
    y: np.ndarray
    rho: float
    p: np.ndarray
    w: np.ndarray
    W_groups: np.ndarray
    models: list
    k: int = 0
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def init_state(topology: NetworkTopology, channel: ChannelModel, rho: float = DEFAULT_RHO,
               t0: float = 1.0, b0: float = 1.0) -> DeviceAdmmState:
    L = topology.num_links
    U = len(topology.users)
    C = _num_classes(topology, channel)
    W_groups = np.full(topology.num_groups, channel.W_max / max(C, 1))
    models = seed_models(topology, channel, budget=PLANE_BUDGET, grid=SEED_GRID) if L else []
    return DeviceAdmmState(
        x=np.zeros(L), v=np.zeros(U), t=np.full(L, float(t0)), b=np.full(U, float(b0)),
        u=np.zeros(L), y=np.zeros(U), rho=float(rho), p=np.zeros(L), w=np.zeros(L),
        W_groups=W_groups, models=models,
    )


def routing_subproblem(t, u, rho, topology: NetworkTopology) -> np.ndarray:
    """CU1: the same epigraph routing QP as the layered network step."""
    return routing_qp(t, u, rho, topology)


def dual_updates(state: DeviceAdmmState):
    """``u += x - t`` and ``y += v - b``."""
    state.u = state.u + state.x - state.t
    state.y = state.y + state.v - state.b
    return state.u, state.y


def stopping_check(record: dict, eps: dict) -> bool:
    """True when both primal and both dual residuals are within their thresholds."""
    return (record["h1"] <= eps["eps1"] and record["s1"] <= eps["eps1"]
            and record["h2"] <= eps["eps2"] and record["s2"] <= eps["eps2"])


def _user_groups(topology: NetworkTopology) -> list:
    pos = {n: i for i, n in enumerate(topology.users)}
    return [[pos[n] for n in members if n in pos] for members in topology.groups()]


def _apply_event(event: ChannelEvent, topology, channel, state):
    for n, scale in event.noise_scale.items():
        out = topology.out_links[n]
        if not out:
            continue
        channel.noise[out] *= scale
        for l in out:
            state.models[l].rescale_noise(scale)


def run_device_admm(topology: NetworkTopology, channel: ChannelModel, rho: float = DEFAULT_RHO,
                    init: dict | None = None, stop: dict | None = None,
                    schedule: EventSchedule | None = None, partial_update_policy=None):
    """Simulate the semi-distributed algorithm; returns ``(solution, trace, log)``.

    Per iteration: CU1 and CU2 solve from the previous node outputs and
    broadcast ``x + u`` and ``v + y``; every active node solves its QP on
    that snapshot; the CUs update the duals. Scheduled channel events take
    effect after the node step of their iteration; the loop does not stop
    while events are pending, nor within two iterations of the last one.
    Tangent planes of affected links are rescaled, not rebuilt.
    ``partial_update_policy`` is a
    :class:`PartialUpdatePolicy`, a dict of its fields, or ``None`` for the
    default (skip probability 0.5 over the first 5 iterations).

    ``channel`` is not modified; events act on a private copy, which is
    returned in ``solution.info["channel"]``.
    """
    init = init or {}
    stop = stop or {}
    max_iters = int(stop.get("max_iters", MAX_ITERS))
    eps_abs = stop.get("eps_abs", EPS_ABS)
    eps_rel = stop.get("eps_rel", EPS_REL)
    schedule = schedule or EventSchedule()
    if partial_update_policy is None:
        policy = PartialUpdatePolicy()
    elif isinstance(partial_update_policy, dict):
        policy = PartialUpdatePolicy(**partial_update_policy)
    else:
        policy = partial_update_policy
    log = MessageLog()
    if topology.num_links == 0:
        if topology.users:
            raise SolverError("infeasible: users but no links")
        return _empty_solution(topology, channel), [], log

    channel = channel.copy()
    state = init_state(topology, channel, rho, init.get("t0", 1.0), init.get("b0", 1.0))
    for key in ("u0", "y0"):
        if key in init:
            arr = getattr(state, key[0])
            setattr(state, key[0], np.broadcast_to(np.asarray(init[key], dtype=float), arr.shape).copy())
    users = topology.users
    groups = _user_groups(topology)
    local = {n: LocalChannel.of(channel, topology.out_links[n]) for n in users}
    best = None
    events_at = []
    for k in range(1, max_iters + 1):
        state.k = k
        t_prev, b_prev = state.t.copy(), state.b.copy()
        # CU1 and CU2 from the previous node snapshot
        state.x = routing_subproblem(state.t, state.u, state.rho, topology)
        state.v, state.W_groups = bandwidth_projection(state.b, state.y, state.rho, groups, channel.reuse_factor, channel.W_max)
        bx = state.x + state.u
        bv = state.v + state.y
        log.start(k, bx, bv)
        for i in policy.active(k, range(len(users))):
            n = users[i]
            out = topology.out_links[n]
            try:
                res = node_subproblem(bx[out], bv[i], local[n], state.rho, [state.models[l] for l in out])
            except QpError:
                continue  # stale: previous (t, b) stand
            state.t[out], state.p[out], state.w[out], state.b[i] = res.t, res.p, res.w, res.b
            log.node(n, res.t, res.b, k)
        dual_updates(state)
        for event in schedule.due(k):
            _apply_event(event, topology, channel, state)
            local = {n: LocalChannel.of(channel, topology.out_links[n]) for n in users}
            events_at.append(k)
            best = None
        rec = {
            "iteration": k,
            "h1": float(np.linalg.norm(state.x - state.t)),
            "h2": float(np.linalg.norm(state.v - state.b)),
            "s1": float(np.linalg.norm(state.rho * (state.t - t_prev))),
            "s2": float(np.linalg.norm(state.rho * (state.b - b_prev))),
        }
        sol = restore(topology, channel, state.x, state.t, state.p, state.w, state.W_groups, iterations=k)
        rec["objective"] = sol.objective
        state.trace.append({c: rec[c] for c in TRACE_COLUMNS})
        if best is None or sol.objective > best.objective:
            best = sol
        eps = {"eps1": threshold(state.x, state.t, eps_abs, eps_rel), "eps2": threshold(state.v, state.b, eps_abs, eps_rel)}
        since = k - (events_at[-1] if events_at else 0)
        if since >= 2 and not schedule.pending(k + 1) and stopping_check(rec, eps):
            sol.converged = True
            sol.info.update(state=state, channel=channel, events_at=events_at)
            return sol, state.trace, log
    best = best or sol
    best.converged = False
    best.info.update(state=state, channel=channel, events_at=events_at)
    return best, state.trace, log


def prune_links(solution, topology: NetworkTopology, flow_floor: float = DEFAULT_FLOW_FLOOR):
    """Drop links carrying less than ``flow_floor`` Mbps.

    Links are visited from the lightest up; a link whose removal would cut
    a user off from the destination is kept and reported. Returns
    ``(reduced_topology, kept_link_indices, flagged_link_indices)``.
    """
    x = np.asarray(solution.x, dtype=float)
    keep = np.ones(topology.num_links, dtype=bool)
    flagged = []
    for l in np.argsort(x, kind="stable"):
        if x[l] >= flow_floor:
            break
        keep[l] = False
        if not _all_reach_destination(topology, keep):
            keep[l] = True
            flagged.append(int(l))
    kept = np.flatnonzero(keep)
    return topology.subset(kept), kept, flagged


def _all_reach_destination(topology, keep) -> bool:
    reach = {0}
    changed = True
    links = [lk for lk, on in zip(topology.links, keep) if on]
    while changed:
        changed = False
        for s, d in links:
            if d in reach and s not in reach:
                reach.add(s)
                changed = True
    return all(n in reach for n in topology.users)
