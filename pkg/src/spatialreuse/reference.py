"""Centralized max-min solver for the joint routing/spectrum/power problem.

The concave capacity constraint is handled by a cutting-plane loop: each
round solves a linear program over the current tangent-plane model of every
link, then adds planes at the links whose flow overshoots true capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .kernels import TangentPlaneModel, capacity
from .netmodel import ChannelModel, NetworkTopology, reuse_classes

MAX_SCP_ITERS = 200
SEED_PLANES = 12


class SolverError(RuntimeError):
    """Raised when a solve fails; ``diagnostics`` holds the last state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class GlobalSolution:
    """Per-link flows, powers and bandwidths plus derived per-node quantities."""

    x: np.ndarray
    p: np.ndarray
    w: np.ndarray
    W: np.ndarray
    r: np.ndarray
    v: np.ndarray
    objective: float
    power_total: float
    iterations: int = 0
    converged: bool = True
    info: dict = field(default_factory=dict)


def assemble_solution(topology: NetworkTopology, x, p, w, W, **kw) -> GlobalSolution:
    """Derive ``r = A x``, per-node bandwidth and the min-rate objective."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    r = topology.incidence @ x if topology.num_links else np.zeros(topology.num_nodes)
    v = np.zeros(topology.num_nodes)
    for n in range(topology.num_nodes):
        v[n] = w[topology.out_links[n]].sum()
    users = topology.users
    obj = float(np.min(r[users])) if users else 0.0
    return GlobalSolution(x, p, w, np.asarray(W, dtype=float), r, v, obj, float(p.sum()), **kw)


def group_bandwidth(topology: NetworkTopology, W_class, f) -> np.ndarray:
    """Expand per-class bandwidth to one value per group 1..M."""
    return np.asarray(W_class, dtype=float)[reuse_classes(topology.num_groups, f)]


def _empty_solution(topology, channel):
    n_cls = _num_classes(topology, channel)
    W = np.full(n_cls, channel.W_max / max(n_cls, 1))
    return assemble_solution(topology, np.zeros(0), np.zeros(0), np.zeros(0), group_bandwidth(topology, W, channel.reuse_factor) if n_cls else np.zeros(0))


def _num_classes(topology, channel):
    f = channel.reuse_factor
    return topology.num_groups if not math.isfinite(f) else min(int(f), topology.num_groups)


class _JointLP:
    """Cutting-plane LP; planes are appended per round.

    Power enters in units of ``min(P_max, gamma * W_max)`` and flows in units of
    ``rate_unit``, which tracks the min rate so HiGHS tolerances stay
    relative.
    """

    def __init__(self, topology, channel, fixed_w=None):
        L = topology.num_links
        self.L = L
        self.C = _num_classes(topology, channel)
        self.nvar = 3 * L + self.C + 1
        self.unit = min(channel.P_max, channel.gamma * channel.W_max) if channel.P_max > 0 else 1.0
        self.rate_unit = 1.0
        ix = lambda k: np.arange(L) + k * L
        self.ix, self.ip, self.iw = ix(0), ix(1), ix(2)
        self.iW = 3 * L + np.arange(self.C)
        self.inu = 3 * L + self.C

        rows, cols, vals, rhs = [], [], [], []
        r = 0
        if math.isfinite(channel.gamma):
            for l in range(L):
                rows += [r, r]
                cols += [self.ip[l], self.iw[l]]
                vals += [self.unit, -channel.gamma]
                rhs.append(0.0)
                r += 1
        for n in topology.users:
            out = topology.out_links[n]
            rows += [r] * len(out)
            cols += list(self.ip[out])
            vals += [1.0] * len(out)
            rhs.append(channel.P_max / self.unit)
            r += 1
        classes = reuse_classes(topology.num_groups, channel.reuse_factor)
        for g, members in enumerate(topology.groups()):
            links = [l for n in members for l in topology.out_links[n]]
            rows += [r] * (len(links) + 1)
            cols += list(self.iw[links]) + [self.iW[classes[g]]]
            vals += [1.0] * len(links) + [-1.0]
            rhs.append(0.0)
            r += 1
        A = topology.incidence
        for n in topology.users:
            nz = np.flatnonzero(A[n])
            rows += [r] * (len(nz) + 1)
            cols += list(self.ix[nz]) + [self.inu]
            vals += list(-A[n, nz]) + [1.0]
            rhs.append(0.0)
            r += 1
        self.static = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.nvar))
        self.static_rhs = np.array(rhs)
        self.A_eq = sp.csr_matrix((np.ones(self.C), (np.zeros(self.C, dtype=int), self.iW)), shape=(1, self.nvar))
        self.b_eq = np.array([channel.W_max])
        self.bounds = [(0, None)] * (3 * L + self.C) + [(None, None)]
        if fixed_w is not None:
            for l in range(L):
                self.bounds[self.iw[l]] = (float(fixed_w[l]), float(fixed_w[l]))

    def rate_cost(self, epsilon):
        cost = np.zeros(self.nvar)
        cost[self.inu] = -1.0
        cost[self.ip] = epsilon * self.unit / self.rate_unit
        return cost

    def power_cost(self):
        cost = np.zeros(self.nvar)
        cost[self.ip] = 1.0
        return cost

    def solve(self, models, cost, nu_floor=None):
        ru = self.rate_unit
        rows, cols, vals, rhs = [], [], [], []
        r = 0
        for l, m in enumerate(models):
            for gp, gw, a2 in m.planes:
                rows += [r, r, r]
                cols += [self.ix[l], self.ip[l], self.iw[l]]
                vals += [1.0, -gp * self.unit / ru, -gw / ru]
                rhs.append(a2 / ru)
                r += 1
        cuts = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.nvar))
        bounds = self.bounds
        if nu_floor is not None:
            bounds = bounds[:-1] + [(nu_floor / ru, None)]
        res = linprog(
            cost,
            A_ub=sp.vstack([self.static, cuts]).tocsr(),
            b_ub=np.concatenate([self.static_rhs, rhs]),
            A_eq=self.A_eq,
            b_eq=self.b_eq,
            bounds=bounds,
            method="highs",
        )
        if res.status == 2:
            return None
        if res.status != 0:
            raise SolverError(f"LP failed: {res.message}")
        z = res.x
        p = np.maximum(z[self.ip], 0.0) * self.unit
        nu = z[self.inu] * ru
        if nu > 0:
            self.rate_unit = nu
        return np.maximum(z[self.ix], 0.0) * ru, p, np.maximum(z[self.iw], 0.0), z[self.iW], nu


def _separating_anchor(model, x, p, w):
    """Anchor whose tangent plane cuts off ``(x, p, w)``."""
    if w > 1e-12 or p <= 0:
        return p, w
    s = model.q / model.N0
    # pick an SNR at which the plane slope through the origin stays below x / p
    snr = max(2.0 * (s * p / (math.log(2) * max(x, 1e-300)) - 1.0), 1.0)
    return p, s * p / snr


def max_min_routing(topology: NetworkTopology, cap, scale=None) -> tuple:
    """Max-min flow over fixed link capacities: returns ``(x, nu)``.

    Flows are solved in units of ``scale`` (default: the median positive
    capacity) so solver tolerances act relatively.
    """
    L = topology.num_links
    cap = np.maximum(np.asarray(cap, dtype=float), 0.0)
    if scale is None:
        pos = cap[cap > 0]
        scale = float(np.median(pos)) if pos.size else 1.0
    scale = scale if scale > 0 else 1.0
    A = topology.incidence
    users = topology.users
    # rows: nu - (A x)_n <= 0 for users
    G = sp.hstack([sp.csr_matrix(-A[users]), sp.csr_matrix(np.ones((len(users), 1)))]).tocsr()
    cost = np.zeros(L + 1)
    cost[-1] = -1.0
    bounds = [(0.0, float(c)) for c in cap / scale] + [(None, None)]
    res = linprog(cost, A_ub=G, b_ub=np.zeros(len(users)), bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverError(f"routing LP failed: {res.message}")
    x = np.minimum(np.maximum(res.x[:L], 0.0) * scale, cap)
    r = A @ x
    return x, float(np.min(r[users]))


def fill_power(topology: NetworkTopology, channel: ChannelModel, p, w) -> np.ndarray:
    """Raise link powers into each node's unused budget.

    Every link moves toward its cap ``gamma * w`` by the same fraction, or,
    with no cap, splits the leftover budget in proportion to bandwidth. The
    result dominates ``p`` so no capacity decreases.
    """
    p = np.array(p, dtype=float)
    w = np.asarray(w, dtype=float)
    capped = math.isfinite(channel.gamma)
    for n in topology.users:
        out = topology.out_links[n]
        if not out:
            continue
        spare = channel.P_max - p[out].sum()
        if spare <= 0:
            continue
        if capped:
            room = np.maximum(channel.gamma * w[out] - p[out], 0.0)
        else:
            room = w[out] * spare / w[out].sum() if w[out].sum() > 0 else np.zeros(len(out))
        total = room.sum()
        if total > 0:
            p[out] += room * min(1.0, spare / total)
    return p


def _cutting_plane(lp, models, topology, channel, cost, tol, max_iters, history, key, nu_floor=None):
    """Refine planes until the LP bound and a recovered feasible point agree.

    The stopping test is relative: the feasible min rate must come within
    ``tol * |target|`` of the LP bound (or of ``nu_floor``).

    Returns ``(x, p, w, W, nu)`` where ``x`` is routed over true capacities
    at the LP's bandwidth, so it is feasible by construction. When maximizing
    rate the power is topped up with :func:`fill_power` before routing.
    """
    for it in range(1, max_iters + 1):
        out = lp.solve(models, cost, nu_floor)
        if out is None:
            return None, it
        x, p, w, Wc, nu = out
        cap = capacity(w, p, channel.q, channel.noise)
        target = nu if nu_floor is None else nu_floor
        pr = fill_power(topology, channel, p, w) if nu_floor is None else p
        xf, nu_f = max_min_routing(topology, capacity(w, pr, channel.q, channel.noise), scale=abs(target) or None)
        history.append((key, float(nu), float(nu_f), float(pr.sum())))
        if nu_f >= target - tol * abs(target):
            return (xf, pr, w, Wc, nu_f), it
        viol = x - cap
        cut = np.flatnonzero(viol > 0.1 * tol * x)
        if cut.size == 0:
            cut = np.flatnonzero(viol > 0)
        if cut.size == 0:
            break
        for l in cut:
            models[l].refine(*_separating_anchor(models[l], x[l], p[l], w[l]))
    raise SolverError(
        f"cutting-plane loop did not converge ({key} phase, {it} rounds)",
        {"history": history, "gap": history[-1][1] - history[-1][2] if history else None},
    )


def seed_models(topology, channel, budget=None, grid=SEED_PLANES, fixed_w=None) -> list:
    """Tangent-plane models seeded on a geometric SNR grid per link.

    With a power-per-bandwidth cap (or pinned bandwidth) the grid spans
    three decades below the highest reachable SNR. Without a cap SNR is
    unbounded as ``w -> 0``, so the grid spans six decades around full
    power on an even bandwidth share. The anchor ``(min(gamma * wbar, P_max), wbar)`` with
    ``wbar = W_max / L`` is always added.
    """
    L = topology.num_links
    wbar = channel.W_max / L
    p0 = min(channel.gamma * wbar, channel.P_max)
    models = []
    for l in range(L):
        m = TangentPlaneModel(channel.q[l], channel.noise[l], budget=budget)
        s = channel.snr_gain[l]
        decades = 3
        if fixed_w is not None and fixed_w[l] > 0:
            top = s * min(channel.gamma, channel.P_max / fixed_w[l])
        elif math.isfinite(channel.gamma):
            top = s * channel.gamma
        else:
            top = 1e4 * s * channel.P_max / wbar
            decades = 6
        for snr in np.geomspace(top * 10.0**-decades, top, grid):
            m.refine(snr / s, 1.0)
        m.refine(p0, wbar)
        models.append(m)
    return models


def solve_joint(
    topology: NetworkTopology,
    channel: ChannelModel,
    tol: float = 1e-6,
    epsilon: float = 1e-6,
    max_scp_iters: int = MAX_SCP_ITERS,
    fixed_w=None,
) -> GlobalSolution:
    """Maximize ``min_n r_n - epsilon * sum(p)`` over routing, power and spectrum.

    The min-rate epigraph uses ``r_n >= nu`` for every user. A weight of
    1e-6 on power is far below LP precision next to rate slopes of order
    1e5 Mbps/W, so a positive ``epsilon`` is applied in its limiting form:
    once the min rate converges, total power is minimized with the min rate
    held at its converged value, which is within ``tol`` (relative) of the
    optimum. ``fixed_w`` pins per-link
    bandwidths (used when re-solving after quantization).
    """
    L = topology.num_links
    if topology.num_nodes > 1 and L == 0:
        raise SolverError("infeasible: users but no links")
    if L == 0:
        return _empty_solution(topology, channel)
    lp = _JointLP(topology, channel, fixed_w)
    models = seed_models(topology, channel, fixed_w=fixed_w)

    history = []
    out, it1 = _cutting_plane(lp, models, topology, channel, lp.rate_cost(0.0), tol, max_scp_iters, history, "rate")
    it2 = 0
    if epsilon > 0:
        out2, it2 = _cutting_plane(lp, models, topology, channel, lp.power_cost(), tol, max_scp_iters, history, "power", float(out[4]))
        if out2 is not None:
            out = out2
    x, p, w, Wc, _ = out
    sol = assemble_solution(
        topology, x, p, w, group_bandwidth(topology, Wc, channel.reuse_factor),
        iterations=it1 + it2, converged=True,
    )
    sol.info["scp_history"] = history
    sol.info["planes"] = sum(len(m) for m in models)
    return sol


def solve_direct(topology: NetworkTopology, channel: ChannelModel, tol: float = 1e-6, **kw) -> GlobalSolution:
    """Direct-mode baseline: every user has one link to the destination.

    ``topology`` must be a star (see :func:`netmodel.direct_topology`) and
    ``channel`` must have no interference cap. Only the min rate is
    maximized (no power tiebreak); since rate grows with power, every user
    is reported at ``P_max``.
    """
    for l, (i, j) in enumerate(topology.links):
        if j != 0:
            raise ValueError("direct mode needs every link to end at the destination")
    if sorted(i for i, _ in topology.links) != topology.users:
        raise ValueError("direct mode needs exactly one link per user")
    if math.isfinite(channel.gamma) or topology.num_groups != 1:
        raise ValueError("direct mode uses a single group and no power-per-bandwidth cap")
    return solve_joint(topology, channel, tol=tol, epsilon=0.0, **kw)


def verify_solution(solution: GlobalSolution, topology: NetworkTopology, channel: ChannelModel, tol: float = 1e-6) -> dict:
    """Worst violation of every joint-problem constraint.

    Returns a dict mapping constraint name to its worst violation (0 when
    satisfied) plus ``ok``, true when all are within ``tol``. The gamma-cap row
    is absent when the channel has no cap.
    """
    x, p, w = solution.x, solution.p, solution.w
    A = topology.incidence
    rep = {}
    rep["flow_conservation"] = float(np.max(np.abs(A @ x - solution.r), initial=0.0)) if x.size else 0.0
    cap = capacity(np.maximum(w, 0), np.maximum(p, 0), channel.q, channel.noise) if x.size else np.zeros(0)
    rep["capacity"] = float(np.max(x - cap, initial=0.0))
    if math.isfinite(channel.gamma):
        rep["power_per_bandwidth"] = float(np.max(p - channel.gamma * w, initial=0.0))
    node_power = np.array([p[topology.out_links[n]].sum() for n in topology.users]) if topology.users else np.zeros(0)
    rep["node_power"] = float(np.max(node_power - channel.P_max, initial=0.0))
    W = solution.W
    group_v = np.array([sum(w[l] for n in members for l in topology.out_links[n]) for members in topology.groups()])
    rep["group_bandwidth"] = float(np.max(group_v - W, initial=0.0)) if W.size else 0.0
    C = _num_classes(topology, channel)
    rep["total_bandwidth"] = abs(float(W[:C].sum()) - channel.W_max) if W.size else 0.0
    classes = reuse_classes(topology.num_groups, channel.reuse_factor)
    rep["reuse_tie"] = float(np.max(np.abs(W - W[classes]), initial=0.0)) if W.size else 0.0
    rep["nonnegativity"] = float(max(np.max(-x, initial=0.0), np.max(-p, initial=0.0), np.max(-w, initial=0.0)))
    rep["ok"] = all(v <= tol for k, v in rep.items())
    return rep
