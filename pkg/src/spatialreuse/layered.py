"""Two-block ADMM splitting routing (network layer) from resource allocation.

The network layer picks flows ``x``; the physical layer picks a flow copy
``t`` that its powers and bandwidths can carry. The scaled dual ``u``
accumulates ``x - t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .admm_common import EPS_ABS, EPS_REL, MAX_ITERS, restore, routing_qp, threshold
from .kernels import capacity
from .netmodel import ChannelModel, NetworkTopology, reuse_classes
from .qp import QpProblem, solve_qp
from .reference import (
    MAX_SCP_ITERS,
    SolverError,
    _empty_solution,
    _num_classes,
    group_bandwidth,
    seed_models,
)

DEFAULT_RHO = 1.0
TRACE_COLUMNS = ("iteration", "objective", "primal_residual", "dual_residual")


@dataclass
class LayeredAdmmState:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    rho: float
    k: int = 0
    p: np.ndarray | None = None
    w: np.ndarray | None = None
    W: np.ndarray | None = None
    models: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def init_state(topology: NetworkTopology, channel: ChannelModel, rho: float = DEFAULT_RHO, t0: float = 1.0) -> LayeredAdmmState:
    """Start from ``t = t0`` and ``u = 0``; planes are seeded as in the reference."""
    L = topology.num_links
    models = seed_models(topology, channel) if L else []
    C = _num_classes(topology, channel)
    return LayeredAdmmState(
        x=np.zeros(L), t=np.full(L, float(t0)), u=np.zeros(L), rho=float(rho),
        p=np.zeros(L), w=np.zeros(L), W=np.full(C, channel.W_max / max(C, 1)), models=models,
    )


def network_layer_step(state: LayeredAdmmState, topology: NetworkTopology) -> np.ndarray:
    """``argmax_x nu - rho/2 |x - t + u|^2`` with ``(A x)_n >= nu`` for users."""
    return routing_qp(state.t, state.u, state.rho, topology)


class _PhysicalQp:
    """Variables ``[t, p / unit, w, W_class]`` of the physical-layer problem."""

    def __init__(self, topology, channel):
        L = topology.num_links
        C = _num_classes(topology, channel)
        self.L, self.C = L, C
        self.n = 3 * L + C
        self.unit = min(channel.P_max, channel.gamma * channel.W_max) if channel.P_max > 0 else 1.0
        it, ip, iw = np.arange(L), L + np.arange(L), 2 * L + np.arange(L)
        self.it, self.ip, self.iw = it, ip, iw
        self.iW = 3 * L + np.arange(C)
        rows = []
        rhs = []
        if math.isfinite(channel.gamma):
            for l in range(L):
                g = np.zeros(self.n)
                g[ip[l]] = self.unit
                g[iw[l]] = -channel.gamma
                rows.append(g)
                rhs.append(0.0)
        for n in topology.users:
            g = np.zeros(self.n)
            g[ip[topology.out_links[n]]] = 1.0
            rows.append(g)
            rhs.append(channel.P_max / self.unit)
        classes = reuse_classes(topology.num_groups, channel.reuse_factor)
        for gi, members in enumerate(topology.groups()):
            g = np.zeros(self.n)
            links = [l for m in members for l in topology.out_links[m]]
            g[iw[links]] = 1.0
            g[self.iW[classes[gi]]] = -1.0
            rows.append(g)
            rhs.append(0.0)
        self.G = np.array(rows).reshape(-1, self.n)
        self.h = np.array(rhs)
        self.A = np.zeros((1, self.n))
        self.A[0, self.iW] = 1.0
        self.b = np.array([channel.W_max])

    def solve(self, target, rho, models):
        cuts = []
        rhs = []
        for l, m in enumerate(models):
            for gp, gw, a2 in m.planes:
                g = np.zeros(self.n)
                g[self.it[l]] = 1.0
                g[self.ip[l]] = -gp * self.unit
                g[self.iw[l]] = -gw
                cuts.append(g)
                rhs.append(a2)
        G = np.vstack([self.G] + ([np.array(cuts)] if cuts else []))
        h = np.concatenate([self.h, rhs])
        P = np.zeros(self.n)
        P[self.it] = rho
        c = np.zeros(self.n)
        c[self.it] = -rho * target
        sol = solve_qp(QpProblem(c=c, P=P, A=self.A, b=self.b, G=G, h=h, lb=np.zeros(self.n)), tol=1e-10)
        z = np.maximum(sol.x, 0.0)
        return z[self.it], z[self.ip] * self.unit, z[self.iw], z[self.iW]


def physical_layer_step(state: LayeredAdmmState, topology: NetworkTopology, channel: ChannelModel,
                        inner_tol: float | None = None, max_scp_iters: int = MAX_SCP_ITERS, qp=None):
    """Project ``x + u`` onto the achievable region by an inner SCP loop.

    Each round solves the tangent-plane QP and refines planes where the
    flow copy overshoots true capacity, until the overshoot is below
    ``inner_tol`` (default ``EPS_ABS / 10``). Returns ``(t, p, w, W_groups)``
    with ``t`` clipped to capacity.
    """
    if inner_tol is None:
        inner_tol = EPS_ABS / 10
    qp = qp or _PhysicalQp(topology, channel)
    target = state.x + state.u
    for _ in range(max_scp_iters):
        t, p, w, Wc = qp.solve(target, state.rho, state.models)
        cap = capacity(w, p, channel.q, channel.noise)
        viol = t - cap
        bad = np.flatnonzero(viol > inner_tol)
        if bad.size == 0:
            return np.minimum(t, cap), p, w, group_bandwidth(topology, Wc, channel.reuse_factor)
        for l in bad:
            state.models[l].refine(p[l], w[l])
    raise SolverError(
        "physical-layer SCP did not converge",
        {"max_violation": float(viol.max()), "rounds": max_scp_iters},
    )


def dual_step(state: LayeredAdmmState) -> np.ndarray:
    """Scaled dual ascent ``u += x - t``."""
    state.u = state.u + state.x - state.t
    return state.u


def run_layered(topology: NetworkTopology, channel: ChannelModel, rho: float = DEFAULT_RHO,
                init: dict | None = None, stop: dict | None = None):
    """Iterate network step, physical step and dual step to a fixed point.

    ``init`` may give ``t0`` (scalar or per-link) and ``u0``. ``stop`` may
    give ``max_iters``, ``eps_abs``, ``eps_rel``. Returns
    ``(GlobalSolution, trace)``; the trace is a list of dicts keyed by
    :data:`TRACE_COLUMNS`. When ``max_iters`` runs out the best restored
    iterate is returned with ``converged=False``.
    """
    init = init or {}
    stop = stop or {}
    max_iters = int(stop.get("max_iters", MAX_ITERS))
    eps_abs = stop.get("eps_abs", EPS_ABS)
    eps_rel = stop.get("eps_rel", EPS_REL)
    if topology.num_links == 0:
        if topology.users:
            raise SolverError("infeasible: users but no links")
        return _empty_solution(topology, channel), []

    state = init_state(topology, channel, rho)
    if "t0" in init:
        state.t = np.broadcast_to(np.asarray(init["t0"], dtype=float), state.t.shape).copy()
    if "u0" in init:
        state.u = np.broadcast_to(np.asarray(init["u0"], dtype=float), state.u.shape).copy()
    qp = _PhysicalQp(topology, channel)
    best = None
    W_groups = group_bandwidth(topology, state.W, channel.reuse_factor)
    for k in range(1, max_iters + 1):
        state.k = k
        t_prev = state.t
        state.x = network_layer_step(state, topology)
        state.t, state.p, state.w, W_groups = physical_layer_step(state, topology, channel, qp=qp)
        dual_step(state)
        r_pri = float(np.linalg.norm(state.x - state.t))
        r_dual = float(np.linalg.norm(state.rho * (state.t - t_prev)))
        sol = restore(topology, channel, state.x, state.t, state.p, state.w, W_groups, iterations=k)
        state.trace.append({"iteration": k, "objective": sol.objective, "primal_residual": r_pri, "dual_residual": r_dual})
        if best is None or sol.objective > best.objective:
            best = sol
        eps = threshold(state.x, state.t, eps_abs, eps_rel)
        if k >= 2 and r_pri <= eps and r_dual <= eps:
            sol.converged = True
            sol.info["state"] = state
            return sol, state.trace
    best.converged = False
    best.info["state"] = state
    return best, state.trace
