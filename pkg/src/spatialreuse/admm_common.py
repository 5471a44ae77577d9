"""Pieces shared by the two ADMM decompositions."""

from __future__ import annotations

import math

import numpy as np

from .kernels import capacity
from .netmodel import ChannelModel, NetworkTopology
from .qp import QpProblem, solve_qp
from .reference import GlobalSolution, SolverError, assemble_solution, max_min_routing

EPS_ABS = 1e-4
EPS_REL = 1e-3
MAX_ITERS = 500


def threshold(primal, copy, eps_abs=EPS_ABS, eps_rel=EPS_REL) -> float:
    """Stopping threshold ``sqrt(n) eps_abs + eps_rel max(|primal|, |copy|)``.

    The same value bounds a block's primal residual and its dual residual.
    """
    n = max(len(primal), 1)
    return math.sqrt(n) * eps_abs + eps_rel * max(np.linalg.norm(primal), np.linalg.norm(copy))


def routing_qp(t, u, rho: float, topology: NetworkTopology, tol: float = 1e-10) -> np.ndarray:
    """``argmax nu - rho/2 |x - t + u|^2`` over flows with ``(A x)_n >= nu``.

    Shared by the layered network step and the device CU1 step.
    """
    L = topology.num_links
    if L == 0:
        return np.zeros(0)
    users = topology.users
    P = np.concatenate([np.full(L, rho), [0.0]])
    c = np.concatenate([-rho * (np.asarray(t) - np.asarray(u)), [-1.0]])
    G = np.hstack([-topology.incidence[users], np.ones((len(users), 1))])
    lb = np.concatenate([np.zeros(L), [-np.inf]])
    sol = solve_qp(QpProblem(c=c, P=P, G=G, h=np.zeros(len(users)), lb=lb), tol=tol)
    return np.maximum(sol.x[:L], 0.0)


def restore(topology: NetworkTopology, channel: ChannelModel, x, t, p, w, W_groups, **kw) -> GlobalSolution:
    """Make an ADMM iterate strictly feasible.

    Groups whose links use more bandwidth than ``W_groups`` allows have
    their bandwidth and power scaled down together (ratios and node budgets
    survive); groups using less hand the slack to their links in proportion
    to current use, which only raises capacity. Flows are then clipped to ``min(x, t, capacity)``. With
    ``reroute`` the max-min routing over the restored capacities is also
    tried and the better of the two feasible points is kept.
    """
    reroute = kw.pop("reroute", True)
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    p = np.maximum(np.array(p, dtype=float), 0.0)
    w = np.maximum(np.array(w, dtype=float), 0.0)
    W_groups = np.asarray(W_groups, dtype=float)
    for g, members in enumerate(topology.groups()):
        links = [l for n in members for l in topology.out_links[n]]
        used = w[links].sum()
        if used > W_groups[g] > 0 or (used > 0 and W_groups[g] <= 0):
            scale = W_groups[g] / used if W_groups[g] > 0 else 0.0
            w[links] *= scale
            p[links] *= scale
        elif links and used < W_groups[g]:
            share = w[links] / used if used > 0 else np.full(len(links), 1.0 / len(links))
            w[links] += (W_groups[g] - used) * share
    for n in topology.users:
        out = topology.out_links[n]
        tot = p[out].sum()
        if tot > channel.P_max > 0:
            p[out] *= channel.P_max / tot
    if math.isfinite(channel.gamma):
        p = np.minimum(p, channel.gamma * w)
    cap = capacity(w, p, channel.q, channel.noise) if len(w) else np.zeros(0)
    xf = np.minimum(np.minimum(x, np.maximum(np.asarray(t, dtype=float), 0.0)), cap)
    sol = assemble_solution(topology, xf, p, w, W_groups, **kw)
    if reroute and len(w) and topology.users:
        try:
            xr, _ = max_min_routing(topology, cap)
        except SolverError:
            return sol
        alt = assemble_solution(topology, xr, p, w, W_groups, **kw)
        if alt.objective > sol.objective:
            return alt
    return sol
