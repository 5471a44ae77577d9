"""Node placement, radial grouping, candidate links and channel constants."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_PLACEMENT_ATTEMPTS = 10_000


class TopologyError(ValueError):
    """Raised when a topology cannot be built from the given inputs."""


class InfeasibleDensity(TopologyError):
    """Node placement could not occupy every group."""


class DisconnectedNode(TopologyError):
    """A user ended up with no candidate outgoing link."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"nodes without outgoing links: {self.nodes}")


@dataclass
class ScenarioConfig:
    """Geometry, radio constants and solver settings for one scenario.

    Units are meters, radians, watts, MHz and Mbps. ``num_nodes`` counts the
    destination, so ``num_nodes=45`` places 44 users. ``reuse_factor`` is
    ``math.inf`` when spectrum is never reused.
    """

    sector_radius: float = 210.0
    sector_angle: float = math.pi / 3
    num_nodes: int = 45
    group_width: float = 30.0
    reuse_factor: float = 3
    theta: float = math.radians(15.0)
    d_th_factor: float = 1.5
    K: float = 1.0
    l0: float = 1.0
    pathloss_exp: float = 4.0
    N0: float = 1e-11
    W_max: float = 10.0
    P_max: float = 0.5
    alpha: float = 0.1
    epsilon_power: float = 1e-6
    rng_seed: int = 0
    # solver knobs
    tol: float = 1e-6
    max_iters: int = 500
    rho: float | None = None
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.group_width <= 0:
            raise ValueError("group_width must be positive")
        if not 0 < self.sector_angle <= 2 * math.pi:
            raise ValueError("sector_angle must lie in (0, 2*pi]")
        if self.num_nodes < 1:
            raise ValueError("num_nodes must be at least 1 (the destination)")
        if math.isfinite(self.reuse_factor):
            if self.reuse_factor != int(self.reuse_factor) or self.reuse_factor <= 2:
                raise ValueError("reuse_factor must be an integer > 2 or inf")
            self.reuse_factor = int(self.reuse_factor)
        if self.sector_radius < 2 * self.group_width:
            raise ValueError("sector_radius must cover the first group (2*d)")

    @property
    def d_th(self) -> float:
        return self.d_th_factor * self.group_width

    @property
    def num_groups(self) -> int:
        return num_groups(self.sector_radius, self.group_width)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if not math.isfinite(out["reuse_factor"]):
            out["reuse_factor"] = "inf"
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        if "P_max_dbm" in data:
            if "P_max" in data:
                raise ValueError("give either P_max or P_max_dbm, not both")
            data["P_max"] = dbm_to_watts(data.pop("P_max_dbm"))
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        if "reuse_factor" in data:
            f = data["reuse_factor"]
            data["reuse_factor"] = math.inf if f is None else float(f)
        for key in ("sector_angle", "theta"):
            if isinstance(data.get(key), dict) and "deg" in data[key]:
                data[key] = math.radians(data[key]["deg"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


@dataclass
class NetworkTopology:
    """Directed relay graph towards node 0 (the destination).

    Node ids are 0-based here; node 0 is the destination at the origin and
    carries group 0. Links are ``(src, dst)`` pairs in a fixed order.
    """

    positions: np.ndarray
    group_of: np.ndarray
    links: list
    num_groups: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.group_of = np.asarray(self.group_of, dtype=int)
        self.links = [(int(i), int(j)) for i, j in self.links]
        self.incidence = build_incidence(self.links, self.num_nodes)
        self.out_links = [[] for _ in range(self.num_nodes)]
        self.in_links = [[] for _ in range(self.num_nodes)]
        for l, (i, j) in enumerate(self.links):
            self.out_links[i].append(l)
            self.in_links[j].append(l)

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def users(self) -> list:
        return list(range(1, self.num_nodes))

    def groups(self) -> list:
        """Users of each group, index 0 holding group 1."""
        return [
            [n for n in self.users if self.group_of[n] == g]
            for g in range(1, self.num_groups + 1)
        ]

    def link_lengths(self) -> np.ndarray:
        if not self.links:
            return np.zeros(0)
        src = self.positions[[i for i, _ in self.links]]
        dst = self.positions[[j for _, j in self.links]]
        return np.linalg.norm(src - dst, axis=1)

    def link_group(self) -> np.ndarray:
        """Group of each link's transmitter."""
        return np.array([self.group_of[i] for i, _ in self.links], dtype=int)

    def subset(self, keep) -> "NetworkTopology":
        keep = sorted(keep)
        return NetworkTopology(
            self.positions, self.group_of, [self.links[l] for l in keep], self.num_groups
        )


def num_groups(sector_radius: float, d: float) -> int:
    return int(math.ceil((sector_radius - 2 * d) / d - 1e-12)) + 1


def generate_nodes(config: ScenarioConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Place ``num_nodes - 1`` users uniformly over the sector area.

    The destination sits at the origin (row 0). Placement is resampled until
    every radial group holds at least one user.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    n_users = config.num_nodes - 1
    if n_users == 0:
        return np.zeros((1, 2))
    M = config.num_groups
    if n_users < M:
        raise InfeasibleDensity(f"{n_users} users cannot occupy {M} groups")
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        radius = config.sector_radius * np.sqrt(rng.uniform(size=n_users))
        angle = config.sector_angle * rng.uniform(size=n_users)
        pts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
        groups = assign_groups(pts, config.group_width, config.sector_radius)
        if len(np.unique(groups)) == M:
            return np.vstack([np.zeros((1, 2)), pts])
    raise InfeasibleDensity(
        f"no placement with all {M} groups occupied after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def assign_groups(positions, d: float, sector_radius: float) -> np.ndarray:
    """Radial group index of each position.

    Group 1 covers radius ``<= 2d``; group ``g > 1`` covers
    ``(2d + (g-2)d, 2d + (g-1)d]``. Positions past the last full boundary
    join the outermost group.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        raise ValueError("no positions to group")
    radius = np.hypot(positions[:, 0], positions[:, 1])
    if np.any(radius > sector_radius * (1 + 1e-12)):
        raise ValueError("position outside the sector radius")
    M = num_groups(sector_radius, d)
    g = np.ceil((radius - 2 * d) / d - 1e-12).astype(int) + 1
    return np.clip(g, 1, M)


def angular_separation(p, q) -> float:
    a = math.atan2(p[1], p[0]) - math.atan2(q[1], q[0])
    a = abs(math.remainder(a, 2 * math.pi))
    return a


def assign_links(positions, group_of, theta: float, d_th: float, strict: bool = True) -> list:
    """Candidate links from each user to users of the next inner group.

    A link ``i -> j`` needs ``group(j) == group(i) - 1``, angular separation
    below ``theta`` and length below ``d_th``. Group-1 users get exactly one
    link, to the destination.
    """
    positions = np.asarray(positions, dtype=float)
    group_of = np.asarray(group_of)
    links = []
    for i in range(1, len(positions)):
        g = group_of[i]
        if g == 1:
            links.append((i, 0))
            continue
        for j in range(1, len(positions)):
            if group_of[j] != g - 1:
                continue
            if angular_separation(positions[i], positions[j]) >= theta:
                continue
            if np.linalg.norm(positions[i] - positions[j]) >= d_th:
                continue
            links.append((i, j))
    if strict:
        has_out = {i for i, _ in links}
        missing = [i for i in range(1, len(positions)) if i not in has_out]
        if missing:
            raise DisconnectedNode(missing)
    return links


def build_incidence(links, num_nodes: int) -> np.ndarray:
    A = np.zeros((num_nodes, len(links)))
    for l, (i, j) in enumerate(links):
        A[i, l] = 1.0
        A[j, l] = -1.0
    return A


def build_topology(config: ScenarioConfig, rng: np.random.Generator | None = None) -> NetworkTopology:
    """Sample placements until the candidate link set reaches every user."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    M = config.num_groups
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        pos = generate_nodes(config, rng)
        if len(pos) == 1:
            return NetworkTopology(pos, [0], [], M)
        groups = np.concatenate([[0], assign_groups(pos[1:], config.group_width, config.sector_radius)])
        try:
            links = assign_links(pos, groups, config.theta, config.d_th)
        except DisconnectedNode:
            continue
        return NetworkTopology(pos, groups, links, M)
    raise InfeasibleDensity(f"no connected placement after {MAX_PLACEMENT_ATTEMPTS} attempts")


def direct_topology(topology: NetworkTopology) -> NetworkTopology:
    """Same users, each with a single link straight to the destination."""
    n = topology.num_nodes
    return NetworkTopology(topology.positions, [0] + [1] * (n - 1), [(i, 0) for i in range(1, n)], 1)


def channel_gain(distance, K: float, l0: float, a: float):
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("channel gain needs a positive distance")
    q = K * (l0 / distance) ** a
    return float(q) if q.ndim == 0 else q


def bandwidth_coefficient(alpha: float, N0: float, K: float, l0: float, a: float, f: float, d: float) -> float:
    """Per-MHz transmit power cap keeping co-channel interference below alpha*N0.

    Returns ``math.inf`` for ``f = inf`` (no reuse, cap inactive).
    """
    if not math.isfinite(f):
        return math.inf
    if f <= 2:
        raise ValueError("reuse factor must exceed 2")
    d_int = (f - 2) * d
    return alpha * N0 / (K * (l0 / d_int) ** a)


@dataclass
class ChannelModel:
    """Per-link radio constants.

    ``noise`` holds the noise density seen by each link (W/MHz); it starts
    uniform at ``N0`` and can be rescaled per transmitter by channel events.
    ``gamma`` stays at its nominal value when noise changes.
    """

    q: np.ndarray
    noise: np.ndarray
    gamma: float
    P_max: float
    W_max: float
    reuse_factor: float
    N0: float = 1e-11

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), self.q.shape).copy()
        if np.any(self.q <= 0):
            raise ValueError("channel gains must be positive")

    @property
    def snr_gain(self) -> np.ndarray:
        """q / N0 per link, in 1/W per MHz."""
        return self.q / self.noise

    def copy(self) -> "ChannelModel":
        return dataclasses.replace(self, q=self.q.copy(), noise=self.noise.copy())


def build_channel(topology: NetworkTopology, config: ScenarioConfig) -> ChannelModel:
    q = channel_gain(topology.link_lengths(), config.K, config.l0, config.pathloss_exp) if topology.links else np.zeros(0)
    gamma = bandwidth_coefficient(
        config.alpha, config.N0, config.K, config.l0, config.pathloss_exp,
        config.reuse_factor, config.group_width,
    )
    return ChannelModel(
        q=np.atleast_1d(q), noise=config.N0, gamma=gamma, P_max=config.P_max,
        W_max=config.W_max, reuse_factor=config.reuse_factor, N0=config.N0,
    )


def direct_channel(topology: NetworkTopology, config: ScenarioConfig) -> ChannelModel:
    """Channel for the direct-mode star: no reuse and no interference cap."""
    q = channel_gain(topology.link_lengths(), config.K, config.l0, config.pathloss_exp) if topology.links else np.zeros(0)
    return ChannelModel(
        q=np.atleast_1d(q), noise=config.N0, gamma=math.inf, P_max=config.P_max,
        W_max=config.W_max, reuse_factor=math.inf, N0=config.N0,
    )


def reuse_classes(num_groups: int, f: float) -> np.ndarray:
    """0-based spectrum class of each group 1..M (``(g-1) mod f``)."""
    g = np.arange(num_groups)
    if not math.isfinite(f):
        return g
    return g % int(f)
