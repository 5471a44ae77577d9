import math

import numpy as np
import pytest

from spatialreuse.cli import load_config
from spatialreuse.netmodel import ChannelModel, NetworkTopology, build_channel, build_topology


@pytest.fixture(scope="session")
def small_config():
    return load_config("small")


@pytest.fixture(scope="session")
def small_instance(small_config):
    topo = build_topology(small_config)
    return topo, build_channel(topo, small_config)


def chain(num_users, spacing=40.0):
    """Users on a line, each relaying through the next one inward."""
    pos = np.array([[spacing * i, 0.0] for i in range(num_users + 1)])
    links = [(i, i - 1) for i in range(1, num_users + 1)]
    return NetworkTopology(pos, list(range(num_users + 1)), links, num_users)


def star(distances):
    pos = np.vstack([[0.0, 0.0]] + [[d, 0.0] for d in distances])
    n = len(distances)
    return NetworkTopology(pos, [0] + [1] * n, [(i, 0) for i in range(1, n + 1)], 1)


def channel_for(topo, K=1e-4, N0=1e-11, P_max=0.5, W_max=10.0, gamma=math.inf, f=math.inf):
    lengths = topo.link_lengths()
    return ChannelModel(q=K / lengths**4, noise=N0, gamma=gamma, P_max=P_max, W_max=W_max, reuse_factor=f, N0=N0)
