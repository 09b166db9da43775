import numpy as np
import pytest

from hffm.topology import Cluster, NetworkTopology, Node, Tier, TopologyConfig


def make_node(i, tier, pos, parent, **kw):
    defaults = dict(tx_power_uplink=0.2, tx_power_d2d=0.05, compute_time_per_epoch=1.0, compute_power=2.0)
    defaults.update(kw)
    return Node(i, tier, pos, parent, **defaults)


def line_topology(spacing=10.0, head=3):
    """Devices 0-1-2-3 on a line (D2D edges between neighbours only), one
    edge server (4) and the cloud (5)."""
    nodes = [make_node(i, Tier.DEVICE, (i * spacing, 0.0), 4) for i in range(4)]
    nodes.append(make_node(4, Tier.EDGE_SERVER, (15.0, 40.0), 5, tx_power_uplink=1.0, tx_power_d2d=1.0))
    nodes.append(make_node(5, Tier.CLOUD, None, None, tx_power_uplink=1.0, tx_power_d2d=1.0))
    cluster = Cluster(0, (0, 1, 2, 3), head, frozenset({(0, 1), (1, 2), (2, 3)}), 4, spacing * 1.5)
    return NetworkTopology(tuple(nodes), (cluster,), spacing * 1.5, 100.0)


@pytest.fixture
def case_study_config():
    return TopologyConfig(num_devices=40, num_clusters=10, devices_per_cluster=4, num_edge_servers=10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])
