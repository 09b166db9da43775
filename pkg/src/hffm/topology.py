"""Three-tier fog/edge network: device clusters joined by random geometric
D2D graphs, one edge server per group of clusters and a single cloud.

Node ids are laid out as ``0 .. num_devices-1`` for devices, then the edge
servers, then the cloud.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError, MembershipError

RESAMPLE_ATTEMPTS = 50
RADIUS_GROWTH = 1.10
MAX_RADIUS_GROWTHS = 200


class Tier(str, enum.Enum):
    DEVICE = "device"
    EDGE_SERVER = "edge_server"
    CLOUD = "cloud"


@dataclass(frozen=True)
class NodeDefaults:
    tx_power_uplink: float = 0.2
    tx_power_d2d: float = 0.05
    compute_time_per_epoch: float = 1.0
    compute_power: float = 2.0
    server_tx_power: float = 1.0
    cloud_tx_power: float = 1.0

    def validate(self, path="topology.node_defaults"):
        for name, value in vars(self).items():
            if not value > 0:
                raise ConfigError("must be strictly positive", f"{path}.{name}")


@dataclass(frozen=True)
class TopologyConfig:
    num_devices: int = 40
    num_clusters: int = 10
    devices_per_cluster: int = 4
    num_edge_servers: int = 10
    d2d_radius: float = 60.0
    area_side: float = 100.0
    node_defaults: NodeDefaults = field(default_factory=NodeDefaults)

    def validate(self, path="topology"):
        for name in ("num_devices", "num_clusters", "devices_per_cluster", "num_edge_servers"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"{path}.{name}")
        if self.num_devices != self.num_clusters * self.devices_per_cluster:
            raise ConfigError(
                f"num_devices ({self.num_devices}) != num_clusters x devices_per_cluster "
                f"({self.num_clusters} x {self.devices_per_cluster})",
                f"{path}.num_devices",
            )
        k, e = self.num_clusters, self.num_edge_servers
        if k % e and e % k:
            raise ConfigError(
                f"num_clusters ({k}) and num_edge_servers ({e}) must divide one another",
                f"{path}.num_edge_servers",
            )
        if not self.d2d_radius > 0:
            raise ConfigError("must be > 0", f"{path}.d2d_radius")
        if not self.area_side > 0:
            raise ConfigError("must be > 0", f"{path}.area_side")
        self.node_defaults.validate(f"{path}.node_defaults")


@dataclass(frozen=True)
class Node:
    id: int
    tier: Tier
    position: tuple[float, float] | None
    parent: int | None
    tx_power_uplink: float
    tx_power_d2d: float
    compute_time_per_epoch: float
    compute_power: float


@dataclass(frozen=True)
class Cluster:
    """A device cluster. ``radius`` is the D2D radius actually used for this
    cluster, which exceeds the configured one only after connectivity repair."""

    id: int
    members: tuple[int, ...]
    head: int
    adjacency: frozenset[tuple[int, int]]
    edge_server: int
    radius: float

    def neighbors(self, node: int) -> list[int]:
        out = [v for u, v in self.adjacency if u == node]
        out += [u for u, v in self.adjacency if v == node]
        return sorted(out)


@dataclass(frozen=True)
class NetworkTopology:
    nodes: tuple[Node, ...]
    clusters: tuple[Cluster, ...]
    d2d_radius: float
    area_side: float

    @property
    def devices(self) -> list[Node]:
        return [n for n in self.nodes if n.tier is Tier.DEVICE]

    @property
    def edge_servers(self) -> list[Node]:
        return [n for n in self.nodes if n.tier is Tier.EDGE_SERVER]

    @property
    def cloud(self) -> Node:
        return next(n for n in self.nodes if n.tier is Tier.CLOUD)

    def node(self, node_id: int) -> Node:
        node = self.nodes[node_id]
        assert node.id == node_id
        return node

    def cluster_of(self, device: int) -> Cluster:
        for c in self.clusters:
            if device in c.members:
                return c
        raise MembershipError(f"node {device} belongs to no cluster")

    def distance(self, a: int, b: int) -> float:
        pa, pb = self.node(a).position, self.node(b).position
        if pa is None or pb is None:
            raise ValueError(f"node {a if pa is None else b} has no position")
        return math.dist(pa, pb)

    def devices_of_server(self, server: int) -> list[int]:
        return sorted(n.id for n in self.devices if n.parent == server)

    def to_text(self) -> str:
        """Plain-text adjacency listing, one line per node or cluster."""
        lines = []
        for n in self.nodes:
            pos = "-" if n.position is None else f"{n.position[0]:.3f},{n.position[1]:.3f}"
            parent = "-" if n.parent is None else str(n.parent)
            lines.append(f"node {n.id} {n.tier.value} pos={pos} parent={parent}")
        for c in self.clusters:
            edges = " ".join(f"{u}-{v}" for u, v in sorted(c.adjacency))
            lines.append(
                f"cluster {c.id} server={c.edge_server} head={c.head} "
                f"members={','.join(map(str, c.members))} radius={c.radius!r} edges={edges}"
            )
        return "\n".join(lines) + "\n"


def _rgg_edges(ids, positions, radius):
    edges = set()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if math.dist(positions[i], positions[j]) <= radius:
                edges.add((ids[i], ids[j]))
    return edges


def _connected(members, edges) -> bool:
    if len(members) <= 1:
        return True
    adj = {m: set() for m in members}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    seen = {members[0]}
    queue = deque([members[0]])
    while queue:
        for v in adj[queue.popleft()]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(members)


def generate_topology(cfg: TopologyConfig, seed: int) -> NetworkTopology:
    """Build a deterministic three-tier topology from ``cfg`` and ``seed``.

    Each cluster gets its own square of side ``area_side`` on a grid. A
    disconnected cluster is resampled up to 50 times, after which its D2D
    radius grows by 10% and resampling starts over.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    nd, k, e = cfg.num_devices, cfg.num_clusters, cfg.num_edge_servers
    m = cfg.devices_per_cluster
    cols = math.ceil(math.sqrt(max(k, e)))
    side = cfg.area_side
    server_ids = [nd + i for i in range(e)]
    cloud_id = nd + e

    def square_origin(i):
        return ((i % cols) * side, (i // cols) * side)

    positions: dict[int, tuple[float, float]] = {}
    clusters = []
    for ci in range(k):
        members = tuple(range(ci * m, (ci + 1) * m))
        ox, oy = square_origin(ci)
        radius = cfg.d2d_radius
        for _ in range(MAX_RADIUS_GROWTHS):
            for _ in range(RESAMPLE_ATTEMPTS):
                pts = rng.uniform(0.0, side, size=(m, 2)) + (ox, oy)
                pts = [(float(x), float(y)) for x, y in pts]
                edges = _rgg_edges(members, pts, radius)
                if _connected(members, edges):
                    break
            else:
                radius *= RADIUS_GROWTH
                continue
            break
        else:
            raise GenerationError(f"cluster {ci}: could not obtain a connected D2D graph")
        positions.update(zip(members, pts))
        head = int(members[rng.integers(m)])
        clusters.append(
            Cluster(
                id=ci,
                members=members,
                head=head,
                adjacency=frozenset(edges),
                edge_server=server_ids[ci % e],
                radius=radius,
            )
        )

    d = cfg.node_defaults
    nodes = []
    for c in clusters:
        for dev in c.members:
            nodes.append(
                Node(dev, Tier.DEVICE, positions[dev], c.edge_server,
                     d.tx_power_uplink, d.tx_power_d2d, d.compute_time_per_epoch, d.compute_power)
            )
    for i, sid in enumerate(server_ids):
        served = [c.id for c in clusters if c.edge_server == sid]
        centers = [square_origin(ci) for ci in served] or [square_origin(i)]
        cx = sum(p[0] for p in centers) / len(centers) + side / 2
        cy = sum(p[1] for p in centers) / len(centers) + side / 2
        nodes.append(
            Node(sid, Tier.EDGE_SERVER, (cx, cy), cloud_id,
                 d.server_tx_power, d.server_tx_power, d.compute_time_per_epoch, d.compute_power)
        )
    nodes.append(
        Node(cloud_id, Tier.CLOUD, None, None,
             d.cloud_tx_power, d.cloud_tx_power, d.compute_time_per_epoch, d.compute_power)
    )
    return NetworkTopology(tuple(nodes), tuple(clusters), cfg.d2d_radius, cfg.area_side)


def shortest_path(cluster: Cluster, src: int, dst: int) -> list[int]:
    """Hop-minimal path from ``src`` to ``dst`` (both inclusive).

    Among equally short paths, each step back from ``dst`` picks the
    lowest-id predecessor.
    """
    for node in (src, dst):
        if node not in cluster.members:
            raise MembershipError(f"node {node} is not a member of cluster {cluster.id}")
    adj = {v: [] for v in cluster.members}
    for u, v in cluster.adjacency:
        adj[u].append(v)
        adj[v].append(u)
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    if dst not in dist:
        raise MembershipError(f"node {dst} unreachable from {src} in cluster {cluster.id}")
    path = [dst]
    while path[-1] != src:
        cur = path[-1]
        path.append(min(v for v in adj[cur] if dist.get(v) == dist[cur] - 1))
    return path[::-1]


def validate_topology(topology: NetworkTopology) -> list[str]:
    """Describe every invariant violation; an empty list means valid."""
    problems = []
    by_id = {n.id: n for n in topology.nodes}
    clouds = [n for n in topology.nodes if n.tier is Tier.CLOUD]
    if len(clouds) != 1:
        problems.append(f"expected exactly one cloud node, found {len(clouds)}")
    cloud_id = clouds[0].id if clouds else None

    for n in topology.nodes:
        for name in ("tx_power_uplink", "tx_power_d2d", "compute_time_per_epoch", "compute_power"):
            if not getattr(n, name) > 0:
                problems.append(f"node {n.id}: {name} must be strictly positive")
        if n.tier is Tier.DEVICE:
            parent = by_id.get(n.parent)
            if parent is None or parent.tier is not Tier.EDGE_SERVER:
                problems.append(f"device {n.id}: parent {n.parent} is not an edge server")
        elif n.tier is Tier.EDGE_SERVER:
            if n.parent != cloud_id or cloud_id is None:
                problems.append(f"edge server {n.id}: parent {n.parent} is not the cloud")
        elif n.parent is not None:
            problems.append(f"cloud {n.id}: must have no parent")

    device_ids = {n.id for n in topology.nodes if n.tier is Tier.DEVICE}
    seen: dict[int, int] = {}
    for c in topology.clusters:
        members = set(c.members)
        if c.head not in members:
            problems.append(f"cluster {c.id}: head {c.head} is not a member")
        for dev in c.members:
            if dev in seen:
                problems.append(f"cluster {c.id}: device {dev} also in cluster {seen[dev]}")
            seen[dev] = c.id
            if dev not in device_ids:
                problems.append(f"cluster {c.id}: member {dev} is not a device")
        for u, v in sorted(c.adjacency):
            if u == v:
                problems.append(f"cluster {c.id}: self-loop on {u}")
                continue
            if u not in members or v not in members:
                problems.append(f"cluster {c.id}: edge {u}-{v} leaves the cluster")
                continue
            pu, pv = by_id[u].position, by_id[v].position
            if pu is not None and pv is not None:
                dist = math.dist(pu, pv)
                if dist > c.radius:
                    problems.append(
                        f"cluster {c.id}: edge {u}-{v} has length {dist:.3f} > radius {c.radius:.3f}"
                    )
        if c.radius < topology.d2d_radius:
            problems.append(f"cluster {c.id}: radius {c.radius} below configured {topology.d2d_radius}")
        if not _connected(list(c.members), [e for e in c.adjacency if set(e) <= members]):
            problems.append(f"cluster {c.id}: D2D graph is disconnected")
        server = by_id.get(c.edge_server)
        if server is None or server.tier is not Tier.EDGE_SERVER:
            problems.append(f"cluster {c.id}: edge_server {c.edge_server} is not an edge server")
    missing = device_ids - set(seen)
    if missing:
        problems.append(f"devices {sorted(missing)} belong to no cluster")
    return problems
