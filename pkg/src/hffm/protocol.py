"""FedAvg and the star / hierarchical / hierarchical+D2D training rounds.

Rounds are synchronous. Inside a round, transfers that happen in parallel
form a *stage*; the slowest branch of each stage is stamped critical in the
ledger, so round latency is the sum of the stages' maxima.

Scheduling uses a 0-based round index ``r``: a cloud aggregation fires on
rounds with ``r % e_agg == 0``, and a module overridden with period ``p``
only takes part in aggregation on rounds with ``r % p == 0``. Ledger and
report rounds are 1-based (``r + 1``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from . import model as M
from .channel import ChannelParams, LinkKind, link_rate_bps, transfer_cost
from .data import DataParams, Dataset, dirichlet_partition, generate_synthetic, train_test_indices
from .errors import AggregationError, ConfigError, HFFMError, TopologyError
from .metrics import TransferEvent, TransferLedger, record_compute, record_transfer, summarize
from .topology import NetworkTopology, generate_topology, shortest_path

if TYPE_CHECKING:
    from .config import ExperimentConfig


class Strategy(str, enum.Enum):
    STAR = "star"
    HIER = "hier"
    HIER_D2D = "hier-d2d"


class Depth(str, enum.Enum):
    EDGE_ONLY = "edge"
    CLOUD = "cloud"


@dataclass(frozen=True)
class ModuleOverride:
    depth: Depth = Depth.CLOUD
    period: int = 1


@dataclass(frozen=True)
class AggregationPolicy:
    """``e_agg=None`` means edge-only: the cloud never aggregates.

    ``module_overrides`` keys are either a role (``"task_head"``) or one
    specific block (``"task_head[1]"``); the specific key wins.
    """

    e_local: int = 1
    e_agg: int | None = 2
    strategy: Strategy = Strategy.HIER
    module_overrides: dict = field(default_factory=dict)

    def validate(self, path="policy"):
        if self.e_local < 1:
            raise ConfigError("must be >= 1", f"{path}.e_local")
        if self.e_agg is not None and self.e_agg < 1:
            raise ConfigError("must be >= 1 (or \"inf\")", f"{path}.e_agg")
        for key, ov in self.module_overrides.items():
            try:
                M.ModuleKind.parse(key)
            except ValueError:
                raise ConfigError("unknown module kind", f"{path}.module_overrides.{key}") from None
            if ov.period < 1:
                raise ConfigError("must be >= 1", f"{path}.module_overrides.{key}.period")

    def override_for(self, kind: M.ModuleKind) -> ModuleOverride:
        ov = self.module_overrides.get(str(kind))
        if ov is None:
            ov = self.module_overrides.get(kind.role.value, ModuleOverride())
        return ov

    def is_cloud_round(self, r: int) -> bool:
        return self.e_agg is not None and r % self.e_agg == 0

    def edge_kinds(self, kinds, r: int) -> list[M.ModuleKind]:
        return [k for k in kinds if r % self.override_for(k).period == 0]

    def cloud_kinds(self, kinds, r: int) -> list[M.ModuleKind]:
        if not self.is_cloud_round(r):
            return []
        return [k for k in self.edge_kinds(kinds, r) if self.override_for(k).depth is Depth.CLOUD]

    @property
    def e_agg_label(self) -> str:
        if self.strategy is Strategy.STAR:
            return "-"
        return "inf" if self.e_agg is None else str(self.e_agg)


@dataclass(frozen=True)
class TrainingParams:
    learning_rate: float = 0.1
    batch_size: int = 2

    def validate(self, path=""):
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", f"{path}learning_rate")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", f"{path}batch_size")


# ---------------------------------------------------------------------------
# data placement

@dataclass(frozen=True)
class DeviceData:
    device: int
    task: int
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class FederatedData:
    devices: dict

    def samples(self, device: int) -> int:
        return len(self.devices[device].train)


def cluster_task(cluster_id: int, num_tasks: int) -> int:
    return cluster_id % num_tasks


def build_federated_data(topology: NetworkTopology, spec: M.ModelSpec, params: DataParams,
                         seed: int) -> FederatedData:
    """One synthetic dataset per task; clusters alternate between tasks and
    each task's data is Dirichlet-partitioned over that task's devices, then
    every device's shard is split into train and test."""
    out = {}
    for t in range(spec.num_tasks):
        devs = sorted(
            dev for c in topology.clusters if cluster_task(c.id, spec.num_tasks) == t
            for dev in c.members
        )
        if not devs:
            continue
        ds = generate_synthetic(spec.C, spec.d, params.n_per_class, params.separation, [seed, 11, t])
        shards = dirichlet_partition(ds, len(devs), params.alpha, [seed, 13, t])
        for dev, shard in zip(devs, shards):
            local = ds.subset(shard.indices)
            tr, te = train_test_indices(local.labels, params.test_fraction, [seed, 17, dev])
            out[dev] = DeviceData(dev, t, local.subset(tr), local.subset(te))
    return FederatedData(out)


# ---------------------------------------------------------------------------
# aggregation

def fedavg(updates) -> np.ndarray:
    """Weighted element-wise mean of ``(values, weight)`` pairs, summed in
    the order given."""
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    first = np.asarray(updates[0][0], dtype=np.float64)
    acc = np.zeros_like(first)
    total = 0.0
    for values, weight in updates:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != first.shape:
            raise AggregationError(f"length mismatch: {values.shape} vs {first.shape}")
        if weight < 0:
            raise AggregationError(f"negative weight {weight}")
        acc += weight * values
        total += weight
    if not total > 0:
        raise AggregationError("total weight must be positive")
    return acc / total


@dataclass
class _Contribution:
    owner: int
    blocks: dict
    weights: dict  # kind -> weight of the owners that actually trained it
    total: float


def _device_contribution(device: int, mdl: M.ModularModel, kinds, n: int, task: int) -> _Contribution:
    weights = {}
    for k in kinds:
        trained = k.role is not M.Role.TASK_HEAD or k.index == task
        weights[k] = float(n) if trained else 0.0
    return _Contribution(device, {k: mdl.block(k).values for k in kinds}, weights, float(n))


def _aggregate(owner: int, contribs: list[_Contribution], kinds) -> _Contribution:
    """FedAvg every kind over ``contribs`` in ascending owner order.

    A task head is averaged only over owners of that task; when no owner
    trained it, the plain sample-count weights are used instead.
    """
    contribs = sorted(contribs, key=lambda c: c.owner)
    blocks, weights = {}, {}
    for k in kinds:
        w = [c.weights[k] for c in contribs]
        if sum(w) <= 0:
            w = [c.total for c in contribs]
        if sum(w) <= 0:
            w = [1.0] * len(contribs)
        blocks[k] = fedavg([(c.blocks[k], wi) for c, wi in zip(contribs, w)])
        weights[k] = math.fsum(c.weights[k] for c in contribs)
    return _Contribution(owner, blocks, weights, math.fsum(c.total for c in contribs))


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    models: dict
    edge_blocks: dict = field(default_factory=dict)
    cluster_blocks: dict = field(default_factory=dict)
    cloud_blocks: dict = field(default_factory=dict)
    round: int = 0
    seed: int = 0
    ledger: TransferLedger = field(default_factory=TransferLedger)
    label: str = ""


def init_state(initial: M.ModularModel, topology: NetworkTopology, seed: int,
               ledger: TransferLedger | None = None, label: str = "") -> TrainState:
    models = {n.id: initial.copy() for n in topology.devices}
    return TrainState(models, seed=seed, ledger=ledger if ledger is not None else TransferLedger(),
                      label=label)


def local_train(mdl: M.ModularModel, ds: Dataset, task: int, epochs: int,
                training: TrainingParams, rng) -> M.ModularModel:
    n = len(ds)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, training.batch_size):
            idx = order[start:start + training.batch_size]
            _, grads = M.loss_and_grads(mdl, ds.features[idx], ds.labels[idx], task)
            mdl = M.sgd_step(mdl, grads, training.learning_rate)
    return mdl


def _train_devices(state, policy, topology, channel, data, training):
    rnd = state.round + 1
    events = []
    for dev in sorted(state.models):
        dd = data.devices[dev]
        rng = np.random.default_rng([state.seed, 23, dev, state.round])
        state.models[dev] = local_train(state.models[dev], dd.train, dd.task, policy.e_local, training, rng)
        node = topology.node(dev)
        seconds = node.compute_time_per_epoch * policy.e_local
        joules = node.compute_power * seconds if channel.compute_energy else 0.0
        events.append((dev, seconds, joules))
    crit = max(events, key=lambda e: (e[1], -e[0]))[0] if events else None
    for dev, seconds, joules in events:
        record_compute(state.ledger, rnd, state.label, dev, seconds, joules, critical=dev == crit)


def _event(state, topology, channel, src, dst, kind: LinkKind, nbytes: int) -> TransferEvent:
    sender = topology.node(src)
    power = sender.tx_power_d2d if kind is LinkKind.D2D else sender.tx_power_uplink
    distance = topology.distance(src, dst) if kind.shannon else 0.0
    rate = link_rate_bps(distance, power, kind, channel)
    cost = transfer_cost(nbytes, rate, power, channel.rx_power_w)
    return TransferEvent(state.round + 1, state.label, src, dst, kind.value, nbytes,
                         cost.latency_s, cost.energy_j)


def _record_stage(state, branches):
    """Record parallel branches (each a sequential list of events); the
    slowest branch, earliest on ties, is stamped critical."""
    if not branches:
        return
    best = max(range(len(branches)), key=lambda i: (math.fsum(e.latency_s for e in branches[i]), -i))
    for i, branch in enumerate(branches):
        for ev in branch:
            record_transfer(state.ledger, replace(ev, critical=i == best))


def _payload(mdl: M.ModularModel, kinds) -> int:
    return M.payload_bytes(mdl, M.of_kinds(kinds))


def _load(mdl: M.ModularModel, blocks: dict, kinds) -> M.ModularModel:
    return M.load_blocks(mdl, [(k, blocks[k]) for k in kinds])


def _finish_round(state):
    state.round += 1
    return state


def run_round_star(state: TrainState, policy: AggregationPolicy, topology: NetworkTopology,
                   channel: ChannelParams, data: FederatedData,
                   training: TrainingParams = TrainingParams()) -> TrainState:
    """Devices train, then relay their trainable blocks through their edge
    server to the cloud, which averages and sends the result back down."""
    r = state.round
    _train_devices(state, policy, topology, channel, data, training)
    devices = sorted(state.models)
    sample = state.models[devices[0]]
    # no edge tier: every round is a cloud round and edge-only blocks stay local
    kinds = [k for k in policy.edge_kinds(sample.kinds(M.trainable), r)
             if policy.override_for(k).depth is Depth.CLOUD]
    if kinds:
        nbytes = _payload(sample, kinds)
        cloud = topology.cloud.id
        parent = {d: topology.node(d).parent for d in devices}
        _record_stage(state, [[_event(state, topology, channel, d, parent[d], LinkKind.UPLINK, nbytes)]
                              for d in devices])
        _record_stage(state, [[_event(state, topology, channel, parent[d], cloud, LinkKind.BACKHAUL, nbytes)]
                              for d in devices])
        contribs = [
            _device_contribution(d, state.models[d], kinds, data.samples(d), data.devices[d].task)
            for d in devices
        ]
        agg = _aggregate(cloud, contribs, kinds)
        state.cloud_blocks.update(agg.blocks)
        _record_stage(state, [[_event(state, topology, channel, cloud, parent[d], LinkKind.BACKHAUL, nbytes)]
                              for d in devices])
        _record_stage(state, [[_event(state, topology, channel, parent[d], d, LinkKind.DOWNLINK, nbytes)]
                              for d in devices])
        for d in devices:
            state.models[d] = _load(state.models[d], agg.blocks, kinds)
    return _finish_round(state)


def _cloud_stage(state, topology, channel, groups, kinds, hop_up=None):
    """Backhaul the group aggregates to the cloud, average them there and
    backhaul the result. ``groups`` maps an owner id (edge server or
    cluster) to ``(edge_server, contribution)``; ``hop_up`` optionally maps
    an owner to the node that first uplinks it to its edge server."""
    cloud = topology.cloud.id
    owners = sorted(groups)
    sample_model = next(iter(state.models.values()))
    nbytes = _payload(sample_model, kinds)
    if hop_up:
        _record_stage(state, [[_event(state, topology, channel, hop_up[o], groups[o][0],
                                      LinkKind.UPLINK, nbytes)] for o in owners])
    _record_stage(state, [[_event(state, topology, channel, groups[o][0], cloud, LinkKind.BACKHAUL, nbytes)]
                          for o in owners])
    agg = _aggregate(cloud, [groups[o][1] for o in owners], kinds)
    state.cloud_blocks.update(agg.blocks)
    _record_stage(state, [[_event(state, topology, channel, cloud, groups[o][0], LinkKind.BACKHAUL, nbytes)]
                          for o in owners])
    if hop_up:
        _record_stage(state, [[_event(state, topology, channel, groups[o][0], hop_up[o],
                                      LinkKind.DOWNLINK, nbytes)] for o in owners])
    return agg


def run_round_hier(state: TrainState, policy: AggregationPolicy, topology: NetworkTopology,
                   channel: ChannelParams, data: FederatedData,
                   training: TrainingParams = TrainingParams()) -> TrainState:
    """Devices train and upload to their edge server, which averages. On
    cloud rounds the servers' aggregates are averaged at the cloud before
    the servers push the final blocks back to their devices."""
    r = state.round
    _train_devices(state, policy, topology, channel, data, training)
    devices = sorted(state.models)
    trainable = state.models[devices[0]].kinds(M.trainable)
    edge_kinds = policy.edge_kinds(trainable, r)
    cloud_kinds = policy.cloud_kinds(trainable, r)
    if not edge_kinds:
        return _finish_round(state)

    nbytes = _payload(state.models[devices[0]], edge_kinds)
    parent = {d: topology.node(d).parent for d in devices}
    _record_stage(state, [[_event(state, topology, channel, d, parent[d], LinkKind.UPLINK, nbytes)]
                          for d in devices])
    groups = {}
    for server in sorted(set(parent.values())):
        members = [d for d in devices if parent[d] == server]
        contribs = [
            _device_contribution(d, state.models[d], edge_kinds, data.samples(d), data.devices[d].task)
            for d in members
        ]
        agg = _aggregate(server, contribs, edge_kinds)
        state.edge_blocks.setdefault(server, {}).update(agg.blocks)
        groups[server] = (server, agg)
    if cloud_kinds:
        cloud = _cloud_stage(state, topology, channel, groups, cloud_kinds)
        for server in groups:
            state.edge_blocks[server].update(cloud.blocks)
    _record_stage(state, [[_event(state, topology, channel, parent[d], d, LinkKind.DOWNLINK, nbytes)]
                          for d in devices])
    for d in devices:
        state.models[d] = _load(state.models[d], state.edge_blocks[parent[d]], edge_kinds)
    return _finish_round(state)


def run_round_hier_d2d(state: TrainState, policy: AggregationPolicy, topology: NetworkTopology,
                       channel: ChannelParams, data: FederatedData,
                       training: TrainingParams = TrainingParams()) -> TrainState:
    """Hierarchical round where each cluster head stands in for the edge
    server: members relay their blocks hop by hop over D2D shortest paths
    to the head, the head averages and broadcasts back along the reverse
    paths. On cloud rounds heads go through their edge server to the cloud."""
    r = state.round
    _train_devices(state, policy, topology, channel, data, training)
    devices = sorted(state.models)
    trainable = state.models[devices[0]].kinds(M.trainable)
    edge_kinds = policy.edge_kinds(trainable, r)
    cloud_kinds = policy.cloud_kinds(trainable, r)
    if not edge_kinds:
        return _finish_round(state)
    nbytes = _payload(state.models[devices[0]], edge_kinds)

    clusters = sorted(topology.clusters, key=lambda c: c.id)
    paths = {}
    for c in clusters:
        for m in sorted(c.members):
            try:
                paths[m] = shortest_path(c, m, c.head)
            except HFFMError as exc:
                raise TopologyError(f"cluster {c.id}: {exc}") from exc

    gather = []
    for c in clusters:
        for m in sorted(c.members):
            hops = paths[m]
            if len(hops) > 1:
                gather.append([_event(state, topology, channel, u, v, LinkKind.D2D, nbytes)
                               for u, v in zip(hops, hops[1:])])
    _record_stage(state, gather)

    groups = {}
    for c in clusters:
        contribs = [
            _device_contribution(d, state.models[d], edge_kinds, data.samples(d), data.devices[d].task)
            for d in sorted(c.members)
        ]
        agg = _aggregate(c.id, contribs, edge_kinds)
        state.cluster_blocks.setdefault(c.id, {}).update(agg.blocks)
        groups[c.id] = (c.edge_server, agg)
    if cloud_kinds:
        heads = {c.id: c.head for c in clusters}
        cloud = _cloud_stage(state, topology, channel, groups, cloud_kinds, hop_up=heads)
        for c in clusters:
            state.cluster_blocks[c.id].update(cloud.blocks)

    _broadcast(state, topology, channel, clusters, paths, nbytes)
    for c in clusters:
        for d in c.members:
            state.models[d] = _load(state.models[d], state.cluster_blocks[c.id], edge_kinds)
    return _finish_round(state)


def _broadcast(state, topology, channel, clusters, paths, nbytes):
    """Head-to-members broadcast over the union of reverse shortest paths;
    a link shared by several paths carries the payload once."""
    tree: dict = {}
    member_hops = []
    for c in clusters:
        for m in sorted(c.members):
            rev = paths[m][::-1]
            hops = list(zip(rev, rev[1:]))
            for u, v in hops:
                if (u, v) not in tree:
                    tree[(u, v)] = _event(state, topology, channel, u, v, LinkKind.D2D, nbytes)
            if hops:
                member_hops.append(hops)
    if not member_hops:
        return
    best = max(range(len(member_hops)),
               key=lambda i: (math.fsum(tree[h].latency_s for h in member_hops[i]), -i))
    critical = set(member_hops[best])
    for hop, ev in tree.items():
        record_transfer(state.ledger, replace(ev, critical=hop in critical))


ROUND_RUNNERS = {
    Strategy.STAR: run_round_star,
    Strategy.HIER: run_round_hier,
    Strategy.HIER_D2D: run_round_hier_d2d,
}


def run_round(state, policy, topology, channel, data, training=TrainingParams()):
    return ROUND_RUNNERS[policy.strategy](state, policy, topology, channel, data, training)


def evaluate(state: TrainState, data: FederatedData) -> float:
    """Pooled test accuracy where every device's test samples are scored by
    that device's own model with its task head."""
    correct = total = 0
    for dev in sorted(state.models):
        dd = data.devices[dev]
        if len(dd.test) == 0:
            continue
        pred = M.predict(state.models[dev], dd.test.features, dd.task)
        correct += int(np.sum(pred == dd.test.labels))
        total += len(dd.test)
    return correct / total if total else 0.0


@dataclass
class ExperimentResult:
    reports: list
    ledger: TransferLedger
    states: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)


def run_experiment(config: "ExperimentConfig", seed: int | None = None, keep_history: bool = False):
    """Run every configured strategy from identical initial conditions.

    Returns ``(reports, ledger)``. With ``keep_history`` the third element
    is an :class:`ExperimentResult` carrying final states and the
    per-round aggregated blocks of each strategy.
    """
    seed = config.seeds[0] if seed is None else seed
    topology = generate_topology(config.topology, seed)
    data = build_federated_data(topology, config.model, config.data, seed)
    initial = M.init_model(config.model, seed)
    ledger = TransferLedger()
    accuracies, e_agg = {}, {}
    result = ExperimentResult([], ledger)
    for strategy in config.policy.strategies:
        policy = config.policy.for_strategy(strategy)
        label = strategy.value
        e_agg[label] = policy.e_agg_label
        state = init_state(initial, topology, seed, ledger, label)
        history = []
        for r in range(config.rounds):
            try:
                run_round(state, policy, topology, config.channel, data, config.training)
                accuracies[(label, r + 1)] = evaluate(state, data)
            except HFFMError as exc:
                raise type(exc)(f"strategy {label}, round {r + 1}: {exc}") from exc
            if keep_history:
                history.append({d: {k: m.block(k).values.copy() for k in m.kinds(M.trainable)}
                                for d, m in state.models.items()})
        result.states[label] = state
        result.history[label] = history
    result.reports = summarize(ledger, accuracies, e_agg)
    if keep_history:
        return result.reports, ledger, result
    return result.reports, ledger
