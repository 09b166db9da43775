from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hffm import model as M
from hffm import protocol as P
from hffm.channel import ChannelParams
from hffm.config import ExperimentConfig, PolicyConfig
from hffm.data import DataParams, Dataset, generate_synthetic
from hffm.errors import AggregationError, ConfigError, DataError
from hffm.protocol import (
    AggregationPolicy, Depth, ModuleOverride, Strategy, TrainingParams, fedavg, run_experiment,
)
from hffm.topology import TopologyConfig, generate_topology

from conftest import line_topology

TINY_MODEL = M.ModelSpec(d=4, L=1, w=8, h=2, C=4, num_tasks=2)


def tiny_config(rounds=3, strategies=(Strategy.STAR, Strategy.HIER, Strategy.HIER_D2D), e_agg=2,
                overrides=None, servers=2, **kw):
    return ExperimentConfig(
        rounds=rounds, seeds=(0,),
        policy=PolicyConfig(strategies=strategies, e_agg=e_agg, module_overrides=overrides or {}),
        topology=TopologyConfig(num_devices=8, num_clusters=2, devices_per_cluster=4, num_edge_servers=servers),
        model=TINY_MODEL, data=DataParams(n_per_class=10, separation=3.0), **kw,
    )


def loop_weighted_mean(updates):
    n = len(updates[0][0])
    out = []
    total = sum(w for _, w in updates)
    for i in range(n):
        s = 0.0
        for v, w in updates:
            s += w * v[i]
        out.append(s / total)
    return out


# fedavg

def test_fedavg_closed_form():
    assert fedavg([([1.0, 3.0], 10), ([5.0, 7.0], 30)]).tolist() == [4.0, 6.0]


def test_fedavg_matches_loop(rng):
    updates = [(rng.normal(size=16), float(rng.integers(1, 100))) for _ in range(10)]
    np.testing.assert_allclose(fedavg(updates), loop_weighted_mean(updates), rtol=1e-12)


@st.composite
def update_lists(draw):
    k = draw(st.integers(1, 10))
    n = draw(st.integers(1, 32))
    vals = [draw(arrays(np.float64, n, elements=st.floats(-1e6, 1e6))) for _ in range(k)]
    weights = draw(st.lists(st.floats(0.0, 1e4), min_size=k, max_size=k).filter(lambda w: sum(w) > 1e-3))
    return list(zip(vals, weights))


@settings(max_examples=100, deadline=None)
@given(update_lists())
def test_fedavg_properties(updates):
    out = fedavg(updates)
    stacked = np.stack([v for v, _ in updates])
    span = np.abs(stacked).max(axis=0) + 1.0
    assert np.all(out >= stacked.min(axis=0) - 1e-9 * span)
    assert np.all(out <= stacked.max(axis=0) + 1e-9 * span)
    np.testing.assert_allclose(out, loop_weighted_mean(updates), rtol=1e-9, atol=1e-9 * span.max())
    np.testing.assert_allclose(fedavg([(3.0 * v, w) for v, w in updates]), 3.0 * out,
                               rtol=1e-12, atol=1e-12 * span.max())
    same = fedavg([(updates[0][0], w) for _, w in updates])
    np.testing.assert_allclose(same, updates[0][0], rtol=1e-12, atol=1e-12 * span.max())


@pytest.mark.parametrize("updates", [
    [],
    [([1.0, 2.0], 1.0), ([1.0], 1.0)],
    [([1.0], 0.0), ([2.0], 0.0)],
    [([1.0], -1.0), ([2.0], 3.0)],
])
def test_fedavg_errors(updates):
    with pytest.raises(AggregationError):
        fedavg(updates)


# policy

def test_policy_schedule():
    pol = AggregationPolicy(e_agg=3)
    assert [r for r in range(7) if pol.is_cloud_round(r)] == [0, 3, 6]
    assert not any(AggregationPolicy(e_agg=None).is_cloud_round(r) for r in range(10))


def test_policy_overrides():
    kinds = [M.adapter(0), M.task_head(0), M.task_head(1)]
    pol = AggregationPolicy(e_agg=1, module_overrides={
        "task_head": ModuleOverride(Depth.EDGE_ONLY),
        "task_head[1]": ModuleOverride(Depth.CLOUD, period=2),
    })
    assert pol.cloud_kinds(kinds, 0) == [M.adapter(0), M.task_head(1)]
    assert pol.edge_kinds(kinds, 1) == [M.adapter(0), M.task_head(0)]
    assert pol.cloud_kinds(kinds, 1) == [M.adapter(0)]


@pytest.mark.parametrize("pol", [
    AggregationPolicy(e_local=0),
    AggregationPolicy(e_agg=0),
    AggregationPolicy(module_overrides={"adapter[0]": ModuleOverride(period=0)}),
    AggregationPolicy(module_overrides={"bogus": ModuleOverride()}),
])
def test_policy_validation(pol):
    with pytest.raises(ConfigError):
        pol.validate()


# star

def _manual_data(topology, n=12, tasks=None, seed=0):
    out = {}
    for dev in topology.devices:
        task = 0 if tasks is None else tasks[dev.id]
        ds = generate_synthetic(TINY_MODEL.C, TINY_MODEL.d, n // TINY_MODEL.C, 3.0, [seed, dev.id])
        out[dev.id] = P.DeviceData(dev.id, task, ds, ds)
    return P.FederatedData(out)


def _one_cluster_topology(devices):
    cfg = TopologyConfig(num_devices=devices, num_clusters=1, devices_per_cluster=devices, num_edge_servers=1)
    return generate_topology(cfg, 0)


def test_star_single_device():
    topo = _one_cluster_topology(1)
    data = _manual_data(topo)
    initial = M.init_model(TINY_MODEL, 0)
    state = P.init_state(initial, topo, 0)
    P.run_round_star(state, AggregationPolicy(strategy=Strategy.STAR), topo, ChannelParams(), data)
    expected = P.local_train(initial, data.devices[0].train, 0, 1, TrainingParams(),
                             np.random.default_rng([0, 23, 0, 0]))
    for k in initial.kinds(M.trainable):
        np.testing.assert_allclose(state.cloud_blocks[k], expected.block(k).values, rtol=1e-14, atol=1e-15)


def test_star_two_devices_is_mean_of_locals():
    topo = _one_cluster_topology(2)
    data = _manual_data(topo)
    assert data.samples(0) == data.samples(1)
    initial = M.init_model(TINY_MODEL, 0)
    state = P.init_state(initial, topo, 0)
    P.run_round_star(state, AggregationPolicy(strategy=Strategy.STAR), topo, ChannelParams(), data)
    locals_ = [P.local_train(initial, data.devices[d].train, 0, 1, TrainingParams(),
                             np.random.default_rng([0, 23, d, 0])) for d in (0, 1)]
    k = M.adapter(0)
    expected = (locals_[0].block(k).values + locals_[1].block(k).values) / 2
    np.testing.assert_allclose(state.cloud_blocks[k], expected, rtol=1e-14, atol=1e-16)
    for d in (0, 1):
        np.testing.assert_array_equal(state.models[d].block(k).values, state.cloud_blocks[k])


def test_star_transfer_count_and_bytes():
    cfg = tiny_config(rounds=2, strategies=(Strategy.STAR,))
    _, ledger = run_experiment(cfg)
    payload = M.payload_bytes(M.init_model(TINY_MODEL, 0))
    topo = generate_topology(cfg.topology, 0)
    for rnd in (1, 2):
        for dev in topo.devices:
            evs = [e for e in ledger.events if e.round == rnd and e.kind != "compute"
                   and dev.id in (e.src, e.dst)]
            assert [e.kind for e in evs] == ["uplink", "downlink"]
        transfers = [e for e in ledger.events if e.round == rnd and e.kind != "compute"]
        assert len(transfers) == 4 * len(topo.devices)
        assert sum(e.bytes for e in transfers) == 4 * payload * len(topo.devices)


# hierarchical

def _final_blocks(result, label):
    return {d: {k: m.block(k).values for k in m.kinds(M.trainable)}
            for d, m in result.states[label].models.items()}


def test_hier_one_server_equals_star():
    cfg = tiny_config(rounds=3, strategies=(Strategy.STAR, Strategy.HIER), e_agg=1, servers=1)
    *_, res = run_experiment(cfg, keep_history=True)
    star, hier = _final_blocks(res, "star"), _final_blocks(res, "hier")
    for d in star:
        for k in star[d]:
            np.testing.assert_allclose(hier[d][k], star[d][k], rtol=0, atol=1e-9)


def test_edge_only_has_no_backhaul():
    cfg = tiny_config(rounds=4, strategies=(Strategy.HIER, Strategy.HIER_D2D), e_agg=None)
    _, ledger, res = run_experiment(cfg, keep_history=True)
    assert not any(e.kind == "backhaul" for e in ledger.events)
    assert all(not s.cloud_blocks for s in res.states.values())


def test_cloud_rounds_follow_schedule():
    cfg = tiny_config(rounds=5, strategies=(Strategy.HIER,), e_agg=2)
    _, ledger = run_experiment(cfg)
    assert sorted({e.round for e in ledger.events if e.kind == "backhaul"}) == [1, 3, 5]


def test_synchrony_after_cloud_round():
    cfg = tiny_config(rounds=2, strategies=(Strategy.HIER, Strategy.HIER_D2D), e_agg=1)
    *_, res = run_experiment(cfg, keep_history=True)
    for label in ("hier", "hier-d2d"):
        blocks = _final_blocks(res, label)
        ref = blocks[0]
        for d in blocks:
            for k in ref:
                np.testing.assert_array_equal(blocks[d][k], ref[k])


def test_head_edge_only_override():
    overrides = {"task_head": ModuleOverride(Depth.EDGE_ONLY)}
    cfg = tiny_config(rounds=1, strategies=(Strategy.HIER,), e_agg=1, overrides=overrides)
    *_, res = run_experiment(cfg, keep_history=True)
    state = res.states["hier"]
    s0, s1 = sorted(state.edge_blocks)
    np.testing.assert_array_equal(state.edge_blocks[s0][M.adapter(0)], state.edge_blocks[s1][M.adapter(0)])
    for t in range(2):
        assert not np.allclose(state.edge_blocks[s0][M.task_head(t)], state.edge_blocks[s1][M.task_head(t)])
    assert M.task_head(0) not in state.cloud_blocks and M.adapter(0) in state.cloud_blocks


def test_period_override_keeps_block_local():
    overrides = {"adapter[0]": ModuleOverride(Depth.CLOUD, period=2)}
    cfg = tiny_config(rounds=2, strategies=(Strategy.HIER,), e_agg=1, overrides=overrides)
    *_, res = run_experiment(cfg, keep_history=True)
    after1, after2 = res.history["hier"]
    k = M.adapter(0)
    # round index 1 skips the adapter: devices keep their own trained values
    assert not np.allclose(after2[0][k], after2[1][k])
    np.testing.assert_array_equal(after1[0][k], after1[1][k])
    np.testing.assert_array_equal(after2[0][M.task_head(0)], after2[1][M.task_head(0)])


def test_cluster_members_share_blocks_after_round():
    cfg = tiny_config(rounds=3, strategies=(Strategy.HIER_D2D,), e_agg=None)
    *_, res = run_experiment(cfg, keep_history=True)
    topo = generate_topology(cfg.topology, 0)
    for snapshot in res.history["hier-d2d"]:
        for c in topo.clusters:
            ref = snapshot[c.members[0]]
            for m in c.members[1:]:
                for k in ref:
                    np.testing.assert_array_equal(snapshot[m][k], ref[k])


# device-to-device

def test_line_cluster_gather_hops():
    topo = line_topology()
    data = _manual_data(topo)
    state = P.init_state(M.init_model(TINY_MODEL, 0), topo, 0)
    pol = AggregationPolicy(e_agg=None, strategy=Strategy.HIER_D2D)
    P.run_round_hier_d2d(state, pol, topo, ChannelParams(), data)
    d2d = [e for e in state.ledger.events if e.kind == "d2d"]
    gather, broadcast = d2d[:6], d2d[6:]
    # device 0 relays over 0-1, 1-2, 2-3; then device 1 over two hops, device 2 over one
    assert [(e.src, e.dst) for e in gather] == [(0, 1), (1, 2), (2, 3), (1, 2), (2, 3), (2, 3)]
    assert [e.critical for e in gather[:3]] == [True] * 3 and not any(e.critical for e in gather[3:])
    assert sorted((e.src, e.dst) for e in broadcast) == [(1, 0), (2, 1), (3, 2)]
    payload = M.payload_bytes(state.models[0])
    assert all(e.bytes == payload for e in d2d)


def test_d2d_matches_hier_every_round():
    cfg = tiny_config(rounds=4, strategies=(Strategy.HIER, Strategy.HIER_D2D), e_agg=2)
    reports, _, res = run_experiment(cfg, keep_history=True)
    for a, b in zip(res.history["hier"], res.history["hier-d2d"]):
        for d in a:
            for k in a[d]:
                np.testing.assert_allclose(b[d][k], a[d][k], rtol=0, atol=1e-9)
    acc = {(r.strategy, r.round): r.accuracy for r in reports}
    for rnd in range(1, 5):
        assert abs(acc[("hier", rnd)] - acc[("hier-d2d", rnd)]) <= 1e-9


def test_d2d_cheaper_than_hier():
    cfg = tiny_config(rounds=4, strategies=(Strategy.HIER, Strategy.HIER_D2D))
    reports, _ = run_experiment(cfg)
    final = {r.strategy: r for r in reports if r.round == 4}
    assert final["hier-d2d"].cumulative_energy_j < final["hier"].cumulative_energy_j


# experiment driver

def test_zero_rounds():
    reports, ledger = run_experiment(tiny_config(rounds=0))
    assert reports == [] and len(ledger) == 0


def test_two_round_star():
    reports, _ = run_experiment(tiny_config(rounds=2, strategies=(Strategy.STAR,)))
    assert [r.round for r in reports] == [1, 2]
    assert reports[0].cumulative_latency_s < reports[1].cumulative_latency_s
    assert all(0.0 <= r.accuracy <= 1.0 for r in reports)


def test_frozen_blocks_untouched_by_run():
    cfg = tiny_config(rounds=2)
    *_, res = run_experiment(cfg, keep_history=True)
    initial = M.init_model(cfg.model, 0).block(M.BACKBONE).values
    for state in res.states.values():
        for mdl in state.models.values():
            assert mdl.block(M.BACKBONE).values.tobytes() == initial.tobytes()


def test_identical_initial_conditions():
    cfg = tiny_config(rounds=1, strategies=(Strategy.HIER, Strategy.HIER_D2D), e_agg=None)
    reports, ledger = run_experiment(cfg)
    compute = [e for e in ledger.events if e.kind == "compute"]
    assert len(compute) == 16


def test_experiment_deterministic():
    cfg = tiny_config(rounds=2)
    a, la = run_experiment(cfg)
    b, lb = run_experiment(cfg)
    assert a == b and la.events == lb.events


def test_errors_carry_context(monkeypatch):
    def boom(*a, **k):
        raise DataError("bad batch")
    monkeypatch.setattr(M, "loss_and_grads", boom)
    with pytest.raises(DataError, match="strategy star, round 1"):
        run_experiment(tiny_config(rounds=1, strategies=(Strategy.STAR,)))


def test_task_assignment_alternates():
    cfg = tiny_config(rounds=0)
    topo = generate_topology(cfg.topology, 0)
    data = P.build_federated_data(topo, cfg.model, cfg.data, 0)
    for c in topo.clusters:
        assert {data.devices[m].task for m in c.members} == {c.id % 2}
    assert all(len(d.train) > 0 for d in data.devices.values())
