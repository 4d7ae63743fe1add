import json
from dataclasses import replace

import pytest

from mis.simnet import (
    Behavior,
    ConfigInvalid,
    CostModel,
    EventLoop,
    FaultPlan,
    LatencyModel,
    LinkSpec,
    MetricsReport,
    RoundRow,
    SimConfig,
    UnknownNode,
    WorkloadSpec,
    bundled_scenario,
    inject,
    load_scenario,
    make_nodes,
    run,
    scenario_from_json,
)
from mis.simnet.bench import measure_resolve
from mis.simnet.cluster import ChainFileError, Cluster
from mis.registry import build_request, identity_for_key, register_tx


def small(seed=1, rounds=30, rate=20.0, **kw):
    return SimConfig(seed=seed, nodes=make_nodes([("local", 4)]), rounds=rounds,
                     workload=WorkloadSpec(request_rate=rate), costs=CostModel(storage_ms=5.0),
                     **kw)


def test_event_loop_orders_ties_by_insertion():
    loop = EventLoop()
    seen = []
    loop.schedule(5.0, seen.append, "b")
    loop.schedule(1.0, seen.append, "a")
    loop.schedule(5.0, seen.append, "c")
    loop.run()
    assert seen == ["a", "b", "c"] and loop.now == 5.0


def test_latency_model():
    model = LatencyModel(LinkSpec(1.0), LinkSpec(50.0, 10.0), (("a", "b", LinkSpec(7.0)),))
    assert model.link("x", "x") == LinkSpec(1.0)
    assert model.link("b", "a") == LinkSpec(7.0)
    assert model.max_delay() == 60.0
    assert LatencyModel.from_json(model.to_json()) == model
    with pytest.raises(ConfigInvalid):
        LinkSpec(-1.0)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigInvalid):
        small(drop_rate=1.0)
    with pytest.raises(ConfigInvalid):
        SimConfig(seed=0, nodes=make_nodes([("r", 4)]), warm_len=3)
    with pytest.raises(ConfigInvalid):
        WorkloadSpec(mix=(("register", 0.5),))
    with pytest.raises(ConfigInvalid):
        scenario_from_json({"regions": {"r": 4}, "bogus": 1})


def test_make_nodes_spreads_rights():
    nodes = make_nodes([("a", 3), ("b", 3)], bookkeepers=2)
    assert [n.node_id for n in nodes if n.bookkeeper] == ["n000", "n003"]
    assert all(n.voter for n in nodes)


def test_bundled_scenarios_load():
    for name in ("minimal-4.json", "uk-my-80.json", "global-200.json"):
        sc = load_scenario(bundled_scenario(name))
        assert sc.config.nodes
    big = load_scenario(bundled_scenario("uk-my-80.json")).config
    assert len(big.nodes) == 80 and big.costs.storage_ms == 284.0
    sweep = load_scenario(bundled_scenario("global-200.json"))
    assert sweep.sweep == (50, 100, 150, 200)
    assert len(sweep.sized(50).nodes) == 50
    with pytest.raises(ConfigInvalid):
        bundled_scenario("missing.json")


def test_fault_plan_json_round_trip():
    plan = FaultPlan()
    plan = inject(plan, "n001", Behavior.crash(3, when_aggregator=True))
    plan = inject(plan, "n002", Behavior.delayed(40.0))
    assert FaultPlan.from_json(plan.to_json()) == plan
    assert plan.byzantine_nodes() == ["n001"]
    with pytest.raises(UnknownNode):
        inject(plan, "zzz", Behavior.silent_voter(), ["n001"])


def test_metrics_csv_round_trip():
    rows = [RoundRow.from_ms(1, 1, 1.5, 2.25, 0.5, 284.0, 7), RoundRow(2, 2, 1, 2, 3, 4, 0)]
    report = MetricsReport(rows)
    again = MetricsReport.read_csv(report.to_csv())
    assert again.rows == rows
    assert rows[0].total_us == 288_250
    assert report.summary()["max_block_txs"] == 7


def test_honest_run_converges_and_is_deterministic():
    a = run(small())
    b = run(small())
    assert a.converged
    assert a.heads == b.heads and a.report.to_csv() == b.report.to_csv()
    extra = a.report.extra
    assert extra["height"] == 30 and extra["aborted_rounds"] == 0
    assert extra["transactions"]["submitted"] > 0
    assert run(small(seed=2)).heads != a.heads


def test_silent_voter_does_not_block():
    plan = FaultPlan().with_behavior("n002", Behavior.silent_voter())
    res = run(small(rounds=20), plan)
    assert res.converged and res.report.extra["height"] == 20


def test_equivocating_bookkeeper_is_tolerated():
    plan = FaultPlan().with_behavior("n001", Behavior.equivocating_bookkeeper())
    res = run(small(rounds=20, rate=50.0), plan)
    assert res.converged and res.report.extra["height"] == 20


def test_crashed_aggregator_rotates():
    plan = FaultPlan().with_behavior("n000", Behavior.crash(2, when_aggregator=True))
    res = run(small(rounds=15), plan)
    assert res.converged
    assert "n000" in res.crashed
    assert res.report.extra["aborted_rounds"] >= 1


def test_two_silent_voters_stall_without_divergence():
    plan = FaultPlan((("n001", Behavior.silent_voter()), ("n002", Behavior.silent_voter())))
    res = run(small(rounds=3, rate=2.0, drain_rounds=5), plan)
    assert res.report.extra["height"] == 0
    assert res.converged


def test_delayed_node_still_converges():
    plan = FaultPlan().with_behavior("n003", Behavior.delayed(30.0))
    res = run(small(rounds=10), plan)
    assert res.converged and res.report.extra["height"] == 10


def test_lossy_network_converges():
    res = run(small(rounds=15, drop_rate=0.05))
    assert res.converged


def test_cluster_commit_and_chain_file(tmp_path):
    cluster = Cluster(n=4, seed=9)
    key = cluster.user_key("dave")
    ident = identity_for_key(key.public)
    (out,) = cluster.execute(register_tx(build_request("dave", ident, key, 1000, 1.0, 0.0), key))
    assert out.status == "committed" and out.height == 1
    (dup,) = cluster.execute(register_tx(build_request("dave", ident, key, 1000, 2.0, 1.0), key))
    assert dup.status == "rejected" and dup.reason == "duplicate-identifier"
    path = tmp_path / "chain.bin"
    cluster.save_chain(path)
    again = Cluster.load_chain(path)
    assert again.head == cluster.head
    assert again.registry.export_state() == cluster.registry.export_state()
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ChainFileError):
        Cluster.load_chain(path)


def test_measure_resolve_small():
    stats = measure_resolve(200, 100, seed=1, expired=20)
    assert stats.failures == 0
    assert stats.excluded > 0 and len(stats.samples) + stats.excluded == 100
    assert 0 < stats.mean < 50
    zero = measure_resolve(50, 20, latency=LatencyModel.zero(), seed=1)
    assert zero.mean == pytest.approx(0.3)
