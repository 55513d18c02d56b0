import pytest

from kvpath.desim import (BurstSpec, Calibration, ConfigurationError, OnlineLimits, Policy,
                          SimParams, run_offline, run_online)
from kvpath.desim.runner import execute_decode, execute_prefill_de_path, execute_prefill_pe_path
from kvpath.model import ClusterConfig, ReadPath, RequestState, Trajectory, full_block
from kvpath.scheduler import AttentionCostModel, SchedulerParams
from kvpath.workload import Synthetic, synthesize

FLAT = Calibration(attention=AttentionCostModel(constant=1e-3), decode_step_overhead=0.01,
                   submission_overhead=0)


def req(cached, append, gen=1):
    return RequestState("r", 0, cached_len=cached, append_len=append, gen_target=gen)


def per_tl(cfg):
    return cfg.n_layer * cfg.kv_bytes_per_token_per_layer


# ------------------------------------------------------------ single requests
def test_cold_prefill_pe_path_has_no_storage_flow():
    cfg = ClusterConfig(n_layer=1, gpus_per_node=2)
    tr = execute_prefill_pe_path(req(0, 300), cfg)
    assert not tr.flows_with("PE-1/2")
    assert tr.bytes_of("PE-5/6/7") == 300 * cfg.kv_bytes_per_token_per_layer


def test_pe_path_block_accounting():
    cfg = ClusterConfig(n_layer=2, gpus_per_node=2, block_size_tokens=64)
    tr = execute_prefill_pe_path(req(128, 10), cfg)
    assert tr.bytes_of("PE-1/2") == 2 * full_block(cfg, 0).bytes == 128 * 2 * 656
    loads = tr.flows_with("PE-3/4")
    assert sorted(f.layer for f in loads) == [0, 1]
    assert tr.bytes_of("PE-3/4") == 128 * 2 * 656
    assert tr.bytes_of("PE-5/6/7") == (128 + 10) * per_tl(cfg)


def test_de_path_cold_matches_pe_path_cold():
    cfg = ClusterConfig(n_layer=3, gpus_per_node=2)
    a = execute_prefill_pe_path(req(0, 77), cfg).ledger
    b = execute_prefill_de_path(req(0, 77), cfg).ledger
    assert a == b


def test_de_path_inbound_bytes():
    cfg = ClusterConfig(n_layer=3, gpus_per_node=2)
    C, A = 500, 40
    tr = execute_prefill_de_path(req(C, A), cfg)
    assert tr.record.path == ReadPath.DE.value
    # Into the DE node: storage read, merged miss tokens, then H2D.
    assert tr.bytes_of("DE-1/2") == C * per_tl(cfg)
    assert tr.bytes_of("DE-merge") == A * per_tl(cfg)
    assert tr.bytes_of("DE-6/7") == (C + A) * per_tl(cfg)
    assert tr.bytes_of("DE-3/4/5") == C * per_tl(cfg)


def test_layer_overlap_order():
    cfg = ClusterConfig(n_layer=6, gpus_per_node=2)
    for run in (execute_prefill_pe_path, execute_prefill_de_path):
        tr = run(req(4000, 100), cfg, calib=FLAT)
        done = {layer: t for _, layer, t in tr.layer_done}
        label = "PE-3/4" if run is execute_prefill_pe_path else "DE-3/4/5"
        for f in tr.flows_with(label):
            # Compute of a layer lasts 1 ms; its blocks must be in HBM first.
            assert f.end <= done[f.layer] - 1e-3 + 1e-12
        out = "PE-5/6/7" if run is execute_prefill_pe_path else "DE-merge"
        for f in tr.flows_with(out):
            assert f.start >= done[f.layer]


@pytest.mark.parametrize("gen,during,partial", [(64, 1, 0), (130, 2, 1), (5, 0, 1)])
def test_decode_persist_blocks(gen, during, partial):
    cfg = ClusterConfig(n_layer=2, gpus_per_node=2, block_size_tokens=64)
    tr = execute_decode(req(100, 10, gen), cfg)
    sizes = [f.bytes for f in tr.persisted]
    full = full_block(cfg, 0).bytes
    assert sizes.count(full) == during
    assert len(sizes) == during + partial
    assert sum(sizes) == gen * per_tl(cfg)
    assert len(tr.tokens) == gen
    kinds = [e["kind"] for e in tr.events]
    assert kinds.count("BlockPersisted") == during + partial


def test_io_free_jct():
    cfg = ClusterConfig(n_layer=4, gpus_per_node=2)
    r = run_offline(cfg, [Trajectory.from_pairs("a", [(100, 5)])], Policy.ORACLE, calib=FLAT,
                    initial_context=[1000])
    step = 4 * 1e-3 + 0.01
    assert r.jct == pytest.approx(4e-3 + 5 * step)
    assert r.requests[0].first_token == pytest.approx(4e-3 + step)


# ------------------------------------------------------------ whole runs
def small_trajs(n=6, seed=0):
    return synthesize(Synthetic(8192, 4, 400, 20, n, seed=seed))


def test_offline_completes_every_round():
    trajs = small_trajs()
    r = run_offline(ClusterConfig(gpus_per_node=2, n_layer=4), trajs)
    assert len(r.requests) == sum(len(t.rounds) for t in trajs)
    assert all(q.completion is not None for q in r.requests)
    assert len(r.trajectory_jct) == len(trajs)


def test_conservation_in_offline_run():
    cfg = ClusterConfig(prefill_nodes=2, decode_nodes=1, gpus_per_node=2, n_layer=4)
    r = run_offline(cfg, small_trajs(8, seed=3))
    for q in r.requests:
        assert q.ledger["storage_read"] == q.cached * per_tl(cfg)
        assert q.ledger["persisted"] == q.gen * per_tl(cfg)


def test_no_capacity_violation_in_buckets():
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=2, gpus_per_node=2, n_layer=4,
                        storage_ratio=0.5)
    r = run_offline(cfg, small_trajs(8, seed=5), params=SimParams(bucket=0.01))
    assert all(u <= 1 + 1e-9 for _, _, u in r.utilization)


def test_determinism():
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=2, gpus_per_node=2, n_layer=4)
    p = SimParams(record_events=True)
    a = run_offline(cfg, small_trajs(), params=p)
    b = run_offline(cfg, small_trajs(), params=p)
    assert a.event_log() == b.event_log()
    assert a.to_dict() == b.to_dict()
    assert a.utilization_csv() == b.utilization_csv()


def test_oracle_not_slower_than_dual_path():
    cfg = ClusterConfig(gpus_per_node=2, n_layer=4, storage_ratio=0.2)
    trajs = small_trajs(6, seed=2)
    assert run_offline(cfg, trajs, Policy.ORACLE).jct <= run_offline(cfg, trajs).jct


def test_storage_bound_pooling_ratio():
    zero = Calibration(attention=AttentionCostModel(), submission_overhead=0)
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=1, gpus_per_node=8, n_layer=8)
    # Enough requests that pipeline fill and drain are small against the run.
    trajs = [Trajectory.from_pairs(f"t{i}", [(16, 1)]) for i in range(256)]
    ctx = [16384] * 256
    dual = run_offline(cfg, trajs, calib=zero, initial_context=ctx).jct
    pe = run_offline(cfg, trajs, Policy.PE_ONLY, calib=zero, initial_context=ctx).jct
    assert dual / pe == pytest.approx(0.5, rel=0.10)


def test_pe_only_uses_pe_path():
    r = run_offline(ClusterConfig(gpus_per_node=2, n_layer=4), small_trajs(), Policy.PE_ONLY)
    assert {q.path for q in r.requests} == {"PEPath"}


def test_round_robin_scheduler_runs():
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=2, gpus_per_node=2, n_layer=4)
    r = run_offline(cfg, small_trajs(), params=SimParams(scheduler="round_robin"))
    assert {q.path for q in r.requests} == {"PEPath", "DEPath"}


def test_hbm_infeasible_configuration():
    cfg = ClusterConfig(gpus_per_node=2, n_layer=4, hbm_capacity_tokens=1000)
    with pytest.raises(ConfigurationError):
        run_offline(cfg, [Trajectory.from_pairs("a", [(5000, 5)])])


def test_quota_infeasible_configuration():
    cal = Calibration(attention=AttentionCostModel(coeff_bilinear=1.0))
    with pytest.raises(ConfigurationError):
        run_offline(ClusterConfig(gpus_per_node=2, n_layer=4), [Trajectory.from_pairs("a", [(5, 5)])],
                    calib=cal, initial_context=[10**6])


def test_bursts_recorded():
    cfg = ClusterConfig(gpus_per_node=2, n_layer=4)
    r = run_offline(cfg, small_trajs(2), params=SimParams(bursts=BurstSpec(1e-2, 0.1)))
    assert r.bursts and all(e > s for _, s, e in r.bursts)


# ------------------------------------------------------------ online
def test_online_low_rate_ttft_is_single_request_latency():
    cfg = ClusterConfig(gpus_per_node=2, n_layer=4)
    trajs = [Trajectory.from_pairs("a", [(200, 3)])]
    lim = OnlineLimits(horizon=20, detect_steady=False)
    r = run_online(cfg, trajs, 0.01, lim, seed=5)
    single = execute_prefill_pe_path(req(0, 200, 3), cfg).record
    if r.requests:
        q = r.requests[0]
        assert q.first_token - q.arrival == pytest.approx(single.first_token - single.arrival,
                                                          rel=1e-6, abs=0.011)


def test_online_overload_stops_on_slo():
    cfg = ClusterConfig(gpus_per_node=2, n_layer=4, storage_ratio=0.001)
    trajs = [Trajectory.from_pairs(f"a{i}", [(4000, 2)] * 3) for i in range(4)]
    r = run_online(cfg, trajs, 50.0, OnlineLimits(horizon=120), seed=1,
                   calib=Calibration(), params=SimParams(), sched=SchedulerParams())
    assert r.stop_reason == "slo"
    d = r.to_dict()["online"]
    assert d["stop_reason"] == "slo"
