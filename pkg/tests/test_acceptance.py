"""Acceptance gate: one test per criterion, each reporting a pass/fail line."""

import functools
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from fractions import Fraction

import pytest
from scipy.stats import binomtest

from conftest import ACCEPTANCE
from kvpath import analyzer, metrics
from kvpath.config import ExperimentConfig, with_cell
from kvpath.desim import (BurstSpec, Calibration, FluidNetwork, OnlineLimits, Policy, Priority,
                          Resource, ResourceKind, SimParams, TwoClassWRR, run_offline, run_online)
from kvpath.experiment import _run_cell, grid
from kvpath.model import ClusterConfig, EngineKind, EngineSnapshot, Round, Trajectory
from kvpath.scheduler import (AttentionCostModel, PECategory, SchedulerParams,
                              largest_fitting_chunk, schedule_pe_fetch)
from kvpath.workload import Synthetic, synthesize

pytestmark = pytest.mark.acceptance

# Compute set to (almost) nothing: loading KV is the only cost.
NO_COMPUTE = Calibration(attention=AttentionCostModel(), submission_overhead=0)


def criterion(n, budget_s=None):
    """Record PASS/FAIL for criterion ``n``; the test body returns a detail string."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*a, **kw):
            t = time.perf_counter()
            try:
                detail = fn(*a, **kw) or ""
            except AssertionError as exc:
                ACCEPTANCE.append((n, False, str(exc).splitlines()[0]))
                raise
            took = time.perf_counter() - t
            if budget_s is not None and took > budget_s:
                ACCEPTANCE.append((n, False, f"{detail} runtime {took:.1f}s > {budget_s}s"))
                pytest.fail(f"criterion {n} over its runtime budget: {took:.1f}s")
            ACCEPTANCE.append((n, True, f"{detail} ({took:.1f}s)"))
        return wrapper
    return deco


# ---------------------------------------------------------------- 1
@criterion(1)
def test_c1_feasible_range_exact():
    rng = analyzer.feasible_pd_range(g=8, s=1, m_over_bs=10)
    assert (rng.lo, rng.hi) == (Fraction(1, 7), Fraction(7, 2)), f"got [{rng.lo}, {rng.hi}]"
    n = 1000
    t = time.perf_counter()
    for _ in range(n):
        analyzer.feasible_pd_range(g=8, s=1, m_over_bs=10)
    per = (time.perf_counter() - t) / n
    assert per < 1e-3, f"{per * 1e3:.3f} ms per call"
    return f"[{rng.lo}, {rng.hi}], {per * 1e6:.0f} us/call"


# ---------------------------------------------------------------- 2
LINKS = ("pe_cnic_read", "pe_cnic_write", "de_cnic_read", "de_cnic_write", "pe_dram", "de_dram")
INSIDE = [(1, 1, 8, 1, 500e9), (2, 1, 8, 1, 500e9), (1, 2, 8, 1, 500e9), (1, 1, 5, 1, 500e9),
          (1, 2, 5, 1, 500e9), (2, 3, 7, 1, 500e9)]
OUTSIDE = [(1, 4, 8, 2, 500e9), (4, 1, 8, 1, 1000e9), (1, 1, 8, 1, 200e9)]


def _saturated(P, D, g, s, M):
    cfg = ClusterConfig(prefill_nodes=P, decode_nodes=D, gpus_per_node=g, storage_ratio=s,
                        dram_bw=M, n_layer=4)
    cached = 65536
    # Enough work that the steady middle of the run dominates fill and drain.
    n = int(2.0 * cfg.storage_bw * (P + D) / (cached * cfg.kv_bytes_per_token))
    trajs = [Trajectory.from_pairs(f"t{i}", [(655, 1)]) for i in range(n)]
    rep = run_offline(cfg, trajs, Policy.DUAL_PATH, calib=NO_COMPUTE,
                      initial_context=[cached] * n, params=SimParams(bucket=0.01))
    t0, t1 = 0.2 * rep.jct, 0.8 * rep.jct
    return cfg, rep, {k: rep.group_rates(k, t0, t1) for k in LINKS}


@criterion(2, budget_s=120)
def test_c2_analyzer_matches_simulator():
    worst = 0.0
    for c in INSIDE:
        cfg, _, rates = _saturated(*c)
        assert analyzer.analyze(cfg)["feasible"], c
        pred = analyzer.link_loads(cfg).to_dict()
        for k, per in rates.items():
            vals = list(per.values())
            # Node links are checked one by one, engine CNICs as the class mean.
            checked = vals if k.endswith("dram") else [sum(vals) / len(vals)]
            for v in checked:
                err = abs(v / pred[k] - 1)
                worst = max(worst, err)
                assert err <= 0.05, f"{c} {k}: sim {v:.4g} vs analyzer {pred[k]:.4g}"
    for c in OUTSIDE:
        cfg, rep, rates = _saturated(*c)
        assert not analyzer.analyze(cfg)["feasible"], c
        util = {}
        for k, per in rates.items():
            util[k] = sum(v / rep.capacities[rid] for rid, v in per.items()) / len(per)
        busiest = max(util, key=util.get)
        bind = analyzer.binding_constraint(cfg)
        assert busiest == bind, f"{c}: simulator busiest {busiest}, analyzer {bind}"
    return f"{len(INSIDE)} inside, worst error {worst:.2%}; {len(OUTSIDE)} outside bottlenecks agree"


# ---------------------------------------------------------------- 3
@criterion(3, budget_s=60)
def test_c3_byte_conservation():
    rng = random.Random(7)
    cfg = ClusterConfig(prefill_nodes=2, decode_nodes=2, gpus_per_node=4, storage_ratio=0.5,
                        n_layer=4)
    n = 1000
    trajs = [Trajectory(f"r{i}", (Round(rng.randint(1, 3000), rng.randint(1, 300)),))
             for i in range(n)]
    ctx = [rng.choice([0, rng.randint(1, 40000)]) for _ in range(n)]
    rep = run_offline(cfg, trajs, params=SimParams(read_concurrency=4), initial_context=ctx)
    lb = cfg.n_layer * cfg.kv_bytes_per_token_per_layer
    paths = set()
    assert len(rep.requests) == n
    for q in rep.requests:
        C, A, G = q.cached, q.append, q.gen
        if q.path == "PEPath":
            want = dict(storage_read=C, pe_h2d=C, de_to_pe=0, pe_to_de=C + A, de_h2d=C + A,
                        d2h=G, persisted=G)
        else:
            want = dict(storage_read=C, pe_h2d=0, de_to_pe=C, pe_to_de=A, de_h2d=C + A,
                        d2h=G, persisted=G)
        paths.add(q.path)
        for k, v in want.items():
            assert q.ledger[k] == v * lb, f"{q.id} {q.path} {k}: {q.ledger[k]} != {v * lb}"
    assert paths == {"PEPath", "DEPath"}
    return f"{n} requests over both paths, every ledger entry exact"


# ---------------------------------------------------------------- 4
def _pooling_ratio(D):
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=D, gpus_per_node=8, n_layer=8)
    n = 512
    trajs = [Trajectory.from_pairs(f"t{i}", [(32, 1)]) for i in range(n)]
    jct = {pol: run_offline(cfg, trajs, pol, calib=NO_COMPUTE, initial_context=[32768] * n).jct
           for pol in (Policy.DUAL_PATH, Policy.PE_ONLY)}
    return jct[Policy.DUAL_PATH] / jct[Policy.PE_ONLY]


@criterion(4)
def test_c4_pooling_ceiling():
    r1, r2 = _pooling_ratio(1), _pooling_ratio(2)
    assert 0.45 <= r1 <= 0.55, f"1P1D ratio {r1:.3f}"
    assert 0.30 <= r2 <= 0.40, f"1P2D ratio {r2:.3f}"
    return f"1P1D {r1:.3f}, 1P2D {r2:.3f}"


# ---------------------------------------------------------------- 5
def _storage_balance(seed):
    # 1P2D = 3 storage NICs; tight storage so reads actually queue.
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=2, gpus_per_node=4, storage_ratio=0.002)
    trajs = synthesize(Synthetic(16384, 8, 608, 148, 48, seed=seed,
                                 scale_sigma=1.0, round_sigma=1.0))
    out = {}
    for sch in ("adaptive", "round_robin"):
        rep = run_offline(cfg, trajs, Policy.DUAL_PATH, params=SimParams(scheduler=sch, bucket=0.1))
        vals = metrics.defined(rep.storage_balance(0.05 * rep.jct))
        out[sch] = sum(vals) / len(vals)
    return out


@criterion(5, budget_s=300)
def test_c5_scheduler_balance():
    seeds = range(20)
    with ProcessPoolExecutor(max_workers=4) as pool:
        res = list(pool.map(_storage_balance, seeds))
    wins = sum(r["adaptive"] < r["round_robin"] for r in res)
    p = binomtest(wins, len(res), 0.5, alternative="greater").pvalue
    mean = {k: sum(r[k] for r in res) / len(res) for k in ("adaptive", "round_robin")}
    detail = (f"adaptive wins {wins}/{len(res)}, p={p:.2g}, mean max/avg "
              f"{mean['adaptive']:.3f} vs {mean['round_robin']:.3f}")
    assert p < 0.01, detail
    return detail


# ---------------------------------------------------------------- 6
@criterion(6, budget_s=120)
def test_c6_attention_balance():
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=1, gpus_per_node=8, storage_ratio=1.0)
    cal = Calibration.load()
    # Attention dominates the forward so batching decisions are what we measure.
    cal = replace(cal, attention=replace(cal.attention, coeff_bilinear=2e-9))
    fracs = []
    for seed in range(3):
        rng = random.Random(seed)
        n = 256
        trajs = [Trajectory(f"a{i}", [Round(max(1, int(rng.lognormvariate(6.0, 0.8))), 16)])
                 for i in range(n)]
        ctx = [int(min(60000, rng.lognormvariate(9.5, 0.8))) for _ in trajs]
        rep = run_offline(cfg, trajs, Policy.DUAL_PATH, calib=cal, initial_context=ctx)
        # Loaded phase: until the first rank runs out of queued work.
        end = min(max(f.time for f in rep.forwards if f.tokens[e] > 0)
                  for e in range(cfg.gpus_per_node))
        ab = metrics.defined(rep.attention_balance(end))
        assert len(ab) >= 20, f"seed {seed}: only {len(ab)} loaded forwards"
        fracs.append(sum(x <= 1.10 for x in ab) / len(ab))
        assert fracs[-1] >= 0.90, f"seed {seed}: {fracs[-1]:.1%} of forwards within 1.10"
    return "forwards within max/avg 1.10: " + ", ".join(f"{f:.1%}" for f in fracs)


# ---------------------------------------------------------------- 7
@criterion(7, budget_s=60)
def test_c7_traffic_isolation():
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=1, gpus_per_node=8, storage_ratio=4.0,
                        n_layer=8)
    params = SimParams(bursts=BurstSpec(1e-3, 0.2), bucket=0.01)
    trajs = [Trajectory(f"a{i}", (Round(32, 1),)) for i in range(128)]
    loaded = run_offline(cfg, trajs, Policy.DUAL_PATH, calib=NO_COMPUTE, params=params,
                         initial_context=[32768] * len(trajs))
    # Same bursts with KV traffic removed entirely.
    quiet = run_offline(cfg, trajs[:8], Policy.ORACLE, params=params,
                        initial_context=[32768] * 8)
    assert loaded.bursts and quiet.bursts
    base = sum(b - a for _, a, b in quiet.bursts) / len(quiet.bursts)
    kv = sum(b - a for _, a, b in loaded.bursts) / len(loaded.bursts)
    worst = max(b - a for _, a, b in loaded.bursts)
    busy = max(u for _, rid, u in loaded.utilization if "cnic" in rid)
    assert busy > 0.99, f"KV flows did not saturate the CNICs (peak {busy:.3f})"
    inc = kv / base - 1
    assert inc <= 0.02, f"mean burst time +{inc:.2%}"

    # Low-priority share on a link flooded by high-priority traffic.
    net = FluidNetwork()
    r = net.add_resource(Resource("cnic", ResourceKind.CNIC, 100.0, TwoClassWRR()))
    for _ in range(4):
        net.start(10 ** 9, (r,), Priority.HIGH)
    net.start(10 ** 9, (r,), Priority.LOW)
    net.allocate()
    low = net.rates_by_class(r)[Priority.LOW] / 100.0
    assert low >= 0.009, f"low class got {low:.2%}"
    return (f"{len(loaded.bursts)} bursts, mean +{inc:.2%}, worst {worst / base - 1:+.2%}; "
            f"low floor {low:.2%}")


# ---------------------------------------------------------------- 8
def _snap(i, tok, q):
    return EngineSnapshot(i, 0, EngineKind.PE, seq=1 if tok else 0, tok=tok, read_q=q)


@criterion(8, budget_s=120)
def test_c8_fetch_and_chunking():
    rng = random.Random(8)
    params = SchedulerParams(alpha=4000, beta=20000)
    for _ in range(10_000):
        snaps = [_snap(i, rng.choice([0, rng.randint(0, 30000)]), rng.randint(0, 8000))
                 for i in range(rng.randint(1, 8))]
        queue = [rng.randint(1, 12000) for _ in range(rng.randint(0, 10))]
        out = schedule_pe_fetch(queue, snaps, params)
        # FIFO: the assignments are a prefix of the queue, in order.
        assert [a.request for a in out] == queue[:len(out)]
        tok = {s.engine_id: s.tok for s in snaps}
        for a, r in zip(out, queue):
            cats = {}
            for s in snaps:
                t = tok[s.engine_id]
                cats[s.engine_id] = (PECategory.OVERLOADED if t > params.beta else
                                     PECategory.SHORT_QUEUE if s.read_q <= params.alpha else
                                     PECategory.LONG_QUEUE)
            # Every PE falls in exactly one category.
            assert sum(1 for c in cats.values() if c in PECategory) == len(snaps)
            assert cats[a.pe_id] is not PECategory.OVERLOADED
            want = (PECategory.SHORT_QUEUE if PECategory.SHORT_QUEUE in cats.values()
                    else PECategory.LONG_QUEUE)
            assert a.category is want
            best = min((tok[e], e) for e, c in cats.items() if c is want)
            assert (tok[a.pe_id], a.pe_id) == best
            tok[a.pe_id] += r
        if len(out) < len(queue):
            assert all(t > params.beta for t in tok.values()), "stopped with an eligible PE"

    m = AttentionCostModel(coeff_bilinear=1e-9, coeff_quadratic=2e-10, coeff_linear=1e-7)
    cases = 0
    for bsz in range(1, 4097):
        cached = rng.randint(0, 60000)
        base = rng.uniform(0, 1e-3)
        budget = rng.uniform(0, 2e-3)
        got = largest_fitting_chunk(base, cached, bsz, budget, m)
        fits = [b for b in range(bsz) if base + m.pair_time(cached, b) <= budget]
        assert got == (max(fits) if fits else 0), f"bsz={bsz}"
        cases += 1
    return f"10000 snapshots, {cases} chunk sizes match exhaustive search"


# ---------------------------------------------------------------- 9
@criterion(9)
def test_c9_determinism():
    cfg = ExperimentConfig.from_dict({
        "cluster": {"prefill_nodes": 1, "decode_nodes": 1, "gpus_per_node": 4, "n_layer": 8,
                    "storage_ratio": 0.2},
        "workload": {"source": {"synthetic": {"max_len": 16384, "mean_turns": 6, "mean_append": 500,
                                              "mean_gen": 60, "count": 6, "seed": 3}}},
        "sweep": {"policy": ["dual_path", "pe_only", "oracle"], "pd": ["1P1D", "2P1D"]},
    })
    cells = grid(cfg)
    for cell in cells:
        a = _run_cell((cfg, cell, True))
        b = _run_cell((cfg, cell, True))
        assert a["status"] == "ok", cell
        assert a["events"] and a["events"] == b["events"], f"event logs differ for {cell}"
        assert a["report"] == b["report"], f"reports differ for {cell}"
        assert a["util_csv"] == b["util_csv"], f"utilization differs for {cell}"
    on = replace(cfg, mode="online", online=OnlineLimits(horizon=30))
    x = _run_cell((with_cell(on, {"aps": 0.5}), {}, True))
    y = _run_cell((with_cell(on, {"aps": 0.5}), {}, True))
    assert x["status"] == "ok" and x["events"] == y["events"] and x["report"] == y["report"]
    return f"{len(cells)} offline cells and 1 online cell bit-identical across reruns"


# ---------------------------------------------------------------- 10
STEP = 1.25


def _online(policy, aps):
    cfg = ClusterConfig(prefill_nodes=1, decode_nodes=2, gpus_per_node=4, storage_ratio=0.005)
    trajs = synthesize(Synthetic(32768, 6, 608, 148, 64, seed=0))
    rep = run_online(cfg, trajs, aps, OnlineLimits(horizon=300), seed=1, policy=policy)
    return rep.stop_reason, rep.mean_ttft


def _slo_rate(policy, start):
    aps = start
    while aps < 50:
        if _online(policy, aps)[0] == "slo":
            return aps
        aps *= STEP
    return float("inf")


@criterion(10, budget_s=600)
def test_c10_online_direction():
    with ProcessPoolExecutor(max_workers=2) as pool:
        fixed = list(pool.map(_online, (Policy.DUAL_PATH, Policy.PE_ONLY), (0.5, 0.5)))
    (dr, dt), (pr, pt) = fixed
    assert dr != "slo" and pr != "slo", "0.5 aps is not sub-saturation"
    assert dt <= pt, f"mean TTFT at 0.5 aps: dual {dt:.3f}s > pe_only {pt:.3f}s"
    pe_rate = _slo_rate(Policy.PE_ONLY, 0.5)
    dual_rate = _slo_rate(Policy.DUAL_PATH, pe_rate)
    ratio = dual_rate / pe_rate
    detail = (f"TTFT@0.5aps {dt:.2f}s vs {pt:.2f}s; SLO rate {dual_rate:.3g} vs {pe_rate:.3g} "
              f"aps ({ratio:.2f}x)")
    assert ratio >= 1.3, detail
    return detail
