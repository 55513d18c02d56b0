import math

import pytest
from hypothesis import given, settings, strategies as st

from kvpath.model import Round, Trajectory, ValidationError, context_before
from kvpath.workload import (Synthetic, TraceFile, TraceParseError, WorkloadSpec, build_workload,
                             derive_variant, dumps_trace, extend_with_synthetic_round,
                             load_trace, parse_trace, poisson_arrivals, synthesize,
                             trace_stats, truncate_pairs, write_trace)

pair_lists = st.lists(st.tuples(st.integers(0, 3000), st.integers(1, 400)), min_size=1, max_size=8)


def test_empty_trace(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("")
    assert load_trace(p) == []


def test_single_line():
    (t,) = parse_trace("t1\t608:148\n")
    assert t.id == "t1" and t.rounds == (Round(608, 148),)


@settings(max_examples=50)
@given(st.lists(pair_lists, min_size=1, max_size=5))
def test_round_trip_byte_identical(all_pairs):
    trajs = [Trajectory.from_pairs(f"a{i}", p) for i, p in enumerate(all_pairs)]
    text = dumps_trace(trajs)
    assert dumps_trace(parse_trace(text)) == text


def test_write_load(tmp_path):
    trajs = [Trajectory.from_pairs("x", [(1, 2), (3, 4)])]
    write_trace(tmp_path / "a.tsv", trajs)
    assert load_trace(tmp_path / "a.tsv") == trajs


@pytest.mark.parametrize("text,line", [("a\t1:2\nb 1:2\n", 2), ("a\t1:x\n", 1),
                                       ("a\t1:2:3\n", 1), ("\t1:2\n", 1), ("a\t-1:2\n", 1)])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(TraceParseError) as exc:
        parse_trace(text)
    assert exc.value.line_no == line


def test_zero_gen_rejected():
    with pytest.raises(ValidationError):
        parse_trace("a\t5:0\n")


def test_synthesize_64k_mean_total():
    trajs = synthesize(Synthetic(65536, 157, 429, 176, 500, seed=1))
    assert len(trajs) == 500
    mean_total = sum(t.total_tokens for t in trajs) / len(trajs)
    assert mean_total == pytest.approx(55958, rel=0.10)
    assert all(t.total_tokens <= 65536 for t in trajs)


def test_synthesize_hit_rate():
    stats = trace_stats(synthesize(Synthetic(65536, 157, 429, 176, 200, seed=2)))
    assert stats["hit_rate"] >= 0.95


def test_synthesize_single_round_when_max_len_is_one_round():
    trajs = synthesize(Synthetic(600, 50, 429, 171, 50, seed=3, scale_sigma=0, round_sigma=0))
    assert all(len(t.rounds) == 1 for t in trajs)


def test_synthesize_deterministic():
    s = Synthetic(32768, 60, 608, 148, 20, seed=9)
    assert synthesize(s) == synthesize(s)
    assert synthesize(s) != synthesize(Synthetic(32768, 60, 608, 148, 20, seed=10))


def test_truncate_pairs():
    assert truncate_pairs([(10, 5), (10, 5), (10, 5)], 31) == [(10, 5), (10, 5)]
    assert truncate_pairs([(100, 5)], 50) == [(45, 5)]


def test_derive_variant_examples():
    t = [Trajectory.from_pairs("a", [(100, 50)])]
    assert derive_variant(t, 1.0, 1.0) == t
    assert derive_variant(t, 2.0, 1.0)[0].pairs() == [(200, 50)]
    assert derive_variant([Trajectory.from_pairs("a", [(5, 3)])], 0.5, 0.5)[0].pairs() == [(3, 2)]


@given(pair_lists, st.floats(0.1, 4), st.floats(0.1, 4), st.integers(1, 20000))
def test_derive_variant_respects_max_len(pairs, sa, sg, m):
    (t,) = derive_variant([Trajectory.from_pairs("a", pairs)], sa, sg, m)
    assert t.total_tokens <= m


def test_extend_with_synthetic_round():
    base = Trajectory.from_pairs("b", [(500, 20), (40, 10)])
    ext = extend_with_synthetic_round(base, seed=1)
    k = ext.rounds[0].append_tokens
    assert ext.rounds[0].gen_tokens == 1
    assert ext.total_tokens == base.total_tokens + k + 1
    assert context_before(ext, 1) == k + 1
    other = extend_with_synthetic_round(base, seed=2)
    assert other.rounds[0].append_tokens != k
    assert ext.id != other.id


def test_poisson_arrivals():
    a = poisson_arrivals(1.0, 10000, seed=4)
    assert abs(len(a) - 10000) <= 3 * math.sqrt(10000)
    assert all(x < y for x, y in zip(a, a[1:]))
    assert a == poisson_arrivals(1.0, 10000, seed=4)
    with pytest.raises(ValueError):
        poisson_arrivals(0, 10)


def test_trace_stats_means():
    trajs = [Trajectory.from_pairs("a", [(10, 2)]), Trajectory.from_pairs("b", [(6, 2), (2, 2)])]
    s = trace_stats(trajs)
    assert s["turns"] == 1.5
    assert s["append"] == (10 + 4) / 2
    assert s["gen"] == 2
    assert s["context"] == pytest.approx((0 + 0 + 8) / 3)
    assert trace_stats([]) == {"count": 0}


def test_build_workload_cycles_agents(tmp_path):
    p = tmp_path / "t.tsv"
    write_trace(p, [Trajectory.from_pairs("a", [(10, 2)]), Trajectory.from_pairs("b", [(6, 2)])])
    trajs = build_workload(WorkloadSpec(TraceFile(str(p)), agents=5))
    assert [t.id for t in trajs] == ["a", "b", "a.x2", "b.x3", "a.x4"]
    scaled = build_workload(WorkloadSpec(TraceFile(str(p)), append_scale=2.0))
    assert scaled[0].pairs() == [(20, 2)]
