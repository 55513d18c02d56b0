"""Agent trajectories: trace files, synthetic generation and arrival times.

Trace format, one trajectory per line::

    <id>\\t<append>:<gen>,<append>:<gen>,...

Synthetic trajectories are drawn as follows (all log-normals have mean 1):

* turns ~ max(1, round(T0 * G)) with G ~ Gamma(shape=2, mean 1). T0 is the
  pre-truncation mean, solved by bisection so the mean number of turns that
  survive truncation equals ``mean_turns``.
* every trajectory gets a scale v ~ LogNormal(sigma=0.8); long-appending
  agents also generate more.
* each round: append = round(mean_append * v * e_a), gen = max(1, round(mean_gen * v * e_g))
  with e_a, e_g ~ LogNormal(sigma=0.6).
* rounds are kept while the running total stays <= max_len.

Heavy tails in turns and per-agent scale are what make the truncated totals
land near the dataset's totals; a geometric turn count with iid rounds runs
about 20% short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .model import Round, Trajectory, ValidationError


class TraceParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class TraceFile:
    path: str


@dataclass(frozen=True)
class Synthetic:
    max_len: int
    mean_turns: float
    mean_append: float
    mean_gen: float
    count: int
    seed: int = 0
    turn_shape: float = 2.0
    scale_sigma: float = 0.8
    round_sigma: float = 0.6

    def __post_init__(self):
        if min(self.mean_turns, self.mean_append, self.mean_gen) <= 0:
            raise ValueError("synthetic means must be > 0")
        if self.max_len < 1 or self.count < 0:
            raise ValueError("max_len must be >= 1 and count >= 0")
        if self.turn_shape <= 0 or self.scale_sigma < 0 or self.round_sigma < 0:
            raise ValueError("turn_shape must be > 0 and sigmas >= 0")


@dataclass(frozen=True)
class AllAtZero:
    pass


@dataclass(frozen=True)
class Poisson:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("Poisson rate must be > 0")


@dataclass(frozen=True)
class WorkloadSpec:
    source: Union[TraceFile, Synthetic]
    arrival: Union[AllAtZero, Poisson] = field(default_factory=AllAtZero)
    append_scale: float = 1.0
    gen_scale: float = 1.0
    # Optional truncation applied after scaling; None keeps totals as-is.
    max_len: int = None
    # Number of agents drawn from the source, cycling through it; copies
    # beyond the first pass get a prepended synthetic round.
    agents: int = None

    def __post_init__(self):
        if self.append_scale <= 0 or self.gen_scale <= 0:
            raise ValueError("append_scale and gen_scale must be > 0")
        if self.agents is not None and self.agents < 1:
            raise ValueError("agents must be >= 1")


# ---------------------------------------------------------------- trace files
def format_trajectory(t: Trajectory) -> str:
    return f"{t.id}\t" + ",".join(f"{r.append_tokens}:{r.gen_tokens}" for r in t.rounds)


def dumps_trace(trajectories: Iterable[Trajectory]) -> str:
    return "".join(format_trajectory(t) + "\n" for t in trajectories)


def write_trace(path, trajectories: Iterable[Trajectory]) -> None:
    Path(path).write_text(dumps_trace(trajectories))


def _int(tok: str, line_no: int) -> int:
    if not tok.isdigit():
        raise TraceParseError(line_no, f"expected a non-negative integer, got {tok!r}")
    return int(tok)


def parse_trace(text: str) -> List[Trajectory]:
    out = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.count("\t") != 1:
            raise TraceParseError(line_no, "expected '<id>\\t<append>:<gen>,...'")
        tid, body = line.split("\t")
        if not tid:
            raise TraceParseError(line_no, "empty trajectory id")
        pairs = []
        for item in body.split(","):
            parts = item.split(":")
            if len(parts) != 2:
                raise TraceParseError(line_no, f"malformed round {item!r}")
            pairs.append((_int(parts[0], line_no), _int(parts[1], line_no)))
        try:
            out.append(Trajectory.from_pairs(tid, pairs))
        except ValidationError as exc:
            raise ValidationError(f"line {line_no}: {exc}") from exc
    return out


def load_trace(path) -> List[Trajectory]:
    return parse_trace(Path(path).read_text())


# ------------------------------------------------------------------ synthesis
def truncate_pairs(pairs: Sequence[Tuple[int, int]], max_len: int) -> List[Tuple[int, int]]:
    """Keep rounds while the running total stays <= max_len.

    A first round that alone exceeds max_len is clipped (generation first
    kept at >= 1) so every trajectory keeps at least one round.
    """
    out, total = [], 0
    for a, g in pairs:
        if total + a + g > max_len:
            if not out:
                g = min(g, max_len)
                out.append((max(0, max_len - g), g))
            break
        out.append((a, g))
        total += a + g
    return out


def _lognormal(rng: np.random.Generator, sigma: float, size) -> np.ndarray:
    if sigma == 0:
        return np.ones(size)
    return np.exp(rng.normal(-sigma * sigma / 2, sigma, size))


def _rounds_for(spec: Synthetic, i: int, scale: float, cap: int) -> List[Tuple[int, int]]:
    """Rounds of trajectory i until max_len or ``cap`` rounds are reached."""
    rng = np.random.default_rng([spec.seed, 1, i])
    pairs: List[Tuple[int, int]] = []
    total = 0
    while len(pairs) < cap:
        n = min(64, cap - len(pairs))
        a = np.rint(spec.mean_append * scale * _lognormal(rng, spec.round_sigma, n)).astype(int)
        g = np.maximum(1, np.rint(spec.mean_gen * scale *
                                  _lognormal(rng, spec.round_sigma, n))).astype(int)
        for x, y in zip(a.tolist(), g.tolist()):
            pairs.append((x, y))
            total += x + y
            if total > spec.max_len:
                return pairs
    return pairs


def synthesize(spec: Synthetic) -> List[Trajectory]:
    if spec.count == 0:
        return []
    rng = np.random.default_rng([spec.seed, 0])
    k = spec.turn_shape
    gshape = rng.gamma(k, 1.0 / k, spec.count)
    scales = _lognormal(rng, spec.scale_sigma, spec.count)
    hi = 20.0 * spec.mean_turns
    caps = [max(1, int(round(hi * x))) for x in gshape]
    rounds = [_rounds_for(spec, i, scales[i], caps[i]) for i in range(spec.count)]
    fits = np.array([len(truncate_pairs(r, spec.max_len)) for r in rounds])

    def mean_turns(t0: float) -> float:
        want = np.maximum(1, np.rint(t0 * gshape))
        return float(np.minimum(want, fits).mean())

    lo = 0.0
    if mean_turns(hi) <= spec.mean_turns:
        t0 = hi
    else:
        for _ in range(60):
            mid = (lo + hi) / 2
            if mean_turns(mid) < spec.mean_turns:
                lo = mid
            else:
                hi = mid
        t0 = hi
    out = []
    for i, r in enumerate(rounds):
        turns = max(1, int(round(t0 * gshape[i])))
        pairs = truncate_pairs(r[:turns], spec.max_len)
        out.append(Trajectory.from_pairs(f"s{spec.seed}-{i}", pairs))
    return out


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_variant(trajectories: Sequence[Trajectory], append_scale: float, gen_scale: float,
                   max_len: int = None) -> List[Trajectory]:
    """Scale every round's lengths (half-up rounding), then truncate at max_len."""
    if append_scale <= 0 or gen_scale <= 0:
        raise ValueError("scales must be > 0")
    out = []
    for t in trajectories:
        pairs = [(_half_up(r.append_tokens * append_scale),
                  max(1, _half_up(r.gen_tokens * gen_scale))) for r in t.rounds]
        if max_len is not None:
            pairs = truncate_pairs(pairs, max_len)
        out.append(Trajectory.from_pairs(t.id, pairs))
    return out


def extend_with_synthetic_round(trajectory: Trajectory, seed: int, mean_append: float = 429.0,
                                sigma: float = 0.6) -> Trajectory:
    """Prepend a random-length round with one generated token.

    Copies of one trace extended with different seeds no longer share a
    cache prefix.
    """
    rng = np.random.default_rng([seed, 2])
    k = max(1, int(np.rint(mean_append * _lognormal(rng, sigma, 1)[0])))
    rounds = (Round(k, 1),) + tuple(trajectory.rounds)
    return Trajectory(f"{trajectory.id}.x{seed}", rounds)


def poisson_arrivals(rate: float, horizon: float, seed: int = 0) -> List[float]:
    if not rate > 0 or not horizon > 0:
        raise ValueError("rate and horizon must be > 0")
    rng = np.random.default_rng([seed, 3])
    out: List[float] = []
    t = 0.0
    while True:
        gaps = rng.exponential(1.0 / rate, 1024)
        for gap in gaps.tolist():
            t += gap
            if t > horizon:
                return out
            if out and t <= out[-1]:
                continue
            out.append(t)


# ------------------------------------------------------------------ statistics
def trace_stats(trajectories: Sequence[Trajectory]) -> dict:
    """Dataset-style means.

    Context is averaged over all rounds; append and gen are per-turn means of
    each trajectory averaged over trajectories.
    """
    if not trajectories:
        return {"count": 0}
    rounds = [r for t in trajectories for r in t.rounds]
    ctx, hit = [], []
    for t in trajectories:
        c = 0
        for r in t.rounds:
            ctx.append(c)
            hit.append(c / (c + r.append_tokens) if c + r.append_tokens else 0.0)
            c += r.append_tokens + r.gen_tokens
    n = len(trajectories)
    return {
        "count": n,
        "turns": len(rounds) / n,
        # Per-turn means are averaged per trajectory first, then across trajectories.
        "append": sum(sum(r.append_tokens for r in t.rounds) / len(t.rounds)
                      for t in trajectories) / n,
        "gen": sum(sum(r.gen_tokens for r in t.rounds) / len(t.rounds) for t in trajectories) / n,
        "total": sum(t.total_tokens for t in trajectories) / len(trajectories),
        "context": sum(ctx) / len(ctx),
        "hit_rate": sum(hit) / len(hit),
    }


def build_workload(spec: WorkloadSpec) -> List[Trajectory]:
    if isinstance(spec.source, TraceFile):
        trajs = load_trace(spec.source.path)
    else:
        trajs = synthesize(spec.source)
    if spec.agents is not None and trajs:
        n = len(trajs)
        trajs = [trajs[i] if i < n else extend_with_synthetic_round(trajs[i % n], i)
                 for i in range(spec.agents)]
    if spec.append_scale != 1.0 or spec.gen_scale != 1.0 or spec.max_len is not None:
        trajs = derive_variant(trajs, spec.append_scale, spec.gen_scale, spec.max_len)
    return trajs
