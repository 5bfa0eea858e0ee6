"""The four trend reproductions as one run: nprobes sweep, cluster skew, replay
ordering of the model variants, and the sampler comparison with its ablation.

Each experiment returns plain rows; ``ReproReport.checks`` turns them into
pass/fail verdicts against the documented thresholds.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

from ..evalharness import (
    CorpusSweep,
    cluster_size_series,
    compare_samplers,
    corpus_sweep,
    prepare_eval,
    variant_replay,
    write_plot_data,
    write_sweep_csv,
)
from ..io import stamped, write_jsonl
from ..worldgen import WorldConfig, generate_world, simulate_journeys
from .config import ConfigError, ExperimentConfig
from .pipeline import _write_csv

log = logging.getLogger(__name__)

SWEEP_PROBE = 16
SWEEP_GAP = 0.15  # Euclidean minus dot recall@100 at SWEEP_PROBE
SHARE_RATIO = 3.0  # dot max-cluster share over Euclidean max-cluster share
REPLAY_GAP = 0.05  # baseline < V1 < V3, each step
SAMPLER_GAP = 0.03  # trip minus search logged recall@10
ABLATION_GAP = 0.01  # the same gap with late-booking skew off must stay below this


@dataclass(frozen=True)
class ReplayRow:
    seed: int
    baseline: float
    v1: float
    v3: float


@dataclass(frozen=True)
class SamplerRow:
    seed: int
    booking_skew: float
    set_size: int
    trip: float
    search: float

    @property
    def gap(self) -> float:
        return self.trip - self.search


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def seed_runs(world: WorldConfig, config: ExperimentConfig, seeds: Sequence[int],
              ablation: bool = True) -> tuple[list[ReplayRow], list[SamplerRow], list[SamplerRow]]:
    """Per seed: replay recall of baseline, V1, V3 and the sampler comparison.

    With ``ablation`` the sampler comparison repeats on worlds generated with
    ``booking_skew = 0``.
    """
    e = config.eval
    overrides = dict(config.tower.overrides)
    replay, samplers, ablated = [], [], []
    for seed in seeds:
        skews = (world.booking_skew, 0.0) if ablation else (world.booking_skew,)
        for skew in skews:
            wc = replace(world, seed=seed, booking_skew=skew)
            w = generate_world(wc)
            ctx = prepare_eval(w, simulate_journeys(w), e.num_negatives, e.replay_queries,
                               e.min_eligible, seed)
            if skew == world.booking_skew:
                r = variant_replay(ctx, seed, **overrides)
                replay.append(ReplayRow(seed, r["baseline"].value, r["v1"].value, r["v3"].value))
                log.info("seed %d replay %s", seed, replay[-1])
            tower = config.tower.resolve(wc.num_places, seed)
            cmp = compare_samplers(w, ctx.split, tower, ctx.eval_log,
                                   policy=config.sampling.policy, seed=seed,
                                   threshold=e.threshold)
            row = SamplerRow(seed, skew, cmp.set_size, cmp.trip_logged.value,
                             cmp.search_logged.value)
            (samplers if skew == world.booking_skew else ablated).append(row)
            log.info("seed %d samplers %s gap %.4f", seed, row, row.gap)
    return replay, samplers, ablated


@dataclass
class ReproReport:
    fingerprint: str
    sweep: CorpusSweep
    replay: list[ReplayRow]
    samplers: list[SamplerRow]
    ablated: list[SamplerRow]

    def checks(self) -> list[Check]:
        out = []
        sw = self.sweep
        mono = all(
            a.recall <= b.recall
            for m in ("euclidean", "dot")
            for a, b in zip([r for r in sw.rows if r.metric == m],
                            [r for r in sw.rows if r.metric == m][1:]))
        gap = sw.recall("euclidean", SWEEP_PROBE) - sw.recall("dot", SWEEP_PROBE)
        out.append(Check("nprobes sweep", mono and gap >= SWEEP_GAP,
                         f"monotone={mono} euclidean@{SWEEP_PROBE} - dot@{SWEEP_PROBE} = "
                         f"{gap:.4f} (>= {SWEEP_GAP})"))
        dot, euc = sw.stats("dot").max_share, sw.stats("euclidean").max_share
        out.append(Check("cluster skew", dot >= SHARE_RATIO * euc,
                         f"dot max share {dot:.4f} vs euclidean {euc:.4f} "
                         f"(ratio >= {SHARE_RATIO})"))
        if self.replay:
            b = _mean([r.baseline for r in self.replay])
            v1 = _mean([r.v1 for r in self.replay])
            v3 = _mean([r.v3 for r in self.replay])
            out.append(Check("replay ordering", v1 - b >= REPLAY_GAP and v3 - v1 >= REPLAY_GAP,
                             f"baseline {b:.4f} < v1 {v1:.4f} < v3 {v3:.4f} "
                             f"(steps >= {REPLAY_GAP}, {len(self.replay)} seeds)"))
        if self.samplers:
            g = _mean([r.gap for r in self.samplers])
            detail = f"trip - search = {g:.4f} (>= {SAMPLER_GAP})"
            ok = g >= SAMPLER_GAP
            if self.ablated:
                g0 = _mean([r.gap for r in self.ablated])
                detail += f"; skew off: {g0:.4f} (< {ABLATION_GAP})"
                ok = ok and g0 < ABLATION_GAP
            out.append(Check("sampler comparison", ok, f"{detail}, {len(self.samplers)} seeds"))
        return out

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks())

    def write(self, path: Path) -> None:
        fp = self.fingerprint
        with stamped(fp):
            write_sweep_csv(path / "sweep.csv", self.sweep.rows, fp)
            write_plot_data(path / "cluster_sizes.csv",
                            {m: cluster_size_series(self.sweep.kmeans[m])
                             for m in ("euclidean", "dot")}, fp)
            _write_csv(path / "replay.csv", ("seed", "baseline", "v1", "v3"),
                       [(r.seed, f"{r.baseline:.6f}", f"{r.v1:.6f}", f"{r.v3:.6f}")
                        for r in self.replay], fp)
            _write_csv(path / "samplers.csv",
                       ("seed", "booking_skew", "set_size", "trip", "search", "gap"),
                       [(r.seed, r.booking_skew, r.set_size, f"{r.trip:.6f}", f"{r.search:.6f}",
                         f"{r.gap:.6f}") for r in self.samplers + self.ablated], fp)
            write_jsonl(path / "checks.jsonl",
                        ({"type": "check", **asdict(c), "fingerprint": fp} for c in self.checks()))
        summary = {"fingerprint": fp, "passed": self.passed,
                   "checks": [asdict(c) for c in self.checks()]}
        (path / "summary.json").write_text(json.dumps(summary, indent=2))


def run_repro(config: ExperimentConfig, seeds: Sequence[int] | None = None,
              ablation: bool = True) -> ReproReport:
    seeds = tuple(config.eval.seeds if seeds is None else seeds)
    ix, e = config.index, config.eval
    if SWEEP_PROBE not in e.nprobes_list:
        raise ConfigError(f"the sweep check reads nprobes={SWEEP_PROBE}; "
                          "add it to eval.nprobes_list")
    sweep = corpus_sweep(generate_world(config.world), ix.k, ix.iters, ix.kmeans_seed,
                         e.nprobes_list, e.truth_k, e.sweep_queries)
    replay, samplers, ablated = seed_runs(config.world, config, seeds, ablation)
    return ReproReport(config.fingerprint, sweep, replay, samplers, ablated)
