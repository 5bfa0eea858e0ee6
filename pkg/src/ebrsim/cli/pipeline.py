"""Cached experiment stages: gen, sample, train, embed, build-index, eval.

Each stage writes into ``<out>/<stage>-<key>/`` where the key hashes only
the config sections the stage (and its upstream stages) depend on. A stage
directory holds its artifacts plus a ``_stage.json`` marker; a marker with
status ``ok`` and a matching key is a cache hit. A failing stage leaves
whatever it wrote plus a marker with status ``failed``.

Every artifact is stamped with the full config fingerprint, and the
resolved config is saved under ``<out>/configs/<fingerprint>.yaml`` so each
stamp resolves back to the experiment that produced it.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..ann.ivf import AttributeStore, IvfIndex, build_ivf, load_index, save_index
from ..ann.kmeans import kmeans_fit
from ..domain import listing_to_record
from ..evalharness import (
    baseline_scorer,
    build_eval_log,
    build_replay_set,
    cluster_size_series,
    compare_samplers,
    corpus_sweep,
    first_stage_scorer,
    logged_recall,
    model_scorer,
    replay_recall,
    static_scorer,
    temporal_split,
    write_plot_data,
    write_sweep_csv,
)
from ..flexdate import CalendarStore
from ..io import read_jsonl, stable_hash, stamped, write_jsonl
from ..sampling import (
    example_from_record,
    example_to_record,
    search_based_samples,
    trip_based_samples,
)
from ..twotower.network import TwoTowerModel
from ..twotower.training import (
    EmbeddingTable,
    batch_embed_listings,
    load_model,
    load_table,
    save_model,
    save_table,
    train,
)
from ..worldgen import (
    JourneyLog,
    World,
    generate_world,
    journey_records,
    journeys_from_records,
    load_world,
    save_world,
    simulate_journeys,
)
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

STAGES = ("gen", "sample", "train", "embed", "build-index", "eval")
MARKER = "_stage.json"


class PipelineError(RuntimeError):
    pass


class StageFailed(PipelineError):
    def __init__(self, stage: str, path: Path, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause} (partial artifacts in {path})")
        self.stage = stage
        self.path = path
        self.cause = cause


@dataclass(frozen=True)
class StageRun:
    stage: str
    key: str
    path: Path
    cached: bool


def check_out_dir(out: str | Path | None) -> Path:
    if out is None:
        raise PipelineError("no output directory given; pass --out DIR")
    p = Path(out)
    if not p.is_dir():
        raise PipelineError(f"output directory does not exist: {p}")
    if not os.access(p, os.W_OK):
        raise PipelineError(f"output directory is not writable: {p}")
    return p


def eval_depends(mode: str) -> tuple[str, ...]:
    if mode in ("logged", "replay"):
        return ("train",)
    return ("gen",)


class Pipeline:
    """Stage runner over one config and one output directory."""

    def __init__(self, config: ExperimentConfig, out: str | Path | None = None):
        self.config = config
        self.out = check_out_dir(out if out is not None else config.out)
        self.fingerprint = config.fingerprint
        self._runs: dict[str, StageRun] = {}
        self._memo: dict[str, object] = {}
        cfg_dir = self.out / "configs"
        cfg_dir.mkdir(exist_ok=True)
        (cfg_dir / f"{self.fingerprint}.yaml").write_text(dump_config(config))

    # -- keys and directories ----------------------------------------------------------

    def depends(self, stage: str) -> tuple[str, ...]:
        if stage == "eval":
            return eval_depends(self.config.eval.mode)
        i = STAGES.index(stage)
        return (STAGES[i - 1],) if i > 0 else ()

    def key(self, stage: str) -> str:
        d = self.config.to_dict()
        own = {
            "gen": {"seed": d["seed"], "world": d["world"]},
            "sample": {"sampling": d["sampling"]},
            "train": {"tower": d["tower"]},
            "embed": {},
            "build-index": {"index": d["index"]},
            "eval": {"eval": d["eval"], "index": d["index"], "tower": d["tower"],
                     "sampling": d["sampling"]},
        }[stage]
        return stable_hash({"stage": stage, "own": own,
                            "upstream": [self.key(s) for s in self.depends(stage)]})

    def stage_dir(self, stage: str) -> Path:
        return self.out / f"{stage}-{self.key(stage)}"

    def marker(self, stage: str) -> dict | None:
        p = self.stage_dir(stage) / MARKER
        if not p.is_file():
            return None
        return json.loads(p.read_text())

    # -- running -----------------------------------------------------------------------

    def run(self, stage: str) -> StageRun:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if stage in self._runs:
            return self._runs[stage]
        for dep in self.depends(stage):
            self.run(dep)
        key = self.key(stage)
        path = self.stage_dir(stage)
        m = self.marker(stage)
        if m is not None and m.get("status") == "ok" and m.get("key") == key:
            self._runs[stage] = StageRun(stage, key, path, True)
            return self._runs[stage]
        path.mkdir(exist_ok=True)
        fn: Callable[[Path], dict] = getattr(self, "_" + stage.replace("-", "_"))
        t0 = time.perf_counter()
        try:
            with stamped(self.fingerprint):
                summary = fn(path)
        except Exception as e:
            self._write_marker(path, stage, key, "failed", time.perf_counter() - t0,
                               {"error": repr(e), "traceback": traceback.format_exc()})
            raise StageFailed(stage, path, e) from e
        self._write_marker(path, stage, key, "ok", time.perf_counter() - t0, summary or {})
        self._runs[stage] = StageRun(stage, key, path, False)
        log.info("stage %s done in %.1fs -> %s", stage, time.perf_counter() - t0, path)
        return self._runs[stage]

    @property
    def runs(self) -> list[StageRun]:
        return list(self._runs.values())

    def run_through(self, last: str = "eval") -> list[StageRun]:
        """Run ``last`` and everything it needs; returns the stage runs in order."""
        self.run(last)
        return self.runs

    def _write_marker(self, path: Path, stage: str, key: str, status: str, elapsed: float,
                      extra: dict) -> None:
        rec = {"stage": stage, "key": key, "status": status, "fingerprint": self.fingerprint,
               "elapsed_s": round(elapsed, 3), **extra}
        (path / MARKER).write_text(json.dumps(rec, indent=2, sort_keys=True, default=str))

    # -- artifact access (runs the stage on demand) -------------------------------------

    def world(self) -> World:
        if "world" not in self._memo:
            self._memo["world"] = load_world(self.run("gen").path / "world.bin")
        return self._memo["world"]

    def journeys(self) -> JourneyLog:
        if "journeys" not in self._memo:
            path = self.run("gen").path / "journeys.jsonl"
            self._memo["journeys"] = journeys_from_records(read_jsonl(path))
        return self._memo["journeys"]

    def examples(self) -> list:
        path = self.run("sample").path / "examples.jsonl"
        return [example_from_record(r) for r in read_jsonl(path)]

    def model(self) -> TwoTowerModel:
        return load_model(self.run("train").path / "model.bin")

    def table(self) -> EmbeddingTable:
        return load_table(self.run("embed").path / "table.bin")

    def index(self) -> IvfIndex:
        return load_index(self.run("build-index").path / "index.bin")

    # -- stages ------------------------------------------------------------------------

    def _gen(self, path: Path) -> dict:
        world = generate_world(self.config.world)
        journeys = simulate_journeys(world)
        save_world(path / "world.bin", world)
        write_jsonl(path / "listings.jsonl", (listing_to_record(l) for l in world.listings))
        write_jsonl(path / "journeys.jsonl", journey_records(journeys))
        return {"listings": len(world.listings), "users": len(world.users),
                "searches": len(journeys.searches), "bookings": len(journeys.bookings),
                "late_booking_fraction": journeys.late_booking_fraction(
                    self.config.world.late_fraction)}

    def _sample(self, path: Path) -> dict:
        s = self.config.sampling
        split = temporal_split(self.world(), self.journeys())
        if s.scheme == "trip":
            examples = trip_based_samples(split.train_trips, s.policy, self.config.seed)
        else:
            examples = search_based_samples(split.train_log, s.lookback)
        n = write_jsonl(path / "examples.jsonl", (example_to_record(e) for e in examples))
        return {"scheme": s.scheme, "examples": n, "train_end": split.train_end}

    def _train(self, path: Path) -> dict:
        cfg = self.config.tower_config
        result = train(TwoTowerModel.init(cfg), self.examples(), self.world())
        save_model(path / "model.bin", result.model)
        _write_csv(path / "loss_curve.csv", ("epoch", "loss"),
                   [(i, f"{v:.8f}") for i, v in enumerate(result.loss_curve)], self.fingerprint)
        return {"epochs": len(result.loss_curve),
                "final_loss": result.loss_curve[-1] if result.loss_curve else None}

    def _embed(self, path: Path) -> dict:
        table = batch_embed_listings(self.model(), self.world())
        save_table(path / "table.bin", table)
        return {"rows": len(table), "dim": table.dim, "version": table.version}

    def _build_index(self, path: Path) -> dict:
        ix = self.config.index
        world = self.world()
        table = self.table()
        km = kmeans_fit(table, ix.k, iters=ix.iters, seed=ix.kmeans_seed, augmented=ix.augmented)
        attrs = AttributeStore.from_world(world, CalendarStore.from_world(world))
        index = build_ivf(table, km, attrs)
        save_index(path / "index.bin", index)
        write_plot_data(path / "cluster_sizes.csv", {"cluster_share": cluster_size_series(km)},
                        self.fingerprint)
        return {"k": km.k, "iterations": km.iterations}

    def _eval(self, path: Path) -> dict:
        e = self.config.eval
        fp = self.fingerprint
        world = self.world()
        if e.mode == "sweep":
            ix = self.config.index
            sw = corpus_sweep(world, ix.k, ix.iters, ix.kmeans_seed, e.nprobes_list, e.truth_k,
                              e.sweep_queries)
            write_sweep_csv(path / "sweep.csv", sw.rows, fp)
            write_plot_data(path / "sweep_plot.csv",
                            {m: [(r.nprobes, r.recall) for r in sw.rows if r.metric == m]
                             for m in ("euclidean", "dot")}, fp)
            write_plot_data(path / "cluster_sizes.csv",
                            {m: cluster_size_series(sw.kmeans[m]) for m in ("euclidean", "dot")},
                            fp)
            shares = {m: sw.stats(m).max_share for m in ("euclidean", "dot")}
            return {"mode": e.mode, "max_share": shares,
                    "recall": {f"{r.metric}@{r.nprobes}": r.recall for r in sw.rows}}
        split = temporal_split(world, self.journeys())
        attrs = AttributeStore.from_world(world)
        eval_log = build_eval_log(world, split, e.num_negatives, self.config.seed, attrs)
        if e.mode == "samplers":
            rs = build_replay_set(world, eval_log, e.replay_queries, self.config.seed,
                                  e.min_eligible, attrs)
            cmp = compare_samplers(world, split, self.config.tower_config, eval_log, rs,
                                   self.config.sampling.policy, self.config.seed, e.threshold)
            records = [{**r, "fingerprint": fp} for r in cmp.to_records()]
            write_jsonl(path / "samplers.jsonl", records)
            _write_report_csv(path / "samplers.csv", records, fp)
            return {"mode": e.mode, "set_size": cmp.set_size, "logged_gap": cmp.logged_gap}
        model = self.model()
        scorers = {"baseline": static_scorer(world, baseline_scorer(world)),
                   "model": model_scorer(model, world)}
        records = []
        if e.mode == "logged":
            for name, sc in scorers.items():
                rep = logged_recall(sc, eval_log, world, e.threshold, fp)
                records.append({**rep.to_record(), "scorer": name})
        else:
            rs = build_replay_set(world, eval_log, e.replay_queries, self.config.seed,
                                  e.min_eligible, attrs)
            fs = first_stage_scorer(world)
            for name, sc in scorers.items():
                rep = replay_recall(sc, fs, rs, world, e.truth_k, fingerprint=fp)
                records.append({**rep.to_record(), "scorer": name})
        write_jsonl(path / "report.jsonl", records)
        _write_report_csv(path / "report.csv", records, fp)
        return {"mode": e.mode, "values": {r["scorer"]: r["value"] for r in records}}


REPORT_COLUMNS = ("scorer", "scheme", "metric", "threshold", "value", "num_queries", "flagged")


def _write_report_csv(path: Path, records: list[dict], fingerprint: str) -> None:
    rows = [tuple(r.get(c, "") for c in REPORT_COLUMNS) for r in records]
    _write_csv(path, REPORT_COLUMNS, rows, fingerprint)


def _write_csv(path: Path, columns, rows, fingerprint: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([*columns, "fingerprint"])
        for r in rows:
            w.writerow([*r, fingerprint])


def run_pipeline(config: ExperimentConfig, out: str | Path | None = None,
                 through: str = "eval") -> tuple[int, Path]:
    """Run the stages up to ``through``; returns (exit status, artifact directory)."""
    pipe = Pipeline(config, out)
    try:
        pipe.run_through(through)
    except StageFailed as e:
        log.error("%s", e)
        return 1, pipe.out
    return 0, pipe.out
