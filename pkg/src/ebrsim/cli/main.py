"""Command-line entry point.

Stage subcommands (gen, sample, train, embed, build-index, eval) run the
cached pipeline up to that stage. The others drive a built world and index:
bench-updates, serve-sim, email-batch, and repro-paper for the four trend
reproductions in one run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..ann.bench import run_update_bench
from ..domain import InputDomainError, query_from_record
from ..flexdate import DateCombo, ListingUpdate, StaleUpdateError
from ..io import read_jsonl, stamped, write_jsonl
from ..serving import (
    BatchRetrievalRequest,
    batch_retrieve,
    build_cluster,
    model_encoder,
    root_search,
)
from ..worldgen import search_from_record
from .config import EVAL_MODES, SCHEMES, ConfigError, ExperimentConfig, load_config
from .pipeline import Pipeline, PipelineError, StageFailed, check_out_dir
from .repro import run_repro

log = logging.getLogger("ebrsim")

STAGE_COMMANDS = ("gen", "sample", "train", "embed", "build-index", "eval")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="experiment seed (overrides the config)")
    p.add_argument("--config", default=d, help="YAML experiment config")
    p.add_argument("--out", default=d, help="existing output directory")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def _weights(s: str) -> tuple[float, float, float]:
    parts = s.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated weights a,b,c")
    try:
        return tuple(float(x) for x in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weights {s!r}") from None


def _int_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebrsim", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    cmd("gen", "generate the world and journey log")
    p = cmd("sample", "build training examples")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--weights", type=_weights, help="negative category weights a,b,c")
    cmd("train", "train the two-tower model")
    cmd("embed", "embed every listing")
    cmd("build-index", "cluster embeddings and build the IVF index")
    p = cmd("eval", "evaluate: logged recall, replay, nprobes sweep or sampler comparison")
    p.add_argument("--mode", choices=EVAL_MODES)

    p = cmd("bench-updates", "availability update load test, or apply an update file")
    p.add_argument("--updates", help="line-delimited listing_update records to apply")
    p.add_argument("--rate", type=float, default=10_000.0, help="updates per second")
    p.add_argument("--qps", type=float, default=100.0)
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--readers", type=int, default=4)

    p = cmd("serve-sim", "run queries through the sharded cascade")
    p.add_argument("--queries", help="line-delimited query or search records")
    p.add_argument("--num-queries", type=int, default=100,
                   help="when no file is given, replay this many logged searches")
    p.add_argument("--fail-leaf", type=_int_list, default=(), help="leaf ids to fail, a,b")

    p = cmd("email-batch", "answer a campaign request file offline")
    p.add_argument("--requests", help="line-delimited batch_request records")
    p.add_argument("--num-requests", type=int, default=100,
                   help="when no file is given, anchor this many requests on booked listings")

    p = cmd("repro-paper", "run the four trend reproductions and report pass/fail")
    p.add_argument("--seeds", type=_int_list, help="override eval.seeds, a,b,c")
    p.add_argument("--no-ablation", action="store_true", help="skip the booking-skew ablation")
    p.add_argument("--strict", action="store_true", help="exit 2 when a check fails")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.command == "sample":
        kw = {}
        if args.scheme:
            kw["scheme"] = args.scheme
        if args.weights:
            kw["weights"] = args.weights
        if kw:
            cfg = cfg.with_(sampling=_replace(cfg.sampling, **kw))
    if args.command == "eval" and args.mode:
        cfg = cfg.with_(eval=_replace(cfg.eval, mode=args.mode))
    return cfg


def _replace(obj, **kw):
    try:
        return replace(obj, **kw)
    except InputDomainError as e:
        raise ConfigError(str(e)) from e


def _command_dir(pipe: Pipeline, name: str) -> Path:
    path = pipe.out / f"{name}-{pipe.fingerprint}"
    path.mkdir(exist_ok=True)
    return path


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _stages(pipe: Pipeline, stage: str) -> int:
    pipe.run_through(stage)
    for r in pipe.runs:
        print(f"{r.stage:12s} {'cached' if r.cached else 'ran':6s} {r.path}")
    marker = pipe.marker(stage) or {}
    _print({k: v for k, v in marker.items() if k not in ("traceback",)})
    return 0


def _bench_updates(pipe: Pipeline, args) -> int:
    index = pipe.index()
    path = _command_dir(pipe, "bench-updates")
    if args.updates:
        applied = stale = 0
        last_ack = index.attributes.calendar.acked_seq
        for rec in read_jsonl(args.updates):
            try:
                last_ack = index.attributes.calendar.apply(ListingUpdate.from_record(rec))
                applied += 1
            except StaleUpdateError:
                stale += 1
        report = {"type": "update_apply", "applied": applied, "stale_rejected": stale,
                  "acked_seq": last_ack, "fingerprint": pipe.fingerprint}
    else:
        rep = run_update_bench(index, args.rate, args.duration, args.qps, args.readers,
                               nprobes=pipe.config.cascade.nprobes, seed=pipe.config.seed)
        report = {"type": "update_bench", **rep.to_dict(), "ok": rep.ok,
                  "fingerprint": pipe.fingerprint}
    with stamped(pipe.fingerprint):
        write_jsonl(path / "bench.jsonl", [report])
    _print(report)
    return 0 if report.get("ok", True) else 1


def _cluster(pipe: Pipeline):
    world = pipe.world()
    index = pipe.index()
    return build_cluster(world, pipe.table(), index.kmeans, pipe.config.cascade.num_leaves,
                         encoder=model_encoder(pipe.model(), world))


def _serve_queries(pipe: Pipeline, args) -> list:
    if args.queries:
        out = []
        for rec in read_jsonl(args.queries):
            out.append(search_from_record(rec).query if rec.get("type") == "search"
                       else query_from_record(rec))
        return out
    searches = pipe.journeys().searches
    rng = np.random.default_rng([pipe.config.seed, 31])
    picks = rng.choice(len(searches), size=min(args.num_queries, len(searches)), replace=False)
    return [searches[int(i)].query for i in np.sort(picks)]


def _serve_sim(pipe: Pipeline, args) -> int:
    cluster = _cluster(pipe)
    for sid in args.fail_leaf:
        if not 0 <= sid < cluster.num_leaves:
            raise ConfigError(f"no leaf {sid}; the cluster has {cluster.num_leaves}")
        cluster.leaves[sid].fail = True
    queries = _serve_queries(pipe, args)
    records = []
    for i, q in enumerate(queries):
        res = root_search(cluster, q, pipe.config.cascade)
        records.append({**res.to_record(i), "fingerprint": pipe.fingerprint})
    path = _command_dir(pipe, "serve-sim")
    with stamped(pipe.fingerprint):
        write_jsonl(path / "results.jsonl", records)
    degraded = sum(r["degraded"] for r in records)
    _print({"queries": len(records), "degraded": degraded,
            "mean_results": float(np.mean([len(r["ids"]) for r in records])) if records else 0.0,
            "path": str(path / "results.jsonl")})
    return 0


def _campaign(pipe: Pipeline, n: int) -> list[BatchRetrievalRequest]:
    world = pipe.world()
    bookings = pipe.journeys().bookings
    horizon = world.config.horizon
    rng = np.random.default_rng([pipe.config.seed, 37])
    out = []
    for i in range(min(n, len(bookings))):
        b = bookings[int(rng.integers(len(bookings)))]
        checkin = int(rng.integers(0, horizon - 10))
        out.append(BatchRetrievalRequest(anchor_id=b.listing_id, radius=0.1,
                                         date_window=DateCombo(checkin, int(rng.integers(1, 8))),
                                         flex_days=int(rng.integers(0, 3)), result_cap=20,
                                         request_id=i))
    return out


def _email_batch(pipe: Pipeline, args) -> int:
    cluster = _cluster(pipe)
    if args.requests:
        requests = [BatchRetrievalRequest.from_record(r) for r in read_jsonl(args.requests)]
    else:
        requests = _campaign(pipe, args.num_requests)
    results = batch_retrieve(cluster, requests)
    path = _command_dir(pipe, "email-batch")
    with stamped(pipe.fingerprint):
        write_jsonl(path / "batch_results.jsonl",
                    ({**r.to_record(), "fingerprint": pipe.fingerprint} for r in results))
    _print({"requests": len(results), "empty": sum(len(r.ids) == 0 for r in results),
            "path": str(path / "batch_results.jsonl")})
    return 0


def _repro(cfg: ExperimentConfig, args) -> int:
    out = check_out_dir(cfg.out)
    report = run_repro(cfg, args.seeds, ablation=not args.no_ablation)
    path = out / f"repro-{cfg.fingerprint}"
    path.mkdir(exist_ok=True)
    report.write(path)
    for c in report.checks():
        print(c.line())
    print(f"reports in {path}")
    return 2 if args.strict and not report.passed else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "repro-paper":
            return _repro(cfg, args)
        pipe = Pipeline(cfg)
        if args.command in STAGE_COMMANDS:
            return _stages(pipe, args.command)
        handler = {"bench-updates": _bench_updates, "serve-sim": _serve_sim,
                   "email-batch": _email_batch}[args.command]
        return handler(pipe, args)
    except StageFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, PipelineError, InputDomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
