import json

import pytest
import yaml

from ebrsim.cli.main import main as cli_main
from ebrsim.cli.config import ConfigError, ExperimentConfig, dump_config, load_config
from ebrsim.io import read_jsonl, read_stamp

SMALL = {
    "seed": 3,
    "world": {"num_listings": 1500, "num_users": 600, "num_places": 6},
    "tower": {"variant": "v3", "overrides": {"epochs": 2}},
    "index": {"k": 16},
    "cascade": {"K": 100, "N": 40, "T": 10, "num_leaves": 2, "nprobes": 4},
    "eval": {"replay_queries": 30, "min_eligible": 50, "sweep_queries": 40, "seeds": [1],
             "nprobes_list": [1, 2, 4, 16]},
}


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture()
def out(tmp_path):
    d = tmp_path / "out"
    d.mkdir()
    return d


def run(*argv):
    return cli_main([str(a) for a in argv])


def markers(out):
    return {m["stage"]: m for m in (json.loads(p.read_text()) for p in out.glob("*/_stage.json"))}


def test_missing_out_dir_is_clear_error(cfg_file, tmp_path, capsys):
    assert run("gen", "--config", cfg_file, "--out", tmp_path / "nope") == 2
    assert "nope" in capsys.readouterr().err
    assert run("gen", "--config", cfg_file) == 2


def test_bad_config_rejected(tmp_path, out, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"world": {"num_listingz": 3}}))
    assert run("gen", "--config", bad, "--out", out) == 2
    assert "num_listingz" in capsys.readouterr().err
    for d in ({"bogus": {}}, {"world": {"seed": 4}}, {"index": {"k": 8},
                                                      "eval": {"nprobes_list": [16]}},
              {"sampling": {"weights": [0, 0, 0]}}, {"tower": {"overrides": {"num_places": 2}}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_config_round_trip_and_fingerprint(cfg_file):
    c = load_config(cfg_file)
    again = ExperimentConfig.from_dict(yaml.safe_load(dump_config(c)))
    assert again.fingerprint == c.fingerprint
    assert load_config(cfg_file, seed=4).fingerprint != c.fingerprint
    assert load_config(cfg_file, seed=4).world.seed == 4


def test_pipeline_caches_and_stamps(cfg_file, out, capsys):
    assert run("eval", "--config", cfg_file, "--out", out, "--mode", "logged") == 0
    first = capsys.readouterr().out
    assert "ran" in first and "cached" not in first
    m = markers(out)
    assert set(m) == {"gen", "sample", "train", "eval"}  # logged eval needs no index
    assert all(v["status"] == "ok" for v in m.values())
    fp = m["eval"]["fingerprint"]
    assert len({v["fingerprint"] for v in m.values()}) == 1
    assert fp != load_config(cfg_file).fingerprint  # --mode is part of the experiment
    assert (out / "configs" / f"{fp}.yaml").exists()
    report = next(out.glob("eval-*/report.jsonl"))
    before = report.read_bytes()
    assert read_stamp(report) == fp
    assert {r["scorer"] for r in read_jsonl(report)} == {"baseline", "model"}

    assert run("eval", "--config", cfg_file, "--out", out, "--mode", "logged") == 0
    second = capsys.readouterr().out
    lines = [ln for ln in second.splitlines() if ln.split()[:1] and ln.split()[0] in
             ("gen", "sample", "train", "embed", "build-index", "eval")]
    assert len(lines) == 4 and all(ln.split()[1] == "cached" for ln in lines)
    assert report.read_bytes() == before


def test_stage_failure_marker_and_exit(cfg_file, out, capsys):
    assert run("gen", "--config", cfg_file, "--out", out) == 0
    world_bin = next(out.glob("gen-*/world.bin"))
    world_bin.write_bytes(b"garbage")
    assert run("sample", "--config", cfg_file, "--out", out) == 1
    assert "sample" in capsys.readouterr().err
    marker = json.loads(next(out.glob("sample-*/_stage.json")).read_text())
    assert marker["status"] == "failed" and marker["error"]


def test_sample_flags_change_the_key(cfg_file, out, capsys):
    assert run("sample", "--config", cfg_file, "--out", out, "--scheme", "search") == 0
    assert run("sample", "--config", cfg_file, "--out", out, "--weights", "1,1,2") == 0
    assert len(list(out.glob("sample-*"))) == 2
    with pytest.raises(SystemExit):
        run("sample", "--config", cfg_file, "--out", out, "--weights", "1,2")


def test_serving_commands(cfg_file, out, capsys, tmp_path):
    assert run("serve-sim", "--config", cfg_file, "--out", out, "--num-queries", 8,
               "--fail-leaf", "1") == 0
    res = list(read_jsonl(next(out.glob("serve-sim-*/results.jsonl"))))
    assert len(res) == 8 and all(r["degraded"] and r["failed"] == [1] for r in res)
    assert run("email-batch", "--config", cfg_file, "--out", out, "--num-requests", 5) == 0
    assert len(list(read_jsonl(next(out.glob("email-batch-*/batch_results.jsonl"))))) == 5
    assert run("serve-sim", "--config", cfg_file, "--out", out, "--fail-leaf", "9") == 2
    upd = tmp_path / "u.jsonl"
    lid = next(read_jsonl(next(out.glob("gen-*/listings.jsonl"))))["id"]
    upd.write_text("\n".join(json.dumps({"type": "listing_update", "listing_id": lid, "seq": s,
                                         "days": [[1, False, None]]}) for s in (1, 2, 2)))
    assert run("bench-updates", "--config", cfg_file, "--out", out, "--updates", upd) == 0
    rep = next(read_jsonl(next(out.glob("bench-updates-*/bench.jsonl"))))
    assert rep["applied"] == 2 and rep["stale_rejected"] == 1


def test_repro_emits_reports(cfg_file, out, capsys):
    assert run("repro-paper", "--config", cfg_file, "--out", out, "--no-ablation") == 0
    text = capsys.readouterr().out
    assert sum(ln.startswith(("PASS", "FAIL")) for ln in text.splitlines()) == 4
    d = next(out.glob("repro-*"))
    for name in ("sweep.csv", "cluster_sizes.csv", "replay.csv", "samplers.csv",
                 "checks.jsonl", "summary.json"):
        assert (d / name).exists()
    assert len(list(read_jsonl(d / "checks.jsonl"))) == 4


def test_repro_needs_probe_16(tmp_path, out):
    p = tmp_path / "no16.yaml"
    p.write_text(yaml.safe_dump({**SMALL, "eval": {**SMALL["eval"], "nprobes_list": [1, 2, 4]}}))
    assert run("repro-paper", "--config", p, "--out", out, "--no-ablation") == 2
    assert not list(out.glob("repro-*"))
