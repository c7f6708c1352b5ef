"""Command-line behavior: exit codes, determinism, overrides, and outputs."""

import json

import numpy as np
import pytest

from blocknav.cli import main
from blocknav.fileio import load_report, read_log, read_trace, sha256_file
from blocknav.nn import POLICY_SPECS, ParamVector, load_checkpoint, save_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("gen", "--preset", "test", "--count", "3", "--seed", "11", "--out", root) == 0
    return root / "manifest.json"


# ---------------------------------------------------------------------------
# exit codes


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("frobnicate") == 1
    assert "error" in capsys.readouterr().err


def test_invalid_train_mode_is_usage_error():
    assert run("train", "bogus", "--seed", "1") == 1


def test_eval_requires_policy_flag():
    assert run("eval", "--seed", "1", "--dataset", "x", "--out", "y") == 1


def test_missing_seed_is_data_error(tmp_path):
    assert run("gen", "--preset", "test", "--out", tmp_path / "d") == 2


def test_missing_dataset_file_is_data_error(tmp_path):
    code = run(
        "eval", "--policy", "baseline", "--dataset", tmp_path / "nope.json",
        "--runs", "1", "--seed", "1", "--out", tmp_path / "r.json",
    )
    assert code == 2


def test_corrupt_checkpoint_is_data_error(tmp_path, dataset):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"BNAVCKPT" + b"\x00" * 40)
    code = run(
        "eval", "--policy", bad, "--dataset", dataset,
        "--runs", "1", "--seed", "1", "--out", tmp_path / "r.json",
    )
    assert code == 2


# ---------------------------------------------------------------------------
# gen


def test_gen_manifest_hash_reproducible(tmp_path):
    for sub in ("a", "b"):
        assert run("gen", "--preset", "test", "--count", "4", "--seed", "3",
                   "--out", tmp_path / sub) == 0
    assert sha256_file(tmp_path / "a/manifest.json") == sha256_file(tmp_path / "b/manifest.json")


def test_gen_preset_counts(tmp_path):
    assert run("gen", "--preset", "test", "--seed", "2", "--out", tmp_path / "t") == 0
    manifest = json.loads((tmp_path / "t/manifest.json").read_text())
    assert manifest["count"] == 30
    from blocknav.scenario import PRESETS

    assert PRESETS["rl-train"][0] == 85
    assert PRESETS["il-train"][0] == 120


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_schema_valid_report_and_table(tmp_path, dataset, capsys):
    out = tmp_path / "report.json"
    code = run(
        "eval", "--policy", "baseline", "--policy", "expert",
        "--dataset", dataset, "--runs", "2", "--horizon", "40",
        "--seed", "5", "--out", out,
    )
    assert code == 0
    tab = capsys.readouterr().out
    assert "baseline" in tab and "expert" in tab and "±" in tab
    doc = load_report(out)
    assert {row["name"] for row in doc["policies"]} == {"baseline", "expert"}
    import jsonschema

    from blocknav.fileio import load_schema

    jsonschema.Draft202012Validator(load_schema("report")).validate(doc)


def test_eval_deterministic_report_bytes(tmp_path, dataset):
    outs = []
    for sub in ("r1.json", "r2.json"):
        out = tmp_path / sub
        assert run("eval", "--policy", "baseline", "--dataset", dataset,
                   "--runs", "2", "--horizon", "30", "--seed", "9", "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# replay


def test_replay_deterministic_bytes(tmp_path, dataset):
    scn = dataset.parent / "scn-11-000.json"
    outs = []
    for sub in ("t1.jsonl", "t2.jsonl"):
        out = tmp_path / sub
        assert run("replay", "--policy", "baseline", "--scenario", scn,
                   "--horizon", "15", "--seed", "4", "--out", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_replay_zero_params_static_trace(tmp_path, dataset):
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(ckpt, ParamVector.for_specs(POLICY_SPECS), seed=0, iteration=0)
    out = tmp_path / "trace.jsonl"
    scn = dataset.parent / "scn-11-000.json"
    assert run("replay", "--policy", ckpt, "--scenario", scn,
               "--horizon", "12", "--seed", "4", "--out", out) == 0
    header, frames = read_trace(out)
    assert header["steps"] == 12 and len(frames) == 13
    first_seen = {}
    for frame in frames:
        for agent, pos in zip(frame["id"], frame["pos"]):
            if agent in first_seen:
                assert np.array_equal(first_seen[agent], pos)
            else:
                first_seen[agent] = pos
    assert first_seen


def test_replay_env_var_supplies_output(tmp_path, dataset, monkeypatch):
    out = tmp_path / "env-trace.jsonl"
    monkeypatch.setenv("BLOCKNAV_OUT", str(out))
    scn = dataset.parent / "scn-11-001.json"
    assert run("replay", "--policy", "baseline", "--scenario", scn,
               "--horizon", "5", "--seed", "1") == 0
    assert out.exists()


# ---------------------------------------------------------------------------
# train


def test_train_il_writes_checkpoint_and_log(tmp_path, dataset):
    ckpt, log = tmp_path / "il.ckpt", tmp_path / "il.jsonl"
    code = run(
        "train", "il", "--dataset", dataset, "--checkpoint", ckpt, "--log", log,
        "--rounds", "2", "--adam-steps", "4", "--horizon", "8", "--seed", "7",
    )
    assert code == 0
    loaded = load_checkpoint(ckpt)
    assert loaded.iteration == 2 and loaded.adam is not None
    header, records = read_log(log)
    assert header["mode"] == "il" and len(records) == 2


def test_train_rl_deterministic_checkpoint(tmp_path, dataset):
    blobs = []
    for sub in ("a.ckpt", "b.ckpt"):
        ckpt = tmp_path / sub
        assert run("train", "rl", "--dataset", dataset, "--checkpoint", ckpt,
                   "--iterations", "2", "--batch", "2", "--horizon", "8",
                   "--seed", "7") == 0
        blobs.append(ckpt.read_bytes())
    assert blobs[0] == blobs[1]


def test_train_rl_resume_matches_unsplit(tmp_path, dataset):
    full = tmp_path / "full.ckpt"
    assert run("train", "rl", "--dataset", dataset, "--checkpoint", full,
               "--iterations", "4", "--batch", "2", "--horizon", "8",
               "--seed", "7") == 0
    half = tmp_path / "half.ckpt"
    assert run("train", "rl", "--dataset", dataset, "--checkpoint", half,
               "--iterations", "2", "--batch", "2", "--horizon", "8",
               "--seed", "7") == 0
    resumed = tmp_path / "resumed.ckpt"
    assert run("train", "rl", "--dataset", dataset, "--checkpoint", resumed,
               "--resume", half, "--iterations", "4", "--batch", "2",
               "--horizon", "8", "--seed", "7") == 0
    a, b = load_checkpoint(full), load_checkpoint(resumed)
    assert np.array_equal(a.params.data, b.params.data)
    assert a.iteration == b.iteration == 4


def test_train_config_file_flags_win(tmp_path, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 99,
        "dataset": str(dataset),
        "il": {"rounds": 5, "adam_steps": 3, "horizon": 8, "batch_size": None},
    }))
    ckpt = tmp_path / "cfg.ckpt"
    code = run("train", "il", "--config", cfg, "--checkpoint", ckpt,
               "--rounds", "1", "--seed", "7")
    assert code == 0
    loaded = load_checkpoint(ckpt)
    assert loaded.iteration == 1          # flag beat the config's 5 rounds
    assert loaded.seed == 7               # flag beat the config's seed
    assert loaded.hyperparams["adam_steps"] == 3


def test_train_rejects_unknown_config_keys(tmp_path, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rl": {"wibble": 3}}))
    code = run("train", "rl", "--config", cfg, "--dataset", dataset,
               "--checkpoint", tmp_path / "x.ckpt", "--iterations", "1",
               "--batch", "2", "--horizon", "6", "--seed", "1")
    assert code == 2


def test_train_rejects_multiple_workers(tmp_path, dataset):
    code = run("train", "rl", "--dataset", dataset,
               "--checkpoint", tmp_path / "x.ckpt", "--iterations", "1",
               "--batch", "2", "--horizon", "6", "--seed", "1",
               "--workers", "4")
    assert code == 2


# ---------------------------------------------------------------------------
# profile


def test_profile_report_fields(tmp_path):
    out = tmp_path / "prof.json"
    assert run("profile", "--seed", "2", "--agents", "8,24", "--steps", "3",
               "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["grnn_infer_calls"] == 1
    assert len(doc["measurements"]) == 2
    assert doc["linear_fit"]["slope_ms_per_agent"] is not None
    assert doc["linear_fit"]["r2"] is not None


def test_profile_rejects_bad_agent_count(tmp_path):
    assert run("profile", "--seed", "2", "--agents", "0,5", "--steps", "2") == 2
