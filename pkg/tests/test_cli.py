import json

import pytest

from gfp.cli import main
from gfp.skeldata import read_dataset

from conftest import small_config


@pytest.fixture
def cfg_path(tmp_path):
    model = small_config().to_dict()
    model["hierarchy"]["levels"] = list(model["hierarchy"]["levels"])
    doc = {
        "schema_version": 1,
        "data": {"num_classes": 4, "samples_per_class": 6, "frames": 10, "joints": 3, "channels": 3,
                 "class_frequencies": [1.0, 2.0, 3.0, 4.0], "noise_std": 0.3},
        "model": model,
        "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8},
    }
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 and out.out.strip() else None), out.err


def test_gen_data_round_trip_and_determinism(tmp_path, cfg_path, capsys):
    code, rep, _ = run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "a.skl")
    assert code == 0 and rep["summary"]["num_samples"] == 24
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "b.skl")
    assert (tmp_path / "a.skl").read_bytes() == (tmp_path / "b.skl").read_bytes()
    manifest, seqs = read_dataset(tmp_path / "a.skl")
    assert len(seqs) == 24 and manifest.num_classes == 4


def test_missing_key_exits_2(tmp_path, cfg_path, capsys):
    doc = json.loads(cfg_path.read_text())
    del doc["data"]["joints"]
    cfg_path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "a.skl")
    assert code == 2 and "joints" in err


def test_gen_data_without_data_section(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"schema_version": 1}')
    code, _, err = run(capsys, "gen-data", "--config", p, "--out", tmp_path / "a.skl")
    assert code == 2 and "data" in err


def test_pretrain_probe_retrieve_pipeline(tmp_path, cfg_path, capsys):
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "tr.skl")
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "te.skl", "--seed", 1, "--prefix", "te-")
    code, rep, _ = run(capsys, "pretrain", "--config", cfg_path, "--data", tmp_path / "tr.skl", "--out", tmp_path / "run")
    assert code == 0 and rep["epochs"] == 2 and rep["objective"] == "gfp"
    assert json.loads((tmp_path / "run/report.json").read_text())["config_hash"] == rep["config_hash"]
    assert len((tmp_path / "run/metrics.jsonl").read_text().splitlines()) == 2

    ck = tmp_path / "run/checkpoint.skt"
    code, probe, _ = run(capsys, "probe", "--checkpoint", ck, "--train", tmp_path / "tr.skl",
                         "--test", tmp_path / "te.skl", "--out", tmp_path / "ev")
    assert code == 0 and 0 <= probe["top1"] <= 1 and probe["n_test"] == 24
    assert (tmp_path / "ev/probe.csv").exists() and (tmp_path / "ev/train_features.skt").exists()
    code, ret, _ = run(capsys, "retrieve", "--checkpoint", ck, "--query", tmp_path / "te.skl",
                       "--gallery", tmp_path / "tr.skl")
    assert code == 0 and 0 <= ret["top1"] <= 1


def test_pretrain_is_reproducible(tmp_path, cfg_path, capsys):
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "tr.skl")
    for name in ("a", "b"):
        run(capsys, "pretrain", "--config", cfg_path, "--data", tmp_path / "tr.skl", "--out", tmp_path / name)
    for f in ("metrics.jsonl", "metrics.csv", "checkpoint.skt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_pretrain_reconstruction_objective(tmp_path, cfg_path, capsys):
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "tr.skl")
    code, rep, _ = run(capsys, "pretrain", "--config", cfg_path, "--data", tmp_path / "tr.skl",
                       "--out", tmp_path / "r", "--objective", "eq1")
    assert code == 0 and rep["objective"] == "eq1" and rep["final"]["l_reg"] == 0.0


def test_pretrain_shape_mismatch_exits_2(tmp_path, cfg_path, capsys):
    doc = json.loads(cfg_path.read_text())
    doc["data"]["joints"] = 5
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    run(capsys, "gen-data", "--config", other, "--out", tmp_path / "tr.skl")
    code, _, err = run(capsys, "pretrain", "--config", cfg_path, "--data", tmp_path / "tr.skl", "--out", tmp_path / "r")
    assert code == 2 and "V=5" in err


def test_random_init_probe_on_noise_is_near_chance(tmp_path, cfg_path, capsys):
    doc = json.loads(cfg_path.read_text())
    doc["data"].update(amplitude=0.0, noise_std=1.0, samples_per_class=40)
    noise = tmp_path / "noise.json"
    noise.write_text(json.dumps(doc))
    run(capsys, "gen-data", "--config", noise, "--out", tmp_path / "tr.skl")
    run(capsys, "gen-data", "--config", noise, "--out", tmp_path / "te.skl", "--seed", 5)
    run(capsys, "init", "--config", noise, "--out", tmp_path / "init.skt")
    code, rep, _ = run(capsys, "probe", "--checkpoint", tmp_path / "init.skt",
                       "--train", tmp_path / "tr.skl", "--test", tmp_path / "te.skl")
    assert code == 0 and abs(rep["top1"] - 0.25) < 0.12


def test_flops_preset(capsys):
    code, rep, _ = run(capsys, "flops", "--preset", "ntu")
    assert code == 0 and rep["targets"] == 251
    assert rep["encoder_gflops"] == pytest.approx(1.97, rel=0.2)
    assert rep["decoder_gflops"] == pytest.approx(1.57, rel=0.2)
    assert rep["tgn_gflops"] == pytest.approx(0.64, rel=0.2)
    assert rep["report_schema"] == 1


def test_flops_needs_a_source(capsys):
    assert run(capsys, "flops")[0] == 2


def test_grad_check_command(cfg_path, tmp_path, capsys):
    code, rep, _ = run(capsys, "grad-check", "--config", cfg_path, "--samples", 120, "--out", tmp_path / "g.json")
    assert code == 0 and rep["passed"] and rep["max_rel_error"] < 1e-4
    assert (tmp_path / "g.json").exists()


def test_grad_check_failure_exits_3(cfg_path, capsys):
    code, _, _ = run(capsys, "grad-check", "--config", cfg_path, "--samples", 40, "--tolerance", 1e-30)
    assert code == 3


def test_missing_input_files(tmp_path, cfg_path, capsys):
    code, _, err = run(capsys, "probe", "--checkpoint", tmp_path / "nope.skt",
                       "--train", tmp_path / "a", "--test", tmp_path / "b")
    assert code == 2 and "does not exist" in err


def test_corrupt_checkpoint_exits_2(tmp_path, cfg_path, capsys):
    bad = tmp_path / "bad.skt"
    bad.write_bytes(b"garbage")
    run(capsys, "gen-data", "--config", cfg_path, "--out", tmp_path / "tr.skl")
    code, _, _ = run(capsys, "probe", "--checkpoint", bad, "--train", tmp_path / "tr.skl", "--test", tmp_path / "tr.skl")
    assert code == 2


def test_default_config_is_loadable(tmp_path, capsys):
    assert main(["default-config"]) == 0
    p = tmp_path / "d.json"
    p.write_text(capsys.readouterr().out)
    assert run(capsys, "flops", "--config", p)[0] == 0
