import json

import pytest

from afedcl.cli import main
from afedcl.metrics import read_metrics_csv
from afedcl.models import checkpoint_load


def base_config(tmp_path, **overrides):
    config = {
        "method": "afedcl",
        "rounds": 1,
        "clients": 2,
        "lambda": 0.1,
        "optimizer": "adam",
        "learning_rate": 0.001,
        "dcc_epochs": 1,
        "aff_epochs": 1,
        "partition": {"scheme": "disjoint", "classes_per_client": 2},
        "train_samples_per_client": 3,
        "seed": 1,
        "network": {"feature_dim": 4, "encoder_hidden": [6], "discriminator_hidden": 4},
        "data": {
            "kind": "synthetic",
            "classes": 3,
            "input_dim": 8,
            "noise_sigma": 1.0,
            "separation": 3.0,
            "samples_per_class": 20,
        },
        "output_dir": str(tmp_path / "out"),
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_run_zero_rounds_writes_init_rows(tmp_path, capsys):
    config = base_config(tmp_path, rounds=0)
    assert main(["run", config]) == 0
    out_dir = tmp_path / "out"
    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert {r.round for r in rows} == {0}
    assert sorted(r.client_id for r in rows) == ["0", "1", "global"]
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["config"]["rounds"] == 0
    assert "numpy" in manifest["versions"]


def test_run_writes_expected_artifacts(tmp_path):
    config = base_config(tmp_path, rounds=2)
    assert main(["run", config]) == 0
    out_dir = tmp_path / "out"
    for name in ("metrics.csv", "manifest.json", "features.csv", "global_encoder.bin",
                 "client_0.ckpt", "client_1.ckpt"):
        assert (out_dir / name).exists(), name
    encoder, classifier, discriminator, fusion, round_index = checkpoint_load(
        (out_dir / "client_0.ckpt").read_bytes()
    )
    assert round_index == 2  # rounds completed
    rows = read_metrics_csv(str(out_dir / "metrics.csv"))
    assert {r.round for r in rows} == {0, 1, 2}


def test_run_byte_identical_for_same_seed(tmp_path):
    config_a = base_config(tmp_path, rounds=2, output_dir=str(tmp_path / "a"))
    main(["run", config_a])
    config_b = base_config(tmp_path, rounds=2, output_dir=str(tmp_path / "b"))
    main(["run", config_b])
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    second = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert first == second


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["frobnicate"])
    assert excinfo.value.code == 2


def test_bad_config_path_exits_nonzero(capsys):
    assert main(["run", "/nonexistent/config.json"]) == 1
    assert "error:" in capsys.readouterr().err


def test_invalid_method_exits_nonzero(tmp_path, capsys):
    config = base_config(tmp_path, method="nonsense")
    assert main(["run", config]) == 1


def test_ablate_emits_five_variants(tmp_path):
    config = base_config(tmp_path)
    assert main(["ablate", config]) == 0
    out_dir = tmp_path / "out"
    variants = sorted(p.name for p in out_dir.iterdir() if p.is_dir())
    assert variants == ["full", "no_aff", "no_caa", "no_dcc", "no_encoder_adv"]
    for variant in variants:
        assert (out_dir / variant / "metrics.csv").exists()

    # variants differ from the full run only in the flagged component
    full = json.loads((out_dir / "full" / "manifest.json").read_text())["config"]
    expected_flag = {
        "no_dcc": "enable_dcc",
        "no_caa": "enable_caa",
        "no_aff": "enable_aff",
        "no_encoder_adv": "enable_encoder_adversarial_update",
    }
    for variant, flag in expected_flag.items():
        manifest = json.loads((out_dir / variant / "manifest.json").read_text())["config"]
        for key in full:
            if key == "ablation":
                diff = {k for k in full[key] if manifest[key][k] != full[key][k]}
                assert diff == {flag}
            elif key == "output_dir":
                assert manifest[key] != full[key]
            else:
                assert manifest[key] == full[key], key


def test_sweep_lambda_three_runs(tmp_path):
    config = base_config(tmp_path)
    assert main(["sweep-lambda", config]) == 0
    out_dir = tmp_path / "out"
    runs = sorted(p.name for p in out_dir.iterdir() if p.is_dir())
    assert runs == ["lambda_0.01", "lambda_0.1", "lambda_1"]
    for name, value in (("lambda_0.01", 0.01), ("lambda_0.1", 0.1), ("lambda_1", 1.0)):
        manifest = json.loads((out_dir / name / "manifest.json").read_text())
        assert manifest["config"]["lambda"] == value


def test_report_aggregates_runs(tmp_path, capsys):
    config = base_config(tmp_path)
    main(["ablate", config])
    assert main(["report", str(tmp_path / "out")]) == 0
    printed = capsys.readouterr().out
    assert "full" in printed and "no_aff" in printed
    summary = (tmp_path / "out" / "summary.csv").read_text().splitlines()
    assert summary[0] == "run,final_round,test_accuracy,macro_f1"
    assert len(summary) == 1 + 5


def test_report_empty_directory_fails(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1


def test_ablate_requires_afedcl(tmp_path):
    config = base_config(tmp_path, method="fedavg")
    assert main(["ablate", config]) == 1
    assert main(["sweep-lambda", config]) == 1
