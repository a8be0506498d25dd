import csv
import json

import pytest

from femlab import cli
from femlab import eval as ev
from femlab import fem_model as fm

TINY = ["--seeds", "42", "--max-steps", "3", "--epochs", "1", "--workers", "1",
        "--set", "spec.n_train=300", "--set", "train.hidden=[8]", "--set", "eval.n_queries=5"]


def test_empty_config_gives_defaults():
    rc = cli.parse_config("exp1", {})
    p = rc.params
    assert (p.D, p.mode_scale, p.sigma_y, p.n_train, p.K_X) == (5, 2.0, 0.4, 30000, 3)
    assert p.seeds == (42, 43, 44, 45)
    assert p.fem_lambda(p.D) == 1.5
    assert rc.output_dir.as_posix() == "runs/exp1"


def test_sections_and_flag_precedence():
    raw = {"spec": {"D": 3}, "train": {"lambda_valley": 0.9, "hidden": [32, 32]}, "seeds": [1, 2]}
    rc = cli.parse_config("exp1", raw, {"lambda_valley": 2.5})
    assert rc.params.D == 3 and rc.params.hidden == (32, 32) and rc.params.seeds == (1, 2)
    assert rc.params.fem_lambda(3) == 2.5


def test_lambda_flag_overrides_lookup():
    rc = cli.parse_config("exp1", {}, {"lambda_valley": 0.7})
    assert rc.params.fem_lambda(5) == 0.7


def test_unknown_key_is_named():
    with pytest.raises(cli.ConfigError, match=r"train\.lamda: unknown key"):
        cli.parse_config("exp1", {"train": {"lamda": 1.0}})
    with pytest.raises(cli.ConfigError, match="bogus: unknown key"):
        cli.parse_config("exp1", {"bogus": 1})


def test_bad_value_names_key_path():
    with pytest.raises(cli.ConfigError, match=r"spec\.D"):
        cli.parse_config("exp1", {"spec": {"D": "five"}})
    with pytest.raises(cli.ConfigError, match=r"spec\.n_train"):
        cli.parse_config("exp1", {"spec": {"n_train": 2.5}})


def test_uci_lambda_defaults_to_zero():
    assert cli.parse_config("uci", {}).params.lambda_valley == 0.0
    assert cli.parse_config("uci", {}, {"lambda_valley": 0.3}).params.lambda_valley == 0.3


def test_sample_requires_model():
    with pytest.raises(cli.ConfigError, match="model"):
        cli.parse_config("sample", {})


def test_malformed_yaml_exit_code(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("spec: [unclosed\n")
    assert cli.main(["exp1", "-c", str(p)]) == 2
    assert "malformed" in capsys.readouterr().err
    p.write_text("train:\n  lamda: 1\n")
    assert cli.main(["exp1", "-c", str(p)]) == 2
    assert "train.lamda" in capsys.readouterr().err


def test_dispatch_writes_report_and_manifest(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["exp1", "-o", str(out)] + TINY) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["exp1_records.csv", "exp1_summary.json", "exp1_timings.csv", "manifest.json"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"] == [42]
    assert man["reduced_budget"] is True
    assert man["config"]["params"]["max_steps"] == 3
    assert man["aborted"] == []
    assert man["code_version"] == cli.code_version()


def test_identical_config_identical_reports(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["exp2", "-o", str(tmp_path / d)] + TINY) == 0
    for f in ("exp2_records.csv", "exp2_summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_split_matches_single_run(tmp_path):
    args = ["--seeds", "42", "43"] + TINY[2:]
    assert cli.main(["exp1", "-o", str(tmp_path / "split")] + args) == 0
    rc = cli.parse_config("exp1", {"spec": {"n_train": 300}, "train": {"hidden": [8]}, "eval": {"n_queries": 5}},
                          {"seeds": [42, 43], "max_steps": 3, "epochs": 1})
    direct = ev.RUNNERS["exp1"](rc.params)
    rows = list(csv.DictReader(open(tmp_path / "split" / "exp1_records.csv")))
    assert [float(r["midpoint_kl"]) for r in rows] == [r["midpoint_kl"] for r in direct.records]


def test_aborted_cell_gives_nonzero_exit(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise fm.TrainingAborted("non-finite loss at step 0")

    monkeypatch.setattr(ev, "fit_energy_model", boom)
    out = tmp_path / "r"
    assert cli.main(["exp1", "-o", str(out), "--seeds", "42", "43"] + TINY[2:]) == 1
    err = capsys.readouterr().err
    assert "aborted" in err and "seed 42" in err and "seed 43" in err
    assert len(json.loads((out / "manifest.json").read_text())["aborted"]) == 2


def test_train_sample_bridge(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", "-o", str(out)] + TINY) == 0
    model = out / "model_seed42.npz"
    assert model.exists()
    assert cli.main(["sample", "-o", str(out), "--model", str(model), "--class", "1", "--seeds", "42",
                     "--set", "eval.n_samples=20", "--set", "eval.langevin_steps=2"]) == 0
    rows = list(csv.reader(open(out / "samples_class1_seed42.csv")))
    assert rows[0] == [f"y{j}" for j in range(5)] and len(rows) == 21
    assert cli.main(["bridge", "-o", str(out)] + TINY) == 0
    for label in ("cebm", "fem"):
        rows = list(csv.reader(open(out / f"bridge_{label}_seed42.csv")))
        assert rows[0][:4] == ["t", "E_0", "E_1", "E_2"] and "p_1" in rows[0]
        assert len(rows) == 102


def test_uci_with_custom_dataset(tmp_path):
    p = tmp_path / "d.csv"
    lines = ["a,b,target"] + [f"{i % 7},{(i * 3) % 5},{'xy'[i % 2]}" for i in range(60)]
    p.write_text("\n".join(lines) + "\n")
    out = tmp_path / "r"
    assert cli.main(["uci", "-o", str(out), "--data", str(p), "--label-column", "target"] + TINY) == 0
    assert (out / "uci_records.csv").exists()
    assert cli.main(["uci", "-o", str(out), "--data", str(tmp_path / "missing.csv")] + TINY) == 1
