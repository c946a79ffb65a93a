import json

import pytest

from idexpo.cli import run_command
from idexpo.data import save_csv, synthetic_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    csv_path = root / "toy.csv"
    save_csv(synthetic_dataset(120, 5, 3, seed=1, informative=3, name="toy"), csv_path)
    code = run_command(["pretrain", "--data", str(csv_path), "--seed", "0", "--max-epochs", "3", "--patience", "2",
                        "--hidden", "8", "--out", str(root / "pre")])
    assert code == 0
    return root, csv_path, root / "pre" / "model.json"


FT = ["--max-epochs", "2", "--patience", "1", "--M", "20", "--seed", "0", "--eta", "2"]


def _finetune(root, csv_path, model, out, *extra):
    return run_command(["finetune", "--data", str(csv_path), "--model", str(model), "--method", "id-expo",
                        "--explainer", "lime", "--s-fraction", "0.5", *FT, *extra, "--out", str(root / out)])


def test_pretrain_outputs(workspace):
    root, _, model = workspace
    manifest = json.loads((root / "pre" / "manifest.json").read_text())
    assert manifest["command"] == "pretrain"
    assert set(manifest["outputs"]) == {"model.json", "pretrain_epochs.csv", "dataset.json", "split_0.json"}
    assert len(manifest["input_hashes"]["data"]) == 64
    assert json.loads(model.read_text())["layer_dims"] == [5, 8, 8, 3]


def test_finetune_writes_record_and_is_byte_stable(workspace):
    root, csv_path, model = workspace
    assert _finetune(root, csv_path, model, "ft_a") == 0
    assert _finetune(root, csv_path, model, "ft_b") == 0
    for name in ("run.json", "epochs.csv", "checkpoint.json"):
        assert (root / "ft_a" / name).read_bytes() == (root / "ft_b" / name).read_bytes()
    rec = json.loads((root / "ft_a" / "run.json").read_text())
    assert rec["config"]["method"] == "id-expo" and rec["test"] is not None
    manifest = json.loads((root / "ft_a" / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"run.json", "epochs.csv", "checkpoint.json"}
    assert manifest["config"]["lambda12"] == 0.01 and manifest["config"]["M"] == 20


def test_config_file_and_flag_override(workspace):
    root, csv_path, model = workspace
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"method": "expo-s", "expo_weight": 0.1, "lambda12": 0.5}))
    assert run_command(["finetune", "--data", str(csv_path), "--model", str(model), "--config", str(cfg),
                        "--lambda12", "0.2", *FT, "--out", str(root / "ft_cfg")]) == 0
    resolved = json.loads((root / "ft_cfg" / "manifest.json").read_text())["config"]
    assert resolved["method"] == "expo-s" and resolved["expo_weight"] == 0.1 and resolved["lambda12"] == 0.2


def test_grid_finetune(workspace):
    root, csv_path, model = workspace
    cfg = root / "grid.json"
    cfg.write_text(json.dumps({"lr_grid": [0.01], "lambda12_grid": [0.1, 0.01], "lambda3_grid": [0.0]}))
    assert _finetune(root, csv_path, model, "ft_grid", "--grid", "--config", str(cfg)) == 0
    assert sorted(p.name for p in (root / "ft_grid" / "grid").iterdir()) == ["cell_000", "cell_001"]


def test_evaluate_outputs(workspace):
    root, csv_path, model = workspace
    out = root / "ev"
    assert run_command(["evaluate", "--model", str(model), "--data", str(csv_path), "--split", "0", "--s-fraction", "0.5",
                        "--M", "20", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert {"accuracy", "mean_insertion", "mean_deletion", "sensitivity_n", "valscore"} <= set(metrics)
    assert metrics["S"] == 2 and metrics["N"] == 24
    lines = (out / "samples.csv").read_text().splitlines()
    assert lines[0] == "sample,acc_hit,ins,del,sens_n" and len(lines) == 25
    assert (out / "insertion_curve.csv").read_text().splitlines()[0] == "s,probability"


def test_explain_outputs(workspace, capsys):
    root, csv_path, model = workspace
    assert run_command(["explain", "--model", str(model), "--data", str(csv_path), "--index", "7",
                        "--explainer", "kernelshap", "--M", "30", "--out", str(root / "ex")]) == 0
    rec = json.loads((root / "ex" / "explanation_7.json").read_text())
    assert rec["sample_index"] == 7 and rec["explainer"] == "kernelshap" and len(rec["contributions"]) == 5
    assert json.loads(capsys.readouterr().out) == rec


def test_report_over_finetune_runs(workspace):
    root, _, _ = workspace
    assert run_command(["report", "--runs", str(root / "ft_a"), "--out", str(root / "rep")]) == 0
    assert (root / "rep" / "summary.csv").exists() and (root / "rep" / "scatter.csv").exists()


def test_errors_give_nonzero_exit(workspace, tmp_path, capsys):
    root, csv_path, model = workspace
    assert run_command(["finetune", "--bogus"]) != 0
    assert run_command(["evaluate", "--model", str(model), "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    other = tmp_path / "wide.csv"
    save_csv(synthetic_dataset(60, 7, 3, seed=0), other)
    assert run_command(["evaluate", "--model", str(model), "--data", str(other), "--out", str(tmp_path / "o")]) == 2
    assert run_command(["explain", "--model", str(model), "--data", str(csv_path), "--index", "999"]) == 2
    assert run_command(["report", "--runs", str(tmp_path / "empty")]) == 2


def test_inputs_are_not_modified(workspace):
    root, csv_path, model = workspace
    before = csv_path.read_bytes(), model.read_bytes()
    run_command(["explain", "--model", str(model), "--data", str(csv_path), "--index", "3", "--M", "20"])
    assert (csv_path.read_bytes(), model.read_bytes()) == before
