import json
import subprocess
import sys

import pytest

from fanlasso.cli import main, resolve_threads
from fanlasso.config import ConfigError
from fanlasso.data import CRIME_LABEL, write_crime_like

TINY_COV = ["--set", "p=40", "--set", "r=2", "--set", "n_p_grid=[30, 60]", "--set", "n_q_grid=[5]",
            "--set", "replications=2"]
TINY_PIPE = ["--preset", "desk", "--set", "depth_grid=[1]", "--set", "width_grid=[8]",
             "--set", "train.max_epochs=5", "--set", "arch.n_sel=4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_evaluate_perfect_predictions(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("row,prediction,label\n0,0.5,0.5\n1,1.0,1.0\n")
    code, out, _ = run(capsys, "evaluate", "--predictions", tmp_path / "p.csv", "--out", tmp_path)
    assert code == 0 and json.loads(out)["rmse"] == 0.0
    assert (tmp_path / "evaluation.csv").read_text().splitlines()[1] == "2,0.0,0.0"


def test_evaluate_empty_is_data_error(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("row,prediction,label\n")
    code, _, err = run(capsys, "evaluate", "--predictions", tmp_path / "p.csv", "--out", tmp_path)
    assert code == 3 and json.loads(err)["error"] == "data"


def test_sim_covariate_outputs(tmp_path, capsys):
    code, out, _ = run(capsys, "sim-covariate", "--out", tmp_path, "--seed", 3, *TINY_COV)
    assert code == 0 and json.loads(out)["rows"] == 2 * 2 * 4
    side = json.loads((tmp_path / "run.json").read_text())
    assert side["config"]["master_seed"] == 3 and side["rows"] == 16
    assert len((tmp_path / "results.csv").read_text().splitlines()) == 17
    code, out, _ = run(capsys, "summarize", "--results", tmp_path / "results.csv", "--out", tmp_path)
    assert code == 0 and json.loads(out)["groups"] == 2 * 4


def test_sim_posterior_desk_smoke(tmp_path, capsys):
    code, out, err = run(capsys, "sim-posterior", "--preset", "desk", "--reps", 1, "--methods",
                         "Oracle,VanillaSourceOnly", "--set", "p=30", "--set", "n_p_train=200",
                         "--set", "train.max_epochs=3", "--out", tmp_path)
    assert code == 0, err
    # 2 methods x 3 target sizes x 2 metrics
    assert json.loads(out)["rows"] == 12


def test_threads_env_gives_same_bytes(tmp_path, capsys, monkeypatch):
    run(capsys, "sim-covariate", "--out", tmp_path / "a", *TINY_COV)
    monkeypatch.setenv("FANLASSO_THREADS", "2")
    assert resolve_threads(None) == 2
    assert run(capsys, "sim-covariate", "--out", tmp_path / "b", *TINY_COV)[0] == 0
    assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()
    assert resolve_threads(3) == 3
    monkeypatch.setenv("FANLASSO_THREADS", "zero")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    assert run(capsys, "sim-covariate", "--out", tmp_path / "c", *TINY_COV)[0] == 2


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 2),
    (["sim-covariate", "--set", "nope=1"], 2),
    (["sim-covariate", "--preset", "giant"], 2),
    (["train-source", "--source", "/nonexistent.csv"], 3),
    (["evaluate"], 2),
    (["finetune", "--target", "x.csv"], 2),
])
def test_exit_codes(tmp_path, capsys, argv, code):
    got, out, err = run(capsys, *argv, "--out", tmp_path) if argv[0] != "frobnicate" else run(capsys, *argv)
    assert got == code
    assert out == ""
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == code


def test_pipeline_end_to_end(tmp_path, capsys):
    write_crime_like(tmp_path / "src.csv", 300, 0)
    write_crime_like(tmp_path / "tgt.csv", 150, 0, domain="target")
    code, out, err = run(capsys, "train-source", "--source", tmp_path / "src.csv", "--target", tmp_path / "tgt.csv",
                         "--out", tmp_path / "s", *TINY_PIPE)
    assert code == 0, err
    code, out, err = run(capsys, "finetune", "--target", tmp_path / "tgt.csv", "--source-model",
                         tmp_path / "s/model.json", "--out", tmp_path / "f", *TINY_PIPE)
    assert code == 0, err
    summary = json.loads(out)
    side = json.loads((tmp_path / "f/run.json").read_text())
    assert side["metrics"]["valid_rmse"] == pytest.approx(summary["valid_rmse"])
    code, out, err = run(capsys, "predict", "--model", tmp_path / "f/model.json", "--data", tmp_path / "tgt.csv",
                         "--out", tmp_path / "p")
    assert code == 0 and json.loads(out)["rows"] == 150
    code, out, err = run(capsys, "evaluate", "--predictions", tmp_path / "p/predictions.csv", "--out", tmp_path / "p")
    direct = run(capsys, "evaluate", "--model", tmp_path / "f/model.json", "--data", tmp_path / "tgt.csv",
                 "--out", tmp_path / "q")
    assert code == 0 and json.loads(out)["rmse"] == pytest.approx(json.loads(direct[1])["rmse"], rel=1e-12)


def test_finetune_from_source_data_decoupled(tmp_path, capsys):
    write_crime_like(tmp_path / "src.csv", 200, 1)
    write_crime_like(tmp_path / "tgt.csv", 100, 1, domain="target")
    code, out, err = run(capsys, "finetune", "--target", tmp_path / "tgt.csv", "--source-data", tmp_path / "src.csv",
                         "--decouple", "--out", tmp_path, *TINY_PIPE)
    assert code == 0, err
    assert json.loads((tmp_path / "run.json").read_text())["config"]["joint"] is False


def test_predict_without_labels(tmp_path, capsys):
    write_crime_like(tmp_path / "src.csv", 200, 2)
    assert run(capsys, "train-source", "--source", tmp_path / "src.csv", "--out", tmp_path, *TINY_PIPE)[0] == 0
    lines = (tmp_path / "src.csv").read_text().splitlines()
    stripped = [",".join(ln.split(",")[:-1]) for ln in lines]
    assert lines[0].endswith(CRIME_LABEL)
    (tmp_path / "nolabel.csv").write_text("\n".join(stripped) + "\n")
    code, out, _ = run(capsys, "predict", "--model", tmp_path / "model.json", "--data", tmp_path / "nolabel.csv",
                       "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "predictions.csv").read_text().splitlines()[0] == "row,prediction"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fanlasso", "sim-covariate", "--out", str(tmp_path), *TINY_COV],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["rows"] == 16
