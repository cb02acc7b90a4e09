import json

import numpy as np
import pytest

from tsrobust import cli, synthetic
from tsrobust.pipeline import RunConfig
from tsrobust.series_io import TimeSeries, load_csv, save_csv


@pytest.fixture
def data_csv(tmp_path):
    path = tmp_path / "d.csv"
    save_csv(synthetic.make_fixture(length=400, channels=2, seed=2), path)
    return path


@pytest.fixture
def config_json(tmp_path):
    cfg = RunConfig(lookback=16, horizon=4, stride=4, epochs=1, pretrain_epochs=1,
                    batch_size=16, d_model=8)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_run_writes_contract_files(data_csv, config_json, tmp_path, capsys):
    out = tmp_path / "r"
    code = cli.main(["run", "--config", str(config_json), "--data", str(data_csv),
                     "--out", str(out)])
    assert code == 0
    for name in ("report.json", "checkpoint", "attention.csv", "steps.jsonl"):
        assert (out / name).exists()
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(metrics) >= {"mse", "mae", "smape", "mase"}


def test_run_twice_same_report(data_csv, config_json, tmp_path):
    reports = []
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(config_json), "--data", str(data_csv),
                         "--out", str(tmp_path / name), "--no-figures"]) == 0
        reports.append(json.loads((tmp_path / name / "report.json").read_text())["metrics"])
    assert reports[0] == reports[1]


def test_eval_matches_run(data_csv, config_json, tmp_path, capsys):
    out = tmp_path / "r"
    cli.main(["run", "--config", str(config_json), "--data", str(data_csv), "--out", str(out),
              "--no-figures"])
    expected = json.loads((out / "report.json").read_text())["metrics"]
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(config_json), "--data", str(data_csv),
                     "--checkpoint", str(out / "checkpoint")]) == 0
    assert json.loads(capsys.readouterr().out) == expected


def test_clean_reports_missing_indices(tmp_path, capsys):
    x = np.sin(np.arange(40) / 4.0)
    x[[7, 23]] = np.nan
    path = tmp_path / "m.csv"
    save_csv(TimeSeries.from_array([x], ["v"]), path)
    assert cli.main(["clean", "--data", str(path), "--out", str(tmp_path / "o")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["v"]["missing_indices"] == [7, 23]
    repaired = load_csv(tmp_path / "o" / "positive.csv")
    assert repaired.mask.all()
    assert json.loads((tmp_path / "o" / "clean_report.json").read_text()) == report


def test_augment_writes_negative_csv(data_csv, tmp_path):
    assert cli.main(["augment", "--data", str(data_csv), "--out", str(tmp_path / "n"),
                     "--seed", "3"]) == 0
    src = load_csv(data_csv)
    neg = load_csv(tmp_path / "n" / "negative.csv")
    np.testing.assert_array_equal(neg.mask, src.mask)
    assert not np.allclose(neg.values[src.mask], src.values[src.mask])


def test_ablate_prints_six_rows(data_csv, config_json, tmp_path, capsys):
    assert cli.main(["ablate", "--config", str(config_json), "--data", str(data_csv),
                     "--out", str(tmp_path / "ab"), "--epochs", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["config", "mse", "mae"]
    assert len(lines) == 7
    assert (tmp_path / "ab" / "ablation.csv").exists()
    assert (tmp_path / "ab" / "ablation.png").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert cli.main(["run", "--data", "x.csv", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert cli.main([]) == 1


def test_runtime_error_exit_code(tmp_path, capsys):
    assert cli.main(["clean", "--data", str(tmp_path / "missing.csv")]) == 2
    assert "error" in capsys.readouterr().err
