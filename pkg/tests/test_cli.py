import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest
from typer.testing import CliRunner

from mlrbench.bench import Band, Cell, CellOutcome, TableReport
from mlrbench.checks import CheckResult
from mlrbench.cli import app, apply_overrides, resolve_config
from mlrbench.core import ExperimentConfig, load_config
from mlrbench.models import ConfigError

FIXTURE_DIR = Path(__file__).parent / "fixtures"
CONFIG = str(FIXTURE_DIR / "experiment.json")
FEDERATED = str(FIXTURE_DIR / "federated.json")
runner = CliRunner()


def test_cli_generate(tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(app, ["generate", "--config", CONFIG, "--n", "50", "-o", str(out)])
    assert result.exit_code == 0, result.stdout
    assert os.path.exists(out / "data.csv")
    with open(out / "data.csv") as f:
        assert len(f.readlines()) == 51
    beta = json.loads((out / "beta_star.json").read_text())
    assert len(beta["beta_star"]) == 3
    assert beta["gen"]["seed"] == 1


def test_cli_generate_federated(tmp_path):
    result = runner.invoke(app, ["generate", "--config", FEDERATED, "--agents", "2", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    assert os.path.exists(tmp_path / "data.agents.csv")


def test_cli_run(tmp_path):
    result = runner.invoke(app, ["run", "--config", CONFIG, "--iters", "3", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    assert "final_rel_err" in result.stdout
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["iterations"] == 3
    assert summary["config"]["solver"]["T"] == 3
    assert (tmp_path / "trace.csv").exists()


def test_cli_run_switches_algorithm(tmp_path):
    result = runner.invoke(app, ["run", "--config", CONFIG, "-a", "gem", "--alpha", "0.5", "--iters", "2",
                                 "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["algorithm"] == "gem"
    assert summary["config"]["solver"]["alpha"] == 0.5


def test_cli_run_federated(tmp_path):
    result = runner.invoke(app, ["run", "--config", FEDERATED, "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    assert (tmp_path / "rounds.csv").exists()


def test_cli_run_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"algorithm": "kmeans"}))
    result = runner.invoke(app, ["run", "--config", str(bad)])
    assert result.exit_code == 1
    assert "Unknown algorithm" in result.stdout

    result = runner.invoke(app, ["run", "--config", CONFIG, "--agents", "4"])
    assert result.exit_code == 1


def test_cli_run_rejects_config_and_preset():
    result = runner.invoke(app, ["run", "--config", CONFIG, "--preset", "centralized-snr10-n10k"])
    assert result.exit_code == 1


def test_cli_sweep(tmp_path):
    result = runner.invoke(app, ["sweep", "--config", CONFIG, "--iters", "2", "--count", "2",
                                 "--lo", "0.3", "--hi", "1.0", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    assert "Selected lambda" in result.stdout
    assert (tmp_path / "sweep.csv").exists()


def test_cli_sweep_bad_grid():
    result = runner.invoke(app, ["sweep", "--config", CONFIG, "--lo", "2.0", "--hi", "1.0"])
    assert result.exit_code == 1


def _report(passed: bool) -> TableReport:
    cfg = load_config(CONFIG)
    band = Band("final_rel_err", hi=0.05)
    outcome = CellOutcome(cell=Cell("centralized", "cell", cfg, (band,)), values={"final_rel_err": 0.01},
                          checks=[(band, passed)])
    return TableReport("centralized", "desk", [outcome], [])


def test_cli_reproduce(tmp_path):
    with patch("mlrbench.cli.reproduce", return_value=_report(True)) as mock_reproduce:
        result = runner.invoke(app, ["reproduce", "centralized", "-o", str(tmp_path), "--no-cache"])
    assert result.exit_code == 0, result.stdout
    mock_reproduce.assert_called_with("centralized", "desk", workers=1, use_cache=False)
    assert "PASS" in (tmp_path / "report.md").read_text()
    results = json.loads((tmp_path / "results.json").read_text())
    assert results["centralized"]["cell"]["passed"] is True


def test_cli_reproduce_canonical_names(tmp_path):
    with patch("mlrbench.cli.reproduce", return_value=_report(True)) as mock_reproduce:
        result = runner.invoke(app, ["reproduce", "table1", "--scale", "paper", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.stdout
    mock_reproduce.assert_called_with("table1", "paper", workers=1, use_cache=True)


def test_cli_reproduce_all_runs_each_table(tmp_path):
    with patch("mlrbench.cli.reproduce", return_value=_report(True)) as mock_reproduce:
        result = runner.invoke(app, ["reproduce", "all", "-o", str(tmp_path), "--no-cache"])
    assert result.exit_code == 0, result.stdout
    assert [c.args[0] for c in mock_reproduce.call_args_list] == ["table1", "table2", "table4"]


def test_cli_reproduce_failure(tmp_path):
    with patch("mlrbench.cli.reproduce", return_value=_report(False)):
        result = runner.invoke(app, ["reproduce", "centralized", "-o", str(tmp_path)])
    assert result.exit_code == 3
    assert "FAIL" in (tmp_path / "report.md").read_text()


def test_cli_reproduce_unknown_table(tmp_path):
    result = runner.invoke(app, ["reproduce", "table9", "-o", str(tmp_path)])
    assert result.exit_code == 1


def test_cli_check():
    with patch("mlrbench.cli.run_checks", return_value=[CheckResult("q_grads", True, "ok")]) as mock_checks:
        result = runner.invoke(app, ["check", "--only", "q_grads"])
    assert result.exit_code == 0
    mock_checks.assert_called_with(seed=0, only=["q_grads"])


def test_cli_check_failure():
    failing = [CheckResult("q_grads", True), CheckResult("federated exactness", False, "gap 1e-3")]
    with patch("mlrbench.cli.run_checks", return_value=failing):
        result = runner.invoke(app, ["check"])
    assert result.exit_code == 3
    assert "FAILED" in result.stdout


def test_resolve_config():
    assert resolve_config(None, None) == ExperimentConfig()
    assert resolve_config(None, "centralized-snr1-n10k").gen.snr == 1.0
    with pytest.raises(ConfigError):
        resolve_config(Path(CONFIG), "centralized-snr1-n10k")


def test_apply_overrides():
    cfg = load_config(CONFIG)
    lam = apply_overrides(cfg, lam=0.25)
    assert lam.solver.alpha_max == pytest.approx(2.0)
    fed = apply_overrides(cfg, algorithm="f-wmlr", agents=5, iters=7)
    assert fed.federated and fed.fed.M == 5 and fed.fed.rounds == 7
    assert fed.solver.lam == 0.5
    em = apply_overrides(cfg, algorithm="em", seed=9)
    assert em.solver.T == 5 and em.seed == 9
    fem = apply_overrides(cfg, algorithm="f-em", alpha=0.2)
    assert fem.fed.fem_alpha == 0.2
    with pytest.raises(ConfigError):
        apply_overrides(cfg, alpha=0.1)
    with pytest.raises(ConfigError):
        apply_overrides(em, lam=0.1)
