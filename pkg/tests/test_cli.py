import json

import pandas as pd
import pytest

from io_utils.storage import file_digest, read_dataset_csv, read_json, write_csv, write_dataset_csv, write_json
from main import EXIT_ERROR, EXIT_NONCONVERGED, EXIT_OK, MetaAnalysisPipeline, build_parser, main
from pipeline.Projection import load_projection
from pipeline.Univariate import RESULT_COLUMNS

FAST = ["--chains", "2", "--warmup", "40", "--samples", "40"]


@pytest.fixture
def dense_csv(tmp_path, dense_dataset):
    return write_dataset_csv(dense_dataset, tmp_path / "dense.csv")


def _replicate(root, name, mu, m_interval, u_interval, converged=True, flag=""):
    """Hand-built replicate directory with two variates."""
    rep = root / name
    rep.mkdir(parents=True)
    (rep / "dataset.csv").write_text("study_id,variate_id,estimate,std_err\ns1,v01,0.1,0.1\n")
    write_json({"p": 2, "mu_true": mu, "n_estimates": 12}, rep / "truth.json")
    write_json({"converged": converged}, rep / "diagnostics.json")
    write_csv(pd.DataFrame({
        "variate_id": ["v01", "v02"],
        "mean": [sum(m_interval[0]) / 2, sum(m_interval[1]) / 2],
        "lower": [m_interval[0][0], m_interval[1][0]],
        "upper": [m_interval[0][1], m_interval[1][1]],
    }), rep / "posterior.csv")
    write_csv(pd.DataFrame({
        "variate_id": ["v01", "v02"],
        "k": [3, 3],
        "estimate": [sum(u_interval[0]) / 2, sum(u_interval[1]) / 2],
        "se": [0.1, 0.1],
        "ci_low": [u_interval[0][0], u_interval[1][0]],
        "ci_high": [u_interval[0][1], u_interval[1][1]],
        "tau2": [0.0, 0.0],
        "i2": [0.0, 0.0],
        "flag": ["", flag],
    }), rep / "univariate.csv")
    return rep


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_simulate_is_reproducible(tmp_path):
    codes = [main(["simulate", "--n-meta", "2", "--seed", "5", "--out", str(tmp_path / name)])
             for name in ("a", "b")]
    assert codes == [EXIT_OK, EXIT_OK]
    for rep in ("rep_0000", "rep_0001"):
        for name in ("dataset.csv", "truth.json"):
            assert file_digest(tmp_path / "a" / rep / name) == file_digest(tmp_path / "b" / rep / name)
    manifest = read_json(tmp_path / "a" / "manifest.json")
    assert manifest["status"] == "completed"
    assert manifest["seeds"] == {"master": 5}
    assert "rep_0001/truth.json" in manifest["outputs"]
    for rep in ("rep_0000", "rep_0001"):
        dataset = read_dataset_csv(tmp_path / "a" / rep / "dataset.csv")
        assert dataset.n == read_json(tmp_path / "a" / rep / "truth.json")["n_estimates"]


def test_simulate_rejects_bad_heterogeneity(tmp_path):
    assert main(["simulate", "--het-sd", "lots", "--out", str(tmp_path)]) == EXIT_ERROR
    assert main(["simulate", "--het-sd", "-1", "--out", str(tmp_path)]) == EXIT_ERROR


def test_fit_writes_outputs(tmp_path, dense_csv):
    out = tmp_path / "fit"
    code = main(["fit", str(dense_csv), "--out", str(out), "--seed", "1", *FAST])
    assert code in (EXIT_OK, EXIT_NONCONVERGED)
    posterior = pd.read_csv(out / "posterior.csv")
    assert list(posterior["variate_id"]) == ["a", "b", "c"]
    assert {"mean", "lower", "upper", "r_mean", "rhat", "sucra", "p_best"} <= set(posterior.columns)
    covariance = pd.read_csv(out / "covariance.csv")
    assert list(covariance.columns) == ["variate_id", "a", "b", "c"]
    diagnostics = read_json(out / "diagnostics.json")
    assert diagnostics["q"] == 2 and diagnostics["master_seed"] == 1
    assert load_projection(out / "projection.csv").seed == diagnostics["projection_seed"]
    manifest = read_json(out / "manifest.json")
    assert manifest["status"] == ("completed" if code == EXIT_OK else "nonconverged")
    assert manifest["inputs"] == {str(dense_csv): file_digest(dense_csv)}


def test_fit_reports_nonconvergence(tmp_path, dense_csv):
    config = tmp_path / "fit.env"
    config.write_text("rhat_threshold=0\n")
    code = main(["fit", str(dense_csv), "--out", str(tmp_path / "fit"), "--config", str(config), *FAST])
    assert code == EXIT_NONCONVERGED


def test_fit_rejects_oversized_q(tmp_path, knee_dataset):
    path = write_dataset_csv(knee_dataset, tmp_path / "knee.csv")
    assert main(["fit", str(path), "--q", "6", "--out", str(tmp_path / "fit"), *FAST]) == EXIT_ERROR


def test_fit_rejects_unknown_config_key(tmp_path, dense_csv):
    config = tmp_path / "fit.env"
    config.write_text("colour=blue\n")
    assert main(["fit", str(dense_csv), "--config", str(config), "--out", str(tmp_path)]) == EXIT_ERROR


def test_fit_reports_malformed_dataset(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("study_id,variate_id,estimate,std_err\ns1,a,0.1,-2\n")
    assert main(["fit", str(path), "--out", str(tmp_path / "fit")]) == EXIT_ERROR
    assert "line 2" in capsys.readouterr().out


def test_univariate_command(tmp_path, dense_csv):
    out = tmp_path / "uni"
    assert main(["univariate", str(dense_csv), "--out", str(out)]) == EXIT_OK
    lines = (out / "univariate.csv").read_text().splitlines()
    assert lines[0] == ",".join(RESULT_COLUMNS)
    assert len(lines) == 4


def test_advise_command(tmp_path, knee_dataset, capsys):
    path = write_dataset_csv(knee_dataset, tmp_path / "knee.csv")
    assert main(["advise", str(path), "--out", str(tmp_path / "advise")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "Recommended model: lowdim" in text
    assert "Selected q=5" in text
    curve = pd.read_csv(tmp_path / "advise" / "param_count_curve.csv")
    assert set(curve["model"]) == {"riley", "lin_chu", "lowdim"}


def test_evaluate_without_replicates(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", str(tmp_path / "empty"), "--out", str(tmp_path / "eval")]) == EXIT_ERROR
    assert main(["evaluate", str(tmp_path / "nowhere"), "--out", str(tmp_path / "eval")]) == EXIT_ERROR


def test_evaluate_hand_built_replicates(tmp_path):
    reps = tmp_path / "reps"
    _replicate(reps, "rep_0000", [0.1, 0.2], [(0.0, 0.2), (0.25, 0.35)], [(-0.1, 0.3), (0.1, 0.3)])
    _replicate(reps, "rep_0001", [0.1, 0.2], [(0.0, 0.2), (0.1, 0.3)], [(0.0, 0.4), (0.2, 0.2)],
               flag="zero_width")
    _replicate(reps, "rep_0002", [0.1, 0.2], [(0.0, 0.2), (0.1, 0.3)], [(0.0, 0.4), (0.0, 0.4)],
               converged=False)
    rep = _replicate(reps, "rep_0003", [0.1, 0.2], [(0.0, 0.2), (0.1, 0.3)], [(0.0, 0.4), (0.0, 0.4)])
    (rep / "posterior.csv").unlink()

    out = tmp_path / "eval"
    assert main(["evaluate", str(reps), "--out", str(out), "--n-boot", "50"]) == EXIT_OK

    summary = read_json(out / "summary.json")
    assert summary["coverage_m"]["covered"] == 2
    assert summary["coverage_m"]["total"] == 3
    assert summary["coverage_u"]["covered"] == 3
    exclusions = summary["exclusions"]
    assert exclusions["replicates_total"] == 4
    assert exclusions["replicates_analysed"] == 2
    assert exclusions["replicates_missing"] == ["rep_0003"]
    assert exclusions["replicates_nonconverged"] == ["rep_0002"]
    assert (exclusions["pairs_total"], exclusions["pairs_analysed"], exclusions["pairs_zero_width"]) == (4, 3, 1)
    assert "skipped" in summary["regressions"]["length"]

    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 3
    forest = pd.read_csv(out / "forest.csv")
    assert len(forest) == 6 and set(forest["side"]) == {"m", "u"}
    assert read_json(out / "manifest.json")["status"] == "completed"


def test_evaluate_fails_when_pairs_go_unaccounted(tmp_path, capsys):
    reps = tmp_path / "reps"
    rep = _replicate(reps, "rep_0000", [0.1, 0.2], [(0.0, 0.2), (0.1, 0.3)], [(0.0, 0.4), (0.0, 0.4)])
    univariate = pd.read_csv(rep / "univariate.csv", keep_default_na=False)
    write_csv(univariate[univariate["variate_id"] == "v01"], rep / "univariate.csv")
    assert main(["evaluate", str(reps), "--out", str(tmp_path / "eval"), "--n-boot", "50"]) == EXIT_ERROR
    assert "does not add up" in capsys.readouterr().out


def test_pipeline_rejects_unknown_command(tmp_path):
    with pytest.raises(ValueError):
        MetaAnalysisPipeline(output_dir=tmp_path).run("explode")


@pytest.mark.slow
def test_simulate_batch_evaluate(tmp_path):
    sim_config = tmp_path / "sim.env"
    sim_config.write_text("studies_min=4\nstudies_max=5\nunits_min=50\nunits_max=100\n"
                          "p_min=5\np_max=6\ndensity=0.9\n")
    reps = tmp_path / "reps"
    assert main(["simulate", "--n-meta", "2", "--config", str(sim_config), "--out", str(reps)]) == EXIT_OK

    fit_config = tmp_path / "fit.env"
    fit_config.write_text("rhat_threshold=10\n")
    code = main(["batch", str(reps), "--config", str(fit_config), "--out", str(tmp_path / "batch"), *FAST])
    assert code == EXIT_OK
    outcomes = json.loads((reps / "batch.json").read_text())["outcomes"]
    assert [o["converged"] for o in outcomes] == [True, True]
    for rep in ("rep_0000", "rep_0001"):
        assert (reps / rep / "posterior.csv").is_file()
        assert (reps / rep / "univariate.csv").is_file()

    out = tmp_path / "eval"
    assert main(["evaluate", str(reps), "--out", str(out), "--n-boot", "50"]) == EXIT_OK
    assert read_json(out / "summary.json")["exclusions"]["replicates_analysed"] == 2


@pytest.mark.slow
def test_fit_knee_fixture_is_reproducible(tmp_path, knee_dataset):
    path = write_dataset_csv(knee_dataset, tmp_path / "knee.csv")
    runs = [tmp_path / "first", tmp_path / "second"]
    for out in runs:
        code = main(["fit", str(path), "--out", str(out), "--seed", "9", *FAST])
        assert code in (EXIT_OK, EXIT_NONCONVERGED)
    posterior = pd.read_csv(runs[0] / "posterior.csv")
    assert len(posterior) == 23
    assert read_json(runs[0] / "diagnostics.json")["q"] == 5
    for name in ("posterior.csv", "covariance.csv", "diagnostics.json", "projection.csv"):
        assert file_digest(runs[0] / name) == file_digest(runs[1] / name)


def test_batch_records_unexpected_errors(tmp_path, dense_dataset, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("array must not contain infs or NaNs")

    monkeypatch.setattr("main.fit", broken)
    reps = tmp_path / "reps"
    for name in ("rep_0000", "rep_0001"):
        write_dataset_csv(dense_dataset, reps / name / "dataset.csv")
    code = main(["batch", str(reps), "--out", str(tmp_path / "batch"), "--workers", "1", *FAST])
    assert code == EXIT_ERROR
    outcomes = read_json(reps / "batch.json")["outcomes"]
    assert [o["replicate"] for o in outcomes] == ["rep_0000", "rep_0001"]
    assert all("infs or NaNs" in o["error"] for o in outcomes)
    assert (reps / "rep_0000" / "univariate.csv").is_file()


def test_sensitivity_rejects_invalid_grid(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sensitivity", "--densities", "0,0.5", "--out", str(out)]) == EXIT_ERROR
    assert not (out / "sensitivity.csv").exists()
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sensitivity", "--het-sds", "high"])


@pytest.mark.slow
def test_sensitivity_sweep_tabulates_every_cell(tmp_path):
    config = tmp_path / "sweep.env"
    config.write_text("studies_min=6\nstudies_max=8\np_min=3\np_max=3\nunits_min=200\nunits_max=400\n")
    out = tmp_path / "sweep"
    code = main(["sensitivity", "--config", str(config), "--n-meta", "3", "--densities", "0.6,1",
                 "--het-sds", "0.02,0.05", "--n-boot", "50", "--seed", "3", "--out", str(out),
                 "--chains", "2", "--warmup", "200", "--samples", "200"])
    assert code in (EXIT_OK, EXIT_NONCONVERGED)

    table = pd.read_csv(out / "sensitivity.csv")
    assert len(table) == 4
    assert set(zip(table["density"], table["het_sd"])) == {(0.6, 0.02), (0.6, 0.05), (1.0, 0.02), (1.0, 0.05)}
    evaluated = table[table["error"].isna()]
    assert len(evaluated) >= 1
    assert evaluated["coverage_m"].between(0, 1).all()
    assert (evaluated["coverage_m_low"] <= evaluated["coverage_m_high"]).all()

    cell = out / "density_0.6_het_0.02"
    assert len(list((cell / "replicates").glob("rep_*"))) == 3
    truth = read_json(cell / "replicates" / "rep_0000" / "truth.json")
    assert truth["het_sd"] == 0.02
    manifest = read_json(out / "manifest.json")
    assert manifest["config"]["densities"] == [0.6, 1.0]
    assert "sensitivity.csv" in manifest["outputs"]
