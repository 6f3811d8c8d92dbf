import csv
import json

import numpy as np
import pytest

from subsampling_mcmc import cli
from subsampling_mcmc import io as sio
from subsampling_mcmc.exceptions import InvalidConfigurationError, InvalidInputError


def test_config_parsing_and_comments():
    raw = sio.parse_config_text("# header\nmodel = M2   # trailing\n\nN = 50\n", "x.cfg")
    assert raw.values == {"model": "M2", "N": "50"}
    assert raw.lines == {"model": 2, "N": 4}
    cfg = cli.build_config(raw)
    assert cfg.model == "M2" and cfg.n_iter == 50


@pytest.mark.parametrize(
    "text,line",
    [
        ("model = M1\nn = abc\n", 2),
        ("model = M1\n\nbogus = 1\n", 3),
        ("seed = 1\nseed = 2\n", 2),
        ("model = M1\nno equals sign\n", 2),
        ("p_tilde = 1.5\n", 1),
        ("mode = corr_gu\nsampling = fixed\n", 2),
    ],
)
def test_config_errors_name_the_line(text, line):
    with pytest.raises(sio.ConfigError) as info:
        cli.build_config(sio.parse_config_text(text, "bad.cfg"))
    assert info.value.line == line
    assert f"bad.cfg:{line}:" in str(info.value)


def test_keys_are_case_sensitive():
    cfg = cli.build_config(sio.parse_config_text("n = 300\nN = 40\n"))
    assert cfg.n == 300 and cfg.n_iter == 40


def test_resolved_defaults():
    cfg = cli.build_config(sio.parse_config_text(""))
    corr = cfg.resolved("pmmh", "poisson", "corr_g")
    unc = cfg.resolved("pmmh", "poisson", "uncorrelated")
    assert (corr.expected_G, corr.target_sigma2_LL) == (50.0, 400.0)
    assert (unc.expected_G, unc.target_sigma2_LL) == (5.0, 2.1)
    assert corr.theta_true == (0.3, 0.6) and corr.K == "1%"
    m2 = cli.build_config(sio.parse_config_text("model = M2")).resolved()
    assert m2.theta_true == (0.3, 0.99) and m2.K == "3.2%"


def test_generate_is_byte_identical(tmp_path):
    cfg = cli.load_config(None, ["n = 50", "seed = 3"])
    a = cli.cmd_generate(cfg, tmp_path / "a.csv")
    b = cli.cmd_generate(cfg, tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads(sio.manifest_path(a).read_text())
    assert manifest["theta_true"] == [0.3, 0.6]
    assert manifest["n"] == 50 and manifest["sha256"] == sio.file_sha256(a)
    data = sio.read_dataset(a)
    assert data.n == 50


def test_generate_minimal_dataset(tmp_path):
    path = cli.cmd_generate(cli.load_config(None, ["n = 2"]), tmp_path / "d.csv")
    assert path.read_text().count("\n") == 3


def test_dataset_reader_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n0,1\n")
    with pytest.raises(InvalidInputError):
        sio.read_dataset(p)


@pytest.fixture
def dataset(tmp_path):
    cfg = cli.load_config(None, ["n = 400", "seed = 5"])
    return cli.cmd_generate(cfg, tmp_path / "data.csv")


def _run(tmp_path, dataset, name, *settings):
    cfg = cli.load_config(None, ["n = 400", "seed = 5", "burn_in = 20", "K = 4", *settings])
    return cli.cmd_run(cfg, dataset, tmp_path / name)


def test_run_smoke_and_chain_round_trip(tmp_path, dataset):
    out = _run(tmp_path, dataset, "chain.csv", "N = 10")
    chain, names = sio.read_chain(out)
    assert chain.n_iter == 10 and names == ["beta0", "beta1"]
    with out.open() as fh:
        header = next(csv.reader(fh))
    assert header == ["iteration", "beta0", "beta1", "log_mag", "sign", "G", "proposed_G", "accepted"]
    meta = json.loads(sio.metadata_path(out).read_text())
    assert meta["dataset_sha256"] == sio.file_sha256(dataset)
    assert set(meta["stage_seconds"]) >= {"clustering", "mode", "calibration", "tuning", "chain"}


def test_run_records_uncorrelated_target(tmp_path):
    settings = ["n = 5000", "seed = 2", "N = 10", "burn_in = 10", "mode = uncorrelated"]
    cfg = cli.load_config(None, settings)
    data = cli.cmd_generate(cfg, tmp_path / "big.csv")
    out = cli.cmd_run(cfg, data, tmp_path / "unc.csv")
    meta = json.loads(sio.metadata_path(out).read_text())
    assert abs(meta["achieved_sigma2_LL"] - 2.1) <= 0.21


def test_run_is_deterministic(tmp_path, dataset):
    a = _run(tmp_path, dataset, "a.csv", "N = 50")
    b = _run(tmp_path, dataset, "b.csv", "N = 50")
    assert sio.file_sha256(a) == sio.file_sha256(b)


def test_run_rejects_dataset_of_other_model(tmp_path, dataset):
    cfg = cli.load_config(None, ["model = M2", "N = 10"])
    with pytest.raises(InvalidConfigurationError):
        cli.cmd_run(cfg, dataset, tmp_path / "x.csv")


def test_analyze_self_comparison(tmp_path, dataset):
    base = _run(tmp_path, dataset, "mh.csv", "N = 300", "method = mh")
    outputs = cli.cmd_analyze([base], base, tmp_path / "analysis")
    with open(outputs["quantile_table"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows[0]) == 2 + 10
    for r in rows:
        for alpha in ("0.10", "0.25", "0.50", "0.75", "0.90"):
            assert r[f"mce_{alpha}"] == r[f"ise_{alpha}"]
    with open(outputs["cost_table"]) as fh:
        cost = list(csv.DictReader(fh))
    assert list(cost[0]) == ["method", "parameter", "sampling_fraction", "IF", "ED_rel", "sign_rate"]
    assert all(float(r["ED_rel"]) == 1.0 for r in cost)
    assert (tmp_path / "analysis" / "kde_mh_beta0.csv").exists()


def test_analyze_rejects_mixed_parameterizations(tmp_path, dataset):
    base = _run(tmp_path, dataset, "mh.csv", "N = 120", "method = mh")
    other = tmp_path / "other.csv"
    chain, names = sio.read_chain(base)
    meta = dict(chain.metadata, parameterization="M2")
    sio.write_chain(other, chain, names, meta)
    with pytest.raises(InvalidConfigurationError):
        cli.cmd_analyze([other], base, tmp_path / "analysis")


def test_main_reports_errors_as_json(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model = M1\nphi = 2\n")
    assert cli.main(["generate", "--config", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["line"] == 2 and err["error"] == "ConfigError"


def test_main_missing_dataset(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path))
    assert cli.main(["run", "--set", "N=10"]) == 2
    assert "not found" in json.loads(capsys.readouterr().err)["message"]


def test_output_dir_env_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["generate", "--set", "n=20"]) == 0
    assert (tmp_path / "env" / "data_M1_n20_seed0.csv").exists()


def test_compare_requires_baseline(tmp_path):
    cfg = cli.load_config(None, ["methods = poisson:corr_g", f"output_dir = {tmp_path}"])
    with pytest.raises(InvalidConfigurationError):
        cli.cmd_compare(cfg)


def test_write_rows_formats(tmp_path):
    p = sio.write_rows(tmp_path / "t.csv", [{"a": "x", "b": np.float64(0.1)}], ["a", "b"])
    assert p.read_text() == "a,b\nx,0.1\n"
