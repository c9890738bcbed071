import csv
import math

import numpy as np
import pytest
from scipy import stats

from gridcal import cli
from gridcal.io import read_kv, read_tensor, write_tensor

SYNTH = ["synth", "--height", "12", "--width", "12", "--arterials", "1", "--side-roads", "2",
         "--days", "5", "--seed", "4"]
TRAIN = ["train", "--members", "2", "--epochs", "1", "--scheme", "3,1,1", "--window-step", "8",
         "--hidden", "4", "--seed", "2"]
ESTIMATE = ["--window-step", "4", "--patch-size", "6", "--stride", "3", "--mcbn-passes", "3"]
METHODS = ("ens", "tta-ens", "patches-ens", "mcbn", "cub")


def _run(ws, *argv):
    return cli.run([*argv, "--out", str(ws)])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    _run(root, *SYNTH)
    _run(root, *TRAIN)
    for m in METHODS:
        _run(root, "estimate", "--method", m, *ESTIMATE)
        _run(root, "calibrate", "--method", m)
    _run(root, "evaluate")
    _run(root, "outliers", "--method", "ens")
    _run(root, "report")
    return root


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_every_output_dir_has_echo_and_status(ws):
    dirs = ["data", "models", "metrics", "report", "outliers/ens"]
    dirs += [f"estimates/{m}" for m in METHODS] + [f"intervals/{m}" for m in METHODS]
    for d in dirs:
        status = read_kv(ws / d / "status.txt")
        assert status["status"] == "ok" and status["exit_code"] == "0", d
        assert (ws / d / "config.ini").read_text().startswith("[")


def test_tta_ens_writes_decomposition(ws):
    d = ws / "estimates" / "tta-ens" / "test"
    mu, sigma = read_tensor(d / "mu.grt"), read_tensor(d / "sigma.grt")
    epi, alea = read_tensor(d / "sigma_epi.grt"), read_tensor(d / "sigma_alea.grt")
    assert mu.shape == sigma.shape == read_tensor(d / "truth.grt").shape
    assert mu.shape[1:] == (12, 12, 8)
    np.testing.assert_allclose(sigma, epi + alea, rtol=1e-6)
    meta = read_kv(d / "meta.txt")
    assert meta["method"] == "tta-ens" and meta["kind"] == "predictive" and meta["M"] == "2"
    assert len(_rows(d / "windows.csv")) == len(mu)


def test_cub_sigma_is_constant_over_samples(ws):
    sigma = read_tensor(ws / "estimates" / "cub" / "test" / "sigma.grt")
    assert np.all(sigma == sigma[:1])


def test_evaluate_gives_masked_and_unmasked_rows(ws):
    rows = _rows(ws / "metrics" / "metrics.csv")
    assert len(rows) == 2 * len(METHODS)
    for m in METHODS:
        flags = sorted(r["masked"] for r in rows if r["method"] == m)
        assert flags == ["False", "True"]
    cub = [r for r in rows if r["method"] == "cub"]
    assert all(float(r["sigma_spread"]) == 0.0 for r in cub)


def test_evaluate_single_mask(ws, tmp_path):
    _run(ws, "evaluate", "--mask", "zero", "--methods", "ens")
    rows = _rows(ws / "metrics" / "metrics.csv")
    assert [(r["method"], r["masked"]) for r in rows] == [("ens", "True")]
    _run(ws, "evaluate")  # restore for other tests


def test_coverage_report_matches_beta_law(ws):
    meta = read_kv(ws / "intervals" / "ens" / "meta.txt")
    c, alpha = int(meta["C"]), float(meta["alpha"])
    l = math.floor((c + 1) * alpha)
    assert (float(meta["beta_a"]), float(meta["beta_b"])) == (c + 1 - l, l)
    rows = _rows(ws / "report" / "coverage_ens.csv")
    n_test = len(_rows(ws / "intervals" / "ens" / "coverage.csv"))
    assert sum(int(r["count"]) for r in rows) == n_test
    mass = np.array([float(r["beta_mass"]) for r in rows])
    assert mass.sum() == pytest.approx(1.0, abs=1e-9)
    assert mass[-4:].sum() == pytest.approx(stats.beta.sf(0.9, c + 1 - l, l), abs=1e-9)
    text = (ws / "report" / "coverage_ens.svg").read_text()
    assert text.startswith("<svg") and "polyline" in text


def test_outlier_outputs(ws):
    d = ws / "outliers" / "ens"
    n_test = len(read_tensor(ws / "estimates" / "ens" / "test" / "mu.grt"))
    assert len(_rows(d / "temporal.csv")) == n_test
    assert len(_rows(d / "spatial.csv")) == 144
    assert len(_rows(d / "outliers.csv")) == n_test * 144
    assert (ws / "report" / "outliers_spatial_ens.svg").exists()


def test_outliers_at_fixed_time_index(ws):
    _run(ws, "outliers", "--method", "ens", "--time-index", "96", "--epsilon", "0.01")
    meta = read_kv(ws / "outliers" / "ens" / "meta.txt")
    assert (meta["train_samples"], meta["test_samples"]) == ("3", "1")
    _run(ws, "outliers", "--method", "ens")


def test_commands_are_idempotent(ws):
    before = {p: p.read_bytes() for p in (ws / "intervals" / "mcbn").iterdir()}
    _run(ws, "calibrate", "--method", "mcbn")
    assert {p: p.read_bytes() for p in (ws / "intervals" / "mcbn").iterdir()} == before


def test_echoed_config_round_trips(ws, tmp_path):
    echo = ws / "estimates" / "patches-ens" / "config.ini"
    args = cli.parse_args(["estimate", "--config", str(echo), "--out", str(tmp_path)])
    assert args.method == "patches-ens" and args.patch_size == 6 and args.stride == 3
    assert args.data == str(tmp_path / "data") and args.models == str(tmp_path / "models")


def test_flag_beats_config_beats_default(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[calibrate]\nmethod = tta  # trailing comment\nalpha = 0.2\n\n[synth]\ndays = 3\n")
    args = cli.parse_args(["calibrate", "--config", str(cfg), "--alpha", "0.05"])
    assert (args.method, args.alpha, args.mask) == ("tta", 0.05, "zero")
    assert cli.parse_args(["synth", "--config", str(cfg)]).days == 3


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("GRIDCAL_THREADS", "3")
    assert cli.parse_args(["report"]).threads == 3
    assert cli.parse_args(["report", "--threads", "2"]).threads == 2
    monkeypatch.delenv("GRIDCAL_THREADS")
    assert cli.parse_args(["report"]).threads == 1


def _fails(capsys, argv, code):
    assert cli.main(argv) == cli.EXIT_CODES[code]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {code}: ")


def test_error_codes(ws, tmp_path, capsys):
    _fails(capsys, ["train", "--out", str(tmp_path)], "MISSING_INPUT")
    _fails(capsys, ["calibrate", "--method", "tta", "--out", str(ws)], "MISSING_INPUT")
    _fails(capsys, ["estimate", "--method", "bogus", "--out", str(ws)], "INVALID_FLAG")
    _fails(capsys, ["synth", "--days", "0", "--out", str(tmp_path)], "INVALID_FLAG")
    _fails(capsys, ["calibrate", "--alpha", "1.5", "--method", "ens", "--out", str(ws)], "INVALID_FLAG")
    _fails(capsys, ["synth", "--shift", "0,2:1:volume-drop:0.5", "--out", str(tmp_path)], "INVALID_FLAG")
    bad = tmp_path / "bad.ini"
    bad.write_text("[synth]\ncolour = red\n")
    _fails(capsys, ["synth", "--config", str(bad), "--out", str(tmp_path)], "INVALID_CONFIG")
    _fails(capsys, ["synth", "--config", str(tmp_path / "nope.ini")], "MISSING_INPUT")


def test_shape_mismatch_is_reported(ws, tmp_path, capsys):
    import shutil

    copy = tmp_path / "ws"
    shutil.copytree(ws / "estimates" / "ens", copy / "estimates" / "ens")
    truth = copy / "estimates" / "ens" / "val" / "truth.grt"
    write_tensor(read_tensor(truth)[:, :5], truth)
    _fails(capsys, ["calibrate", "--method", "ens", "--out", str(copy)], "SHAPE_MISMATCH")


def test_mcbn_needs_batch_norm(tmp_path, capsys):
    _run(tmp_path, *SYNTH)
    _run(tmp_path, *TRAIN[:1], "--arch", "linear", *TRAIN[1:])
    _fails(capsys, ["estimate", "--method", "mcbn", "--out", str(tmp_path), *ESTIMATE], "UNSUPPORTED")
    _fails(capsys, ["estimate", "--method", "ens", "--members", "9", "--out", str(tmp_path)], "INVALID_FLAG")
