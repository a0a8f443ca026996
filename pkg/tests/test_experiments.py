import math

import numpy as np
import pytest

from gsure.errors import ConfigError, ImageFormatError, SchemaMismatchError
from gsure.experiments import (
    BUNDLED_PAIRS,
    REPORT_COLUMNS,
    ExperimentConfig,
    ReportRow,
    cmd_table,
    deconv_seed,
    load_config,
    merge_reports,
    parse_config,
    read_report_rows,
    render_tables,
    run_experiment,
    write_report_rows,
)
from gsure.problems import GrayImage, pgm_write, synthetic_image

SMALL_DEBLUR = {"images": ["blobs"], "size": 16, "psf_dim": 3, "psf_sd": 0.7, "sigmas": [0.05]}
SMALL_DECONV = {"n": 24, "probes": 4}
SMALL_DENOISE = {"n": 256, "levels": 3, "signals": ["Blocks", "HeaviSine"]}


def csv_bytes(report, tmp_path, name):
    out = tmp_path / name
    return {p.name: p.read_bytes() for p in report.write(out) if p.suffix == ".csv"}


# -- configuration -------------------------------------------------------------------


def test_parse_full_config():
    cfg = parse_config(
        """
        experiment = deblur
        seed = 3
        trials = 2   # two noise draws
        [deblur]
        images = blobs, squares
        sigmas = 0.01 0.1
        size = 32
        """
    )
    assert cfg.experiment == "deblur" and cfg.seed == 3 and cfg.trials == 2
    assert cfg.params["images"] == ["blobs", "squares"]
    assert cfg.params["sigmas"] == [0.01, 0.1]
    assert cfg.params["size"] == 32 and cfg.params["psf_dim"] == 9
    assert cfg.seeds == range(3, 5) and cfg.seed_range == "3-4"


def test_experiment_from_command_line_name():
    cfg = parse_config("seed = 1\n[denoise]\ncap = no\n", "denoise")
    assert cfg.params["cap"] is False and cfg.trials == 25
    with pytest.raises(ConfigError):
        parse_config("experiment = deconv\n", "denoise")


@pytest.mark.parametrize(
    "text",
    [
        "seed = 1\n",  # no experiment
        "experiment = fly\n",
        "experiment = deblur\ncolour = red\n",
        "experiment = deblur\n[deblur]\nsharpness = 2\n",
        "experiment = deblur\n[deconv]\nn = 20\n",
        "experiment = deblur\nseed = one\n",
        "experiment = denoise\n[denoise]\ncap = maybe\n",
        "experiment = deblur\n[deblur]\nsigmas = a b\n",
        "experiment = deblur\n[deblur]\npsf_dim = 4\n",
        "experiment = deblur\n[deblur]\nimages = lena\n",
        "experiment = deblur\n[deblur]\nlambda_lo = 10\nlambda_hi = 1\n",
        "experiment = deconv\n[deconv]\nprobes = 0\n",
        "experiment = denoise\n[denoise]\nn = 1000\n",
        "experiment = denoise\n[denoise]\nfilter = haar\n",
        "experiment = denoise\n[denoise]\nsignals = Blocks, Wiggles\n",
        "experiment = denoise\n[denoise]\nlevels = 12\nn = 256\n",
        "experiment = verify-sure\n[verify-sure]\npairs = poisson/ml\n",
        "experiment = verify-sure\ntrials = 0\n",
        "experiment = verify-sure\nseed = -1\n",
        "experiment = deblur\n[deblur\n",
        "experiment = deblur\nseed = 1\nseed = 2\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
    (tmp_path / "ok.cfg").write_text("experiment = denoise\n")
    assert load_config(tmp_path / "ok.cfg").experiment == "denoise"


def test_direct_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig("deconv", params={"nn": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig("nonsense")
    with pytest.raises(ConfigError):
        ExperimentConfig("deconv", workers=0)


def test_config_hash_ignores_output_settings():
    a = ExperimentConfig("denoise", 1, 3, out="x", workers=1)
    b = ExperimentConfig("denoise", 1, 3, out="y", workers=4)
    c = ExperimentConfig("denoise", 2, 3)
    assert a.config_hash == b.config_hash != c.config_hash
    assert len(a.config_hash) == 12


# -- reports and tables ----------------------------------------------------------------


def rows(method="SURE", mean=0.5, table="1"):
    return [ReportRow(table, method, "sigma=0.05", "0-9", mean, 0.01, 0.0025, "abc")]


def test_report_round_trip(tmp_path):
    r = rows() + [ReportRow("3", "RSURE", "Blocks", "0-24", 0.7, 0.02, None, "def")]
    write_report_rows(r, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)
    assert read_report_rows(tmp_path / "r.csv") == r


def test_merge_rules():
    assert merge_reports([rows()]) == rows()
    assert merge_reports([rows(), rows()]) == rows()
    assert len(merge_reports([rows(), rows("GCV")])) == 2
    with pytest.raises(SchemaMismatchError):
        merge_reports([rows(), rows(mean=0.6)])


@pytest.mark.parametrize(
    "text",
    [
        "a,b,c\n1,2,3\n",
        ",".join(REPORT_COLUMNS) + "\n1,SURE,p,0-1,0.5\n",
        ",".join(REPORT_COLUMNS) + "\n1,SURE,p,0-1,half,0.1,,h\n",
    ],
)
def test_read_rejects_bad_reports(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(SchemaMismatchError):
        read_report_rows(tmp_path / "bad.csv")


def test_render_and_cmd_table(tmp_path):
    write_report_rows(rows(), tmp_path / "a.csv")
    write_report_rows(rows("GCV", 0.9), tmp_path / "b.csv")
    merged, text = cmd_table([tmp_path / "a.csv", tmp_path / "b.csv"])
    assert [r.method for r in merged] == ["SURE", "GCV"]
    assert "table 1" in text and "[0.0025]" in text and "0.5 +- 0.01" in text
    assert render_tables(rows()) == cmd_table([tmp_path / "a.csv"])[1]
    with pytest.raises(ConfigError):
        cmd_table([])


# -- verify-sure ------------------------------------------------------------------------


def test_verify_sure_small_run_and_underpowered_warning():
    cfg = ExperimentConfig("verify-sure", 0, 10, {"pairs": ["iid-gaussian/zero", "iid-gaussian/identity"]})
    rep = run_experiment(cfg)
    assert rep.provenance["effective_trials"] == 1000
    assert any("underpowered" in w for w in rep.warnings)
    assert rep.passed and len(rep.rows) == 2
    assert all(r.config_hash == cfg.config_hash and r.seeds == "0-0" for r in rep.rows)


def test_bundled_pairs_cover_the_catalogue():
    assert len(BUNDLED_PAIRS) == 9
    assert ExperimentConfig("verify-sure").params["pairs"] == list(BUNDLED_PAIRS)


# -- deblur ------------------------------------------------------------------------------


def test_deblur_small_run(tmp_path):
    rep = run_experiment(ExperimentConfig("deblur", 0, 2, SMALL_DEBLUR))
    assert [(r.method, r.problem) for r in rep.rows] == [("SURE", "sigma=0.05"), ("GCV", "sigma=0.05")]
    assert rep.rows[0].published == 0.0025
    names = {p.name for p in rep.write(tmp_path)}
    assert {"deblur_report.csv", "deblur_seeds.csv", "deblur_provenance.json",
            "deblur_blobs_sigma0.05_sure.pgm", "deblur_blobs_sigma0.05_gcv.pgm",
            "deblur_blobs_sigma0.05_observed.pgm", "deblur_blobs_sigma0.05_curves_seed0.csv"} <= names
    assert len(rep.checks) == 1


def test_deblur_noiseless_hits_grid_edge():
    rep = run_experiment(ExperimentConfig("deblur", 0, 1, {**SMALL_DEBLUR, "sigmas": [0.0]}))
    assert any("SURE minimum at the grid edge" in w for w in rep.warnings)
    assert any("GCV minimum at the grid edge" in w for w in rep.warnings)


def test_deblur_user_image_and_size_mismatch(tmp_path):
    pgm_write(synthetic_image("squares", 16), tmp_path / "sq.pgm")
    rep = run_experiment(ExperimentConfig("deblur", 0, 1, {**SMALL_DEBLUR, "images": [str(tmp_path / "sq.pgm")]}))
    assert rep.rows[0].table == "sq" and rep.rows[0].published is None
    pgm_write(GrayImage(8, 8, np.zeros(64)), tmp_path / "small.pgm")
    with pytest.raises(ImageFormatError):
        run_experiment(ExperimentConfig("deblur", 0, 1, {**SMALL_DEBLUR, "images": [str(tmp_path / "small.pgm")]}))


# -- deconv ------------------------------------------------------------------------------


def test_deconv_small_run():
    rep = run_experiment(ExperimentConfig("deconv", 0, 2, SMALL_DECONV))
    assert [r.method for r in rep.rows] == ["SURE", "discrepancy", "oracle-grid"]
    assert len(rep.checks) == 3
    assert rep.data["oracle-grid"].shape == (2,)
    assert np.all(rep.data["oracle-grid"] <= rep.data["discrepancy"] + 1e-12)


def test_deconv_noiseless_exercises_unbracketed_discrepancy():
    rep = run_experiment(ExperimentConfig("deconv", 0, 1, {**SMALL_DECONV, "sigma": 0.0}))
    assert any("never reaches" in w for w in rep.warnings)


def test_deconv_probe_count_stability():
    p = ExperimentConfig("deconv").params
    one = deconv_seed({**p, "probes": 1}, 0)
    many = deconv_seed({**p, "probes": 64}, 0)
    a = one["SURE"].lambda_star / one["lambda0"]
    b = many["SURE"].lambda_star / many["lambda0"]
    assert abs(math.log10(a / b)) * p["per_decade"] <= 1.0


# -- denoise ------------------------------------------------------------------------------


def test_denoise_small_run(tmp_path):
    rep = run_experiment(ExperimentConfig("denoise", 0, 3, SMALL_DENOISE))
    assert len(rep.rows) == 9 * 2
    written = {p.name: p for p in rep.write(tmp_path)}
    for t in ("3", "4", "5"):
        lines = written[f"denoise_table{t}.csv"].read_text().splitlines()
        assert lines[0] == "signal,rule,seed,mse"
    orig = [r.mean for r in rep.rows if r.method == "Original"]
    assert all(abs(o - 4.0) < 1.0 for o in orig)
    assert {r.published for r in rep.rows if r.method == "RSURE"} == {0.694, 0.169}


# -- determinism --------------------------------------------------------------------------


@pytest.mark.parametrize("experiment, params, trials", [
    ("deblur", SMALL_DEBLUR, 2),
    ("deconv", SMALL_DECONV, 2),
    ("denoise", SMALL_DENOISE, 2),
    ("verify-sure", {"pairs": ["iid-gaussian/stein", "gamma/identity"]}, 2000),
])
def test_byte_identical_across_runs_and_workers(tmp_path, experiment, params, trials):
    a = csv_bytes(run_experiment(ExperimentConfig(experiment, 0, trials, params)), tmp_path, "a")
    b = csv_bytes(run_experiment(ExperimentConfig(experiment, 0, trials, params)), tmp_path, "b")
    c = csv_bytes(run_experiment(ExperimentConfig(experiment, 0, trials, params, workers=2)), tmp_path, "c")
    assert a == b == c and a
