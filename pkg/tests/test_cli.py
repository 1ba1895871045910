import json
import math
import subprocess
import sys

import numpy as np
import pytest

from selbias import cli
from selbias.errors import NumericalError
from selbias.experiments import ExperimentConfig, _features_cached, cmd_recommend_eval, read_config_file
from selbias.neighborhood import UserFeatures
from selbias.ratings import ingest, split_per_user
from selbias.simbench import PopulationConfig, simulate_population


def _write_dat(path, table):
    with open(path, "w") as fh:
        for e in table:
            fh.write(f"{e.user_id}::{e.item_id}::{e.rating:g}::0\n")
    return str(path)


@pytest.fixture(scope="module")
def population_file(tmp_path_factory):
    table = simulate_population(PopulationConfig(n_users=120, n_items=90, seed=5))
    return _write_dat(tmp_path_factory.mktemp("data") / "pop.dat", table)


@pytest.fixture
def line_file(tmp_path):
    # counts 1, 2, 4 put the points at equally spaced log-frequencies; means 2, 3, 4 are equally spaced
    lines = ["1::1::2::0", "2::2::3::0", "3::2::3::0"] + [f"{u}::3::4::0" for u in range(4, 8)]
    path = tmp_path / "line.dat"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _eval_args(path, out, *extra):
    return ["recommend-eval", path, "--out", str(out), "--rank", "5", "--neighborhood-size", "30",
            "--eval-users", "40", "--slope", "0.35", "--n-values", "3,14", "--tau-values", "4.0", *extra]


def test_tls_exact_line(line_file, tmp_path, capsys):
    code, out, _ = _run(["tls", line_file, "--out", str(tmp_path)], capsys)
    assert code == 0
    result = json.loads(out)
    assert result["slope"] == pytest.approx(1 / math.log(2), abs=1e-8)
    assert result["intercept"] == pytest.approx(2 + math.log(7) / math.log(2), abs=1e-8)
    saved = json.loads((tmp_path / "tls.json").read_text())
    assert saved["slope"] == result["slope"] and "config" in saved


def test_tls_subsets(population_file, tmp_path, capsys):
    code, out, _ = _run(["tls", population_file, "--subsets", "4", "--subset-users", "30",
                         "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["subsets_fitted"] == 4
    lines = (tmp_path / "subset_slopes.csv").read_text().splitlines()
    assert lines[0].startswith("# config:") and lines[1] == "slope" and len(lines) == 6


def test_simulate_sweep_r_zero_row_is_ls(tmp_path, capsys):
    common = ["--seed", "3", "--reps", "10", "--out", str(tmp_path)]
    code, out, _ = _run(["simulate", "--experiment", "sweep-r", "--n", "300", "--values", "0,7", *common], capsys)
    assert code == 0
    sweep = json.loads(out)
    code, out, _ = _run(["simulate", "--experiment", "recovery", "--n", "300", *common], capsys)
    recovery = json.loads(out)
    assert sweep["0.0"]["rmse"] == pytest.approx(recovery["300"]["LS"]["rmse"], abs=1e-7)
    header = (tmp_path / "simulate_sweep_r.csv").read_text().splitlines()[0]
    assert "PCG64" in header and '"seed": 3' in header


def test_simulate_requires_values(capsys):
    code, _, err = _run(["simulate", "--experiment", "sweep-a"], capsys)
    assert code == 1 and "--values" in err


def test_recommend_eval_zero_penalty(population_file, tmp_path, capsys):
    code, _, _ = _run(_eval_args(population_file, tmp_path, "--r", "0"), capsys)
    assert code == 0
    rows = (tmp_path / "recommend_eval.csv").read_text().splitlines()[2:]
    by_est = {}
    for row in rows:
        user, est, metric, value = row.split(",")
        by_est.setdefault(est, {})[(user, metric)] = value
    assert by_est["SB"] == by_est["LS"]
    summary = json.loads((tmp_path / "recommend_eval.json").read_text())
    assert summary["config"]["r"] == 0.0
    assert summary["estimators"]["popularity"]["RMSE"] is None


def test_recommend_eval_reruns_are_identical(population_file, tmp_path, capsys):
    first, second = tmp_path / "a", tmp_path / "b"
    assert _run(_eval_args(population_file, first), capsys)[0] == 0
    assert _run(_eval_args(population_file, second, "--threads", "3"), capsys)[0] == 0
    for name in ("recommend_eval.csv", "recommend_eval.json"):
        a = (first / name).read_text().replace('"threads": 3', '"threads": 1')
        b = (second / name).read_text().replace('"threads": 3', '"threads": 1')
        assert a == b
    assert list((first / "cache").glob("features-*.npz"))


def test_feature_cache_is_checked(population_file, tmp_path):
    table = ingest(population_file)
    config = ExperimentConfig(rank=4)
    split = split_per_user(table, config.train_fraction, config.seed)
    feats = _features_cached(split, config, tmp_path)
    (path,) = tmp_path.glob("features-*.npz")
    # a cache entry whose fingerprint does not match the split must be recomputed
    UserFeatures(feats.users, feats.matrix * 2, feats.rank, "stale", feats.singular_values,
                 feats.items, feats.item_factors).save(path)
    again = _features_cached(split, config, tmp_path)
    assert np.array_equal(again.matrix, feats.matrix)
    assert UserFeatures.load(path).training_fingerprint == feats.training_fingerprint


def test_tune_r(population_file, tmp_path, capsys):
    args = ["tune-r", population_file, "--out", str(tmp_path), "--rank", "5", "--neighborhood-size", "30",
            "--slope", "0.35", "--validation-users", "15"]
    code, out, _ = _run([*args, "--grid", "0"], capsys)
    assert code == 0 and json.loads(out)["best_r"] == 0.0
    code, out, _ = _run([*args, "--grid", "5,5"], capsys)
    result = json.loads(out)
    assert result["best_r"] == 5.0 and list(result["curve"]) == ["5.0"]
    assert (tmp_path / "tune_r.csv").read_text().splitlines()[1] == "r,rmse"


def test_tune_r_zero_matches_ls(population_file):
    from selbias.experiments import cmd_tune_r, eligible_users, evaluate, prepare
    config = ExperimentConfig(rank=5, neighborhood_size=30, slope=0.35, n_values=(3,), tau_values=(4.0,))
    _, curve = cmd_tune_r(ingest(population_file), config, [0.0], 15)
    prep = prepare(ingest(population_file), config)
    users = [u.item() for u in eligible_users(prep)[:15]]
    assert curve[0.0] == evaluate(prep, config, users, r=0.0)["LS"].aggregate["rmse"]


def test_config_file_and_flag_precedence(population_file, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# evaluation\nrank = 4\nr = 2.5\neval-users = 20\nslope = 0.3\nn_values = 3\n"
                   "tau_values = 4.0\nneighborhood_size = 25\n")
    assert read_config_file(cfg)["eval_users"] == 20
    code, _, _ = _run(["recommend-eval", population_file, "--config", str(cfg), "--r", "1.5",
                       "--out", str(tmp_path)], capsys)
    assert code == 0
    config = json.loads((tmp_path / "recommend_eval.json").read_text())["config"]
    assert config["r"] == 1.5 and config["rank"] == 4 and config["evaluated_users"] == 20


def test_bad_config_key(population_file, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    code, _, err = _run(["recommend-eval", population_file, "--config", str(cfg)], capsys)
    assert code == 1 and "colour" in err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["tls"], ["simulate", "--experiment", "x"],
                                  ["tls", "f.dat", "--seed", "abc"]])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


def test_data_errors(tmp_path, capsys):
    assert _run(["tls", str(tmp_path / "missing.dat")], capsys)[0] == 2
    bad = tmp_path / "bad.dat"
    bad.write_text("1::2::4::0\n1::3::nine::0\n")
    code, _, err = _run(["tls", str(bad)], capsys)
    assert code == 2 and ":2" in err
    one = tmp_path / "one.dat"
    one.write_text("1::2::4::0\n")
    assert _run(["tls", str(one)], capsys)[0] == 2


def test_numerical_failure_exit_code(monkeypatch, line_file, capsys):
    def boom(*args, **kwargs):
        raise NumericalError("did not converge")
    monkeypatch.setattr(cli, "cmd_tls", boom)
    code, _, err = _run(["tls", line_file], capsys)
    assert code == 3 and "did not converge" in err


def test_strict_mode_raises_on_unconverged_fit(population_file, monkeypatch):
    import selbias.experiments as exp
    real = exp.SBConfig
    monkeypatch.setattr(exp, "SBConfig", lambda **kw: real(max_iterations=1, **kw))
    config = ExperimentConfig(rank=5, neighborhood_size=30, slope=0.35, eval_users=5, strict=True,
                              n_values=(3,), tau_values=(4.0,))
    with pytest.raises(NumericalError):
        cmd_recommend_eval(ingest(population_file), config)


def test_module_entry_point(line_file):
    proc = subprocess.run([sys.executable, "-m", "selbias", "tls", line_file], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["slope"] == pytest.approx(1 / math.log(2), abs=1e-8)
