import json
import math

import numpy as np
import pytest

from rdsmix import ConfigError
from rdsmix.harness import rng as streams
from rdsmix.harness.cli import main
from rdsmix.harness.config import ExperimentConfig
from rdsmix.harness.experiments import run_experiment, run_mix_rate, run_verify_hypotheses, simulate_ensemble

TOY_IID = """
[system]
kind = toy-linear
[noise]
kind = ma
coeffs =
scales = 0.5 [noise]
"""

TOY_MIX = TOY_IID + """
[experiment]
ensemble = 10000
horizon = 10
fit_k_min = 0
fit_k_max = 6
"""


def hypotheses(result):
    return {h["name"]: h for h in result.summary["hypotheses"]}


# ---------------------------------------------------------------------------
# configuration

def test_config_round_trip():
    cfg = ExperimentConfig.from_string(TOY_MIX, "mix-rate")
    text = cfg.to_string()
    again = ExperimentConfig.from_string(text)
    assert again == cfg
    assert again.to_string() == text
    # every default is written out with its unit
    assert "initial_distance = 1.0 [state]" in text and "seed = 0 [none]" in text


def test_config_defaults_and_overrides():
    cfg = ExperimentConfig.default("couple")
    assert cfg.system.kind == "chain" and cfg.noise.kind == "ma"
    assert cfg.experiment["n_pairs"] == 2000 and cfg.horizon == 30
    assert cfg.with_overrides(seed=7).seed == 7
    with pytest.raises(ConfigError):
        cfg.with_overrides(no_such_key=1)


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[system]\nkind = pendulum\n",
    "[system]\nkind = chain\nh = 0.001 [seconds]\n",
    "[system]\nkind = chain\nn = two\n",
    "[system]\nkind = chain\nspeed = 1\n",
    "[noise]\nkind = ma\ncoeffs = 0.7, 0.4\n",
    "[experiment]\nensemble = 0\n",
    "[output]\nformat = csv\n",
    "not a config",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string(text, "mix-rate")


def test_config_experiment_kind_must_match():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string("[experiment]\nkind = couple\n", "mix-rate")
    assert ExperimentConfig.from_string("[experiment]\nkind = verify-hypotheses\n", "verify").experiment.kind == "verify"


# ---------------------------------------------------------------------------
# rng streams and reproducibility

def test_streams_are_independent_of_scheduling():
    a = streams.generator(3, streams.ENSEMBLE_A, 5).uniform(size=4)
    b = streams.generator(3, streams.ENSEMBLE_A, 5).uniform(size=4)
    c = streams.generator(3, streams.ENSEMBLE_B, 5).uniform(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert streams.blocks(2500) == [(0, 0, 1000), (1, 1000, 2000), (2, 2000, 2500)]


def test_worker_count_does_not_change_ensembles():
    cfg = ExperimentConfig.from_string(TOY_MIX, "mix-rate")
    smap, kernel = cfg.build_system(), cfg.build_kernel()
    one = simulate_ensemble(smap, kernel, np.zeros(1), 2500, 5, 11, streams.ENSEMBLE_A, None, workers=1)
    two = simulate_ensemble(smap, kernel, np.zeros(1), 2500, 5, 11, streams.ENSEMBLE_A, None, workers=2)
    np.testing.assert_array_equal(one[0], two[0])
    np.testing.assert_array_equal(one[1].entries, two[1].entries)


def test_reruns_are_byte_identical(tmp_path):
    cfg = ExperimentConfig.from_string(TOY_MIX, "mix-rate")
    a = run_mix_rate(cfg, out=tmp_path / "a")
    b = run_mix_rate(cfg, workers=2, out=tmp_path / "b")
    for key in ("curve", "summary", "config"):
        assert a.files[key].read_bytes() == b.files[key].read_bytes()
    # the resolved config written next to the outputs reproduces the run
    assert ExperimentConfig.from_file(a.files["config"]) == cfg


# ---------------------------------------------------------------------------
# experiments

def test_toy_mix_rate_halves_per_step(tmp_path):
    res = run_mix_rate(ExperimentConfig.from_string(TOY_MIX, "mix-rate"), out=tmp_path)
    assert res.passed
    assert abs(res.summary["gamma"] - math.log(2)) < 0.1
    rows = res.files["curve"].read_text().splitlines()
    assert rows[0] == "k,distance,stderr" and len(rows) == 12
    summary = json.loads(res.files["summary"].read_text())
    assert set(summary["constants"]) == {"a", "kappa", "q", "N", "theta", "L"}


def test_identical_starts_stay_at_the_floor(tmp_path):
    cfg = ExperimentConfig.from_string(TOY_MIX, "mix-rate").with_overrides(initial_distance=0.0)
    res = run_mix_rate(cfg, out=tmp_path)
    assert all(p.distance < 3 * p.stderr + 1e-12 for p in res.curve)


def test_verify_toy_linear_passes(tmp_path):
    res = run_verify_hypotheses(ExperimentConfig.from_string(TOY_IID + "[experiment]\nensemble = 2000\n", "verify"),
                                out=tmp_path)
    assert res.passed, res.summary["hypotheses"]
    assert hypotheses(res)["GD"]["measured"]["a"] == pytest.approx(0.5)


def test_verify_box_noise_fails_recurrence(tmp_path):
    text = "[system]\nkind = toy-linear\n[noise]\nkind = box\nlower = 0.5 [noise]\nupper = 1.0 [noise]\n"
    res = run_verify_hypotheses(ExperimentConfig.from_string(text + "[experiment]\nensemble = 2000\n", "verify"),
                                out=tmp_path)
    h = hypotheses(res)
    assert not res.passed and not h["SRZ"]["passed"]
    assert h["SRZ"]["measured"]["probability"] == 0.0
    assert h["GD"]["passed"]


def test_verify_undamped_chain_fails_dissipation(tmp_path):
    text = ("[system]\nkind = chain\ngamma1 = 0.0 [1/time]\ngamma_n = 0.0 [1/time]\n"
            "[experiment]\nensemble = 200\nsamples = 20\ngd_k_max = 3\ngcp_trajectories = 20\nlipschitz_pairs = 1000\n")
    res = run_verify_hypotheses(ExperimentConfig.from_string(text, "verify"), out=tmp_path)
    h = hypotheses(res)
    assert not res.passed and not h["GD"]["passed"]
    assert h["GD"]["measured"]["a"] >= 1.0


def test_run_experiment_dispatch(tmp_path):
    res = run_experiment(ExperimentConfig.from_string(TOY_IID, "controllability"), out=tmp_path)
    assert res.name == "controllability" and res.passed
    assert res.summary["report"]["discrete"]["rank"] == 1


# ---------------------------------------------------------------------------
# command line

def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(TOY_MIX)
    assert main(["mix-rate", "--config", str(good), "--out", str(tmp_path / "o1")]) == 0
    assert "mix-rate: PASS" in capsys.readouterr().out

    box = tmp_path / "box.ini"
    box.write_text("[system]\nkind = toy-linear\n[noise]\nkind = box\n[experiment]\nensemble = 500\n")
    assert main(["verify", "--config", str(box), "--out", str(tmp_path / "o2")]) == 1
    assert "verify: FAIL" in capsys.readouterr().out

    bad = tmp_path / "bad.ini"
    bad.write_text("[system]\nkind = chain\nh = 0.001 [seconds]\n")
    assert main(["mix-rate", "--config", str(bad)]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["mix-rate", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["mix-rate", "--config", str(good), "--workers", "0"]) == 2


def test_cli_seed_and_out_flags(tmp_path):
    cfg_path = tmp_path / "toy.ini"
    cfg_path.write_text(TOY_MIX)
    assert main(["mix-rate", "--config", str(cfg_path), "--seed", "5", "--out", str(tmp_path / "s5")]) == 0
    written = ExperimentConfig.from_file(tmp_path / "s5" / "mix_rate_config.ini")
    assert written.seed == 5 and written.output == str(tmp_path / "s5")
