import json
import re

import numpy as np
import pytest
from PIL import Image

from gearinsert.agents import checkpoint as ckpt_io
from gearinsert.cli import main, parse_assertion
from gearinsert.config import CONFIG_ENV_VAR, Config, ConfigError, load_config, parse_config
from gearinsert.env import MISCALIBRATED, OFFLINE, REAL
from gearinsert.evaluation import load_reports

SMALL = """
[eval]
n_starts = 3
budget = 20
pipeline_trials = 2
"""


# ---------------------------------------------------------------- config

def test_defaults_and_toml_roundtrip():
    cfg = Config()
    back = parse_config(cfg.to_toml())
    assert back == cfg and back.hash() == cfg.hash()


def test_overrides_change_hash():
    cfg = parse_config("[dqn]\ngamma = 0.95\n[eval]\ntrain_seeds = [4, 5]\n")
    assert cfg.dqn.gamma == 0.95 and cfg.eval.train_seeds == (4, 5)
    assert cfg.hash() != Config().hash()


@pytest.mark.parametrize("text, match", [
    ("[dqn]\ngama = 0.9\n", "unknown keys: gama"),
    ("[nope]\nx = 1\n", "unknown sections: nope"),
    ("[dqn]\nbatch = 'big'\n", "expected an integer"),
    ("[dqn]\nbatch = 1.5\n", "expected an integer"),
    ("[env]\nmax_steps = true\n", "expected an integer"),
    ("[dqn]\ngamma = 3.0\n", "gamma"),
    ("[stage1]\ntrue_peg_m = [1.0, 2.0]\n", "expected 3 values"),
    ("not toml ===", "invalid TOML"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_env_config_modes():
    cfg = Config()
    off, real = cfg.env_config(OFFLINE), cfg.env_config(REAL)
    assert not off.sparse_reward and off.calibration.rot_deg == 0.0
    assert real.sparse_reward and real.calibration == MISCALIBRATED
    assert cfg.env_config(OFFLINE, max_steps=9).max_steps == 9


def test_env_var_selects_config(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    p.write_text("[eval]\nbudget = 7\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(p))
    assert load_config().eval.budget == 7
    monkeypatch.delenv(CONFIG_ENV_VAR)
    assert load_config().eval.budget == 50
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.toml"))


# ---------------------------------------------------------------- cli helpers

@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return str(p)


def error_line(err: str):
    m = re.search(r"^error=(\S+) message=(.*)$", err, re.M)
    assert m, err
    return m.group(1), json.loads(m.group(2))


def test_parse_assertion():
    assert parse_assertion("sr>=0.9") == ("sr", ">=", 0.9)
    assert parse_assertion(" steps_mean < 12 ") == ("steps_mean", "<", 12.0)
    with pytest.raises(Exception):
        parse_assertion("accuracy>1")


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--algo", "sarsa"])
    assert e.value.code == 2


def test_bad_config_is_reported(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[dqn]\nfoo = 1\n")
    assert main(["--config", str(p), "render-obs", "--x", "1", "--y", "1",
                 "--out", str(tmp_path / "o.png")]) == 1
    kind, msg = error_line(capsys.readouterr().err)
    assert kind == "config" and "foo" in msg


def test_render_obs(tmp_path, capsys):
    out = tmp_path / "obs.png"
    assert main(["render-obs", "--x", "17.5", "--y", "15", "--out", str(out)]) == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert "event=render" in capsys.readouterr().out


def test_train_finetune_eval_roundtrip(tmp_path, small_cfg, capsys):
    ck = tmp_path / "q.ckpt"
    assert main(["--config", small_cfg, "train", "--algo", "dqn", "--steps", "40",
                 "--out", str(ck), "--log", str(tmp_path / "log.csv"), "--seed", "1"]) == 0
    loaded = ckpt_io.load(ck)
    assert loaded.algo == "dqn" and loaded.extra["phase"] == "offline"
    assert loaded.config_hash == load_config(small_cfg).hash()
    assert (tmp_path / "log.csv").exists()

    ft = tmp_path / "q_ft.ckpt"
    assert main(["--config", small_cfg, "finetune", "--from", str(ck), "--steps", "0", "--out", str(ft)]) == 0
    np.testing.assert_array_equal(ckpt_io.load(ft).net.params["0.W"], loaded.net.params["0.W"])

    # a different scene changes what the policy sees; --strict turns that into an error
    other = tmp_path / "other.toml"
    other.write_text(SMALL + "[scene]\ntexture_seed = 99\n")
    capsys.readouterr()
    assert main(["--config", str(other), "finetune", "--from", str(ck), "--steps", "0", "--strict",
                 "--out", str(ft)]) == 1
    assert error_line(capsys.readouterr().err)[0] == "env_hash_mismatch"
    with pytest.warns(UserWarning, match="env hash"):
        assert main(["--config", str(other), "finetune", "--from", str(ck), "--steps", "0",
                     "--out", str(ft)]) == 0

    out = tmp_path / "ev"
    code = main(["--config", small_cfg, "eval", "--suite", "robustness", "--ckpt", f"mine={ck}",
                 "--policy", "oracle", "--out", str(out), "--assert", "sr>=0"])
    assert code == 0
    reps = {r.method: r for r in load_reports(out)}
    assert set(reps) == {"mine", "oracle"} and reps["mine"].n == 3


def test_failed_assertion_exits_1(tmp_path, small_cfg, capsys):
    code = main(["--config", small_cfg, "eval", "--suite", "robustness", "--env", "real",
                 "--policy", "random-ppo", "--assert", "sr>1.5"])
    assert code == 1
    kind, msg = error_line(capsys.readouterr().err)
    assert kind == "assertion_failed" and "random-ppo:sr" in msg


def test_missing_checkpoint(tmp_path, small_cfg, capsys):
    assert main(["--config", small_cfg, "eval", "--suite", "efficiency",
                 "--ckpt", str(tmp_path / "nope.ckpt")]) == 1
    assert error_line(capsys.readouterr().err)[0] == "checkpoint"


def test_pipeline_and_baseline(tmp_path, small_cfg, capsys):
    assert main(["--config", small_cfg, "eval", "--suite", "pipeline", "--policy", "oracle",
                 "--out", str(tmp_path / "p")]) == 0
    rep = load_reports(tmp_path / "p")[0]
    assert rep.suite == "pipeline" and rep.n == 2
    assert main(["--config", small_cfg, "baseline", "spiral", "--out", str(tmp_path / "b")]) == 0
    suites = sorted(r.suite for r in load_reports(tmp_path / "b"))
    assert suites == ["efficiency", "robustness"]


def test_report_merges_and_guards_hashes(tmp_path, small_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", small_cfg, "eval", "--suite", "robustness", "--env", "real",
                 "--policy", "oracle", "--out", str(a)]) == 0
    assert main(["eval", "--suite", "efficiency", "--env", "real", "--policy", "oracle",
                 "--out", str(b)]) == 0
    capsys.readouterr()
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "m")]) == 1
    assert error_line(capsys.readouterr().err)[0] == "mixed_config_hash"
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "m"), "--force"]) == 0
    assert len(load_reports(tmp_path / "m")) == 2
