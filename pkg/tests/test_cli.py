"""End-to-end checks of the ``tsadv`` subcommands on a small configuration."""
import json
import textwrap

import numpy as np
import pytest

from tsadv import cli
from tsadv.data import fit_scaler, load_csv
from tsadv.detect import load_detector, score_series

SMALL = textwrap.dedent("""\
    [run]
    seed = 5

    [data]
    m = 4
    train_len = 600
    test_len = 800
    anomaly_rate = 0.02

    [detector]
    hidden = 8
    epochs = 3
    threshold = quantile:0.95

    [transfer]
    hidden = 4
    epochs = 2

    [attack.fgsm]
    kind = fgsm

    [attack.pgd]
    kind = pgd
    alpha = 0.05
    steps = 3

    [attack.hide]
    kind = pgd
    goal = minimize
    filter = anomalous_only
    steps = 2

    [attack.bb]
    kind = fgsm
    mode = black-box

    [attack.nothing]
    kind = none
""")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.ini"
    cfg.write_text(SMALL)
    assert run("gen-data", "--config", cfg, "--out", d / "data") == 0
    assert run("train", "--config", cfg, "--data", d / "data", "--out", d / "model.ckpt") == 0
    return d, cfg


def test_gen_data_default_shape(tmp_path):
    assert run("gen-data", "--out", tmp_path / "a" / "b") == 0
    train, test = load_csv(tmp_path / "a/b/train.csv"), load_csv(tmp_path / "a/b/test.csv")
    assert train.values.shape == (8000, 30) and train.labels is None
    assert test.values.shape == (10000, 30) and test.labels is not None
    man = json.loads((tmp_path / "a/b/manifest.json").read_text())
    assert man["seed"] == 2 and len(man["config_hash"]) == 16


def test_gen_data_deterministic(work, tmp_path):
    d, cfg = work
    assert run("gen-data", "--config", cfg, "--out", tmp_path) == 0
    for name in ("train.csv", "test.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (d / "data" / name).read_bytes()


def test_train_quantile_fraction_and_reload(work):
    d, _ = work
    det = load_detector(d / "model.ckpt")
    train = load_csv(d / "data/train.csv")
    flagged = np.mean(score_series(det, train).scores > det.threshold)
    assert flagged <= 1 - 0.95
    calib = json.loads((d / "model.ckpt.calibration.json").read_text())
    assert calib["method"] == "quantile:0.95" and calib["threshold"] == det.threshold
    test = load_csv(d / "data/test.csv")
    again = load_detector(d / "model.ckpt")
    assert score_series(det, test).scores.tobytes() == score_series(again, test).scores.tobytes()
    assert (d / "model.ckpt.manifest.json").is_file()


def test_two_seeds_give_different_checkpoints(work, tmp_path):
    d, cfg = work
    assert run("train", "--config", cfg, "--seed", 6, "--data", d / "data", "--out", tmp_path / "m6.ckpt") == 0
    assert (tmp_path / "m6.ckpt").read_bytes() != (d / "model.ckpt").read_bytes()


def test_attack_linf_containment_in_files(work, tmp_path):
    d, cfg = work
    out = tmp_path / "adv.csv"
    assert run("attack", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv",
               "--out", out, "--attack", "pgd") == 0
    clean, adv = load_csv(d / "data/test.csv"), load_csv(out)
    delta = np.abs(adv.values - clean.values)
    std = fit_scaler(load_csv(d / "data/train.csv")).std
    assert np.all(delta <= 0.1 * std + 1e-9)  # epsilon lives in standardized units
    assert np.all(delta <= 0.1 + 1e-9)
    assert delta.max() > 0
    assert np.array_equal(adv.labels, clean.labels)
    man = json.loads((tmp_path / "adv.csv.manifest.json").read_text())
    assert man["attack"] == "pgd" and man["threat_model"]["epsilon"] == 0.1 and man["seed"] == 5


def test_attack_none_is_byte_copy(work, tmp_path):
    d, cfg = work
    out = tmp_path / "same.csv"
    assert run("attack", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv",
               "--out", out, "--attack", "nothing") == 0
    assert out.read_bytes() == (d / "data/test.csv").read_bytes()


def test_minimize_on_label_free_data_is_an_error(work, tmp_path):
    d, cfg = work
    code = run("attack", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/train.csv",
               "--out", tmp_path / "x.csv", "--attack", "hide")
    assert code == cli.EXIT_DATA and not (tmp_path / "x.csv").exists()


@pytest.mark.parametrize("eps", ["0", "-0.1"])
def test_non_positive_epsilon_is_config_error(work, tmp_path, eps):
    d, cfg = work
    code = run("attack", "--config", cfg, "--set", f"attack.fgsm.epsilon={eps}", "--model", d / "model.ckpt",
               "--data", d / "data/test.csv", "--out", tmp_path / "x.csv")
    assert code == cli.EXIT_CONFIG


def test_missing_checkpoint(work, tmp_path):
    d, cfg = work
    code = run("attack", "--config", cfg, "--model", tmp_path / "nope.ckpt", "--data", d / "data/test.csv",
               "--out", tmp_path / "x.csv")
    assert code == cli.EXIT_DATA


def test_black_box_needs_surrogate(work, tmp_path):
    d, cfg = work
    args = ["attack", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv",
            "--out", tmp_path / "bb.csv", "--attack", "bb"]
    assert run(*args) == cli.EXIT_CONFIG
    assert run("train", "--config", cfg, "--surrogate", "--data", d / "data", "--out", tmp_path / "s.ckpt") == 0
    assert run(*args, "--surrogate", tmp_path / "s.ckpt") == 0
    man = json.loads((tmp_path / "bb.csv.manifest.json").read_text())
    assert man["mode"] == "black-box" and man["surrogate_spec_hash"] != man["victim_spec_hash"]


def test_eval_clean_only_and_with_adversarial(work, tmp_path):
    d, cfg = work
    assert run("eval", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv",
               "--out", tmp_path / "r.json") == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert [r["attack"] for r in doc["reports"]] == ["none"] and doc["degradation"] == []

    adv = tmp_path / "adv_pgd.csv"
    assert run("attack", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv",
               "--out", adv, "--attack", "pgd") == 0
    svgs = []
    for k in range(2):
        assert run("eval", "--config", cfg, "--model", d / "model.ckpt", "--data", d / "data/test.csv", adv,
                   "--out", tmp_path / f"r{k}.json", "--plot", tmp_path / f"p{k}.svg") == 0
        svgs.append((tmp_path / f"p{k}.svg").read_bytes())
    assert svgs[0] == svgs[1] and svgs[0].startswith(b"<?xml")
    doc = json.loads((tmp_path / "r0.json").read_text())
    assert [r["attack"] for r in doc["reports"]] == ["none", "pgd"]
    assert doc["reports"][1]["threat"]["epsilon"] == 0.1
    assert doc["degradation"][0]["attack"] == "pgd"


def test_eval_unreadable_input(work, tmp_path):
    d, cfg = work
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,f1,f2,f3,label\n1,2,x,4,0\n")
    code = run("eval", "--config", cfg, "--model", d / "model.ckpt", "--data", bad, "--out", tmp_path / "r.json")
    assert code == cli.EXIT_DATA


def test_config_errors_name_line_and_key(tmp_path, caplog):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\nseed = 1\n\n[detector]\nepochs = 3\nwidth = 9\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert f"{cfg}:6 [detector] width" in caplog.text
    cfg.write_text("[data]\nnoise_std = loud\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert f"{cfg}:2 [data] noise_std" in caplog.text
    assert run("gen-data", "--set", "data.m", "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert run("gen-data", "--config", tmp_path / "missing.ini") == cli.EXIT_CONFIG


def test_flag_beats_file(work, tmp_path):
    _, cfg = work
    assert run("gen-data", "--config", cfg, "--set", "data.m=2", "--out", tmp_path) == 0
    assert load_csv(tmp_path / "train.csv").m == 2


def test_env_out_dir(work, tmp_path, monkeypatch):
    _, cfg = work
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert run("gen-data", "--config", cfg) == 0
    assert (tmp_path / "env/train.csv").is_file()
    assert run("gen-data", "--config", cfg, "--out", "sub") == 0
    assert (tmp_path / "env/sub/test.csv").is_file()
