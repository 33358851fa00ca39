"""Acceptance criteria, one test each.

Every test records a verdict line; the lines are printed in the pytest
terminal summary (and immediately with ``-s``).  Criteria 5 to 9 share
end-to-end pipeline runs on the default configuration (global seed 2).
"""
import time

import numpy as np
import pytest

from tsadv import attack as atk
from tsadv.attack import ThreatModel
from tsadv.data import fit_scaler, load_csv
from tsadv.detect import Window, detect, load_detector, make_detector, score_series, window_labels
from tsadv.evaluate import confusion, false_alarm_rate, prf1, untouched_windows
from tsadv.experiment import load_config, run_all

import conftest
from helpers import mlp_param_check

TOL = 1e-9


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ------------------------------------------------------------------ 1 to 4


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst = max(mlp_param_check(seed) for seed in range(20))
    took = time.perf_counter() - t0
    record(1, worst <= 1e-4 and took < 10, f"max rel err {worst:.2e} over 20 nets (<= 1e-4), {took:.2f}s (< 10s)")


ATTACK_NORMS = [("fgsm", "Linf"), ("fgsm", "L2"), ("fgsm", "L1"), ("pgd", "Linf"), ("pgd", "L2"),
                ("bim", "Linf"), ("bim", "L2"), ("mim", "Linf"), ("sl1d", "L1")]


def _triple(seed):
    rng = np.random.default_rng(10_000 + seed)
    family = ["reconstruction", "forecast", "joint"][seed % 3]
    w_len, m = int(rng.integers(3, 8)), int(rng.integers(1, 5))
    det = make_detector(family, w_len, m, hidden=int(rng.integers(2, 7)), seed=seed, recurrent=bool(seed % 2))
    win = Window(rng.normal(size=(w_len, m)) * rng.uniform(0.5, 3))
    return det, win, float(rng.uniform(0.01, 1.0)), float(rng.uniform(0.005, 0.6)), int(rng.integers(1, 8)), \
        ["maximize", "minimize"][int(rng.integers(2))]


def test_c02_norm_ball_containment():
    worst, checked, sat_err = -np.inf, 0, 0.0
    for seed in range(200):
        det, win, eps, alpha, steps, goal = _triple(seed)
        x = win.values[None]
        for kind, norm in ATTACK_NORMS:
            tm = ThreatModel(norm=norm, epsilon=eps, alpha=alpha, steps=steps, goal=goal, seed=seed)
            iterates = []
            atk.run_batch(kind, det, x, tm, on_step=lambda s, a: iterates.append(a.copy()))
            for a in iterates:
                worst = max(worst, atk.norms(a - x, norm)[0] - eps)
                checked += 1
        g = atk._gradient(det, x, None)[0]
        d = np.abs(atk.fgsm(det, win, ThreatModel(epsilon=eps, goal=goal)).values - win.values)
        ulp = 4 * np.spacing(np.abs(win.values).max() + eps)
        sat_err = max(sat_err, float(np.max(np.abs(d[g != 0] - eps), initial=0.0)) - ulp,
                      float(np.max(d[g == 0], initial=0.0)))
    ok = worst <= TOL and sat_err <= 0 and checked > 0
    record(2, ok, f"{checked} iterates over 200 triples, max excess {max(worst, 0):.1e} (<= 1e-9); "
                  f"FGSM-Linf saturation {'exact' if sat_err <= 0 else 'violated'}")


def test_c03_attack_identities():
    bad = []
    for seed in range(50):
        det, win, eps, alpha, steps, goal = _triple(seed)
        one = ThreatModel(epsilon=eps, alpha=eps * (1 + seed % 3), steps=1, goal=goal, random_init=False)
        f = atk.fgsm(det, win, one).values.tobytes()
        if atk.pgd(det, win, one).values.tobytes() != f or atk.bim(det, win, one).values.tobytes() != f:
            bad.append(("single-step", seed))
        tm = ThreatModel(epsilon=eps, alpha=alpha, steps=steps + 2, goal=goal)
        a, b = [], []
        atk.run_batch("mim", det, win.values[None], tm, decay=0.0, on_step=lambda s, x: a.append(x.tobytes()))
        atk.run_batch("bim", det, win.values[None], tm, on_step=lambda s, x: b.append(x.tobytes()))
        if a != b:
            bad.append(("mim", seed))
    record(3, not bad, "PGD(T=1) == BIM(T=1) == FGSM and MIM(mu=0) == BIM, bit-exact on 50 cases"
           + (f"; mismatches {bad[:5]}" if bad else ""))


def _naive(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth):
        tp += p and t
        fp += p and not t
        fn += t and not p
        tn += not p and not t
    return tp, fp, fn, tn


def test_c04_metrics_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        pred, truth = rng.integers(0, 2, n), rng.integers(0, 2, n)
        counts = _naive([bool(v) for v in pred], [bool(v) for v in truth])
        tp, fp, fn, _ = counts
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        mismatches += confusion(pred, truth) != counts or prf1(counts) != (p, r, f)
    p, r, f = prf1((4, 0, 1))
    row = (round(p, 3), round(r, 3), round(f, 3))
    ok = mismatches == 0 and row == (1.0, 0.8, 0.890)
    record(4, ok, f"oracle mismatches {mismatches}/1000; No-Attack row P={row[0]:.3f} R={row[1]:.3f} "
                  f"F1={row[2]:.3f} (expected 1.000/0.800/0.890)")


# ------------------------------------------------------------------ 5 to 9


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    t0 = time.perf_counter()
    doc = run_all(load_config(), out)
    return out, doc, time.perf_counter() - t0


def _reports(doc):
    return {r["attack"]: r for r in doc["reports"]}


def _drop(doc, name):
    r = _reports(doc)
    return r["none"]["f1"] - r[name]["f1"]


def test_c05_white_box_trend(pipeline):
    _, doc, took = pipeline
    clean = _reports(doc)["none"]["f1"]
    fgsm, pgd = _drop(doc, "fgsm"), _drop(doc, "pgd")
    ok = clean >= 0.70 and fgsm >= 0.20 and pgd >= fgsm and took <= 300
    record(5, ok, f"clean F1 {clean:.3f} (>= 0.70), FGSM drop {fgsm:.4f} (>= 0.20), "
                  f"PGD drop {pgd:.4f} (>= FGSM), pipeline {took:.0f}s (<= 300s)")


def test_c06_black_box_attenuation(pipeline):
    _, doc, _ = pipeline
    pairs = [(_drop(doc, "bb_fgsm"), _drop(doc, "fgsm")), (_drop(doc, "bb_pgd"), _drop(doc, "pgd"))]
    ok = all(0 < bb <= wb + 0.05 for bb, wb in pairs)
    record(6, ok, "black-box drop vs white-box: FGSM {:.3f} / {:.3f}, PGD {:.3f} / {:.3f} "
                  "(0 < bb <= wb + 0.05)".format(*pairs[0], *pairs[1]))


def test_c07_false_negative_goal(pipeline):
    out, doc, _ = pipeline
    rep = _reports(doc)
    recall_drop = rep["none"]["recall"] - rep["hide"]["recall"]

    import json
    det = load_detector(out / "model.ckpt")
    test, adv = load_csv(out / "data/test.csv"), load_csv(out / "adv_hide.csv")
    origins = json.loads((out / "adv_hide.csv.manifest.json").read_text())["block_origins"]
    clean_t, adv_t = detect(det, score_series(det, test)), detect(det, score_series(det, adv))
    truth = window_labels(test, clean_t)
    mask = untouched_windows(clean_t, origins, det.w_len, len(test))
    fa_change = false_alarm_rate(adv_t.decisions, truth, mask) - false_alarm_rate(clean_t.decisions, truth, mask)
    sub = [prf1(confusion(t.decisions[mask], truth[mask]))[0] for t in (clean_t, adv_t)]
    ok = recall_drop >= 0.1 and abs(fa_change) <= 0.05 and abs(sub[1] - sub[0]) <= 0.05
    record(7, ok, f"recall drop {recall_drop:.3f} (>= 0.1); on unattacked windows false-alarm change "
                  f"{fa_change:+.4f}, precision change {sub[1] - sub[0]:+.4f} (|.| <= 0.05); "
                  f"global precision change {rep['hide']['precision'] - rep['none']['precision']:+.3f} (info)")


def test_c08_l2_weakness(pipeline):
    _, doc, _ = pipeline
    l2, linf = _drop(doc, "fgsm_l2"), _drop(doc, "fgsm")
    record(8, l2 <= linf, f"FGSM-L2 drop {l2:.3f} <= FGSM-Linf drop {linf:.3f}")


def test_c09_determinism(pipeline, tmp_path_factory):
    first, _, _ = pipeline
    second = tmp_path_factory.mktemp("run_b")
    run_all(load_config(), second)
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("report.json", "scores.svg")}
    record(9, all(same.values()), "byte-identical across two runs: "
           + ", ".join(f"{k} {'yes' if v else 'no'}" for k, v in same.items()))


# ------------------------------------------------------------------ 10


def test_c10_standardization(pipeline):
    out, _, _ = pipeline
    train = load_csv(out / "data/train.csv")
    sc = fit_scaler(train)
    z = sc.transform(train.values)
    mean_err, std_err = float(np.max(np.abs(z.mean(axis=0)))), float(np.max(np.abs(z.std(axis=0) - 1)))
    record(10, mean_err < 1e-9 and std_err < 1e-6,
           f"train max |mean| {mean_err:.1e} (< 1e-9), max |std - 1| {std_err:.1e} (< 1e-6)")
