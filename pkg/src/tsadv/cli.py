"""``tsadv`` command line: gen-data, train, attack, eval, run.

Exit codes: 0 success, 2 configuration error, 3 data error (unreadable or
inconsistent inputs, missing checkpoints), 4 numeric abort (non-finite
loss or gradient).

Relative ``--out`` paths are resolved against ``$TSADV_OUT`` when it is
set.  Directory outputs (``gen-data``, ``run``) default to ``$TSADV_OUT``
and then to ``[run] out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import experiment as ex
from .autodiff import NonFiniteError, ShapeError
from .data import DataError, save_csv
from .detect import load_detector, save_detector, window_labels
from .evaluate import render_score_plot

log = logging.getLogger("tsadv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT = "TSADV_OUT"


def _out_file(path: str) -> Path:
    p = Path(path)
    env = os.environ.get(ENV_OUT)
    if env and not p.is_absolute():
        p = Path(env) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(flag: str | None, cfg: ex.ExperimentConfig) -> Path:
    if flag:
        env = os.environ.get(ENV_OUT)
        return Path(env) / flag if env and not Path(flag).is_absolute() else Path(flag)
    return Path(os.environ.get(ENV_OUT) or cfg.run.out)


def _config(args) -> ex.ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return ex.load_config(args.config, overrides)


def _load_model(path: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint {p} does not exist")
    try:
        return load_detector(p)
    except (OSError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {p}: {exc}") from None


def _train_series(path: str):
    p = Path(path)
    return ex.load_series(p / "train.csv" if p.is_dir() else p)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out, cfg)
    train, test = ex.gen_data(cfg, out)
    log.info("wrote %s (%d train rows, %d test rows, %.2f%% anomalous)", out, len(train), len(test),
             100 * test.labels.mean())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train = _train_series(args.data)
    out = _out_file(args.out)
    if args.surrogate:
        det = ex.train_surrogate(cfg, train)
        role = "surrogate"
    else:
        det = ex.train_detector(cfg, train, log=lambda e, l: log.debug("epoch %d loss %.6g", e, l))
        role = "victim"
    save_detector(det, out)
    calib = Path(f"{out}.calibration.json")
    ex.write_json(calib, ex.calibration_info(det))
    ex.write_manifest(out, cfg, role=role, data=Path(args.data).name)
    ex.write_manifest(calib, cfg, role=role)
    log.info("%s detector saved to %s (threshold %.6g)", role, out, det.threshold)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    a = cfg.attack(args.attack)
    out = _out_file(args.out)
    src = Path(args.data)
    if a.kind == "none":
        if not src.is_file():
            raise DataError(f"data file {src} does not exist")
        shutil.copyfile(src, out)
        ex.write_manifest(out, cfg, attack="none", name=a.name)
        return EXIT_OK
    victim = _load_model(args.model)
    series = ex.load_series(src)
    surrogate = None
    if a.mode == "black-box":
        sur_path = args.surrogate or cfg.transfer.checkpoint
        if not sur_path:
            raise ex.ConfigError(f"attack {a.name!r} is black-box: pass --surrogate or set [transfer] checkpoint")
        surrogate = _load_model(sur_path)
    if series.m != victim.m:
        raise DataError(f"{src} has {series.m} features, model expects {victim.m}")
    adv, info = ex.run_attack(cfg, a, victim, series, surrogate)
    save_csv(adv, out)
    ex.write_manifest(out, cfg, **info)
    log.info("attack %s (%s) wrote %s", a.name, a.mode, out)
    return EXIT_OK


def _dataset_meta(path: Path) -> tuple[str, dict]:
    man = Path(f"{path}.manifest.json")
    if man.is_file():
        info = json.loads(man.read_text())
        tm = info.get("threat_model") or {}
        return info.get("name") or info.get("attack") or path.stem, tm
    return path.stem, {}


def cmd_eval(args) -> int:
    cfg = _config(args)
    det = _load_model(args.model)
    paths = [Path(p) for p in args.data]
    datasets = []
    for i, p in enumerate(paths):
        series = ex.load_series(p)
        if series.labels is None:
            raise DataError(f"{p} has no label column; evaluation needs ground truth")
        if series.m != det.m:
            raise DataError(f"{p} has {series.m} features, model expects {det.m}")
        name, tm = ("none", {}) if i == 0 else _dataset_meta(p)
        datasets.append((name, series, tm))
    names = [d[0] for d in datasets]
    if len(set(names)) != len(names):
        raise DataError(f"dataset names must be distinct, got {names}")
    reports, summaries, traces = ex.evaluate_datasets(cfg, det, datasets)
    out = _out_file(args.out)
    ex.write_json(out, ex.report_document(cfg, reports, summaries))
    ex.write_manifest(out, cfg, inputs=[p.name for p in paths])
    for r in reports:
        log.info("%-12s P=%.3f R=%.3f F1=%.3f", r.attack, r.precision, r.recall, r.f1)
    if args.plot:
        plot = _out_file(args.plot)
        named = {("clean" if k == "none" else k): v for k, v in traces.items()}
        render_score_plot(named, plot, labels=window_labels(datasets[0][1], traces["none"]))
        ex.write_manifest(plot, cfg)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out, cfg)
    doc = ex.run_all(cfg, out, log=log.info)
    for r in doc["reports"]:
        log.info("%-12s P=%.3f R=%.3f F1=%.3f", r["attack"], r["precision"], r["recall"], r["f1"])
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsadv", description="Adversarial attacks on time-series anomaly detectors.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, help="global seed (same as --set run.seed=N)")

    sp = sub.add_parser("gen-data", help="write synthetic train.csv / test.csv")
    common(sp)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="fit and calibrate a detector")
    common(sp)
    sp.add_argument("--data", required=True, help="train CSV or a directory holding train.csv")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--surrogate", action="store_true", help="train the [transfer] surrogate instead")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="perturb a CSV series")
    common(sp)
    sp.add_argument("--model", required=True, help="victim checkpoint")
    sp.add_argument("--data", required=True, help="series CSV to perturb")
    sp.add_argument("--out", required=True, help="adversarial CSV path")
    sp.add_argument("--attack", help="name of the [attack.NAME] section (default: first)")
    sp.add_argument("--surrogate", help="surrogate checkpoint for black-box attacks")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("eval", help="score datasets and report metrics")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, nargs="+", help="clean CSV first, then adversarial variants")
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--plot", help="optional SVG score plot")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run", help="whole pipeline into one directory")
    common(sp)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ShapeError, FileNotFoundError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
