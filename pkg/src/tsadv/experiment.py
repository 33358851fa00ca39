"""Experiment configuration and the generate → train → attack → evaluate pipeline.

Configuration is an INI file.  Sections and keys (all optional)::

    [run]       seed, out, scenario
    [data]      source (synthetic|csv), train, test,
                m, train_len, test_len, anomaly_rate, freq_lo, freq_hi,
                noise_std, anomaly_kinds, spike_scale, level_shift_lo,
                level_shift_hi, correlated_pairs
    [detector]  family, hidden, activation, recurrent, w_len, gamma,
                epochs, batch_size, learning_rate, train_stride, threshold
    [transfer]  family, hidden, activation, recurrent, gamma, epochs,
                batch_size, learning_rate, train_stride, threshold, checkpoint
    [attack.NAME]  kind, mode (white-box|black-box), norm, epsilon, alpha,
                steps, goal, filter, random_init, decay, sparsity_q

``hidden`` is a comma-separated width list.  Without any ``[attack.*]``
section the default attack list is used.  Values given on the command line
as ``section.key=value`` override the file.

Seeds: every component draws ``child_seed(seed, tag)`` (see
:func:`child_seed`), so adding an attack leaves data and model seeds alone.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import attack as atk
from .data import DataError, Series, SyntheticConfig, fit_scaler, generate_synthetic, load_csv, save_csv
from .detect import (
    FAMILIES,
    Detector,
    ThresholdMethod,
    calibrate_threshold,
    detect,
    fit_series,
    load_detector,
    make_detector,
    save_detector,
    score_series,
    window_labels,
)
from .evaluate import EvalReport, compare, evaluate, render_score_plot
from .nets import ACTIVATIONS, TrainConfig
from .transfer import SurrogateSpec, build_surrogate, transfer_attack, transfer_manifest

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration; carries a file/line/key diagnostic."""


# ---------------------------------------------------------------------- seeds


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def child_seed(seed: int, tag: str) -> int:
    """``splitmix64(seed * 2**32 + crc32(tag)) mod 2**31``."""
    return _splitmix64(((int(seed) & 0xFFFFFFFF) << 32) | zlib.crc32(tag.encode())) & 0x7FFFFFFF


# --------------------------------------------------------------------- config


@dataclass
class DataSection:
    source: str = "synthetic"
    train: str = ""
    test: str = ""
    m: int = 30
    train_len: int = 8000
    test_len: int = 10000
    anomaly_rate: float = 0.011
    freq_lo: int = 40
    freq_hi: int = 50
    noise_std: float = 0.2
    anomaly_kinds: tuple = ("level_shift",)
    spike_scale: float = 4.0
    level_shift_lo: float = 0.5
    level_shift_hi: float = 1.5
    correlated_pairs: int = 0


@dataclass
class DetectorSection:
    family: str = "reconstruction"
    hidden: tuple = (64,)
    activation: str = "linear"
    recurrent: bool = False
    w_len: int = 8
    gamma: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_stride: int = 4
    threshold: str = "max"


@dataclass
class TransferSection:
    family: str = "reconstruction"
    hidden: tuple = (16,)
    activation: str = "tanh"
    recurrent: bool = True
    gamma: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_stride: int = 4
    threshold: str = "max"
    checkpoint: str = ""


@dataclass
class AttackSection:
    name: str = ""
    kind: str = "fgsm"
    mode: str = "white-box"
    norm: str = "Linf"
    epsilon: float = 0.1
    alpha: float = 0.1
    steps: int = 40
    goal: str = "maximize"
    filter: str = "all"
    random_init: bool = True
    decay: float = 1.0
    sparsity_q: float = 0.99


@dataclass
class RunSection:
    seed: int = 2
    out: str = "runs"
    scenario: str = "synthetic"


def default_attacks() -> list[AttackSection]:
    return [
        AttackSection("fgsm", "fgsm"),
        AttackSection("pgd", "pgd"),
        AttackSection("fgsm_l2", "fgsm", norm="L2"),
        AttackSection("hide", "pgd", alpha=0.01, goal="minimize", filter="anomalous_only", random_init=False),
        AttackSection("bb_fgsm", "fgsm", mode="black-box"),
        AttackSection("bb_pgd", "pgd", mode="black-box"),
    ]


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    attacks: list[AttackSection] = field(default_factory=default_attacks)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def attack(self, name: str | None) -> AttackSection:
        if name is None:
            if not self.attacks:
                raise ConfigError("config defines no attacks")
            return self.attacks[0]
        for a in self.attacks:
            if a.name == name:
                return a
        raise ConfigError(f"no attack named {name!r}; have {[a.name for a in self.attacks]}")


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that shapes results (the output directory excluded)."""
    d = cfg.to_dict()
    d["run"].pop("out")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _convert(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in _BOOL:
            raise ValueError(f"expected a boolean, got {text!r}")
        return _BOOL[text.lower()]
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        v = float(text)
        if not np.isfinite(v):
            raise ValueError("must be finite")
        return v
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(t) for t in items)
        return tuple(items)
    return text


def _fill(section_obj, items: dict[str, str], where: Callable[[str], str]):
    known = {f.name for f in dataclasses.fields(section_obj) if f.name != "name"}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"{where(key)}: unknown key {key!r}")
        try:
            setattr(section_obj, key, _convert(getattr(section_obj, key), text))
        except ValueError as exc:
            raise ConfigError(f"{where(key)}: bad value {text!r} ({exc})") from None
    return section_obj


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """1-based line of every ``key = value`` per section, for diagnostics."""
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and not s.startswith(("#", ";")):
            m = re.match(r"([^=:\s]+)\s*[=:]", s)
            if m:
                out[(section, m.group(1).lower())] = n
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> ExperimentConfig:
    """Parse an INI file (optional) and ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    label, lines = "<defaults>", {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        label, lines = str(path), _key_lines(text)
        try:
            parser.read_string(text, source=label)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
    for item in overrides:
        m = re.fullmatch(r"\s*([\w.\-]+)\.(\w+)\s*=(.*)", item)
        if not m:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        sec, key, value = m.groups()
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, value.strip())
        lines[(sec, key.lower())] = 0

    def where(sec):
        def f(key):
            n = lines.get((sec, key))
            if n == 0:
                return f"override {sec}.{key}"
            return f"{label}:{n} [{sec}] {key}" if n else f"{label} [{sec}] {key}"
        return f

    cfg = ExperimentConfig()
    attacks = []
    for sec in parser.sections():
        items = dict(parser.items(sec))
        if sec == "run":
            _fill(cfg.run, items, where(sec))
        elif sec == "data":
            _fill(cfg.data, items, where(sec))
        elif sec == "detector":
            _fill(cfg.detector, items, where(sec))
        elif sec == "transfer":
            _fill(cfg.transfer, items, where(sec))
        elif sec.startswith("attack."):
            attacks.append(_fill(AttackSection(name=sec[len("attack."):]), items, where(sec)))
        else:
            raise ConfigError(f"{label}: unknown section [{sec}]")
    if attacks:
        cfg.attacks = attacks
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d, det, tr = cfg.data, cfg.detector, cfg.transfer
    if d.source not in ("synthetic", "csv"):
        raise ConfigError("[data] source must be 'synthetic' or 'csv'")
    if d.source == "csv" and not (d.train and d.test):
        raise ConfigError("[data] source = csv needs both 'train' and 'test' paths")
    if d.source == "synthetic" and (d.train or d.test):
        raise ConfigError("[data] give either source = synthetic or csv paths, not both")
    if d.source == "synthetic":
        try:
            synthetic_config(cfg).validate()
        except ValueError as exc:
            raise ConfigError(f"[data] {exc}") from None
    for name, sec in (("detector", det), ("transfer", tr)):
        if sec.family not in FAMILIES:
            raise ConfigError(f"[{name}] family must be one of {FAMILIES}")
        if sec.activation not in ACTIVATIONS:
            raise ConfigError(f"[{name}] activation must be one of {sorted(ACTIVATIONS)}")
        if not sec.hidden or min(sec.hidden) < 1:
            raise ConfigError(f"[{name}] hidden must list positive widths")
        if sec.train_stride < 1:
            raise ConfigError(f"[{name}] train_stride must be >= 1")
        try:
            ThresholdMethod.parse(sec.threshold)
            TrainConfig(epochs=sec.epochs, batch_size=sec.batch_size, learning_rate=sec.learning_rate)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    if det.w_len < 2:
        raise ConfigError("[detector] w_len must be >= 2")
    names = [a.name for a in cfg.attacks]
    if len(set(names)) != len(names):
        raise ConfigError("attack names must be unique")
    for a in cfg.attacks:
        if a.kind == "none":
            continue
        if a.kind not in atk.ATTACKS:
            raise ConfigError(f"[attack.{a.name}] kind must be 'none' or one of {atk.ATTACKS}")
        if a.mode not in ("white-box", "black-box"):
            raise ConfigError(f"[attack.{a.name}] mode must be white-box or black-box")
        if a.filter not in atk.FILTERS:
            raise ConfigError(f"[attack.{a.name}] filter must be one of {atk.FILTERS}")
        try:
            threat_model(cfg, a)
        except ValueError as exc:
            raise ConfigError(f"[attack.{a.name}] {exc}") from None


# ------------------------------------------------------------ config → objects


def synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig:
    d = cfg.data
    return SyntheticConfig(
        m=d.m, train_len=d.train_len, test_len=d.test_len, anomaly_rate=d.anomaly_rate,
        base_freq_range=(d.freq_lo, d.freq_hi), noise_std=d.noise_std, anomaly_kinds=tuple(d.anomaly_kinds),
        spike_scale=d.spike_scale, level_shift_scale=(d.level_shift_lo, d.level_shift_hi),
        correlated_pairs=d.correlated_pairs, w_len=cfg.detector.w_len, seed=child_seed(cfg.run.seed, "data"),
    )


def threat_model(cfg: ExperimentConfig, a: AttackSection) -> atk.ThreatModel:
    return atk.ThreatModel(norm=a.norm, epsilon=a.epsilon, alpha=a.alpha, steps=a.steps, goal=a.goal,
                           random_init=a.random_init, seed=child_seed(cfg.run.seed, f"attack:{a.name}"))


def _train_cfg(sec, seed: int) -> TrainConfig:
    return TrainConfig(epochs=sec.epochs, batch_size=sec.batch_size, learning_rate=sec.learning_rate, seed=seed)


def surrogate_spec(cfg: ExperimentConfig) -> SurrogateSpec:
    t = cfg.transfer
    return SurrogateSpec(
        family=t.family, train_cfg=_train_cfg(t, child_seed(cfg.run.seed, "surrogate-train")),
        w_len=cfg.detector.w_len, hidden=tuple(t.hidden), recurrent=t.recurrent, activation=t.activation,
        gamma=t.gamma, train_stride=t.train_stride, threshold=t.threshold,
        seed=child_seed(cfg.run.seed, "surrogate"),
    )


# ------------------------------------------------------------------ manifests


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_manifest(artifact: Path, cfg: ExperimentConfig, **extra) -> Path:
    """``<artifact>.manifest.json`` with config hash and seed."""
    path = Path(f"{artifact}.manifest.json")
    write_json(path, {"artifact": Path(artifact).name, "config_hash": config_hash(cfg),
                      "seed": cfg.run.seed, **extra})
    return path


# ------------------------------------------------------------------- pipeline


def gen_data(cfg: ExperimentConfig, out_dir: Path) -> tuple[Series, Series]:
    """Write ``train.csv``, ``test.csv`` and ``manifest.json`` into ``out_dir``."""
    if cfg.data.source != "synthetic":
        raise ConfigError("gen-data needs [data] source = synthetic")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scfg = synthetic_config(cfg)
    train, test = generate_synthetic(scfg)
    train = dataclasses.replace(train, labels=None)  # training data is anomaly-free; no label column
    save_csv(train, out_dir / "train.csv")
    save_csv(test, out_dir / "test.csv")
    write_json(out_dir / "manifest.json", {
        "artifacts": ["train.csv", "test.csv"],
        "config_hash": config_hash(cfg),
        "seed": cfg.run.seed,
        "data_seed": scfg.seed,
        "train_rows": len(train),
        "test_rows": len(test),
        "m": train.m,
        "anomaly_fraction": float(test.labels.mean()),
        "events": [list(e) for e in test.events],
    })
    return train, test


def load_series(path: str | Path) -> Series:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file {path} does not exist")
    return load_csv(path)


def load_data(cfg: ExperimentConfig) -> tuple[Series, Series]:
    if cfg.data.source == "csv":
        return load_series(cfg.data.train), load_series(cfg.data.test)
    return generate_synthetic(synthetic_config(cfg))


def train_detector(cfg: ExperimentConfig, train: Series, log=None) -> Detector:
    """Fit the configured detector and calibrate its threshold on train scores."""
    s = cfg.detector
    det = make_detector(s.family, s.w_len, train.m, hidden=tuple(s.hidden), gamma=s.gamma,
                        recurrent=s.recurrent, activation=s.activation,
                        seed=child_seed(cfg.run.seed, "detector"))
    det.scaler = fit_scaler(train)
    fit_series(det, train, _train_cfg(s, child_seed(cfg.run.seed, "train")), stride=s.train_stride, log=log)
    calibrate_threshold(det, score_series(det, train).scores, s.threshold)
    return det


def train_surrogate(cfg: ExperimentConfig, train: Series, victim: Detector | None = None) -> Detector:
    return build_surrogate(surrogate_spec(cfg), train, victim)


def calibration_info(det: Detector) -> dict:
    return {"method": det.method, "threshold": det.threshold, "family": det.family,
            "w_len": det.w_len, "m": det.m}


def run_attack(cfg: ExperimentConfig, a: AttackSection, victim: Detector, series: Series,
               surrogate: Detector | None = None) -> tuple[Series, dict]:
    """Perturb ``series`` per attack section ``a``; returns (series, manifest dict)."""
    if a.kind == "none":
        return series, {"attack": "none"}
    tm = threat_model(cfg, a)
    opts = {}
    if a.kind == "mim":
        opts["decay"] = a.decay
    if a.kind == "sl1d":
        opts["sparsity_q"] = a.sparsity_q
    if a.mode == "black-box":
        if surrogate is None:
            raise ConfigError(f"attack {a.name!r} is black-box but no surrogate is available")
        res = transfer_attack(surrogate, victim, series, tm, a.kind, a.filter, **opts)
        info = transfer_manifest(surrogate, victim, a.kind, tm, res)
    else:
        res = atk.attack_series(victim, series, tm, a.kind, a.filter, **opts)
        info = atk.manifest(a.kind, tm, res, mode="white-box")
    info.update(name=a.name, filter=a.filter)
    return res.series, info


def evaluate_datasets(cfg: ExperimentConfig, det: Detector, datasets: list[tuple[str, Series, dict]]):
    """Score each (attack name, series, threat) triple; the first is the clean baseline.

    Returns (reports, degradation summaries, detected traces by name).
    """
    reports, traces = [], {}
    for name, series, threat in datasets:
        trace = detect(det, score_series(det, series))
        trace.name = name
        traces[name] = trace
        reports.append(evaluate(trace, window_labels(series, trace), cfg.run.scenario, attack=name,
                                threat=threat, seed=cfg.run.seed))
    summaries = [compare(reports[0], r) for r in reports[1:]]
    return reports, summaries, traces


def report_document(cfg: ExperimentConfig, reports: list[EvalReport], summaries) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.run.seed,
            "reports": [r.to_dict() for r in reports], "degradation": [s.to_dict() for s in summaries]}


def threat_summary(a: AttackSection) -> dict:
    if a.kind == "none":
        return {}
    return {"kind": a.kind, "mode": a.mode, "norm": a.norm, "epsilon": a.epsilon, "alpha": a.alpha,
            "steps": a.steps, "goal": a.goal, "filter": a.filter}


def run_all(cfg: ExperimentConfig, out_dir: str | Path, log: Callable[[str], None] | None = None) -> dict:
    """Whole pipeline into ``out_dir``: data, models, adversarial CSVs, report, plot."""
    say = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.data.source == "synthetic":
        train, test = gen_data(cfg, out / "data")
        say(f"data: {len(train)} train / {len(test)} test rows")
    else:
        train, test = load_data(cfg)
    det = train_detector(cfg, train)
    save_detector(det, out / "model.ckpt")
    write_json(out / "model.calibration.json", calibration_info(det))
    write_manifest(out / "model.ckpt", cfg)
    say(f"detector trained, threshold {det.threshold:.6g}")

    surrogate = None
    if any(a.mode == "black-box" and a.kind != "none" for a in cfg.attacks):
        surrogate = train_surrogate(cfg, train, det)
        save_detector(surrogate, out / "surrogate.ckpt")
        write_manifest(out / "surrogate.ckpt", cfg, role="surrogate")
        say("surrogate trained")

    datasets = [("none", test, {})]
    for a in cfg.attacks:
        adv, info = run_attack(cfg, a, det, test, surrogate)
        path = out / f"adv_{a.name}.csv"
        if a.kind == "none":
            src = out / "data" / "test.csv" if cfg.data.source == "synthetic" else Path(cfg.data.test)
            shutil.copyfile(src, path)
        else:
            save_csv(adv, path)
        write_manifest(path, cfg, **info)
        datasets.append((a.name, adv, threat_summary(a)))
        say(f"attack {a.name} done")

    reports, summaries, traces = evaluate_datasets(cfg, det, datasets)
    doc = report_document(cfg, reports, summaries)
    write_json(out / "report.json", doc)
    write_manifest(out / "report.json", cfg)
    plot = {"clean": traces["none"]}
    plot.update({k: v for k, v in traces.items() if k != "none"})
    render_score_plot(plot, out / "scores.svg", labels=window_labels(test, traces["none"]))
    write_manifest(out / "scores.svg", cfg)
    return doc
