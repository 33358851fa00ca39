"""Window-scoring anomaly detectors built on :mod:`tsadv.nets`.

Three families share one interface:

``reconstruction``
    autoencoder; score = MSE between the window and its reconstruction.
``forecast``
    predicts the last row of the window from the preceding rows.
``joint``
    ``gamma * forecast + (1 - gamma) * reconstruction`` with two networks.

Detectors operate on standardized values; ``score_series`` and the attacks
apply ``det.scaler`` to raw series themselves.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ShapeError, Tensor
from .data import Series, StandardScaler, Window, window_stack
from .nets import LayerSpec, Network, TrainConfig, network_from_state, network_new, network_state, optimize

FAMILIES = ("reconstruction", "forecast", "joint")
DETECTOR_FORMAT = "tsadv-detector"
DETECTOR_VERSION = 1
_SCORE_CHUNK = 2048


class NotCalibratedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThresholdMethod:
    """``max``, ``quantile`` (with ``q``) or ``moving_average`` (``window``, ``k``)."""

    kind: str = "quantile"
    q: float = 0.995
    window: int = 50
    k: float = 3.0

    def __post_init__(self):
        if self.kind not in ("max", "quantile", "moving_average"):
            raise ValueError(f"unknown threshold method {self.kind!r}")
        if self.kind == "quantile" and not 0 < self.q <= 1:
            raise ValueError("quantile q must lie in (0, 1]")
        if self.kind == "moving_average" and self.window < 1:
            raise ValueError("moving-average window must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "ThresholdMethod":
        """``"max"``, ``"quantile:0.995"`` or ``"moving_average:50:3"``."""
        parts = [p.strip() for p in text.split(":")]
        if parts[0] == "max" and len(parts) == 1:
            return cls("max")
        if parts[0] == "quantile" and len(parts) <= 2:
            return cls("quantile", q=float(parts[1]) if len(parts) == 2 else 0.995)
        if parts[0] == "moving_average" and len(parts) <= 3:
            window = int(parts[1]) if len(parts) > 1 else 50
            k = float(parts[2]) if len(parts) > 2 else 3.0
            return cls("moving_average", window=window, k=k)
        raise ValueError(f"cannot parse threshold method {text!r}")

    def __str__(self) -> str:
        if self.kind == "quantile":
            return f"quantile:{self.q!r}"
        if self.kind == "moving_average":
            return f"moving_average:{self.window}:{self.k!r}"
        return "max"


@dataclass
class MovingAverageRule:
    """Dynamic threshold: mean + k * std of the ``window`` preceding scores.

    ``history`` seeds the rolling window with the tail of the training scores.
    """

    window: int
    k: float
    history: np.ndarray

    def thresholds(self, scores: np.ndarray) -> np.ndarray:
        full = np.concatenate([self.history, np.asarray(scores, dtype=np.float64)])
        mean, std = kernels.rolling_mean_std(full[:-1], self.window)
        return mean + self.k * std


@dataclass
class Detector:
    family: str
    nets: dict[str, Network]
    w_len: int
    m: int
    gamma: float = 0.5
    scaler: StandardScaler | None = None
    threshold: float | None = None
    rule: MovingAverageRule | None = None
    method: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown detector family {self.family!r}")
        need = {"joint": {"forecast", "reconstruction"}}.get(self.family, {self.family})
        if set(self.nets) != need:
            raise ValueError(f"{self.family} detector needs networks {sorted(need)}, got {sorted(self.nets)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.w_len < 2 or self.m < 1:
            raise ValueError("w_len must be >= 2 and m >= 1")
        for role, net in self.nets.items():
            _net_mode(net, role, self.w_len, self.m)
        if self.scaler is None:
            self.scaler = StandardScaler.identity(self.m)

    @property
    def calibrated(self) -> bool:
        return self.rule is not None or (self.threshold is not None and np.isfinite(self.threshold))

    def networks(self) -> list[Network]:
        return [self.nets[k] for k in sorted(self.nets)]

    def spec_summary(self) -> dict:
        return {
            "family": self.family,
            "w_len": self.w_len,
            "m": self.m,
            "gamma": self.gamma,
            "layers": {k: [vars(s) for s in self.nets[k].layers] for k in sorted(self.nets)},
        }


@dataclass
class ScoreTrace:
    origin_index: np.ndarray
    scores: np.ndarray
    w_len: int
    thresholds: np.ndarray | None = None
    decisions: np.ndarray | None = None
    name: str = ""

    @property
    def threshold(self) -> float | None:
        """The static threshold, or ``None`` for dynamic / undetected traces."""
        if self.thresholds is None or len(self.thresholds) == 0:
            return None
        first = self.thresholds[0]
        return float(first) if np.all(self.thresholds == first) else None

    def __len__(self) -> int:
        return len(self.scores)

    def end_index(self) -> np.ndarray:
        return self.origin_index + self.w_len - 1


# ------------------------------------------------------------------ networks


def _net_mode(net: Network, role: str, w_len: int, m: int) -> str:
    """How ``net`` consumes a window: per timestep ("seq") or flattened ("flat")."""
    steps = w_len if role == "reconstruction" else w_len - 1
    if net.is_recurrent or net.in_dim == m:
        if net.in_dim != m or net.out_dim != m:
            raise ShapeError(f"{role} sequence network must map {m} -> {m} per step")
        return "seq"
    want_out = steps * m if role == "reconstruction" else m
    if net.in_dim != steps * m or net.out_dim != want_out:
        raise ShapeError(
            f"{role} network must map {steps * m} -> {want_out} (got {net.in_dim} -> {net.out_dim})"
        )
    return "flat"


def default_layers(
    family_role: str,
    w_len: int,
    m: int,
    hidden: int | Sequence[int] = 64,
    recurrent: bool = False,
    activation: str = "tanh",
) -> list[LayerSpec]:
    """Hidden layers of the given widths plus a linear read-out.

    ``recurrent`` makes the first hidden layer an Elman encoder running per
    timestep; otherwise the window is flattened.
    """
    widths = [hidden] if isinstance(hidden, int) else list(hidden)
    if not widths:
        raise ValueError("need at least one hidden width")
    if recurrent:
        specs = [LayerSpec("elman_rnn", m, widths[0], "tanh")]
        n_in, n_out = widths[0], m
        rest = widths[1:]
    else:
        n_in = w_len * m if family_role == "reconstruction" else (w_len - 1) * m
        n_out = w_len * m if family_role == "reconstruction" else m
        specs = []
        rest = widths
    for w in rest:
        specs.append(LayerSpec("dense", n_in, w, activation))
        n_in = w
    specs.append(LayerSpec("dense", n_in, n_out, "linear"))
    return specs


def make_detector(
    family: str,
    w_len: int,
    m: int,
    hidden: int | Sequence[int] = 64,
    seed: int = 0,
    gamma: float = 0.5,
    recurrent: bool = False,
    layers: dict[str, Sequence[LayerSpec]] | None = None,
    activation: str = "tanh",
) -> Detector:
    """Fresh, untrained detector; ``layers`` overrides the defaults per role."""
    if family not in FAMILIES:
        raise ValueError(f"unknown detector family {family!r}")
    roles = ("forecast", "reconstruction") if family == "joint" else (family,)
    nets = {}
    for i, role in enumerate(roles):
        specs = (layers or {}).get(role) or default_layers(role, w_len, m, hidden, recurrent, activation)
        nets[role] = network_new(specs, seed + i)
    return Detector(family, nets, w_len, m, gamma=gamma)


def _run(net: Network, role: str, x: Tensor, w_len: int, m: int, train: bool) -> Tensor:
    batch = x.shape[0]
    if role == "forecast":
        x = ad.take(x, 1, 0, w_len - 1)
    steps = x.shape[1]
    if _net_mode(net, role, w_len, m) == "seq":
        out = net(x, train=train)
        if role == "forecast":
            out = ad.reshape(ad.take(out, 1, steps - 1, steps), (batch, m))
        return out
    out = net(ad.reshape(x, (batch, steps * m)), train=train)
    if role == "reconstruction":
        out = ad.reshape(out, (batch, w_len, m))
    return out


def batch_losses(det: Detector, x: Tensor, targets: np.ndarray | None = None, train: bool = False) -> Tensor:
    """Per-window losses, shape ``(batch,)``, for stacked windows ``x`` (batch, w_len, m).

    ``targets`` (same shape as ``x``) pins the reference; otherwise each
    window is its own reference.
    """
    if x.data.ndim != 3 or x.shape[1:] != (det.w_len, det.m):
        raise ShapeError(f"expected windows of shape (*, {det.w_len}, {det.m}), got {x.shape}")
    ref = x if targets is None else Tensor._wrap(np.asarray(targets, dtype=np.float64))
    if ref.shape != x.shape:
        raise ShapeError(f"target shape {ref.shape} does not match windows {x.shape}")
    parts = {}
    for role, net in det.nets.items():
        pred = _run(net, role, x, det.w_len, det.m, train)
        if role == "forecast":
            tgt = ad.reshape(ad.take(ref, 1, det.w_len - 1, det.w_len), (x.shape[0], det.m))
            axes = 1
        else:
            tgt = ref
            axes = (1, 2)
        diff = ad.sub(pred, tgt)
        parts[role] = ad.reduce_mean(ad.mul(diff, diff), axis=axes)
    if det.family != "joint":
        return parts[det.family]
    return ad.add(ad.scale(parts["forecast"], det.gamma), ad.scale(parts["reconstruction"], 1.0 - det.gamma))


def _window_target(det: Detector, window: Window) -> np.ndarray | None:
    """Expand a window's stored target to a full (w_len, m) reference."""
    if window.target is None:
        return None
    tgt = np.asarray(window.target, dtype=np.float64)
    if tgt.shape == (det.w_len, det.m):
        return tgt
    if tgt.shape == (det.m,) and det.family == "forecast":
        full = np.array(window.values, dtype=np.float64)
        full[-1] = tgt
        return full
    raise ShapeError(f"window target shape {tgt.shape} does not fit the {det.family} detector")


def window_loss(det: Detector, window: Window, values: Tensor | None = None) -> Tensor:
    """Scalar loss of one window; pass ``values`` to differentiate through it."""
    x = values if values is not None else Tensor._wrap(window.values)
    if x.shape != (det.w_len, det.m):
        raise ShapeError(f"window shape {x.shape} != ({det.w_len}, {det.m})")
    tgt = _window_target(det, window)
    x3 = ad.reshape(x, (1, det.w_len, det.m))
    return ad.reshape(batch_losses(det, x3, None if tgt is None else tgt[None]), ())


def stack_scores(det: Detector, stack: np.ndarray) -> np.ndarray:
    """Scores for already-standardized stacked windows, evaluated in chunks."""
    out = np.empty(len(stack))
    for start in range(0, len(stack), _SCORE_CHUNK):
        chunk = np.ascontiguousarray(stack[start : start + _SCORE_CHUNK])
        out[start : start + len(chunk)] = batch_losses(det, Tensor._wrap(chunk)).data
    return out


# ------------------------------------------------------------------- training


def fit(det: Detector, train_windows: Sequence[Window] | np.ndarray, cfg: TrainConfig, log=None):
    """Train the detector's networks on standardized windows (no thresholding)."""
    if isinstance(train_windows, np.ndarray):
        stack = np.ascontiguousarray(train_windows, dtype=np.float64)
    else:
        if len(train_windows) == 0:
            raise ValueError("no training windows")
        stack = np.stack([w.values for w in train_windows])
    params = [p for net in det.networks() for p in net.params]

    def batch_loss(idx):
        return ad.reduce_mean(batch_losses(det, Tensor._wrap(stack[idx]), train=True))

    return optimize(params, len(stack), batch_loss, cfg, log=log)


def fit_series(det: Detector, train: Series, cfg: TrainConfig, stride: int = 4, log=None):
    """Standardize with ``det.scaler`` and fit on windows taken every ``stride`` steps."""
    stack = window_stack(det.scaler.transform(train.values), det.w_len, stride)
    return fit(det, np.ascontiguousarray(stack), cfg, log=log)


# -------------------------------------------------------------------- scoring


def score_series(det: Detector, series: Series, stride: int = 1) -> ScoreTrace:
    """One score per window (origins 0, stride, ...); decisions left empty."""
    if series.m != det.m:
        raise ShapeError(f"series has {series.m} dims, detector expects {det.m}")
    stack = window_stack(det.scaler.transform(series.values), det.w_len, stride)
    origins = np.arange(len(stack)) * stride
    return ScoreTrace(origins, stack_scores(det, stack), det.w_len, name=series.name)


def calibrate_threshold(det: Detector, train_scores, method: ThresholdMethod | str = ThresholdMethod()) -> float:
    """Set the detector's threshold from clean training scores.

    Static methods return and store the threshold.  ``moving_average``
    installs a dynamic rule and returns the threshold it would apply to the
    next score.
    """
    if isinstance(method, str):
        method = ThresholdMethod.parse(method)
    scores = np.asarray(train_scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("cannot calibrate on empty scores")
    det.method = str(method)
    if method.kind == "max":
        det.threshold, det.rule = float(scores.max()), None
    elif method.kind == "quantile":
        # "higher" keeps the flagged fraction of the calibration scores <= 1 - q
        det.threshold, det.rule = float(np.quantile(scores, method.q, method="higher")), None
    else:
        if scores.size < method.window:
            raise ValueError(f"moving_average needs at least {method.window} training scores")
        hist = scores[-method.window :].copy()
        det.rule = MovingAverageRule(method.window, method.k, hist)
        det.threshold = float(hist.mean() + method.k * hist.std())
    return det.threshold


def detect(det: Detector, trace: ScoreTrace) -> ScoreTrace:
    """Fill decisions: ``score > threshold`` (strict; ties count as normal)."""
    if not det.calibrated:
        raise NotCalibratedError("detector has no calibrated threshold")
    scores = np.asarray(trace.scores, dtype=np.float64)
    if det.rule is not None:
        thr = det.rule.thresholds(scores)
    else:
        thr = np.full(scores.shape, det.threshold)
    return ScoreTrace(trace.origin_index, scores, trace.w_len, thr, (scores > thr).astype(np.int8), trace.name)


def window_labels(series: Series, trace: ScoreTrace) -> np.ndarray:
    """Ground truth per window: the label of its last timestep."""
    if series.labels is None:
        raise ValueError(f"series {series.name!r} has no labels")
    return series.labels[trace.end_index()].astype(np.int8)


def save_trace_csv(trace: ScoreTrace, path) -> None:
    if trace.decisions is None:
        raise ValueError("trace has no decisions; run detect() first")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_index", "score", "threshold", "decision"])
        for o, s, t, d in zip(trace.origin_index, trace.scores, trace.thresholds, trace.decisions):
            w.writerow([int(o), repr(float(s)), repr(float(t)), int(d)])


# ---------------------------------------------------------------- checkpoints


def save_detector(det: Detector, path) -> None:
    meta = {
        "format": DETECTOR_FORMAT,
        "version": DETECTOR_VERSION,
        "family": det.family,
        "w_len": det.w_len,
        "m": det.m,
        "gamma": det.gamma,
        "method": det.method,
        "threshold": det.threshold,
        "rule": None if det.rule is None else {"window": det.rule.window, "k": det.rule.k},
        "nets": {},
    }
    arrays = {"scaler_mean": det.scaler.mean, "scaler_std": det.scaler.std}
    if det.rule is not None:
        arrays["rule_history"] = det.rule.history
    for role, net in det.nets.items():
        net_meta, net_arrays = network_state(net, prefix=f"{role}/")
        meta["nets"][role] = net_meta
        arrays.update(net_arrays)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_detector(path) -> Detector:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != DETECTOR_FORMAT:
            raise ValueError(f"{path} is not a detector checkpoint")
        if meta.get("version") != DETECTOR_VERSION:
            raise ValueError(f"unsupported detector checkpoint version {meta.get('version')}")
        nets = {role: network_from_state(nm, z, prefix=f"{role}/") for role, nm in meta["nets"].items()}
        scaler = StandardScaler(np.array(z["scaler_mean"]), np.array(z["scaler_std"]))
        rule = None
        if meta["rule"] is not None:
            rule = MovingAverageRule(meta["rule"]["window"], meta["rule"]["k"], np.array(z["rule_history"]))
    return Detector(
        meta["family"], nets, meta["w_len"], meta["m"], gamma=meta["gamma"], scaler=scaler,
        threshold=meta["threshold"], rule=rule, method=meta.get("method", ""),
    )
