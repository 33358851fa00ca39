"""Gradient-based perturbations of detector inputs inside a norm ball.

All attacks work on standardized windows stacked as ``(batch, w_len, m)``
arrays; norms and projections are taken per window.  The single-window
functions (:func:`fgsm`, :func:`pgd`, ...) wrap the batched cores.

``goal="maximize"`` raises the detector loss (normal windows flagged as
anomalies); ``goal="minimize"`` lowers it (anomalies slip through).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import NonFiniteError, Tensor
from .data import Series, Window, window_stack
from .detect import Detector, batch_losses

NORMS = ("Linf", "L2", "L1")
GOALS = ("maximize", "minimize")
ATTACKS = ("fgsm", "pgd", "bim", "mim", "sl1d")
FILTERS = ("all", "normal_only", "anomalous_only")
BALL_SLACK = 1e-9


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "Linf"
    epsilon: float = 0.1
    alpha: float = 0.1
    steps: int = 40
    goal: str = "maximize"
    random_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ValueError("epsilon must be > 0")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.goal not in GOALS:
            raise ValueError(f"goal must be one of {GOALS}")

    @property
    def sign(self) -> float:
        return 1.0 if self.goal == "maximize" else -1.0

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------- norm helpers


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def norms(eta: np.ndarray, norm: str) -> np.ndarray:
    """Per-window norm of a stacked perturbation."""
    f = np.abs(_flat(eta))
    if norm == "Linf":
        return f.max(axis=1)
    if norm == "L2":
        return np.sqrt((f * f).sum(axis=1))
    return f.sum(axis=1)


def _safe_normalize(d: np.ndarray, norm: str) -> np.ndarray:
    """``d / ||d||`` per window, zero where the norm vanishes."""
    n = norms(d, norm).reshape((-1,) + (1,) * (d.ndim - 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)


def project(eta, norm: str, epsilon: float) -> np.ndarray:
    """Euclidean projection of one perturbation (any shape) onto the ``norm``
    ball of radius ``epsilon``.  Idempotent."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    eta = np.asarray(eta, dtype=np.float64)
    return _project_stack(eta.reshape(1, -1), norm, epsilon).reshape(eta.shape)


def _project_stack(eta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    if norm == "Linf":
        return np.clip(eta, -epsilon, epsilon)
    if norm == "L2":
        n = norms(eta, "L2").reshape((-1,) + (1,) * (eta.ndim - 1))
        factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        return eta * factor
    if norm == "L1":
        flat = np.ascontiguousarray(_flat(eta))
        return kernels.project_l1_rows(flat, float(epsilon)).reshape(eta.shape)
    raise ValueError(f"unknown norm {norm!r}")


# ------------------------------------------------------------------ gradients


def _gradient(det: Detector, x: np.ndarray, targets: np.ndarray | None) -> np.ndarray:
    """d(sum of per-window losses)/dx; each window's slice is its own gradient."""

    def loss_fn(leaf: Tensor) -> Tensor:
        return ad.reduce_sum(batch_losses(det, leaf, targets))

    return ad.input_grad(loss_fn, x)


def _checked(det, x, targets, step: int) -> np.ndarray:
    try:
        return _gradient(det, x, targets)
    except NonFiniteError as exc:
        raise NonFiniteError(f"attack aborted at step {step}: {exc}") from None


# ------------------------------------------------------------- batched cores
# Each core takes standardized stacked windows ``x`` (batch, w_len, m) and
# returns the adversarial stack.  ``on_step`` (if given) sees every iterate.

StepHook = Callable[[int, np.ndarray], None]


def fgsm_batch(det, x, tm: ThreatModel, targets=None, on_step: StepHook | None = None) -> np.ndarray:
    d = tm.sign * _checked(det, x, targets, 0)
    if tm.norm == "Linf":
        eta = tm.epsilon * np.sign(d)
    else:
        eta = tm.epsilon * _safe_normalize(d, tm.norm)
    adv = x + eta
    if on_step is not None:
        on_step(0, adv)
    return adv


def _iterate(det, x, tm: ThreatModel, targets, eta0, direction, on_step) -> np.ndarray:
    eta = eta0
    for step in range(tm.steps):
        d = tm.sign * _checked(det, x + eta, targets, step)
        eta = _project_stack(eta + tm.alpha * direction(d, step), tm.norm, tm.epsilon)
        if on_step is not None:
            on_step(step, x + eta)
    return x + eta


def _random_start(x: np.ndarray, tm: ThreatModel) -> np.ndarray:
    rng = np.random.default_rng(tm.seed)
    if tm.norm == "Linf":
        return rng.uniform(-tm.epsilon, tm.epsilon, size=x.shape)
    # uniform in the L2 ball: Gaussian direction, radius eps * u^(1/d)
    dims = int(np.prod(x.shape[1:]))
    g = rng.standard_normal(x.shape)
    u = rng.uniform(0.0, 1.0, size=x.shape[0])
    radius = tm.epsilon * u ** (1.0 / dims)
    return _safe_normalize(g, "L2") * radius.reshape((-1,) + (1,) * (x.ndim - 1))


def _ascent_direction(norm: str):
    if norm == "Linf":
        return lambda d, step: np.sign(d)
    return lambda d, step: _safe_normalize(d, "L2")


def pgd_batch(det, x, tm: ThreatModel, targets=None, on_step: StepHook | None = None) -> np.ndarray:
    if tm.norm not in ("Linf", "L2"):
        raise ValueError("pgd supports Linf and L2 only")
    eta0 = _random_start(x, tm) if tm.random_init else np.zeros_like(x)
    return _iterate(det, x, tm, targets, eta0, _ascent_direction(tm.norm), on_step)


def bim_batch(det, x, tm: ThreatModel, targets=None, on_step: StepHook | None = None) -> np.ndarray:
    """PGD started at the original input; ``tm.random_init`` is ignored."""
    return pgd_batch(det, x, replace(tm, random_init=False), targets, on_step)


def mim_batch(det, x, tm: ThreatModel, targets=None, decay: float = 1.0, on_step: StepHook | None = None):
    """Momentum iterative method (Linf): accumulate L1-normalized gradients."""
    if decay < 0:
        raise ValueError("decay must be >= 0")
    if tm.norm != "Linf":
        raise ValueError("mim is an Linf attack")
    momentum = np.zeros_like(x)

    def direction(d, step):
        nonlocal momentum
        momentum = decay * momentum + _safe_normalize(d, "L1")
        return np.sign(momentum)

    return _iterate(det, x, tm, targets, np.zeros_like(x), direction, on_step)


def sl1d_batch(det, x, tm: ThreatModel, targets=None, sparsity_q: float = 0.99, on_step: StepHook | None = None):
    """Sparse L1 descent: step only along the top-|gradient| coordinates."""
    if not 0.0 <= sparsity_q < 1.0:
        raise ValueError("sparsity_q must lie in [0, 1)")
    if tm.norm != "L1":
        raise ValueError("sl1d is an L1 attack")
    eta = np.zeros_like(x)
    active = np.ones(x.shape[0], dtype=bool)
    for step in range(tm.steps):
        d = _flat(tm.sign * _checked(det, x + eta, targets, step))
        mag = np.abs(d)
        cut = np.quantile(mag, sparsity_q, axis=1, keepdims=True)
        keep = (mag >= cut) & (mag > 0)
        counts = keep.sum(axis=1)
        active &= counts > 0
        if not active.any():
            break
        direction = np.where(keep, np.sign(d), 0.0) / np.maximum(counts, 1)[:, None]
        direction[~active] = 0.0
        eta = _project_stack(eta + tm.alpha * direction.reshape(x.shape), "L1", tm.epsilon)
        if on_step is not None:
            on_step(step, x + eta)
    return x + eta


_CORES = {"fgsm": fgsm_batch, "pgd": pgd_batch, "bim": bim_batch, "mim": mim_batch, "sl1d": sl1d_batch}


def run_batch(kind: str, det, x, tm: ThreatModel, targets=None, on_step=None, **opts) -> np.ndarray:
    """Dispatch to a batched attack by name (``opts``: ``decay``, ``sparsity_q``)."""
    if kind not in _CORES:
        raise ValueError(f"unknown attack {kind!r}; choose from {ATTACKS}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _CORES[kind](det, x, tm, targets, on_step=on_step, **opts)


# ------------------------------------------------------- single-window API


def _single(kind: str, det: Detector, window: Window, tm: ThreatModel, **opts) -> Window:
    from .detect import _window_target

    tgt = _window_target(det, window)
    adv = run_batch(kind, det, window.values[None], tm, None if tgt is None else tgt[None], **opts)
    return Window(adv[0], origin_index=window.origin_index, target=window.target, label=window.label)


def fgsm(det: Detector, window: Window, tm: ThreatModel) -> Window:
    return _single("fgsm", det, window, tm)


def pgd(det: Detector, window: Window, tm: ThreatModel) -> Window:
    return _single("pgd", det, window, tm)


def bim(det: Detector, window: Window, tm: ThreatModel) -> Window:
    return _single("bim", det, window, tm)


def mim(det: Detector, window: Window, tm: ThreatModel, decay: float = 1.0) -> Window:
    return _single("mim", det, window, tm, decay=decay)


def sl1d(det: Detector, window: Window, tm: ThreatModel, sparsity_q: float = 0.99) -> Window:
    return _single("sl1d", det, window, tm, sparsity_q=sparsity_q)


# -------------------------------------------------------------- whole series


@dataclass
class SeriesAttack:
    series: Series
    origins: np.ndarray  # origin of every perturbed block
    eta_norms: np.ndarray  # per perturbed block, in the threat model's norm


def attack_series(
    det: Detector,
    series: Series,
    tm: ThreatModel,
    attack_kind: str = "fgsm",
    target_filter: str = "all",
    **opts,
) -> SeriesAttack:
    """Perturb a raw series block by block (stride = w_len).

    Blocks are the non-overlapping windows at origins 0, w_len, 2*w_len, ...;
    a block is attacked when its label (last timestep) passes
    ``target_filter``.  The perturbation is computed in the detector's
    standardized units and mapped back to raw units.
    """
    if target_filter not in FILTERS:
        raise ValueError(f"target_filter must be one of {FILTERS}")
    if target_filter != "all" and series.labels is None:
        raise ValueError(f"target_filter={target_filter!r} needs labels, series {series.name!r} has none")
    if series.m != det.m:
        raise ValueError(f"series has {series.m} dims, detector expects {det.m}")
    w = det.w_len
    z = det.scaler.transform(series.values)
    blocks = window_stack(z, w, w)
    origins = np.arange(len(blocks)) * w
    if target_filter == "all":
        chosen = np.ones(len(blocks), dtype=bool)
    else:
        last = series.labels[origins + w - 1]
        chosen = last == (1 if target_filter == "anomalous_only" else 0)
    idx = np.flatnonzero(chosen)
    z_adv = z.copy()
    eta_norms = np.zeros(0)
    if idx.size:
        x = np.ascontiguousarray(blocks[idx])
        adv = run_batch(attack_kind, det, x, tm, **opts)
        eta = adv - x
        eta_norms = norms(eta, tm.norm)
        for j, o in enumerate(origins[idx]):
            z_adv[o : o + w] = adv[j]
    values = det.scaler.inverse(z_adv)
    untouched = np.ones(len(series), dtype=bool)
    for o in origins[idx]:
        untouched[o : o + w] = False
    values[untouched] = series.values[untouched]
    out = Series(values, None if series.labels is None else series.labels.copy(),
                 name=f"{series.name}+{attack_kind}", events=list(series.events))
    return SeriesAttack(out, origins[idx], eta_norms)


def manifest(kind: str, tm: ThreatModel, result: SeriesAttack, **extra) -> dict:
    n = result.eta_norms
    stats = {
        "blocks": int(n.size),
        "norm_min": float(n.min()) if n.size else 0.0,
        "norm_mean": float(n.mean()) if n.size else 0.0,
        "norm_max": float(n.max()) if n.size else 0.0,
    }
    out = {"attack": kind, "threat_model": tm.to_dict(), "eta_norms": stats,
           "per_window_norms": [float(v) for v in n], "block_origins": [int(o) for o in result.origins]}
    out.update(extra)
    return out


def spec_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
