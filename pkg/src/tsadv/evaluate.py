"""Point-wise detection metrics, attack-impact summaries and score plots."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .detect import ScoreTrace


def confusion(pred, truth) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) for binary predictions against binary truth."""
    p = np.asarray(pred).astype(bool).reshape(-1)
    t = np.asarray(truth).astype(bool).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"prediction length {p.size} != truth length {t.size}")
    if p.size == 0:
        raise ValueError("need at least one decision")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, int(p.size - tp - fp - fn)


def prf1(counts) -> tuple[float, float, float]:
    """Precision, recall, F1 from (tp, fp, fn[, tn]); empty denominators give 0."""
    tp, fp, fn = (int(c) for c in tuple(counts)[:3])
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    scenario: str
    attack: str
    threat: dict
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    mean_score: float
    max_score: float
    threshold: float | None
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def write_csv(self, path) -> None:
        row = self.to_dict()
        row["threat"] = json.dumps(row["threat"], sort_keys=True)
        keys = sorted(row)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            w.writerow([row[k] for k in keys])


def evaluate(trace: ScoreTrace, truth, scenario: str, attack: str = "none",
             threat: dict | None = None, seed: int = 0) -> EvalReport:
    """Score a detected trace against per-window ground truth."""
    if trace.decisions is None:
        raise ValueError("trace has no decisions; run detect() first")
    tp, fp, fn, tn = confusion(trace.decisions, truth)
    p, r, f = prf1((tp, fp, fn))
    return EvalReport(
        scenario=scenario, attack=attack, threat=dict(threat or {}),
        precision=p, recall=r, f1=f, tp=tp, fp=fp, fn=fn, tn=tn,
        mean_score=float(np.mean(trace.scores)), max_score=float(np.max(trace.scores)),
        threshold=trace.threshold, seed=seed,
    )


@dataclass
class DegradationSummary:
    scenario: str
    attack: str
    f1_drop_abs: float
    f1_drop_rel: float
    fp_increase: int
    fn_increase: int

    def to_dict(self) -> dict:
        return asdict(self)


def compare(clean: EvalReport, attacked: EvalReport) -> DegradationSummary:
    """Differences clean minus attacked; negative drops are reported as-is."""
    if clean.scenario != attacked.scenario or clean.seed != attacked.seed:
        raise ValueError("reports come from different scenarios or seeds")
    drop = clean.f1 - attacked.f1
    return DegradationSummary(
        scenario=clean.scenario,
        attack=attacked.attack,
        f1_drop_abs=drop,
        f1_drop_rel=drop / clean.f1 if clean.f1 else 0.0,
        fp_increase=attacked.fp - clean.fp,
        fn_increase=attacked.fn - clean.fn,
    )


def untouched_windows(trace: ScoreTrace, block_origins, block_len: int, length: int) -> np.ndarray:
    """Mask of trace windows that share no row with any perturbed block."""
    rows = np.zeros(length + 1, dtype=np.int64)
    for o in np.asarray(block_origins, dtype=np.int64):
        rows[o] += 1
        rows[min(o + block_len, length)] -= 1
    covered = np.cumsum(rows[:-1]) > 0
    hit = np.concatenate([[0], np.cumsum(covered)])
    start = np.asarray(trace.origin_index, dtype=np.int64)
    return (hit[start + trace.w_len] - hit[start]) == 0


def false_alarm_rate(decisions, truth, mask=None) -> float:
    """Fraction of normal windows (optionally within ``mask``) that were flagged."""
    d = np.asarray(decisions).astype(bool)
    normal = ~np.asarray(truth).astype(bool)
    if mask is not None:
        normal &= np.asarray(mask, dtype=bool)
    n = int(normal.sum())
    return float(d[normal].sum()) / n if n else 0.0


# ---------------------------------------------------------------------- plots

_PALETTE = ("#1f77b4", "#e6a700", "#2b5fd9", "#2ca02c", "#9467bd", "#8c564b", "#17becf")
_W, _H, _PAD = 960, 320, 40


def _downsample(n: int, width: int) -> np.ndarray:
    if n <= width:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, width)).astype(int))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_score_plot(traces: Mapping[str, ScoreTrace], path, labels=None, threshold: float | None = None) -> str:
    """Write an SVG line chart: one polyline per trace, dashed threshold, anomaly bands.

    ``labels`` (optional) holds per-window ground truth aligned with the
    traces.  Traces longer than the plot width are decimated with both
    endpoints kept.  Output is byte-deterministic.
    """
    if not traces:
        raise ValueError("nothing to plot")
    names = list(traces)
    first = traces[names[0]]
    n = len(first)
    if n == 0:
        raise ValueError("empty trace")
    for name in names[1:]:
        if not np.array_equal(traces[name].origin_index, first.origin_index):
            raise ValueError(f"trace {name!r} is not aligned with {names[0]!r}")
    if threshold is None:
        threshold = first.threshold
    top = max(float(np.max(t.scores)) for t in traces.values())
    if threshold is not None:
        top = max(top, float(threshold))
    top = top * 1.05 if top > 0 else 1.0
    plot_w, plot_h = _W - 2 * _PAD, _H - 2 * _PAD
    idx = _downsample(n, plot_w)

    def x_of(i):
        return _PAD + (plot_w * i / (n - 1) if n > 1 else 0.0)

    def y_of(v):
        return _PAD + plot_h * (1.0 - float(v) / top)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    if labels is not None:
        lab = np.asarray(labels).astype(bool)
        edges = np.diff(np.concatenate([[0], lab.astype(np.int8), [0]]))
        for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            x0, x1 = x_of(s), x_of(max(e - 1, s))
            parts.append(
                f'<rect class="anomaly" x="{_fmt(x0)}" y="{_PAD}" width="{_fmt(max(x1 - x0, 1.0))}" '
                f'height="{plot_h}" fill="#f4c7c3" opacity="0.6"/>'
            )
    parts.append(f'<line x1="{_PAD}" y1="{_PAD + plot_h}" x2="{_PAD + plot_w}" y2="{_PAD + plot_h}" stroke="black"/>')
    parts.append(f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_PAD + plot_h}" stroke="black"/>')
    for k, name in enumerate(names):
        scores = traces[name].scores
        pts = " ".join(f"{_fmt(x_of(i))},{_fmt(y_of(scores[i]))}" for i in idx)
        colour = _PALETTE[k % len(_PALETTE)]
        parts.append(f'<polyline class="trace" data-name="{escape(name)}" fill="none" stroke="{colour}" '
                     f'stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{_PAD + 10 + 120 * k}" y="{_PAD - 12}" fill="{colour}" font-size="12">{escape(name)}</text>')
    if threshold is not None:
        ty = _fmt(y_of(threshold))
        parts.append(f'<line class="threshold" x1="{_PAD}" y1="{ty}" x2="{_PAD + plot_w}" y2="{ty}" '
                     f'stroke="red" stroke-dasharray="6,4"/>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    Path(path).write_text(text)
    return text
