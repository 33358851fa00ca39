"""Black-box setting: craft perturbations on a surrogate, replay them on a victim.

The surrogate is trained on the same training split as the victim but with
a different (usually smaller) architecture.  Crafting touches only the
surrogate; the victim merely scores the perturbed series afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .attack import SeriesAttack, ThreatModel, attack_series, manifest, spec_hash
from .data import Series, fit_scaler
from .detect import Detector, calibrate_threshold, fit_series, make_detector, score_series
from .nets import LayerSpec, TrainConfig


@dataclass
class SurrogateSpec:
    """Architecture and training recipe for the attacker's stand-in model.

    ``layer_specs`` is a layer list (single-network families) or a mapping
    from role to layer list.  Empty means default layers built from
    ``hidden``/``recurrent``/``activation``.
    """

    family: str = "reconstruction"
    layer_specs: Sequence[LayerSpec] | dict[str, Sequence[LayerSpec]] = field(default_factory=list)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    w_len: int = 8
    hidden: int | Sequence[int] = 16
    recurrent: bool = True
    activation: str = "tanh"
    gamma: float = 0.5
    train_stride: int = 4
    threshold: str = "max"
    seed: int = 0

    def layers_by_role(self) -> dict[str, list[LayerSpec]] | None:
        if not self.layer_specs:
            return None
        if isinstance(self.layer_specs, dict):
            return {k: list(v) for k, v in self.layer_specs.items()}
        if self.family == "joint":
            raise ValueError("a joint surrogate needs layer_specs keyed by role")
        return {self.family: list(self.layer_specs)}


def _architecture(det: Detector) -> dict:
    s = det.spec_summary()
    s.pop("gamma")
    return s


def build_surrogate(spec: SurrogateSpec, train_series: Series, victim: Detector | None = None) -> Detector:
    """Train and calibrate a surrogate on the adversary-accessible training split.

    When ``victim`` is given, a surrogate with the victim's exact
    architecture is rejected.
    """
    det = make_detector(spec.family, spec.w_len, train_series.m, hidden=spec.hidden, seed=spec.seed,
                        gamma=spec.gamma, recurrent=spec.recurrent, layers=spec.layers_by_role(),
                        activation=spec.activation)
    if victim is not None and _architecture(det) == _architecture(victim):
        raise ValueError("surrogate architecture must differ from the victim's")
    det.scaler = fit_scaler(train_series)
    fit_series(det, train_series, spec.train_cfg, stride=spec.train_stride)
    calibrate_threshold(det, score_series(det, train_series).scores, spec.threshold)
    return det


def transfer_attack(surrogate: Detector, victim: Detector, series: Series, tm: ThreatModel,
                    attack_kind: str = "fgsm", target_filter: str = "all", **opts) -> SeriesAttack:
    """Perturb ``series`` from surrogate gradients; the victim is only shape-checked.

    Perturbations live in the surrogate's standardized units, which match the
    victim's because both scalers are fit on the same training split.
    """
    if (surrogate.w_len, surrogate.m) != (victim.w_len, victim.m):
        raise ValueError(
            f"surrogate ({surrogate.w_len}, {surrogate.m}) and victim ({victim.w_len}, {victim.m}) "
            "must share w_len and m"
        )
    return attack_series(surrogate, series, tm, attack_kind, target_filter, **opts)


def transfer_manifest(surrogate: Detector, victim: Detector, kind: str, tm: ThreatModel,
                      result: SeriesAttack) -> dict:
    return manifest(kind, tm, result, mode="black-box",
                    surrogate_spec_hash=spec_hash(surrogate.spec_summary()),
                    victim_spec_hash=spec_hash(victim.spec_summary()))
