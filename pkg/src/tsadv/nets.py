"""Small trainable networks (dense and Elman layers) and an Adam trainer."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "linear": None,
}
CHECKPOINT_FORMAT = "tsadv-network"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "elman_rnn"
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if self.kind not in ("dense", "elman_rnn"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "elman_rnn" and self.activation != "tanh":
            raise ValueError("elman_rnn layers always use tanh")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class TrainStats:
    loss_per_epoch: list[float] = field(default_factory=list)


class Network:
    """Stack of layers with parameters stored as leaf tensors.

    ``taped_forwards`` counts forward passes that recorded an autodiff graph;
    transfer tests use it to prove a model was never differentiated.
    """

    def __init__(self, layers: Sequence[LayerSpec], params: list[Tensor], seed: int):
        self.layers = list(layers)
        self.params = params
        self.seed = seed
        self.taped_forwards = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def is_recurrent(self) -> bool:
        return any(spec.kind == "elman_rnn" for spec in self.layers)

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def layer_params(self) -> list[list[Tensor]]:
        out, i = [], 0
        for spec in self.layers:
            k = 3 if spec.kind == "elman_rnn" else 2
            out.append(self.params[i : i + k])
            i += k
        return out

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return forward(self, x, train=train)


def _check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("a network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")


def network_new(specs: Sequence[LayerSpec], seed: int) -> Network:
    """Glorot-uniform weights, zero biases; fully determined by ``seed``."""
    specs = list(specs)
    _check_chain(specs)
    rng = np.random.default_rng(seed)
    params: list[Tensor] = []

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor._wrap(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

    for spec in specs:
        params.append(glorot(spec.in_dim, spec.out_dim))
        if spec.kind == "elman_rnn":
            params.append(glorot(spec.out_dim, spec.out_dim))
        params.append(Tensor._wrap(np.zeros(spec.out_dim), requires_grad=True))
    return Network(specs, params, seed)


def forward(net: Network, x: Tensor, train: bool = False) -> Tensor:
    """Run ``x`` through the network.

    Dense layers act on the last axis.  An Elman layer consumes a
    ``(steps, in_dim)`` window or a ``(batch, steps, in_dim)`` stack and emits
    the hidden trajectory, with the hidden state reset for every window.
    Parameters are treated as constants unless ``train`` is set.
    """
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input last dim {x.shape[-1]} != network in_dim {net.in_dim}")
    h = x
    for spec, ps in zip(net.layers, net.layer_params()):
        if not train:
            ps = [Tensor._wrap(p.data) for p in ps]
        if spec.kind == "dense":
            w, b = ps
            lead = h.shape[:-1]
            flat = h if h.data.ndim <= 2 else ad.reshape(h, (-1, spec.in_dim))
            h = ad.add_bias(ad.matmul(flat, w), b)
            if h.data.ndim != len(lead) + 1:
                h = ad.reshape(h, lead + (spec.out_dim,))
            act = ACTIVATIONS[spec.activation]
            if act is not None:
                h = act(h)
        else:
            w, u, b = ps
            if h.data.ndim == 2:
                h = ad.reshape(ad.elman(ad.reshape(h, (1,) + h.shape), w, u, b), (h.shape[0], spec.out_dim))
            elif h.data.ndim == 3:
                h = ad.elman(h, w, u, b)
            else:
                raise ShapeError(f"elman_rnn needs a (steps, in) or (batch, steps, in) input, got {h.shape}")
    if h.requires_grad:
        net.taped_forwards += 1
    return h


class Adam:
    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.b1 = cfg.adam_beta1
        self.b2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def optimize(
    params: list[Tensor],
    n_samples: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    cfg: TrainConfig,
    log: Callable[[int, float], None] | None = None,
) -> TrainStats:
    """Generic minibatch Adam loop; ``batch_loss`` maps sample indices to a scalar."""
    if n_samples < 1:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg)
    stats = TrainStats()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        total, batches = 0.0, 0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss(idx)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch {batches}")
            ad.backward(loss)
            opt.step()
            total += value
            batches += 1
        stats.loss_per_epoch.append(total / batches)
        if log is not None:
            log(epoch, stats.loss_per_epoch[-1])
    opt.zero_grad()
    return stats


def _stack(items) -> np.ndarray:
    return np.stack([t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64) for t in items])


def train(net: Network, inputs, targets, cfg: TrainConfig) -> TrainStats:
    """Fit ``net`` to (input, target) pairs by minibatch MSE with Adam."""
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    if len(inputs) == 0:
        raise ValueError("cannot train on an empty dataset")
    x_all = _stack(inputs)
    y_all = _stack(targets)

    def batch_loss(idx):
        x = Tensor._wrap(x_all[idx])
        return ad.mse_loss(forward(net, x, train=True), Tensor._wrap(y_all[idx]))

    return optimize(net.params, len(x_all), batch_loss, cfg)


# ---------------------------------------------------------------- checkpoints


def network_state(net: Network, prefix: str = "") -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"layers": [asdict(s) for s in net.layers], "seed": net.seed}
    arrays = {f"{prefix}param{i}": p.data for i, p in enumerate(net.params)}
    return meta, arrays


def network_from_state(meta: dict, arrays, prefix: str = "") -> Network:
    specs = [LayerSpec(**d) for d in meta["layers"]]
    net = network_new(specs, meta["seed"])
    for i, p in enumerate(net.params):
        stored = np.asarray(arrays[f"{prefix}param{i}"], dtype=np.float64)
        if stored.shape != p.shape:
            raise ValueError(f"checkpoint parameter {i} has shape {stored.shape}, expected {p.shape}")
        p.data = stored.copy()
    return net


def save_network(net: Network, path) -> None:
    meta, arrays = network_state(net)
    meta.update(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_network(path) -> Network:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a network checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        return network_from_state(meta, z)
