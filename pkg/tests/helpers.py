"""Shared oracles and tiny fixtures for the test suite."""
import numpy as np

from tsadv import autodiff as ad
from tsadv.data import Series, SyntheticConfig, fit_scaler, generate_synthetic
from tsadv.detect import calibrate_threshold, fit_series, make_detector, score_series
from tsadv.nets import LayerSpec, TrainConfig, forward, network_new


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-8)))


def random_mlp(seed: int, max_params: int = 64):
    """A random dense network (<= 3 layers, <= max_params parameters)."""
    rng = np.random.default_rng(seed)
    acts = ["tanh", "sigmoid", "linear", "relu"]
    while True:
        depth = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(1, 5, size=depth + 1)]
        specs = [LayerSpec("dense", a, b, acts[int(rng.integers(len(acts)))]) for a, b in zip(dims, dims[1:])]
        n = sum(a * b + b for a, b in zip(dims, dims[1:]))
        if n <= max_params:
            return network_new(specs, seed), dims


def mlp_param_check(seed: int) -> float:
    """Max relative error of autodiff vs central differences over all params."""
    net, dims = random_mlp(seed)
    rng = np.random.default_rng(seed + 1000)
    x = ad.Tensor(rng.normal(size=(3, dims[0])))
    y = ad.Tensor(rng.normal(size=(3, dims[-1])))
    for p in net.params:
        p.grad = None
        # nudge zero biases off relu kinks
        p.data += rng.normal(scale=0.1, size=p.shape)
    ad.backward(ad.mse_loss(forward(net, x, train=True), y))
    worst = 0.0
    for p in net.params:
        def f(v, p=p):
            saved = p.data
            p.data = v
            out = ad.mse_loss(forward(net, x), y).item()
            p.data = saved
            return out

        worst = max(worst, rel_err(p.grad, central_diff(f, p.data.copy())))
    return worst


def tiny_series(seed=0, m=3, train_len=400, test_len=400, w_len=8):
    cfg = SyntheticConfig(m=m, train_len=train_len, test_len=test_len, anomaly_rate=0.05, w_len=w_len,
                          seed=seed, noise_std=0.1)
    return generate_synthetic(cfg)


def tiny_detector(family="reconstruction", seed=0, w_len=6, m=3, hidden=5, recurrent=False, train=None,
                  epochs=3, activation="tanh"):
    det = make_detector(family, w_len, m, hidden=hidden, seed=seed, recurrent=recurrent, activation=activation)
    if train is not None:
        det.scaler = fit_scaler(train)
        fit_series(det, train, TrainConfig(epochs=epochs, batch_size=32, learning_rate=1e-2, seed=seed), stride=2)
        calibrate_threshold(det, score_series(det, train).scores, "max")
    return det


def labelled(values, labels) -> Series:
    return Series(np.asarray(values, dtype=np.float64), np.asarray(labels, dtype=np.int8))
