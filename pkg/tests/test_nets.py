import numpy as np
import pytest

from tsadv import autodiff as ad
from tsadv.autodiff import NonFiniteError, ShapeError, Tensor
from tsadv.nets import (
    Adam,
    LayerSpec,
    TrainConfig,
    forward,
    load_network,
    network_new,
    save_network,
    train,
)


def test_init_deterministic():
    a = network_new([LayerSpec("dense", 4, 4)], 7)
    b = network_new([LayerSpec("dense", 4, 4)], 7)
    np.testing.assert_array_equal(a.flat_params(), b.flat_params())


def test_init_biases_zero_and_glorot_bound():
    net = network_new([LayerSpec("dense", 1, 1), LayerSpec("elman_rnn", 1, 3, "tanh")], 3)
    w, b = net.layer_params()[0]
    assert np.all(b.data == 0)
    assert abs(w.data[0, 0]) <= np.sqrt(3.0)
    assert np.all(net.layer_params()[1][2].data == 0)


def test_dims_must_chain():
    with pytest.raises(ShapeError):
        network_new([LayerSpec("dense", 2, 3), LayerSpec("dense", 4, 1)], 0)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dense", 0, 1)
    with pytest.raises(ValueError):
        LayerSpec("elman_rnn", 2, 2, "relu")
    with pytest.raises(ValueError):
        LayerSpec("conv", 2, 2)


def test_identity_layer():
    net = network_new([LayerSpec("dense", 3, 3)], 0)
    net.params[0].data = np.eye(3)
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(forward(net, Tensor(x)).data, x)


def test_zero_weights_give_bias():
    net = network_new([LayerSpec("dense", 2, 3)], 0)
    net.params[0].data = np.zeros((2, 3))
    net.params[1].data = np.array([1.0, -2.0, 0.5])
    out = forward(net, Tensor(np.ones((4, 2)))).data
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_elman_zero_window_zero_trajectory():
    net = network_new([LayerSpec("elman_rnn", 3, 4, "tanh")], 1)
    out = forward(net, Tensor(np.zeros((6, 3)))).data
    assert out.shape == (6, 4)
    assert np.all(out == 0)


def test_elman_resets_state_per_window():
    net = network_new([LayerSpec("elman_rnn", 2, 3, "tanh")], 2)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    both = forward(net, Tensor(np.stack([a, b]))).data
    np.testing.assert_allclose(both[1], forward(net, Tensor(b)).data, rtol=0, atol=1e-15)


def test_forward_shape_check():
    net = network_new([LayerSpec("dense", 3, 2)], 0)
    with pytest.raises(ShapeError):
        forward(net, Tensor(np.ones((2, 4))))


def test_fit_y_equals_2x():
    x = np.linspace(-1, 1, 100).reshape(-1, 1)
    net = network_new([LayerSpec("dense", 1, 1)], 0)
    stats = train(net, list(x), list(2 * x), TrainConfig(epochs=200, batch_size=10, learning_rate=0.01, seed=0))
    assert stats.loss_per_epoch[-1] < 1e-3


def test_lr_zero_leaves_params():
    net = network_new([LayerSpec("dense", 2, 2, "tanh")], 0)
    before = net.flat_params()
    x = np.random.default_rng(0).normal(size=(20, 2))
    train(net, list(x), list(x), TrainConfig(epochs=1, learning_rate=0.0))
    np.testing.assert_array_equal(net.flat_params(), before)


def test_training_deterministic():
    x = np.random.default_rng(1).normal(size=(50, 3))
    runs = []
    for _ in range(2):
        net = network_new([LayerSpec("dense", 3, 2, "tanh"), LayerSpec("dense", 2, 3)], 4)
        runs.append(train(net, list(x), list(x), TrainConfig(epochs=5, batch_size=8, seed=9)).loss_per_epoch)
    assert runs[0] == runs[1]


def test_loss_mostly_monotone_on_realizable_task():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 3))
    y = x @ rng.normal(size=(3, 2))
    net = network_new([LayerSpec("dense", 3, 2)], 0)
    losses = train(net, list(x), list(y), TrainConfig(epochs=40, batch_size=20, learning_rate=0.02)).loss_per_epoch
    for prev, cur in zip(losses[5:], losses[6:]):
        assert cur <= prev * 1.05


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], TrainConfig())
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_train_errors():
    net = network_new([LayerSpec("dense", 1, 1)], 0)
    with pytest.raises(ValueError):
        train(net, [], [], TrainConfig())
    with pytest.raises(ValueError):
        train(net, [np.ones(1)], [], TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_aborts():
    net = network_new([LayerSpec("dense", 1, 1)], 0)
    x = [np.array([1e200])]
    with pytest.raises(NonFiniteError, match="epoch 0"):
        train(net, x, x, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    net = network_new([LayerSpec("elman_rnn", 3, 4, "tanh"), LayerSpec("dense", 4, 3, "sigmoid")], 11)
    net.params[0].data += 0.123456789
    save_network(net, tmp_path / "n.npz")
    back = load_network(tmp_path / "n.npz")
    assert back.layers == net.layers and back.seed == net.seed
    for a, b in zip(net.params, back.params):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_network(tmp_path / "x.npz")


def test_train_flag_controls_param_grads():
    net = network_new([LayerSpec("dense", 2, 1)], 0)
    x = Tensor(np.ones((1, 2)))
    assert not forward(net, x).requires_grad
    assert net.taped_forwards == 0
    ad.backward(ad.reduce_sum(forward(net, x, train=True)))
    assert net.params[0].grad is not None and net.taped_forwards == 1
