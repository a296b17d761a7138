import numpy as np
import pytest

from hekf_kit import narx
from hekf_kit.errors import ConfigurationError
from hekf_kit.narx import NarxConfig, SequenceSet, SoftSensorBank, Standardizer


def _teacher_data(rng, teacher, cfg, S, T):
    U = 0.1 * np.cumsum(rng.normal(size=(S, T, 3)), axis=1)
    return SequenceSet(U, narx.closed_loop(teacher, U, cfg), np.ones((S, T), dtype=bool))


def _fd_gradient(func, theta, h=1e-6):
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        cols.append((func(theta + e) - func(theta - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("layers,neurons", [(1, 4), (2, 6), (3, 6)])
def test_forward_jacobian_matches_finite_differences(rng, layers, neurons):
    cfg = NarxConfig(hidden_layers=layers, total_neurons=neurons)
    net = narx.init_network(cfg, cfg.n_features(), rng)
    X = rng.normal(size=(7, cfg.n_features()))
    _, J, dx = narx.forward_jacobian(net, X)
    fd = _fd_gradient(lambda th: narx.forward(net.with_flat(th), X), net.flat())
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)
    fd_x = np.stack([(narx.forward(net, X + h) - narx.forward(net, X - h)) / 2e-6
                     for h in 1e-6 * np.eye(X.shape[1])], axis=1)
    np.testing.assert_allclose(dx, fd_x, rtol=1e-6, atol=1e-9)


def test_closed_loop_total_derivative_matches_finite_differences(rng):
    cfg = NarxConfig(hidden_layers=2, total_neurons=6, input_delays=1, feedback_delays=3)
    net = narx.init_network(cfg, cfg.n_features(), rng)
    U = rng.normal(size=(2, 25, 3))
    _, J = narx.closed_loop(net, U, cfg, with_jacobian=True)
    fd = _fd_gradient(lambda th: narx.closed_loop(net.with_flat(th), U, cfg), net.flat())
    rel = np.linalg.norm(J - fd) / np.linalg.norm(fd)
    assert rel < 1e-5


def test_streaming_bank_matches_batch_recursion(rng):
    cfg = NarxConfig(hidden_layers=1, total_neurons=5)
    nets = [narx.init_network(cfg, cfg.n_features(), rng) for _ in narx.OUTPUT_CHANNELS]
    U = rng.normal(size=(40, 3)) * [3.0, 2e4, 0.1] + [12.0, 1.2e5, 0.0]
    in_std = Standardizer.fit(U)
    out_std = Standardizer(np.arange(5.0), np.arange(1.0, 6.0))
    bank = SoftSensorBank(nets, [cfg] * 5, in_std, out_std)
    batch = bank.predict_sequence(U)
    bank.reset()
    stream = np.array([bank.predict_step(u) for u in U])
    np.testing.assert_allclose(stream, batch, rtol=1e-12, atol=1e-12)


def test_bank_json_round_trip(tmp_path, rng):
    cfg = NarxConfig(hidden_layers=2, total_neurons=7)
    nets = [narx.init_network(cfg, cfg.n_features(), rng) for _ in narx.OUTPUT_CHANNELS]
    std = Standardizer.fit(rng.normal(size=(20, 3)))
    bank = SoftSensorBank(nets, [cfg] * 5, std, Standardizer.fit(rng.normal(size=(20, 5))), decimation=10)
    path = tmp_path / "bank.json"
    narx.save_json(path, bank.to_dict())
    again = SoftSensorBank.from_dict(narx.load_json(path))
    U = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(again.predict_sequence(U), bank.predict_sequence(U))
    with pytest.raises(ConfigurationError):
        SoftSensorBank.from_dict({"format": "something else"})


def test_open_loop_epoch_reduces_loss(rng):
    cfg = NarxConfig(hidden_layers=1, total_neurons=5, l2=0.0)
    teacher = narx.init_network(cfg, cfg.n_features(), rng)
    data = _teacher_data(rng, teacher, cfg, 3, 80)
    _, (before, after) = narx.train_open_loop(data, cfg, seed=1)
    assert after < before


def test_teacher_network_is_recovered(rng):
    cfg = NarxConfig(hidden_layers=1, total_neurons=5, max_closed_loop_epochs=200, patience=20, l2=0.0)
    teacher = narx.init_network(cfg, cfg.n_features(), np.random.default_rng(0))
    train, valid = _teacher_data(rng, teacher, cfg, 6, 150), _teacher_data(rng, teacher, cfg, 3, 150)
    net, history = narx.train_network(train, valid, cfg, seed=3)
    assert narx.closed_loop_nmse(net, valid, cfg) < 1e-3
    assert history.val_nmse[history.best_epoch] == min(history.val_nmse)


def test_epoch_cap(rng):
    with pytest.raises(ConfigurationError):
        NarxConfig(max_closed_loop_epochs=narx.MAX_EPOCHS + 1)
    cfg = NarxConfig(hidden_layers=1, total_neurons=3, max_closed_loop_epochs=4, patience=100)
    teacher = narx.init_network(cfg, cfg.n_features(), rng)
    data = _teacher_data(rng, teacher, cfg, 2, 40)
    _, history = narx.train_network(data, data, cfg, seed=0)
    assert history.epochs <= 4


def test_grid_covers_layer_and_neuron_choices():
    grid = narx.default_grid()
    assert {c.hidden_layers for c in grid} == set(narx.LAYER_CHOICES)
    assert max(c.total_neurons for c in grid) == narx.MAX_NEURONS
    assert all(sum(c.hidden_sizes) == c.total_neurons for c in grid)


def test_grid_search_prefers_lower_validation_error(rng):
    cfg = NarxConfig(hidden_layers=1, total_neurons=4, max_closed_loop_epochs=20, l2=0.0)
    teacher = narx.init_network(cfg, cfg.n_features(), np.random.default_rng(5))
    train, valid = _teacher_data(rng, teacher, cfg, 3, 80), _teacher_data(rng, teacher, cfg, 2, 80)
    grid = [NarxConfig(hidden_layers=1, total_neurons=n, max_closed_loop_epochs=20, l2=0.0) for n in (1, 4)]
    res = narx.grid_search(train, valid, seed=0, grid=grid, workers=1)
    assert res.val_nmse == min(s for _, s in res.scores if s is not None)


def test_nmse_hand_values():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert narx.nmse(np.full(4, 2.5), y) == pytest.approx(1.0)
    assert narx.nmse(y + 0.5, y) == pytest.approx(4 * 0.25 / 5.0)
    with pytest.raises(ConfigurationError):
        narx.nmse(y, np.ones(4))


def test_standardizer_round_trip(rng):
    X = rng.normal(size=(50, 3)) * [1.0, 1e4, 1e-2]
    s = Standardizer.fit(X)
    Z = s.standardize(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(s.destandardize(Z), X, rtol=1e-12)
