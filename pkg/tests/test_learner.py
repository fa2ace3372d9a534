import numpy as np
import pytest

from satmaml.adaptation import Schedule, adapt, adapt_step
from satmaml.errors import AdaptationDeclined, CapacityError
from satmaml.learner import (CoordinateLearner, coordinate_update, lstm_adapt, rollout,
                             rollout_grads, train_learner)
from satmaml.nn import Network

from conftest import central_diff, random_model, rel_err


def test_forced_gate_hand_values():
    th, g = np.array([1.0, -3.0]), np.array([2.0, 0.5])
    out, _ = coordinate_update(th, 0.0, g, CoordinateLearner.forced(1.0, 0.1), None)
    assert out[0] == pytest.approx(0.8, abs=1e-15)
    out, _ = coordinate_update(th, 0.0, g, CoordinateLearner.forced(0.0, 0.0), None)
    np.testing.assert_array_equal(out, 0.0)


def test_forced_gates_track_adapt_step(rng):
    config, params = random_model(rng)
    net = Network(config)
    x, y = rng.normal(size=(20, config.frame_dim)), rng.integers(0, config.n_classes, 20)
    alpha = 0.05
    sched = Schedule.initial(params, "ALL", alpha, steps=1)
    learner = CoordinateLearner.forced(1.0, alpha)
    a = b = params
    for _ in range(10):
        _, ga = net.loss_and_grads(a, x, y)
        a = adapt_step(a, ga, sched, "ALL")
        loss, gb = net.loss_and_grads(b, x, y)
        gb = dict(gb)
        nb = b.copy()
        for k in b.keys():
            nb[k], _ = coordinate_update(b[k], loss, gb[k], learner, None)
        b = nb
        for k in params.keys():
            assert np.max(np.abs(a[k] - b[k])) < 1e-12


def test_lstm_adapt_reduction_and_steps(rng):
    config, params = random_model(rng)
    net = Network(config)
    d = rng.normal(size=(20, config.frame_dim)), rng.integers(0, config.n_classes, 20)
    sched = Schedule({k: float(rng.uniform(0.01, 0.2)) for k in Schedule.initial(params, "ALL").rates}, 3)
    ref = adapt(net, params, d, sched, "ALL")
    out = lstm_adapt(net, params, d, CoordinateLearner.forced(1.0, sched), 3, "ALL")
    for k in params.keys():
        assert np.max(np.abs(out[k] - ref[k])) < 1e-12
    learner = CoordinateLearner(rng=rng)
    same = lstm_adapt(net, params, d, learner, 0, "LHUC")
    for k in params.keys():
        np.testing.assert_array_equal(same[k], params[k])
    moved = lstm_adapt(net, params, d, learner, 2, "LHUC")
    assert not np.array_equal(moved["0.lhuc"], params["0.lhuc"])
    np.testing.assert_array_equal(moved["0.weight"], params["0.weight"])


def test_lstm_adapt_capacity_and_decline(rng):
    config, params = random_model(rng)
    net = Network(config)
    with pytest.raises(CapacityError):
        lstm_adapt(net, params, (None, np.zeros(1)), CoordinateLearner(), 1, "ALL", max_coordinates=10)
    with pytest.warns(AdaptationDeclined):
        lstm_adapt(net, params, (np.zeros((0, config.frame_dim)), np.zeros(0, int)), CoordinateLearner(), 1, "LHUC")


def test_bptt_matches_fd_on_linear_objective(rng):
    c = rng.normal(size=5)

    def objective(theta):
        return float(c @ theta), c.copy()

    learner = CoordinateLearner(width=4, n_layers=2, rng=rng)
    for k in learner.weights:
        learner.weights[k] = learner.weights[k] + 0.3 * rng.normal(size=learner.weights[k].shape)
    theta0 = rng.normal(size=5)
    steps = 4
    _, record = rollout(learner, objective, theta0, steps)
    frozen = record[3]
    grads = rollout_grads(learner, record)
    for k, w in learner.weights.items():
        fd = central_diff(lambda: rollout(learner, objective, theta0, steps, frozen_inputs=frozen)[0], w)
        assert rel_err(grads[k], fd) < 1e-6, k


def _quadratic_task(scales=(1.0, 10.0)):
    """Ill-conditioned 2-parameter quadratic with its minimum at the origin and random starts."""
    scales = np.asarray(scales)

    def objective(theta):
        return 0.5 * float(np.sum(scales * theta * theta)), scales * theta

    def sample(r):
        return objective, r.normal(0.0, 2.0, size=2)
    return sample


def test_trained_learner_beats_tuned_sgd():
    steps = 5
    sample = _quadratic_task()
    tasks = [sample(np.random.default_rng(1000 + i)) for i in range(50)]

    def mean_final_loss(run):
        return float(np.mean([obj(run(obj, th0))[0] for obj, th0 in tasks]))

    def sgd(alpha):
        def run(obj, theta):
            for _ in range(steps):
                theta = theta - alpha * obj(theta)[1]
            return theta
        return run

    best_sgd = min(mean_final_loss(sgd(a)) for a in np.linspace(0.005, 0.2, 40))

    learner = CoordinateLearner(rng=np.random.default_rng(0))
    history = train_learner(learner, sample, steps, iterations=300, lr=0.02, rng=np.random.default_rng(1))
    assert history[-1] < history[0]
    learned = mean_final_loss(lambda obj, th0: rollout(learner, obj, th0, steps)[1][0][-1])
    assert learned <= best_sgd
