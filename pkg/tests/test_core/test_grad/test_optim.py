import numpy as np
import pytest

from trip_attention.core.grad.optim import SGD, Adam, make_optimizer


def test_sgd_step():
    params = {"w": np.array([1.0, 2.0]), ("layer", 0): np.array([[0.5]])}
    grads = {"w": np.array([0.5, -1.0]), ("layer", 0): np.array([[2.0]])}
    weights = params["w"]
    SGD(0.1).step(params, grads)
    assert np.allclose(params["w"], [0.95, 2.1])
    assert np.allclose(params[("layer", 0)], [[0.3]])
    # updated in place
    assert params["w"] is weights

    SGD(0.1).step(params, grads, lr=0.0)
    assert np.allclose(params["w"], [0.95, 2.1])


def test_adam_first_step():
    # the bias-corrected first step moves each parameter by lr times the sign of its gradient
    params = {"w": np.array([1.0, -1.0, 0.0])}
    Adam(0.01).step(params, {"w": np.array([3.0, -0.2, 1e-3])})
    assert np.allclose(params["w"], [0.99, -0.99, -0.01], atol=1e-6)


def test_adam_reference(seeds):
    for seed in seeds[0:5]:
        rng = np.random.default_rng(seed)
        start = rng.normal(size=4)
        params = {"w": start.copy()}
        optimizer = Adam(0.05, beta1=0.8, beta2=0.9)
        m = np.zeros(4)
        v = np.zeros(4)
        expected = start.copy()
        for step in range(1, 6):
            grad = rng.normal(size=4)
            optimizer.step(params, {"w": grad})
            m = 0.8 * m + 0.2 * grad
            v = 0.9 * v + 0.1 * grad**2
            expected -= 0.05 * (m / (1 - 0.8**step)) / (np.sqrt(v / (1 - 0.9**step)) + 1e-8)
        assert np.allclose(params["w"], expected, rtol=1e-12)


def test_zero_learning_rate():
    params = {"w": np.array([1.0, 2.0])}
    for name in ("sgd", "adam"):
        make_optimizer(name, 0.0).step(params, {"w": np.array([5.0, -5.0])})
    assert params["w"].tolist() == [1.0, 2.0]


def test_make_optimizer():
    assert isinstance(make_optimizer("sgd", 0.1), SGD)
    assert make_optimizer("adam", 0.2).lr == 0.2
    with pytest.raises(ValueError) as error:
        make_optimizer("rmsprop", 0.1)
    assert "optimizer must be one of ['adam', 'sgd'], got 'rmsprop'" in str(error)
