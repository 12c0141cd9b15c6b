import math

import numpy as np
import pytest

from trip_attention.core import custom_errors
from trip_attention.core.net import (
    BN_EPS,
    Layer,
    MacCounter,
    Model,
    SparseActivations,
    fold_batchnorm,
    forward_dense,
    forward_sparse,
    l1_activation_loss,
)
from trip_attention.core.netspec import parse_spec_file
from trip_attention.package import config_path, read_text

SMALL = """
net roi 6x6
layer conv in=2 out=3 k=3 pad=1
layer batchnorm out=3
layer maxpool k=2
layer relu_rnn in=27 units=4
layer output in=4 units=3

net classifier 7x7
layer maxpool k=2 stride=1
layer conv in=2 out=4 k=3 pad=0 stride=2
layer batchnorm out=4
layer fully_connected in=16 units=5
layer output in=5 units=3
"""


@pytest.fixture(scope="module")
def small():
    return parse_spec_file(SMALL).networks


def randomized(spec, rng):
    """Model with nonzero biases and non-trivial BatchNorm statistics."""
    model = Model.init(spec, rng)
    for layer in model.layers:
        if layer.spec.has_weights:
            layer.params["bias"] = rng.normal(0.0, 0.1, size=layer.params["bias"].shape)
        elif layer.spec.kind == "batchnorm":
            channels = layer.spec.out_channels
            layer.params["gamma"] = rng.uniform(0.5, 1.5, size=channels)
            layer.params["beta"] = rng.normal(0.0, 0.1, size=channels)
            layer.params["mean"] = rng.normal(0.0, 0.1, size=channels)
            layer.params["var"] = rng.uniform(0.5, 2.0, size=channels)

    return model


def sparse_frame(rng, shape, density=0.2):
    return (rng.random(shape) < density) * rng.integers(1, 4, size=shape).astype(float)


def naive_forward(model, frame, hidden):
    """Straightforward per-element loops; returns output, new hidden and per-layer MACs."""
    x = np.asarray(frame, dtype=float)
    hidden = [h.copy() for h in hidden]
    macs = []
    rnn = 0
    for layer in model.layers:
        spec = layer.spec
        count = 0
        if spec.kind == "conv":
            c_in, h, w = x.shape
            p, k, s = spec.padding, spec.kernel, spec.stride
            out_c, out_h, out_w = spec.out_shape
            out = np.zeros(spec.out_shape)
            for o in range(out_c):
                for oy in range(out_h):
                    for ox in range(out_w):
                        total = layer.params["bias"][o]
                        for c in range(c_in):
                            for ky in range(k):
                                for kx in range(k):
                                    iy, ix = oy * s + ky - p, ox * s + kx - p
                                    if 0 <= iy < h and 0 <= ix < w and x[c, iy, ix] != 0:
                                        total += layer.weight[o, c, ky, kx] * x[c, iy, ix]
                                        count += 1
                        out[o, oy, ox] = total
            x = out
        elif spec.kind == "batchnorm":
            out = np.zeros_like(x)
            for c in range(x.shape[0]):
                norm = math.sqrt(layer.params["var"][c] + BN_EPS)
                out[c] = layer.params["gamma"][c] * (x[c] - layer.params["mean"][c]) / norm + layer.params["beta"][c]
            x = out
        elif spec.kind == "maxpool":
            out = np.zeros(spec.out_shape)
            k, s = spec.kernel, spec.stride
            for c in range(out.shape[0]):
                for oy in range(out.shape[1]):
                    for ox in range(out.shape[2]):
                        out[c, oy, ox] = max(
                            x[c, oy * s + ky, ox * s + kx] for ky in range(k) for kx in range(k)
                        )
            x = out
        else:
            inputs = list(x.ravel())
            if spec.kind == "relu_rnn":
                inputs += list(hidden[rnn])
            out = np.zeros(spec.units)
            for u in range(spec.units):
                total = layer.params["bias"][u]
                for i, value in enumerate(inputs):
                    if value != 0:
                        total += layer.weight[u, i] * value
                        count += 1
                out[u] = total
            x = out
            if spec.kind == "relu_rnn":
                x = np.maximum(x, 0.0)
                hidden[rnn] = x
                rnn += 1
        if spec.relu_after:
            x = np.maximum(x, 0.0)
        macs.append(count)

    return x, hidden, macs


def test_zero_input(small):
    model = Model.init(small["roi_prediction"], np.random.default_rng(0))
    state = model.initial_state()
    output, state = forward_dense(model, np.zeros((2, 6, 6)), state)
    assert not output.any()
    assert not state.H[0].any()
    assert np.array_equal(state.P, output)

    counter = MacCounter()
    forward_sparse(model, SparseActivations.from_dense(np.zeros((2, 6, 6))), model.initial_state(), counter)
    assert counter.total == 0


def test_identity_conv():
    spec = parse_spec_file(
        "net classifier 1x1\nlayer conv in=2 out=2 k=1\nlayer batchnorm out=2\nlayer output in=2 units=2"
    ).networks["classification"]
    model = Model.init(spec, np.random.default_rng(0))
    model.layers[0].params["weight"] = np.eye(2).reshape(2, 2, 1, 1)
    model.layers[1].params["gamma"] = np.array([2.0, 0.5])
    model.layers[1].params["var"] = np.array([3.0, 1.0])
    model.layers[2].params["weight"] = np.eye(2)

    output, _ = forward_dense(model, np.array([1.5, 0.5]).reshape(2, 1, 1), model.initial_state())
    scale = np.array([2.0, 0.5]) / np.sqrt(np.array([3.0, 1.0]) + BN_EPS)
    assert np.allclose(output, scale * np.array([1.5, 0.5]), rtol=1e-12)


def test_dense_naive_oracle(small, seeds):
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for spec in small.values():
            model = randomized(spec, rng)
            state = model.initial_state()
            hidden = list(state.H)
            for _ in range(3):
                frame = sparse_frame(rng, spec.input_shape, density=0.4)
                output, state = forward_dense(model, frame, state)
                expected, hidden, _ = naive_forward(model, frame, hidden)
                assert np.allclose(output, expected, rtol=1e-10, atol=1e-12)
                for h, e in zip(state.H, hidden):
                    assert np.allclose(h, e, rtol=1e-10, atol=1e-12)


def test_sparse_matches_dense(small, seeds):
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for spec in small.values():
            model = randomized(spec, rng)
            dense_state = sparse_state = model.initial_state()
            hidden = list(dense_state.H)
            for _ in range(3):
                frame = sparse_frame(rng, spec.input_shape, density=rng.uniform(0.05, 0.5))
                counter = MacCounter()
                dense_out, dense_state = forward_dense(model, frame, dense_state)
                sparse_out, sparse_state = forward_sparse(
                    model, SparseActivations.from_dense(frame), sparse_state, counter
                )
                _, hidden, macs = naive_forward(model, frame, hidden)

                assert np.allclose(sparse_out, dense_out, rtol=1e-10, atol=1e-12)
                assert [counter.macs[i] for i in range(len(spec.layers))] == macs
                assert counter.total == sum(macs)


@pytest.mark.slow
def test_sparse_matches_dense_dvs_gesture():
    networks = parse_spec_file(read_text(config_path("dvs_gesture.net"))).networks
    rng = np.random.default_rng(90)
    for trial in range(100):
        spec = networks["roi_prediction"] if trial % 2 else networks["classification"]
        model = randomized(spec, rng)
        state = model.initial_state()
        frame = sparse_frame(rng, spec.input_shape, density=0.1)
        counter = MacCounter()
        dense_out, _ = forward_dense(model, frame, state)
        sparse_out, _ = forward_sparse(model, SparseActivations.from_dense(frame), state, counter)
        _, _, macs = naive_forward(model, frame, list(state.H))

        assert np.allclose(sparse_out, dense_out, rtol=1e-10, atol=1e-12)
        assert [counter.macs[i] for i in range(len(spec.layers))] == macs

def test_single_pixel_macs():
    spec = parse_spec_file("net classifier 8x8\nlayer conv in=2 out=32 k=3 pad=1\nlayer output in=2048 units=2")
    model = Model.init(spec.networks["classification"], np.random.default_rng(1))
    frame = np.zeros((2, 8, 8))
    frame[1, 4, 3] = 1.0
    counter = MacCounter()
    forward_sparse(model, SparseActivations.from_dense(frame), model.initial_state(), counter)
    assert counter.macs[0] == 9 * 32
    assert counter.events_in[0] == 1

    # a corner pixel reaches only four outputs
    corner = np.zeros((2, 8, 8))
    corner[0, 0, 0] = 1.0
    counter = MacCounter()
    forward_sparse(model, SparseActivations.from_dense(corner), model.initial_state(), counter)
    assert counter.macs[0] == 4 * 32


def test_activations_collected():
    spec = parse_spec_file(read_text(config_path("desk.net"))).networks["classification"]
    model = Model.init(spec, np.random.default_rng(2))
    frame = sparse_frame(np.random.default_rng(3), spec.input_shape)
    activations = []
    forward_dense(model, frame, model.initial_state(), activations)
    assert [a.shape for a in activations] == [(8, 6, 6), (16, 3, 3), (64,)]
    assert all(np.all(a >= 0) for a in activations)

    sparse = []
    forward_sparse(model, SparseActivations.from_dense(frame), model.initial_state(), MacCounter(), sparse)
    for a, b in zip(activations, sparse):
        assert np.allclose(a, b)


def test_shape_mismatch(small):
    model = Model.init(small["classification"], np.random.default_rng(0))
    with pytest.raises(custom_errors.ShapeMismatch) as error:
        forward_dense(model, np.zeros((2, 6, 6)), model.initial_state())
    assert "does not match network input (2, 7, 7)" in str(error)
    with pytest.raises(custom_errors.ShapeMismatch):
        forward_sparse(
            model, SparseActivations.from_dense(np.zeros((2, 6, 6))), model.initial_state(), MacCounter()
        )
    with pytest.raises(custom_errors.ShapeMismatch):
        SparseActivations.from_dense(np.zeros((6, 6)))
    with pytest.raises(custom_errors.LayerCountMismatch):
        Model(small["classification"], model.layers[1:])


def test_sparse_activations():
    dense = np.zeros((2, 3, 4))
    dense[1, 2, 0] = 3.0
    dense[0, 0, 3] = -1.0
    events = SparseActivations.from_dense(dense)
    assert len(events) == 2
    assert events.channel.tolist() == [0, 1]
    assert np.array_equal(events.to_dense(), dense)


def test_l1_loss(seeds):
    assert l1_activation_loss([np.zeros(5)], 0.1) == 0.0
    assert l1_activation_loss([np.array([2.5])], 0.01) == pytest.approx(0.025)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        activations = [rng.normal(size=(3, 4)), rng.normal(size=7)]
        expected = sum(abs(v) for a in activations for v in a.ravel())
        assert l1_activation_loss(activations, 0.5) == pytest.approx(0.5 * expected)


def test_quantized_model(small):
    model = randomized(small["roi_prediction"], np.random.default_rng(4))
    assert not model.is_quantized
    quantized = model.quantize()
    assert quantized.is_quantized
    # the source model is left untouched
    assert not model.is_quantized
    for layer in quantized.layers:
        if layer.spec.has_weights:
            s = layer.quant.scale_exponent
            assert np.all(np.abs(layer.weight - layer.params["weight"]) <= 2.0 ** (s - 1))

    frame = sparse_frame(np.random.default_rng(5), (2, 6, 6))
    dense_out, _ = forward_dense(quantized, frame, quantized.initial_state())
    sparse_out, _ = forward_sparse(
        quantized, SparseActivations.from_dense(frame), quantized.initial_state(), MacCounter()
    )
    assert np.allclose(dense_out, sparse_out)


def test_fold_batchnorm(small):
    rng = np.random.default_rng(6)
    model = randomized(small["roi_prediction"], rng)
    folded = fold_batchnorm(model)
    assert [layer.spec.kind for layer in folded.layers] == ["conv", "maxpool", "relu_rnn", "output"]
    assert folded.spec.layers[1].relu_after

    frame = sparse_frame(rng, (2, 6, 6))
    expected, _ = forward_dense(model, frame, model.initial_state())
    output, _ = forward_dense(folded, frame, folded.initial_state())
    assert np.allclose(output, expected, rtol=1e-10, atol=1e-12)


def test_copy_is_deep(small):
    model = Model.init(small["classification"], np.random.default_rng(7))
    clone = model.copy()
    clone.layers[1].params["weight"][0, 0, 0, 0] += 1.0
    assert model.layers[1].params["weight"][0, 0, 0, 0] != clone.layers[1].params["weight"][0, 0, 0, 0]
    assert isinstance(clone.layers[0], Layer)
