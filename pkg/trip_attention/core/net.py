"""Network models with a dense reference forward and an event-driven sparse forward.

Tensors are channels first. A convolutional block is a conv layer followed by its
BatchNorm and MaxPool layers, with a single ReLU after the block. The sparse forward
consumes only nonzero activations and tallies the multiply-accumulates it performs.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trip_attention.core import custom_errors
from trip_attention.core.netspec import NetworkSpec, resolve_network
from trip_attention.core.quantize import QuantTensor, quantize_layer

logger = logging.getLogger(__name__)

BN_EPS = 1e-5


@dataclass
class Layer:
    """Parameters of one layer.

    Parameters
    ----------
    spec (LayerSpec) : resolved layer specification
    params (dict) : weight and bias for weight layers; gamma, beta, mean and var for batchnorm
    quant (QuantTensor, default=None) : 4-bit weights, replaces params['weight'] when set
    """

    spec: object
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    quant: Optional[QuantTensor] = None

    @property
    def weight(self) -> np.ndarray:
        """Effective float weights, dequantized when the layer is quantized."""
        if self.quant is not None:
            return self.quant.dequantize()
        return self.params["weight"]


@dataclass(frozen=True)
class RecurrentState:
    """Recurrent state carried across the timebins of one sample.

    Parameters
    ----------
    H (tuple) : hidden activation vector of every relu_rnn layer, in layer order
    P (numpy.ndarray, default=None) : output vector of the last processed timebin
    """

    H: Tuple[np.ndarray, ...]
    P: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SparseActivations:
    """Nonzero activations of a channels-first tensor in row-major order.

    Parameters
    ----------
    channel (numpy.ndarray) : channel index of each nonzero value
    y (numpy.ndarray) : row index
    x (numpy.ndarray) : column index
    values (numpy.ndarray) : nonzero values
    shape (tuple) : dense shape (C, H, W)
    """

    channel: np.ndarray
    y: np.ndarray
    x: np.ndarray
    values: np.ndarray
    shape: Tuple[int, int, int]

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseActivations":
        """Collect the nonzero entries of a (C, H, W) array."""
        dense = np.asarray(dense)
        if dense.ndim != 3:
            raise custom_errors.ShapeMismatch(f"expected a (C, H, W) tensor, got {dense.shape}")
        channel, y, x = np.nonzero(dense)

        return cls(channel=channel, y=y, x=x, values=dense[channel, y, x].astype(np.float64), shape=dense.shape)

    def __len__(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        """Dense float64 tensor."""
        dense = np.zeros(self.shape, dtype=np.float64)
        dense[self.channel, self.y, self.x] = self.values

        return dense


class MacCounter:
    """Per-layer effective multiply-accumulates and event counts of sparse forwards."""

    def __init__(self):
        self.macs = {}
        self.events_in = {}
        self.events_out = {}

    def add(self, layer: int, macs: int = 0, events_in: int = 0, events_out: int = 0) -> None:
        """Accumulate counts for a layer index."""
        self.macs[layer] = self.macs.get(layer, 0) + int(macs)
        self.events_in[layer] = self.events_in.get(layer, 0) + int(events_in)
        self.events_out[layer] = self.events_out.get(layer, 0) + int(events_out)

    @property
    def total(self) -> int:
        """Sum of multiply-accumulates over all layers."""
        return sum(self.macs.values())


class Model:
    """A network specification with its parameters.

    Parameters
    ----------
    spec (NetworkSpec) : resolved network
    layers (list) : Layer per spec layer

    Examples
    --------
    >>> from trip_attention.core.netspec import parse_spec_file
    >>> spec = parse_spec_file("net classifier 2x2\\nlayer output in=8 units=3").networks["classification"]
    >>> model = Model.init(spec, np.random.default_rng(0))
    >>> out, state = forward_dense(model, np.zeros((2, 2, 2)), model.initial_state())
    >>> out.tolist()
    [0.0, 0.0, 0.0]
    """

    def __init__(self, spec: NetworkSpec, layers: List[Layer]):
        if len(layers) != len(spec.layers):
            raise custom_errors.LayerCountMismatch(
                f"spec has {len(spec.layers)} layers, got parameters for {len(layers)}"
            )
        self.spec = spec
        self.layers = layers

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, zero_output: bool = False) -> "Model":
        """Randomly initialize parameters.

        Conv and hidden fully connected weights are He-normal, relu_rnn and output
        weights are LeCun-normal; biases start at zero and BatchNorm at identity.

        Parameters
        ----------
        spec (NetworkSpec) : resolved network
        rng (numpy.random.Generator) : source of randomness
        zero_output (bool, default=False) : zero the output layer weights
        """
        layers = []
        for layer in spec.layers:
            params = {}
            if layer.has_weights:
                shape = layer.weight_shape()
                fan_in = int(np.prod(shape[1:]))
                gain = 2.0 if layer.kind in ("conv", "fully_connected") else 1.0
                params["weight"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
                if layer.kind == "output" and zero_output:
                    params["weight"] = np.zeros(shape)
                params["bias"] = np.zeros(shape[0])
            elif layer.kind == "batchnorm":
                channels = layer.out_channels
                params = {
                    "gamma": np.ones(channels),
                    "beta": np.zeros(channels),
                    "mean": np.zeros(channels),
                    "var": np.ones(channels),
                }
            layers.append(Layer(spec=layer, params=params))

        return cls(spec, layers)

    def copy(self) -> "Model":
        """Deep copy of all parameters."""
        layers = [
            Layer(spec=layer.spec, params={k: v.copy() for k, v in layer.params.items()}, quant=layer.quant)
            for layer in self.layers
        ]

        return Model(self.spec, layers)

    def initial_state(self) -> RecurrentState:
        """All-zero hidden state for the start of a sample."""
        return RecurrentState(
            H=tuple(np.zeros(layer.spec.units) for layer in self.layers if layer.spec.kind == "relu_rnn")
        )

    def quantize(self, strategy="auto") -> "Model":
        """Post-training quantization of every weight layer that is not yet quantized."""
        model = self.copy()
        for layer in model.layers:
            if layer.spec.has_weights and layer.quant is None:
                layer.quant = quantize_layer(layer.params["weight"], strategy)

        return model

    @property
    def is_quantized(self) -> bool:
        """Every weight layer carries 4-bit weights."""
        return all(layer.quant is not None for layer in self.layers if layer.spec.has_weights)


def _check_input(model: Model, frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != model.spec.input_shape:
        raise custom_errors.ShapeMismatch(
            f"input shape {frame.shape} does not match network input {model.spec.input_shape}"
        )

    return frame


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, padding: int, stride: int) -> np.ndarray:
    """Cross-correlation of a (C, H, W) tensor with (O, C, k, k) weights."""
    k = weight.shape[-1]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]

    return np.einsum("chwij,ocij->ohw", windows, weight) + bias[:, None, None]


def batchnorm(x: np.ndarray, params: Dict[str, np.ndarray]) -> np.ndarray:
    """Inference form gamma * (x - mean) / sqrt(var + eps) + beta over the channel axis."""
    scale = params["gamma"] / np.sqrt(params["var"] + BN_EPS)
    shift = params["beta"] - params["mean"] * scale

    return x * scale[:, None, None] + shift[:, None, None]


def maxpool2d(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Max over k x k windows without padding, floor output size."""
    windows = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]

    return windows.max(axis=(-2, -1))


def relu(x: np.ndarray) -> np.ndarray:
    """Rectified linear unit."""
    return np.maximum(x, 0.0)


def forward_dense(
    model: Model, input_frame: np.ndarray, state: RecurrentState, activations: list = None
) -> Tuple[np.ndarray, RecurrentState]:
    """Dense reference forward pass for one timebin.

    Parameters
    ----------
    model (Model) : network with parameters
    input_frame (numpy.ndarray) : input of shape (2, height, width)
    state (RecurrentState) : hidden state from the previous timebin
    activations (list, default=None) : if given, every ReLU output is appended

    Returns
    -------
    output (numpy.ndarray) : output vector
    state (RecurrentState) : hidden state after this timebin
    """
    x = _check_input(model, input_frame)
    hidden = list(state.H)
    rnn_index = 0
    for layer in model.layers:
        spec = layer.spec
        if spec.kind == "conv":
            x = conv2d(x, layer.weight, layer.params["bias"], spec.padding, spec.stride)
        elif spec.kind == "batchnorm":
            x = batchnorm(x, layer.params)
        elif spec.kind == "maxpool":
            x = maxpool2d(x, spec.kernel, spec.stride)
        elif spec.kind == "relu_rnn":
            z = np.concatenate([x.ravel(), hidden[rnn_index]])
            x = relu(layer.weight @ z + layer.params["bias"])
            hidden[rnn_index] = x
            rnn_index += 1
        else:
            x = layer.weight @ x.ravel() + layer.params["bias"]

        if spec.relu_after:
            x = relu(x)
        if activations is not None and (spec.relu_after or spec.kind == "relu_rnn"):
            activations.append(x)

    return x, RecurrentState(H=tuple(hidden), P=x)


def _conv_scatter(
    events: SparseActivations, weight: np.ndarray, bias: np.ndarray, spec
) -> Tuple[np.ndarray, int]:
    """Scatter each nonzero input into every output it reaches.

    Returns the pre-activation output and the number of multiply-accumulates, one per
    output channel for every kernel tap that lands inside the output.
    """
    out_c, out_h, out_w = spec.out_shape
    k, pad, stride = spec.kernel, spec.padding, spec.stride
    out = np.zeros((out_h, out_w, out_c), dtype=np.float64)
    macs = 0
    for ky in range(k):
        row = events.y + pad - ky
        for kx in range(k):
            col = events.x + pad - kx
            valid = (row % stride == 0) & (col % stride == 0) & (row >= 0) & (col >= 0)
            valid &= (row // stride < out_h) & (col // stride < out_w)
            if not np.any(valid):
                continue
            contributions = events.values[valid, None] * weight[:, events.channel[valid], ky, kx].T
            np.add.at(out, (row[valid] // stride, col[valid] // stride), contributions)
            macs += int(np.count_nonzero(valid)) * out_c

    return out.transpose(2, 0, 1) + bias[:, None, None], macs


def forward_sparse(
    model: Model,
    sparse_input: SparseActivations,
    state: RecurrentState,
    counter: MacCounter,
    activations: list = None,
) -> Tuple[np.ndarray, RecurrentState]:
    """Event-driven forward pass for one timebin.

    Every nonzero input event is consumed once and scattered to the outputs it
    contributes to. Conv layers count one multiply-accumulate per output channel per
    valid kernel tap; relu_rnn, fully connected and output layers count one per output
    unit per nonzero input. BatchNorm and MaxPool work on the conv layer's outputs and
    do not multiply-accumulate.

    Parameters
    ----------
    model (Model) : network with parameters
    sparse_input (SparseActivations) : nonzero input events of shape (2, height, width)
    state (RecurrentState) : hidden state from the previous timebin
    counter (MacCounter) : accrues per-layer multiply-accumulates and event counts
    activations (list, default=None) : if given, every ReLU output is appended

    Returns
    -------
    output (numpy.ndarray) : output vector, equal to forward_dense on the densified input
    state (RecurrentState) : hidden state after this timebin
    """
    if tuple(sparse_input.shape) != model.spec.input_shape:
        raise custom_errors.ShapeMismatch(
            f"input shape {sparse_input.shape} does not match network input {model.spec.input_shape}"
        )

    events = sparse_input
    dense = None
    hidden = list(state.H)
    rnn_index = 0
    for index, layer in enumerate(model.layers):
        spec = layer.spec
        if spec.kind == "conv":
            if events is None:
                events = SparseActivations.from_dense(dense)
            events_in = len(events)
            dense, macs = _conv_scatter(events, layer.weight, layer.params["bias"], spec)
            events = None
        elif spec.kind in ("batchnorm", "maxpool"):
            if dense is None:
                dense = events.to_dense()
            events_in = int(np.count_nonzero(dense))
            if spec.kind == "batchnorm":
                dense = batchnorm(dense, layer.params)
            else:
                dense = maxpool2d(dense, spec.kernel, spec.stride)
            events = None
            macs = 0
        else:
            flat = events.to_dense().ravel() if dense is None else dense.ravel()
            if spec.kind == "relu_rnn":
                flat = np.concatenate([flat, hidden[rnn_index]])
            nonzero = np.flatnonzero(flat)
            events_in = len(nonzero)
            dense = layer.weight[:, nonzero] @ flat[nonzero] + layer.params["bias"]
            macs = events_in * spec.units
            if spec.kind == "relu_rnn":
                dense = relu(dense)
                hidden[rnn_index] = dense
                rnn_index += 1
            events = None

        if spec.relu_after:
            dense = relu(dense)
        if activations is not None and (spec.relu_after or spec.kind == "relu_rnn"):
            activations.append(dense)
        counter.add(index, macs=macs, events_in=events_in, events_out=np.count_nonzero(dense))

    if dense is None:
        dense = events.to_dense()

    return dense, RecurrentState(H=tuple(hidden), P=dense)


def l1_activation_loss(activations, coefficient: float) -> float:
    """L1 sparsity penalty over ReLU activations.

    Parameters
    ----------
    activations (list) : arrays collected from ReLU layers
    coefficient (float) : L1 coefficient lambda

    Returns
    -------
    loss (float) : coefficient times the sum of absolute values

    Examples
    --------
    >>> l1_activation_loss([np.array([2.5, 0.0])], 0.01)
    0.025
    """
    return coefficient * float(sum(np.abs(a).sum() for a in activations))


def fold_batchnorm(model: Model) -> Model:
    """Fold each BatchNorm that directly follows a conv layer into that conv.

    Folded conv layers carry float weights, so quantization of a folded conv is dropped.
    """
    layers = []
    for layer in model.layers:
        previous = layers[-1] if layers else None
        if layer.spec.kind == "batchnorm" and previous is not None and previous.spec.kind == "conv":
            scale = layer.params["gamma"] / np.sqrt(layer.params["var"] + BN_EPS)
            weight = previous.weight * scale[:, None, None, None]
            bias = (previous.params["bias"] - layer.params["mean"]) * scale + layer.params["beta"]
            layers[-1] = Layer(spec=previous.spec, params={"weight": weight, "bias": bias})
            continue
        layers.append(Layer(spec=layer.spec, params=dict(layer.params), quant=layer.quant))

    unresolved = [replace(layer.spec, in_shape=(), out_shape=(), relu_after=False) for layer in layers]
    spec = resolve_network(model.spec.role, model.spec.width, model.spec.height, unresolved)
    for layer, layer_spec in zip(layers, spec.layers):
        layer.spec = layer_spec

    return Model(spec, layers)
