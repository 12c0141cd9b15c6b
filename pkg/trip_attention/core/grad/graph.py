"""Batched forward passes of models and model pairs recorded on a Tape."""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from trip_attention.core.attention import RoiParams, crop_dap, dap_region, grid_offsets, kernel_supports
from trip_attention.core.grad import ops
from trip_attention.core.grad.tape import Node, Tape
from trip_attention.core.net import Model
from trip_attention.core.pipeline import ModelPair

TRAINABLE = {"weight", "bias", "gamma", "beta"}


@dataclass
class BoundModel:
    """Tape nodes holding the parameters of one model.

    Parameters
    ----------
    model (Model) : source parameters
    nodes (dict) : node per (layer index, parameter name)
    trainable (dict) : subset of nodes that are leaves requiring gradients
    bn_stats (dict) : batch mean and variance per BatchNorm layer, one entry per training timebin
    """

    model: Model
    nodes: Dict[tuple, Node]
    trainable: Dict[tuple, Node] = field(default_factory=dict)
    bn_stats: Dict[int, list] = field(default_factory=dict)


def bind_model(
    tape: Tape, model: Model, trainable: bool = True, dtype=np.float64, straight_through: bool = False
) -> BoundModel:
    """Put model parameters on a tape.

    Quantized layers are constants holding their dequantized weights and biases, so
    gradients pass straight through them to earlier layers. With straight_through,
    quantized layers train instead: the leaf is the float shadow in params['weight'],
    the forward sees it rounded to 4 bits at the layer's scale exponent and the
    gradient reaches the shadow unchanged. BatchNorm running statistics are never
    trained.

    Parameters
    ----------
    tape (Tape) : tape to record on
    model (Model) : parameters
    trainable (bool, default=True) : if False every parameter is a constant
    dtype (numpy.dtype, default=float64) : floating point type of the nodes
    straight_through (bool, default=False) : train quantized layers through their float shadow weights

    Returns
    -------
    bound (BoundModel) : parameter nodes
    """
    nodes = {}
    leaves = {}
    for index, layer in enumerate(model.layers):
        quantized = layer.quant is not None
        shadow = quantized and straight_through and "weight" in layer.params
        for name, value in layer.params.items():
            if name not in TRAINABLE:
                continue
            if name == "weight" and not shadow:
                value = layer.weight
            value = np.asarray(value, dtype=dtype)
            if trainable and (shadow or not quantized):
                node = tape.leaf(value)
                leaves[(index, name)] = node
                if name == "weight" and shadow:
                    node = ops.fake_quantize(node, layer.quant.scale_exponent)
            else:
                node = tape.constant(value)
            nodes[(index, name)] = node
        if layer.spec.has_weights and (index, "weight") not in nodes:
            nodes[(index, "weight")] = tape.constant(np.asarray(layer.weight, dtype=dtype))

    return BoundModel(model=model, nodes=nodes, trainable=leaves)


def initial_hidden(tape: Tape, model: Model, batch: int, dtype=np.float64) -> List[Node]:
    """Zero hidden state nodes, one per relu_rnn layer."""
    return [
        tape.constant(np.zeros((batch, layer.spec.units), dtype=dtype))
        for layer in model.layers
        if layer.spec.kind == "relu_rnn"
    ]


def forward_graph(
    bound: BoundModel,
    x: Node,
    hidden: List[Node],
    training: bool = False,
    activations: list = None,
):
    """Forward one timebin of a batch through a model.

    Parameters
    ----------
    bound (BoundModel) : parameter nodes
    x (Node) : input of shape (batch, 2, height, width)
    hidden (list) : hidden state node per relu_rnn layer
    training (bool, default=False) : BatchNorm uses batch statistics and records them in bound.bn_stats
    activations (list, default=None) : if given, every ReLU output node is appended

    Returns
    -------
    output (Node) : output of shape (batch, units)
    hidden (list) : updated hidden state nodes
    """
    hidden = list(hidden)
    rnn_index = 0
    for index, layer in enumerate(bound.model.layers):
        spec = layer.spec
        p = bound.nodes
        if spec.kind == "conv":
            x = ops.conv2d(x, p[(index, "weight")], p[(index, "bias")], spec.padding, spec.stride)
        elif spec.kind == "batchnorm":
            if training:
                x, mean, var = ops.batchnorm_train(x, p[(index, "gamma")], p[(index, "beta")])
                bound.bn_stats.setdefault(index, []).append((mean, var))
            else:
                x = ops.batchnorm_eval(
                    x, p[(index, "gamma")], p[(index, "beta")], layer.params["mean"], layer.params["var"]
                )
        elif spec.kind == "maxpool":
            x = ops.maxpool2d(x, spec.kernel, spec.stride)
        elif spec.kind == "relu_rnn":
            z = ops.concat([ops.flatten(x), hidden[rnn_index]], axis=1)
            x = ops.relu(ops.linear(z, p[(index, "weight")], p[(index, "bias")]))
            hidden[rnn_index] = x
            rnn_index += 1
        else:
            x = ops.linear(ops.flatten(x), p[(index, "weight")], p[(index, "bias")])

        if spec.relu_after:
            x = ops.relu(x)
        if activations is not None and (spec.relu_after or spec.kind == "relu_rnn"):
            activations.append(x)

    return x, hidden


def truncation_mask(mu: np.ndarray, theta: float, size: int) -> np.ndarray:
    """Boolean kernel supports of shape mu.shape + (size,)."""
    support = kernel_supports(mu.ravel(), theta, size).reshape(mu.shape + (2,))
    n = np.arange(size)

    return (n >= support[..., 0:1]) & (n <= support[..., 1:2])


@dataclass
class PairOutputs:
    """Nodes and values produced by a batched pair forward."""

    logits: Node
    activations: List[Node]
    rois: List[List[RoiParams]]


def forward_pair(
    tape: Tape,
    pair: ModelPair,
    roi_bound: BoundModel,
    cls_bound: BoundModel,
    frames: np.ndarray,
    training: bool = False,
    mode: str = "tgk",
) -> PairOutputs:
    """Record the full pipeline over all timebins of a batch.

    The classifier consumes the ROI of the same timebin. In tgk mode gradients flow
    from the classifier through the crop, the Gaussian weights, the kernel centers and
    the decode into the ROI network. In dap mode the crop is a constant input.

    Parameters
    ----------
    tape (Tape) : tape to record on
    pair (ModelPair) : networks and ROI generation settings
    roi_bound (BoundModel) : ROI network parameter nodes
    cls_bound (BoundModel) : classifier parameter nodes
    frames (numpy.ndarray) : counts of shape (batch, T, 2, B, A)
    training (bool, default=False) : BatchNorm of networks with trainable parameters uses batch statistics
    mode (str, default='tgk') : tgk or dap

    Returns
    -------
    outputs (PairOutputs) : mean logits over timebins, ReLU activations, decoded ROIs per timebin
    """
    batch, timebins = frames.shape[0:2]
    dtype = roi_bound.nodes[next(iter(roi_bound.nodes))].value.dtype
    frames = frames.astype(dtype)
    A, B, S = pair.decode.A, pair.decode.B, pair.decode.S
    grid = pair.grid
    offsets = grid_offsets(grid.N).astype(dtype)

    roi_hidden = initial_hidden(tape, roi_bound.model, batch, dtype)
    cls_hidden = initial_hidden(tape, cls_bound.model, batch, dtype)
    # frozen networks always evaluate BatchNorm with running statistics
    roi_training = training and bool(roi_bound.trainable)
    cls_training = training and bool(cls_bound.trainable)
    activations = []
    logits = []
    rois = []
    for t in range(timebins):
        frame = tape.constant(frames[:, t])
        output, roi_hidden = forward_graph(roi_bound, frame, roi_hidden, roi_training, activations)
        g_x = ops.affine(ops.tanh(ops.take(output, 0)), A / 2, A / 2)
        g_y = ops.affine(ops.tanh(ops.take(output, 1)), B / 2, B / 2)
        delta = ops.affine(ops.sigmoid(ops.take(output, 2)), S, S)
        step_rois = [RoiParams(float(x), float(y), float(d)) for x, y, d in zip(g_x.value, g_y.value, delta.value)]
        rois.append(step_rois)

        if mode == "tgk":
            mu_x = ops.kernel_centers(g_x, delta, offsets)
            mu_y = ops.kernel_centers(g_y, delta, offsets)
            f_x = ops.gaussian_weights(mu_x, grid.sigma, truncation_mask(mu_x.value, grid.theta, A))
            f_y = ops.gaussian_weights(mu_y, grid.sigma, truncation_mask(mu_y.value, grid.theta, B))
            crop = ops.tgk_crop(frame, f_y, f_x)
        elif mode == "dap":
            crop = tape.constant(
                np.stack(
                    [crop_dap(frames[b, t], dap_region(roi, grid), grid.N) for b, roi in enumerate(step_rois)]
                ).astype(dtype)
            )
        else:
            raise ValueError(f"mode must be 'tgk' or 'dap', got '{mode}'")

        output, cls_hidden = forward_graph(cls_bound, crop, cls_hidden, cls_training, activations)
        logits.append(output)

    return PairOutputs(logits=ops.mean_nodes(logits), activations=activations, rois=rois)
