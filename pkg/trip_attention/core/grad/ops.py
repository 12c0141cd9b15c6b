"""Differentiable primitives recorded on a Tape.

Every primitive takes nodes whose leading axis is the batch, computes its value with
numpy and records a closure mapping the output gradient to input gradients.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trip_attention.core.attention import sigmoid as _sigmoid
from trip_attention.core.grad.tape import Node
from trip_attention.core.quantize import Q_MAX, Q_MIN

BN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back to the input shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def add(a: Node, b: Node) -> Node:
    """Elementwise a + b with broadcasting."""
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Node, b: Node) -> Node:
    """Elementwise a - b with broadcasting."""
    return a.tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))
    )


def mul(a: Node, b: Node) -> Node:
    """Elementwise a * b with broadcasting."""
    return a.tape.record(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def affine(a: Node, scale: float, shift: float = 0.0) -> Node:
    """scale * a + shift with constant scale and shift."""
    return a.tape.record(a.value * scale + shift, (a,), lambda g: (g * scale,))


def sum_all(a: Node) -> Node:
    """Sum of all elements as a scalar."""
    return a.tape.record(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_nodes(nodes) -> Node:
    """Elementwise mean of equally shaped nodes."""
    nodes = tuple(nodes)
    count = len(nodes)
    value = sum(node.value for node in nodes) / count

    return nodes[0].tape.record(value, nodes, lambda g: tuple(g / count for _ in nodes))


def reshape(a: Node, shape) -> Node:
    """Reshape keeping the element order."""
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Node) -> Node:
    """Flatten all but the batch axis."""
    return reshape(a, (a.shape[0], -1))


def concat(nodes, axis: int = 1) -> Node:
    """Concatenate along an axis."""
    nodes = tuple(nodes)
    bounds = np.cumsum([node.shape[axis] for node in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return nodes[0].tape.record(np.concatenate([node.value for node in nodes], axis=axis), nodes, backward)


def take(a: Node, index: int) -> Node:
    """Select one entry of the last axis."""

    def backward(g):
        grad = np.zeros_like(a.value)
        grad[..., index] = g
        return (grad,)

    return a.tape.record(a.value[..., index], (a,), backward)


def relu(a: Node) -> Node:
    """Rectified linear unit, subgradient 0 at 0."""
    mask = a.value > 0

    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    """Hyperbolic tangent."""
    value = np.tanh(a.value)

    return a.tape.record(value, (a,), lambda g: (g * (1 - value**2),))


def sigmoid(a: Node) -> Node:
    """Logistic function."""
    value = _sigmoid(a.value)

    return a.tape.record(value, (a,), lambda g: (g * value * (1 - value),))


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """Batched x @ weight.T + bias for x of shape (batch, features)."""

    def backward(g):
        return (g @ weight.value, g.T @ x.value, g.sum(axis=0))

    return x.tape.record(x.value @ weight.value.T + bias.value, (x, weight, bias), backward)


def conv2d(x: Node, weight: Node, bias: Node, padding: int = 0, stride: int = 1) -> Node:
    """Cross-correlation of (batch, C, H, W) inputs with (O, C, k, k) weights."""
    k = weight.shape[-1]
    padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    value = np.einsum("bchwij,ocij->bohw", windows, weight.value) + bias.value[None, :, None, None]
    out_h, out_w = value.shape[2:]

    def backward(g):
        grad_w = np.einsum("bohw,bchwij->ocij", g, windows)
        grad_b = g.sum(axis=(0, 2, 3))
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.einsum(
                    "bohw,oc->bchw", g, weight.value[:, :, i, j]
                )
        grad_x = grad_padded[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        return (grad_x, grad_w, grad_b)

    return x.tape.record(value, (x, weight, bias), backward)


def batchnorm_train(x: Node, gamma: Node, beta: Node):
    """BatchNorm with batch statistics over (batch, H, W).

    Returns
    -------
    out (Node) : normalized output
    mean (numpy.ndarray) : per-channel batch mean
    var (numpy.ndarray) : per-channel biased batch variance
    """
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.value.mean(axis=axes)
    var = x.value.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x.value - mean[None, :, None, None]) * inv_std[None, :, None, None]
    value = gamma.value[None, :, None, None] * x_hat + beta.value[None, :, None, None]

    def backward(g):
        grad_hat = g * gamma.value[None, :, None, None]
        grad_x = (
            inv_std[None, :, None, None]
            / count
            * (
                count * grad_hat
                - grad_hat.sum(axis=axes)[None, :, None, None]
                - x_hat * (grad_hat * x_hat).sum(axis=axes)[None, :, None, None]
            )
        )
        return (grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes))

    return x.tape.record(value, (x, gamma, beta), backward), mean, var


def batchnorm_eval(x: Node, gamma: Node, beta: Node, mean: np.ndarray, var: np.ndarray) -> Node:
    """BatchNorm with fixed running statistics."""
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x.value - mean[None, :, None, None]) * inv_std[None, :, None, None]
    value = gamma.value[None, :, None, None] * x_hat + beta.value[None, :, None, None]

    def backward(g):
        grad_x = g * (gamma.value * inv_std)[None, :, None, None]
        return (grad_x, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return x.tape.record(value, (x, gamma, beta), backward)


def maxpool2d(x: Node, kernel: int, stride: int) -> Node:
    """Max pooling without padding; the gradient goes to the first maximum in row-major order."""
    windows = sliding_window_view(x.value, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, channels, out_h, out_w = windows.shape[:4]
    flat = windows.reshape(batch, channels, out_h, out_w, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    value = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    b, c, h, w = np.indices(argmax.shape)
    rows = h * stride + argmax // kernel
    cols = w * stride + argmax % kernel

    def backward(g):
        grad = np.zeros_like(x.value)
        np.add.at(grad, (b, c, rows, cols), g)
        return (grad,)

    return x.tape.record(value, (x,), backward)


def kernel_centers(g: Node, delta: Node, offsets: np.ndarray) -> Node:
    """Kernel centers g + offset * delta of shape (batch, N)."""
    value = g.value[:, None] + delta.value[:, None] * offsets[None, :]

    return g.tape.record(value, (g, delta), lambda grad: (grad.sum(axis=1), (grad * offsets).sum(axis=1)))


def gaussian_weights(mu: Node, sigma: float, mask: np.ndarray) -> Node:
    """Truncated Gaussian rows exp(-(n - mu)^2 / (2 sigma)) of shape (batch, N, size).

    The truncation mask is a constant, so no gradient flows through the cutoff.
    """
    n = np.arange(mask.shape[-1], dtype=mu.value.dtype)
    distance = n[None, None, :] - mu.value[:, :, None]
    value = np.where(mask, np.exp(-(distance**2) / (2 * sigma)), 0.0)

    return mu.tape.record(value, (mu,), lambda g: ((g * value * distance / sigma).sum(axis=-1),))


def tgk_crop(frames: Node, f_y: Node, f_x: Node) -> Node:
    """Separable crop out[b, p, j, i] = sum over (m, n) of F_y[b, j, m] I[b, p, m, n] F_x[b, i, n]."""
    rows = np.einsum("bjm,bpmn->bpjn", f_y.value, frames.value)
    value = np.einsum("bpjn,bin->bpji", rows, f_x.value)

    def backward(g):
        grad_x = np.einsum("bpji,bpjn->bin", g, rows)
        cols = np.einsum("bpmn,bin->bpmi", frames.value, f_x.value)
        grad_y = np.einsum("bpji,bpmi->bjm", g, cols)
        grad_frames = np.einsum("bjm,bpji,bin->bpmn", f_y.value, g, f_x.value) if frames.requires_grad else None
        return (grad_frames, grad_y, grad_x)

    return frames.tape.record(value, (frames, f_y, f_x), backward)


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    batch = logits.shape[0]
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = -log_probs[np.arange(batch), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(batch), labels] -= 1
        return (g * grad / batch,)

    return logits.tape.record(value, (logits,), backward)


def l1(a: Node) -> Node:
    """Sum of absolute values."""
    return a.tape.record(np.abs(a.value).sum(), (a,), lambda g: (g * np.sign(a.value),))


def fake_quantize(a: Node, scale_exponent: int) -> Node:
    """Round to signed 4-bit values times 2 ** scale_exponent, passing the gradient straight through."""
    q = np.clip(np.rint(np.ldexp(a.value, -scale_exponent)), Q_MIN, Q_MAX)
    value = np.ldexp(q, scale_exponent).astype(a.value.dtype)

    return a.tape.record(value, (a,), lambda g: (g,))
