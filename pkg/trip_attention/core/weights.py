"""TRPW weight files: 4-bit packed weights plus float32 auxiliary parameters per layer.

Layout, little-endian throughout:

    magic "TRPW", u16 layer count
    per layer: u8 kind, u8 rank, u32 dims[rank], i8 scale exponent,
               u32 packed byte length, packed nibbles,
               u32 auxiliary value count, f32 auxiliary values

Auxiliary values are the bias of weight layers and gamma, beta, mean, var of BatchNorm.
"""

import logging
import struct
from typing import Tuple

import numpy as np

from trip_attention.core import custom_errors
from trip_attention.core.net import Layer, Model
from trip_attention.core.netspec import NetworkSpec
from trip_attention.core.quantize import QuantTensor, quantize_layer

logger = logging.getLogger(__name__)

MAGIC = b"TRPW"
KIND_CODES = {"conv": 1, "maxpool": 2, "batchnorm": 3, "relu_rnn": 4, "fully_connected": 5, "output": 6}
BN_PARAMS = ("gamma", "beta", "mean", "var")


class _Reader:
    """Sequential little-endian reader raising TruncatedFile past the end."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> Tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise custom_errors.TruncatedFile(
                f"expected {size} bytes at offset {self.offset}, file has {len(self.data)}"
            )
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size

        return values

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise custom_errors.TruncatedFile(
                f"expected {size} bytes at offset {self.offset}, file has {len(self.data)}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size

        return chunk


def _aux_values(layer: Layer) -> np.ndarray:
    if layer.spec.has_weights:
        return layer.params["bias"]
    if layer.spec.kind == "batchnorm":
        return np.concatenate([layer.params[name] for name in BN_PARAMS])

    return np.zeros(0)


def save_weights(model: Model) -> bytes:
    """Serialize a model to TRPW bytes.

    Weight layers without 4-bit weights are quantized with the automatic scale first.

    Parameters
    ----------
    model (Model) : network with parameters

    Returns
    -------
    data (bytes) : TRPW file contents
    """
    if not model.layers:
        raise custom_errors.LayerCountMismatch("cannot save a model without layers")

    chunks = [MAGIC, struct.pack("<H", len(model.layers))]
    for index, layer in enumerate(model.layers):
        spec = layer.spec
        quant = layer.quant
        if spec.has_weights and quant is None:
            logger.warning(f"Layer {index} ({spec.kind}) is not quantized, quantizing with automatic scale.")
            quant = quantize_layer(layer.params["weight"])
        if quant is None:
            quant = QuantTensor(packed=b"", shape=(), scale_exponent=0)
        shape = quant.shape if spec.has_weights else ()

        chunks.append(struct.pack("<BB", KIND_CODES[spec.kind], len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(struct.pack("<bI", quant.scale_exponent, len(quant.packed)))
        chunks.append(quant.packed)
        aux = np.asarray(_aux_values(layer), dtype="<f4")
        chunks.append(struct.pack("<I", aux.size))
        chunks.append(aux.tobytes())

    return b"".join(chunks)


def load_weights(data: bytes, spec: NetworkSpec) -> Model:
    """Parse TRPW bytes into a model for a network specification.

    Parameters
    ----------
    data (bytes) : TRPW file contents
    spec (NetworkSpec) : network the weights were saved for

    Returns
    -------
    model (Model) : quantized weight layers with float64 auxiliary parameters
    """
    if data[0 : len(MAGIC)] != MAGIC:
        raise custom_errors.BadMagic(f"expected magic {MAGIC!r}, got {data[0:4]!r}")
    reader = _Reader(data)
    reader.take(len(MAGIC))
    (count,) = reader.unpack("<H")
    if count == 0 or count != len(spec.layers):
        raise custom_errors.LayerCountMismatch(
            f"file holds {count} layers, network '{spec.role}' has {len(spec.layers)}"
        )

    layers = []
    for index, layer_spec in enumerate(spec.layers):
        kind, rank = reader.unpack("<BB")
        if kind != KIND_CODES[layer_spec.kind]:
            raise custom_errors.ShapeMismatch(
                f"layer {index}: file kind code {kind} does not match {layer_spec.kind}"
            )
        shape = reader.unpack(f"<{rank}I")
        scale_exponent, packed_len = reader.unpack("<bI")
        packed = reader.take(packed_len)
        (aux_count,) = reader.unpack("<I")
        aux = np.frombuffer(reader.take(4 * aux_count), dtype="<f4").astype(np.float64)

        params = {}
        quant = None
        if layer_spec.has_weights:
            if tuple(shape) != layer_spec.weight_shape():
                raise custom_errors.ShapeMismatch(
                    f"layer {index}: weight shape {tuple(shape)} does not match {layer_spec.weight_shape()}"
                )
            quant = QuantTensor(packed=bytes(packed), shape=tuple(shape), scale_exponent=scale_exponent)
            if len(packed) != (quant.size + 1) // 2:
                raise custom_errors.ShapeMismatch(
                    f"layer {index}: {len(packed)} packed bytes for {quant.size} weights"
                )
            expected = layer_spec.weight_shape()[0]
            if aux.size != expected:
                raise custom_errors.ShapeMismatch(f"layer {index}: {aux.size} biases, expected {expected}")
            params["bias"] = aux
        elif layer_spec.kind == "batchnorm":
            channels = layer_spec.out_channels
            if aux.size != 4 * channels:
                raise custom_errors.ShapeMismatch(
                    f"layer {index}: {aux.size} batchnorm values, expected {4 * channels}"
                )
            params = {name: aux[i * channels : (i + 1) * channels].copy() for i, name in enumerate(BN_PARAMS)}
        layers.append(Layer(spec=layer_spec, params=params, quant=quant))

    if reader.offset != len(data):
        logger.warning(f"Ignoring {len(data) - reader.offset} trailing bytes after {count} layers.")

    return Model(spec, layers)
