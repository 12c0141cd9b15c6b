"""4-bit weight quantization with a per-layer power-of-two scale and nibble packing."""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from trip_attention.core import custom_errors

logger = logging.getLogger(__name__)

Q_MIN = -8
Q_MAX = 7
# largest magnitude that rounds into the signed 4-bit range
Q_LIMIT = 7.5


@dataclass(frozen=True)
class QuantTensor:
    """Packed signed 4-bit weights sharing one power-of-two scale.

    Parameters
    ----------
    packed (bytes) : two values per byte, low nibble first
    shape (tuple) : shape of the unpacked tensor
    scale_exponent (int) : dequantized value is q * 2 ** scale_exponent
    """

    packed: bytes
    shape: Tuple[int, ...]
    scale_exponent: int

    @property
    def size(self) -> int:
        """Number of quantized values."""
        return int(np.prod(self.shape, dtype=np.int64))

    def values(self) -> np.ndarray:
        """Unpacked int8 values in [-8, 7] with the tensor shape."""
        return unpack_nibbles(self.packed, self.size).reshape(self.shape)

    def dequantize(self) -> np.ndarray:
        """Float64 weights q * 2 ** s."""
        return np.ldexp(self.values().astype(np.float64), self.scale_exponent)


def auto_scale_exponent(max_abs: float) -> int:
    """Smallest integer s with max_abs / 2 ** s <= 7.5.

    Examples
    --------
    >>> auto_scale_exponent(0.5)
    -3
    >>> auto_scale_exponent(7.5)
    0
    """
    s = math.ceil(math.log2(max_abs / Q_LIMIT))
    # correct log2 rounding at exact powers of two
    while max_abs / 2.0**s > Q_LIMIT:
        s += 1
    while max_abs / 2.0 ** (s - 1) <= Q_LIMIT:
        s -= 1

    return s


def quantize_layer(
    weights: np.ndarray, strategy: Union[str, int] = "auto", strict: bool = False
) -> QuantTensor:
    """Quantize a weight tensor to signed 4-bit values with a power-of-two scale.

    Parameters
    ----------
    weights (numpy.ndarray) : finite float weights
    strategy (str|int, default='auto') : 'auto' picks the smallest exponent that avoids clipping, an integer forces the exponent
    strict (bool, default=False) : raise AllZeroLayer instead of falling back to s=0

    Returns
    -------
    quant (QuantTensor) : q = clip(round_half_even(w / 2 ** s), -8, 7)

    Examples
    --------
    >>> quantize_layer(np.array([0.5])).dequantize().tolist()
    [0.5]
    >>> quantize_layer(np.array([0.5]), strategy=-4).dequantize().tolist()
    [0.4375]
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise custom_errors.ValueOutOfRange("weights must be finite to quantize")

    max_abs = float(np.max(np.abs(weights))) if weights.size else 0.0
    if isinstance(strategy, str):
        if strategy != "auto":
            raise ValueError(f"strategy must be 'auto' or an integer exponent, got '{strategy}'")
        if max_abs == 0:
            if strict:
                raise custom_errors.AllZeroLayer("cannot derive a scale for an all-zero layer")
            logger.warning("Quantizing an all-zero layer with scale exponent 0.")
            s = 0
        else:
            s = auto_scale_exponent(max_abs)
    else:
        s = int(strategy)

    q = np.clip(np.rint(np.ldexp(weights, -s)), Q_MIN, Q_MAX).astype(np.int8)

    return QuantTensor(packed=pack_nibbles(q.ravel()), shape=tuple(weights.shape), scale_exponent=s)


def pack_nibbles(q_values) -> bytes:
    """Pack signed 4-bit values two per byte, low nibble first.

    Parameters
    ----------
    q_values (array-like) : integers in [-8, 7], odd lengths are padded with a zero nibble

    Returns
    -------
    data (bytes) : ceil(len / 2) bytes

    Examples
    --------
    >>> pack_nibbles([-1, 7]).hex()
    '7f'
    """
    q = np.asarray(q_values, dtype=np.int64).ravel()
    if q.size and (q.min() < Q_MIN or q.max() > Q_MAX):
        raise custom_errors.ValueOutOfRange(
            f"values must be in [{Q_MIN}, {Q_MAX}], got [{q.min()}, {q.max()}]"
        )
    nibbles = (q & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))

    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    """Unpack count signed 4-bit values packed by pack_nibbles.

    Parameters
    ----------
    data (bytes) : packed values
    count (int) : number of values to return

    Returns
    -------
    q_values (numpy.ndarray) : int8 values in [-8, 7]
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if 2 * len(data) < count:
        raise custom_errors.TruncatedFile(f"{len(data)} bytes cannot hold {count} values")

    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    nibbles = np.empty(2 * raw.size, dtype=np.int8)
    nibbles[0::2] = raw & 0xF
    nibbles[1::2] = raw >> 4
    nibbles = nibbles[0:count]

    return np.where(nibbles >= 8, nibbles - 16, nibbles).astype(np.int8)
