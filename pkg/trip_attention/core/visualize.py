"""Render timebin frames with the ROI receptive field as binary PPM images."""

import logging
from typing import Tuple

import numpy as np

from trip_attention.core import custom_errors
from trip_attention.core.attention import DapRegion

logger = logging.getLogger(__name__)

WHITE = (255, 255, 255)
GRAY = (128, 128, 128)
YELLOW = (255, 255, 0)


def _round(value: float) -> int:
    # half away from zero, unlike round()
    return int(np.sign(value) * np.floor(abs(value) + 0.5))


def rectangle_bounds(region: DapRegion) -> Tuple[int, int, int, int]:
    """Pixel bounds (x_min, x_max, y_min, y_max) of a region rounded to the nearest pixel.

    Examples
    --------
    >>> rectangle_bounds(DapRegion(x_min=17.5, x_max=110.4, y_min=-2.5, y_max=3.0, k_dap=7.7))
    (18, 110, -3, 3)
    """
    return _round(region.x_min), _round(region.x_max), _round(region.y_min), _round(region.y_max)


def render_frame(frame: np.ndarray, region: DapRegion = None) -> np.ndarray:
    """Draw events and an optional rectangle outline into an RGB image.

    Pixels with a polarity 1 event are white, pixels with only polarity 0 events are
    gray and the background is black. The rectangle outline is yellow and clipped to
    the image.

    Parameters
    ----------
    frame (numpy.ndarray) : event counts of shape (2, height, width)
    region (DapRegion, default=None) : receptive field to outline

    Returns
    -------
    image (numpy.ndarray) : uint8 array of shape (height, width, 3)
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 2:
        raise custom_errors.ShapeMismatch(f"frame must have shape (2, height, width), got {frame.shape}")
    height, width = frame.shape[1:]
    image = np.zeros((height, width, 3), dtype=np.uint8)
    image[frame[0] != 0] = GRAY
    image[frame[1] != 0] = WHITE

    if region is not None:
        x0, x1, y0, y1 = rectangle_bounds(region)
        cols = slice(max(x0, 0), min(x1, width - 1) + 1)
        rows = slice(max(y0, 0), min(y1, height - 1) + 1)
        for y in (y0, y1):
            if 0 <= y < height:
                image[y, cols] = YELLOW
        for x in (x0, x1):
            if 0 <= x < width:
                image[rows, x] = YELLOW

    return image


def write_ppm(image: np.ndarray) -> bytes:
    """Encode an RGB uint8 image as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise custom_errors.ShapeMismatch(f"image must be uint8 of shape (height, width, 3), got {image.dtype} {image.shape}")
    height, width = image.shape[0:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")

    return header + np.ascontiguousarray(image).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    """Decode a binary P6 image with maxval 255.

    Returns
    -------
    image (numpy.ndarray) : uint8 array of shape (height, width, 3)
    """
    tokens = []
    position = 0
    # magic, width, height and maxval are whitespace separated, comments start with #
    while len(tokens) < 4:
        while position < len(data) and data[position : position + 1].isspace():
            position += 1
        if data[position : position + 1] == b"#":
            position = data.find(b"\n", position)
            if position < 0:
                raise custom_errors.TruncatedFile("PPM header ends inside a comment")
            continue
        start = position
        while position < len(data) and not data[position : position + 1].isspace():
            position += 1
        if start == position:
            raise custom_errors.TruncatedFile("PPM header is incomplete")
        tokens.append(data[start:position])
    if tokens[0] != b"P6":
        raise custom_errors.BadMagic(f"expected P6, got {tokens[0]!r}")
    width, height, maxval = (int(token) for token in tokens[1:])
    if maxval != 255:
        raise custom_errors.ValueOutOfRange(f"only maxval 255 is supported, got {maxval}")
    payload = data[position + 1 :]
    size = width * height * 3
    if len(payload) < size:
        raise custom_errors.TruncatedFile(f"expected {size} pixel bytes, got {len(payload)}")

    return np.frombuffer(payload[:size], dtype=np.uint8).reshape(height, width, 3)
