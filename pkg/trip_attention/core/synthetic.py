"""Synthetic noisy event-digit dataset generation.

Digits are procedural seven-segment stroke glyphs drawn on a base box the size of an
N-MNIST sample. One glyph is scaled by a random factor and placed uniformly on the
canvas, then structured noise is added as small crops of other glyphs.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from trip_attention.core import custom_errors
from trip_attention.core.events import (
    EVENT_DTYPE,
    BinnedSample,
    EventStreamHeader,
    timebin,
)

logger = logging.getLogger(__name__)

# segment endpoints (x0, y0, x1, y1) in base glyph coordinates
_LEFT, _RIGHT, _TOP, _MIDDLE, _BOTTOM = 8.0, 25.0, 4.0, 16.5, 29.0
SEGMENTS = {
    "a": (_LEFT, _TOP, _RIGHT, _TOP),
    "b": (_RIGHT, _TOP, _RIGHT, _MIDDLE),
    "c": (_RIGHT, _MIDDLE, _RIGHT, _BOTTOM),
    "d": (_LEFT, _BOTTOM, _RIGHT, _BOTTOM),
    "e": (_LEFT, _MIDDLE, _LEFT, _BOTTOM),
    "f": (_LEFT, _TOP, _LEFT, _MIDDLE),
    "g": (_LEFT, _MIDDLE, _RIGHT, _MIDDLE),
}
DIGIT_SEGMENTS = {
    0: "abcdef",
    1: "bc",
    2: "abged",
    3: "abgcd",
    4: "fgbc",
    5: "afgcd",
    6: "afgedc",
    7: "abc",
    8: "abcdefg",
    9: "abcdfg",
}


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters for synthetic sample generation.

    Parameters
    ----------
    canvas (int, default=128) : width and height of the square canvas
    scale_min (float, default=1.0) : lower bound of the digit scale factor
    scale_max (float, default=2.0) : upper bound of the digit scale factor
    noise_fragments (int, default=8) : number of noise crops from other digits
    fragment_size (int, default=8) : edge length of each noise crop
    timebins (int, default=32) : number of timebins T
    glyph_size (int, default=34) : edge length of an unscaled glyph
    stroke_radius (float, default=1.2) : stroke half width in unscaled pixels
    events_per_pixel (float, default=3.0) : mean number of events per stroke pixel
    duration_us (int, default=300000) : length of each sample in microseconds
    """

    canvas: int = 128
    scale_min: float = 1.0
    scale_max: float = 2.0
    noise_fragments: int = 8
    fragment_size: int = 8
    timebins: int = 32
    glyph_size: int = 34
    stroke_radius: float = 1.2
    events_per_pixel: float = 3.0
    duration_us: int = 300000

    def __post_init__(self):
        if self.scale_min <= 0 or self.scale_min > self.scale_max:
            raise custom_errors.ConfigInvalid(
                f"scale range must satisfy 0 < min <= max, got [{self.scale_min}, {self.scale_max}]"
            )
        if self.canvas < round(self.glyph_size * self.scale_max):
            raise custom_errors.ConfigInvalid(
                f"canvas {self.canvas} is smaller than the largest digit {round(self.glyph_size * self.scale_max)}"
            )
        if self.noise_fragments < 0:
            raise custom_errors.ConfigInvalid("noise_fragments must be non-negative")
        if not 1 <= self.fragment_size <= min(self.glyph_size, self.canvas):
            raise custom_errors.ConfigInvalid(
                f"fragment_size must be between 1 and {min(self.glyph_size, self.canvas)}"
            )
        if self.timebins < 1:
            raise custom_errors.ConfigInvalid("timebins must be at least 1")
        if self.events_per_pixel <= 0 or self.duration_us <= 0:
            raise custom_errors.ConfigInvalid(
                "events_per_pixel and duration_us must be positive"
            )


def render_glyph(digit: int, size: int, stroke_radius: float = 1.2, glyph_size: int = 34) -> np.ndarray:
    """Rasterize a seven-segment digit.

    Parameters
    ----------
    digit (int) : digit 0 to 9
    size (int) : output edge length in pixels
    stroke_radius (float, default=1.2) : stroke half width in unscaled pixels
    glyph_size (int, default=34) : edge length of the unscaled glyph

    Returns
    -------
    mask (numpy.ndarray) : boolean array of shape (size, size)
    """
    if digit not in DIGIT_SEGMENTS:
        raise ValueError(f"digit must be between 0 and 9, got {digit}")

    # pixel centers in unscaled glyph coordinates
    scale = size / glyph_size
    centers = (np.arange(size) + 0.5) / scale
    px, py = np.meshgrid(centers, centers)

    mask = np.zeros((size, size), dtype=bool)
    for name in DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = SEGMENTS[name]
        dx, dy = x1 - x0, y1 - y0
        along = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        distance = np.hypot(px - (x0 + along * dx), py - (y0 + along * dy))
        mask |= distance <= stroke_radius

    return mask


def _mask_events(
    rng: np.random.Generator,
    mask: np.ndarray,
    x0: int,
    y0: int,
    config: SyntheticConfig,
) -> np.ndarray:
    """Emit events of both polarities at random times for every pixel of a mask."""
    ys, xs = np.nonzero(mask)
    counts = rng.poisson(config.events_per_pixel, size=len(xs))
    total = int(counts.sum())
    events = np.zeros(total, dtype=EVENT_DTYPE)
    events["x"] = np.repeat(xs + x0, counts)
    events["y"] = np.repeat(ys + y0, counts)
    events["t"] = rng.integers(0, config.duration_us, size=total)
    events["p"] = rng.integers(0, 2, size=total)

    return events


def generate_synthetic_events(
    rng_seed: int, config: SyntheticConfig = SyntheticConfig()
) -> Tuple[EventStreamHeader, np.ndarray, int, Tuple[int, int, int, int]]:
    """Generate the raw event stream of one synthetic sample.

    Parameters
    ----------
    rng_seed (int) : seed, the output is a pure function of seed and config
    config (SyntheticConfig) : generation parameters

    Returns
    -------
    header (EventStreamHeader) : canvas geometry and event count
    events (numpy.ndarray) : time-sorted structured array with dtype EVENT_DTYPE
    label (int) : digit class
    digit_bbox (tuple) : inclusive (x_min, y_min, x_max, y_max) of the placed digit
    """
    rng = np.random.default_rng(rng_seed)
    label = int(rng.integers(0, 10))

    scale = rng.uniform(config.scale_min, config.scale_max)
    size = int(round(config.glyph_size * scale))
    x0 = int(rng.integers(0, config.canvas - size + 1))
    y0 = int(rng.integers(0, config.canvas - size + 1))
    mask = render_glyph(label, size, config.stroke_radius, config.glyph_size)
    parts = [_mask_events(rng, mask, x0, y0, config)]

    others = [d for d in range(10) if d != label]
    k = config.fragment_size
    for _ in range(config.noise_fragments):
        digit = int(rng.choice(others))
        glyph = render_glyph(digit, config.glyph_size, config.stroke_radius, config.glyph_size)
        # center the crop on a random stroke pixel so fragments are never empty
        ys, xs = np.nonzero(glyph)
        pick = int(rng.integers(0, len(xs)))
        cx = int(np.clip(xs[pick] - k // 2, 0, config.glyph_size - k))
        cy = int(np.clip(ys[pick] - k // 2, 0, config.glyph_size - k))
        crop = glyph[cy : cy + k, cx : cx + k]
        fx = int(rng.integers(0, config.canvas - k + 1))
        fy = int(rng.integers(0, config.canvas - k + 1))
        parts.append(_mask_events(rng, crop, fx, fy, config))

    events = np.concatenate(parts)
    events = events[np.argsort(events["t"], kind="stable")]
    header = EventStreamHeader(width=config.canvas, height=config.canvas, count=len(events))
    bbox = (x0, y0, x0 + size - 1, y0 + size - 1)

    return header, events, label, bbox


def generate_synthetic_sample(
    rng_seed: int, config: SyntheticConfig = SyntheticConfig()
) -> Tuple[BinnedSample, int, Tuple[int, int, int, int]]:
    """Generate one timebinned synthetic sample.

    Parameters
    ----------
    rng_seed (int) : seed, the output is a pure function of seed and config
    config (SyntheticConfig) : generation parameters

    Returns
    -------
    sample (BinnedSample) : counts of shape (T, 2, canvas, canvas) with label set
    label (int) : digit class
    digit_bbox (tuple) : inclusive (x_min, y_min, x_max, y_max) of the placed digit

    Examples
    --------
    >>> sample, label, bbox = generate_synthetic_sample(7, SyntheticConfig(timebins=4))
    >>> sample.frames.shape
    (4, 2, 128, 128)
    """
    header, events, label, bbox = generate_synthetic_events(rng_seed, config)
    sample = timebin(events, header, config.timebins, label=label)

    return sample, label, bbox
