"""ROI parameter decoding, truncated Gaussian kernel ROI generation, and dynamic average pooling.

Kernel grids are symmetric about the predicted center: kernel i of N sits at
g + (i - (N - 1) / 2) * delta, and the dynamic average pooling region is the union of
all kernel supports, g +/- ((N - 1) / 2 * delta + theta / 2).
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from trip_attention.core import custom_errors

# ROI generation output of shape (2, N, N) indexed [polarity, row j, column i]
RoiFrame = np.ndarray


@dataclass(frozen=True)
class RawRoiOutput:
    """Unconstrained outputs of the ROI prediction network."""

    g_x_hat: float
    g_y_hat: float
    delta_hat: float


@dataclass(frozen=True)
class DecodeConfig:
    """Geometry for decoding ROI parameters.

    Parameters
    ----------
    A (int) : image width in pixels
    B (int) : image height in pixels
    S (float, default=None) : distance scaling factor, defaults to A / 8
    """

    A: int
    B: int
    S: Optional[float] = None

    def __post_init__(self):
        if self.S is None:
            object.__setattr__(self, "S", self.A / 8)
        if self.A < 1 or self.B < 1:
            raise custom_errors.ConfigInvalid(f"A and B must be at least 1, got {self.A}x{self.B}")
        if not self.S > 0:
            raise custom_errors.ConfigInvalid(f"S must be positive, got {self.S}")


@dataclass(frozen=True)
class RoiParams:
    """Decoded ROI center and inter-kernel distance in pixels."""

    g_x: float
    g_y: float
    delta: float


@dataclass(frozen=True)
class KernelGridConfig:
    """Truncated Gaussian kernel grid parameters.

    Parameters
    ----------
    N (int, default=12) : grid size, even
    sigma (float, default=2.0) : Gaussian variance
    theta (float, default=6.0) : width of the non-zero kernel support in pixels
    """

    N: int = 12
    sigma: float = 2.0
    theta: float = 6.0

    def __post_init__(self):
        if self.N < 2 or self.N % 2 != 0:
            raise custom_errors.ConfigInvalid(f"N must be even and at least 2, got {self.N}")
        if not self.sigma > 0 or not self.theta > 0:
            raise custom_errors.ConfigInvalid(
                f"sigma and theta must be positive, got sigma={self.sigma}, theta={self.theta}"
            )


@dataclass(frozen=True)
class KernelGrid:
    """Kernel center coordinates mu_x[i] and mu_y[j]."""

    mu_x: np.ndarray
    mu_y: np.ndarray


@dataclass(frozen=True)
class KernelWeights:
    """Separable kernel weights and their non-zero supports.

    Parameters
    ----------
    F_x (numpy.ndarray) : weights of shape (N, A)
    F_y (numpy.ndarray) : weights of shape (N, B)
    support_x (numpy.ndarray) : inclusive [lo, hi] column range per row of F_x, shape (N, 2); hi < lo marks an empty row
    support_y (numpy.ndarray) : inclusive [lo, hi] row range per row of F_y, shape (N, 2)
    """

    F_x: np.ndarray
    F_y: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray


@dataclass(frozen=True)
class DapRegion:
    """Receptive field of the dynamic average pooling and its cell size."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    k_dap: float


class OperationCounter:
    """Tally of weighted-pixel multiplies performed by crop_tgk."""

    def __init__(self):
        self.multiplies = 0

    def add(self, count: int) -> None:
        """Accumulate multiplies."""
        self.multiplies += int(count)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))

    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def decode_roi(raw: RawRoiOutput, cfg: DecodeConfig) -> RoiParams:
    """Decode raw network outputs into the ROI center and kernel distance.

    Parameters
    ----------
    raw (RawRoiOutput) : unconstrained network outputs
    cfg (DecodeConfig) : image geometry and distance scale

    Returns
    -------
    roi (RoiParams) : g_x in [0, A], g_y in [0, B], delta in [S, 2S]

    Examples
    --------
    >>> decode_roi(RawRoiOutput(0.0, 0.0, 0.0), DecodeConfig(A=128, B=128, S=4.0))
    RoiParams(g_x=64.0, g_y=64.0, delta=6.0)
    """
    g_x = cfg.A / 2 * (math.tanh(raw.g_x_hat) + 1)
    g_y = cfg.B / 2 * (math.tanh(raw.g_y_hat) + 1)
    delta = cfg.S * (float(sigmoid(raw.delta_hat)) + 1)

    return RoiParams(g_x=g_x, g_y=g_y, delta=delta)


def grid_offsets(N: int) -> np.ndarray:
    """Symmetric kernel offsets i - (N - 1) / 2 for i in [0, N - 1]."""
    return np.arange(N, dtype=np.float64) - (N - 1) / 2


def kernel_centers(roi: RoiParams, cfg: KernelGridConfig) -> KernelGrid:
    """Place the N x N kernel centers symmetrically about the ROI center.

    Parameters
    ----------
    roi (RoiParams) : decoded ROI parameters
    cfg (KernelGridConfig) : grid size

    Returns
    -------
    grid (KernelGrid) : centers spaced exactly delta apart

    Examples
    --------
    >>> grid = kernel_centers(RoiParams(10.0, 10.0, 1.0), KernelGridConfig(N=2))
    >>> grid.mu_x.tolist()
    [9.5, 10.5]
    """
    offsets = grid_offsets(cfg.N) * roi.delta

    return KernelGrid(mu_x=roi.g_x + offsets, mu_y=roi.g_y + offsets)


def kernel_supports(mu: np.ndarray, theta: float, size: int) -> np.ndarray:
    """Inclusive integer support [ceil(mu - theta/2), floor(mu + theta/2)] clipped to [0, size - 1]."""
    lo = np.maximum(np.ceil(mu - theta / 2), 0).astype(np.int64)
    hi = np.minimum(np.floor(mu + theta / 2), size - 1).astype(np.int64)

    return np.stack([lo, hi], axis=1)


def gaussian_rows(mu: np.ndarray, sigma: float, support: np.ndarray, size: int) -> np.ndarray:
    """Evaluate exp(-(n - mu)^2 / (2 sigma)) on each row's support, zero elsewhere."""
    n = np.arange(size, dtype=np.float64)
    inside = (n[None, :] >= support[:, 0:1]) & (n[None, :] <= support[:, 1:2])
    weights = np.exp(-((n[None, :] - mu[:, None]) ** 2) / (2 * sigma))

    return np.where(inside, weights, 0.0)


def kernel_weights(
    grid: KernelGrid, cfg: KernelGridConfig, A: int, B: int, truncate: bool = True
) -> KernelWeights:
    """Compute the truncated Gaussian kernel weights.

    Parameters
    ----------
    grid (KernelGrid) : kernel centers
    cfg (KernelGridConfig) : variance and truncation width
    A (int) : image width
    B (int) : image height
    truncate (bool, default=True) : if False, every row spans the whole image

    Returns
    -------
    weights (KernelWeights) : F_x of shape (N, A), F_y of shape (N, B) and supports
    """
    if truncate:
        support_x = kernel_supports(grid.mu_x, cfg.theta, A)
        support_y = kernel_supports(grid.mu_y, cfg.theta, B)
    else:
        support_x = np.tile(np.array([[0, A - 1]], dtype=np.int64), (len(grid.mu_x), 1))
        support_y = np.tile(np.array([[0, B - 1]], dtype=np.int64), (len(grid.mu_y), 1))

    return KernelWeights(
        F_x=gaussian_rows(grid.mu_x, cfg.sigma, support_x, A),
        F_y=gaussian_rows(grid.mu_y, cfg.sigma, support_y, B),
        support_x=support_x,
        support_y=support_y,
    )


def crop_tgk(
    frame: np.ndarray, weights: KernelWeights, counter: OperationCounter = None
) -> RoiFrame:
    """Generate the ROI with truncated Gaussian kernels.

    Each output cell visits only the pixels inside its kernel support, so the work per
    cell is bounded by (theta + 1)^2 per polarity instead of A * B.

    Parameters
    ----------
    frame (numpy.ndarray) : event counts of shape (2, B, A)
    weights (KernelWeights) : kernel weights from kernel_weights
    counter (OperationCounter, default=None) : accumulates one multiply per polarity and support pixel

    Returns
    -------
    roi_frame (numpy.ndarray) : values of shape (2, N, N) indexed [polarity, j, i]
    """
    N = weights.F_x.shape[0]
    if frame.shape[1:] != (weights.F_y.shape[1], weights.F_x.shape[1]):
        raise custom_errors.ShapeMismatch(
            f"frame shape {frame.shape} does not match kernel weights for {weights.F_x.shape[1]}x{weights.F_y.shape[1]}"
        )
    frame = np.asarray(frame, dtype=np.float64)
    channels = frame.shape[0]
    out = np.zeros((channels, N, N), dtype=np.float64)

    for j in range(N):
        y_lo, y_hi = weights.support_y[j]
        if y_hi < y_lo:
            continue
        f_y = weights.F_y[j, y_lo : y_hi + 1]
        rows = frame[:, y_lo : y_hi + 1, :]
        for i in range(N):
            x_lo, x_hi = weights.support_x[i]
            if x_hi < x_lo:
                continue
            f_x = weights.F_x[i, x_lo : x_hi + 1]
            patch = rows[:, :, x_lo : x_hi + 1]
            out[:, j, i] = np.einsum("m,pmn,n->p", f_y, patch, f_x)
            if counter is not None:
                counter.add(channels * patch.shape[1] * patch.shape[2])

    return out


def dap_region(roi: RoiParams, cfg: KernelGridConfig) -> DapRegion:
    """Compute the dynamic average pooling receptive field.

    Parameters
    ----------
    roi (RoiParams) : decoded ROI parameters
    cfg (KernelGridConfig) : grid size and truncation width

    Returns
    -------
    region (DapRegion) : square region of width (N - 1) * delta + theta and its cell size

    Examples
    --------
    >>> dap_region(RoiParams(64.0, 64.0, 8.0), KernelGridConfig(N=12, theta=4.0))
    DapRegion(x_min=18.0, x_max=110.0, y_min=18.0, y_max=110.0, k_dap=7.666666666666667)
    """
    half = (cfg.N - 1) / 2 * roi.delta + cfg.theta / 2
    x_min, x_max = roi.g_x - half, roi.g_x + half
    y_min, y_max = roi.g_y - half, roi.g_y + half

    return DapRegion(
        x_min=x_min,
        x_max=x_max,
        y_min=y_min,
        y_max=y_max,
        k_dap=(x_max - x_min) / cfg.N,
    )


def dap_cells(coordinate_count: int, lower: float, k_dap: float, N: int) -> np.ndarray:
    """Closed-form cell index floor((n - lower) / k_dap) for each pixel, -1 outside the grid."""
    n = np.arange(coordinate_count, dtype=np.float64)
    cells = np.floor((n - lower) / k_dap).astype(np.int64)

    return np.where((cells >= 0) & (cells < N), cells, -1)


def crop_dap(frame: np.ndarray, region: DapRegion, N: int) -> RoiFrame:
    """Generate the ROI with non-overlapping dynamic average pooling.

    Every in-region pixel belongs to exactly one cell. Each cell averages over the
    in-bounds integer pixels assigned to it; cells without pixels are zero.

    Parameters
    ----------
    frame (numpy.ndarray) : event counts of shape (2, B, A)
    region (DapRegion) : receptive field from dap_region
    N (int) : grid size

    Returns
    -------
    roi_frame (numpy.ndarray) : values of shape (2, N, N) indexed [polarity, j, i]
    """
    if not region.k_dap > 0:
        raise custom_errors.DegenerateRegion(f"k_dap must be positive, got {region.k_dap}")

    frame = np.asarray(frame, dtype=np.float64)
    channels, height, width = frame.shape
    col = dap_cells(width, region.x_min, region.k_dap, N)
    row = dap_cells(height, region.y_min, region.k_dap, N)

    counts_x = np.bincount(col[col >= 0], minlength=N)
    counts_y = np.bincount(row[row >= 0], minlength=N)
    pixels = np.outer(counts_y, counts_x)

    sums = np.zeros((channels, N, N), dtype=np.float64)
    rows_in = np.flatnonzero(row >= 0)
    cols_in = np.flatnonzero(col >= 0)
    if len(rows_in) and len(cols_in):
        block = frame[:, rows_in][:, :, cols_in]
        jj, ii = np.meshgrid(row[rows_in], col[cols_in], indexing="ij")
        for p in range(channels):
            np.add.at(sums[p], (jj, ii), block[p])

    return np.divide(sums, pixels, out=np.zeros_like(sums), where=pixels > 0)
