"""Inference over a ROI prediction network, ROI generation and a classification network."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from trip_attention.core import custom_errors
from trip_attention.core.attention import (
    DecodeConfig,
    KernelGridConfig,
    KernelWeights,
    OperationCounter,
    RawRoiOutput,
    RoiParams,
    crop_dap,
    crop_tgk,
    dap_cells,
    dap_region,
    decode_roi,
    kernel_centers,
    kernel_weights,
)
from trip_attention.core.events import BinnedSample
from trip_attention.core.net import (
    MacCounter,
    Model,
    SparseActivations,
    forward_dense,
    forward_sparse,
)
from trip_attention.core.netspec import SpecFile

logger = logging.getLogger(__name__)

MODES = ("tgk", "dap")
SCHEDULES = ("seq", "pipe")


@dataclass
class ModelPair:
    """ROI prediction and classification networks with ROI generation settings.

    Parameters
    ----------
    roi (Model) : ROI prediction network, 3 outputs
    classifier (Model) : classification network with an N x N input
    grid (KernelGridConfig) : kernel grid of the ROI generation
    decode (DecodeConfig) : input geometry and distance scale
    """

    roi: Model
    classifier: Model
    grid: KernelGridConfig
    decode: DecodeConfig

    def __post_init__(self):
        N = self.grid.N
        if (self.classifier.spec.width, self.classifier.spec.height) != (N, N):
            raise custom_errors.ConfigInvalid(
                f"classifier input {self.classifier.spec.width}x{self.classifier.spec.height} does not match grid N={N}"
            )
        if (self.roi.spec.width, self.roi.spec.height) != (self.decode.A, self.decode.B):
            raise custom_errors.ConfigInvalid("ROI network input does not match the decode geometry")

    @classmethod
    def from_spec(
        cls,
        spec_file: SpecFile,
        rng: np.random.Generator,
        roi: Optional[Model] = None,
        classifier: Optional[Model] = None,
    ) -> "ModelPair":
        """Build a pair from a parsed spec file, initializing missing networks.

        The ROI output layer starts at zero so the first glimpse is centered.
        """
        missing = {"roi_prediction", "classification"} - set(spec_file.networks)
        if missing:
            raise custom_errors.ConfigInvalid(f"spec file is missing networks {sorted(missing)}")
        roi_spec = spec_file.networks["roi_prediction"]
        if roi is None:
            roi = Model.init(roi_spec, rng, zero_output=True)
        if classifier is None:
            classifier = Model.init(spec_file.networks["classification"], rng)

        return cls(
            roi=roi,
            classifier=classifier,
            grid=spec_file.grid,
            decode=DecodeConfig(A=roi_spec.width, B=roi_spec.height, S=spec_file.scale),
        )

    def copy(self) -> "ModelPair":
        """Deep copy of both networks."""
        return ModelPair(roi=self.roi.copy(), classifier=self.classifier.copy(), grid=self.grid, decode=self.decode)

    def decode_output(self, output: np.ndarray) -> RoiParams:
        """Decode the 3 ROI network outputs."""
        return decode_roi(RawRoiOutput(*(float(v) for v in output[0:3])), self.decode)

    def generate_roi(
        self, frame: np.ndarray, roi: RoiParams, mode: str = "tgk", counter: OperationCounter = None
    ) -> np.ndarray:
        """Crop an N x N RoiFrame from a (2, B, A) frame with tGK or DAP."""
        if mode == "tgk":
            weights = kernel_weights(kernel_centers(roi, self.grid), self.grid, self.decode.A, self.decode.B)
            return crop_tgk(frame, weights, counter)
        if mode == "dap":
            return crop_dap(frame, dap_region(roi, self.grid), self.grid.N)
        raise ValueError(f"mode must be one of {MODES}, got '{mode}'")

    def event_operations(self, frame: np.ndarray, roi: RoiParams, mode: str = "tgk") -> int:
        """Operations of an event-driven ROI generation that only visits nonzero pixels.

        tGK performs one multiply per nonzero pixel and output cell whose kernel
        supports contain it; DAP performs one accumulation per nonzero in-region pixel.
        """
        if mode == "tgk":
            weights = kernel_weights(kernel_centers(roi, self.grid), self.grid, self.decode.A, self.decode.B)
            return tgk_event_operations(frame, weights)
        if mode == "dap":
            return dap_operations(frame, roi, self.grid)
        raise ValueError(f"mode must be one of {MODES}, got '{mode}'")


def _coverage(support: np.ndarray, size: int) -> np.ndarray:
    """Number of kernel supports containing each coordinate."""
    n = np.arange(size)
    return ((n[None, :] >= support[:, 0:1]) & (n[None, :] <= support[:, 1:2])).sum(axis=0)


def tgk_event_operations(frame: np.ndarray, weights: KernelWeights) -> int:
    """Multiplies of an event-driven tGK crop."""
    cover_y = _coverage(weights.support_y, frame.shape[1])
    cover_x = _coverage(weights.support_x, frame.shape[2])
    active = np.count_nonzero(frame, axis=0)

    return int(np.sum(active * np.outer(cover_y, cover_x)))


def dap_operations(frame: np.ndarray, roi: RoiParams, grid: KernelGridConfig) -> int:
    """Accumulations of an event-driven DAP crop: one per nonzero in-region pixel."""
    region = dap_region(roi, grid)
    col = dap_cells(frame.shape[2], region.x_min, region.k_dap, grid.N)
    row = dap_cells(frame.shape[1], region.y_min, region.k_dap, grid.N)
    inside = (row[:, None] >= 0) & (col[None, :] >= 0)

    return int(np.count_nonzero(frame[:, inside]))


@dataclass
class InferenceResult:
    """Per-timebin outputs of one sample.

    Parameters
    ----------
    rois (list) : decoded RoiParams per timebin
    roi_frames (numpy.ndarray) : generated RoiFrames of shape (T, 2, N, N)
    logits (numpy.ndarray) : classifier outputs, (T, K) sequential or (T + 1, K) pipelined
    prediction (int) : argmax of the mean logits over the T classified timebins
    sched (str) : seq or pipe
    roi_counters (list) : MacCounter per timebin of the ROI network, sparse runs only
    classifier_counters (list) : MacCounter per classifier step, sparse runs only
    roi_gen_counters (list) : OperationCounter per timebin with the support multiplies of crop_tgk
    roi_gen_operations (list) : event-driven ROI generation operations per timebin
    """

    rois: List[RoiParams]
    roi_frames: np.ndarray
    logits: np.ndarray
    prediction: int
    sched: str = "seq"
    roi_counters: List[MacCounter] = field(default_factory=list)
    classifier_counters: List[MacCounter] = field(default_factory=list)
    roi_gen_counters: List[OperationCounter] = field(default_factory=list)
    roi_gen_operations: List[int] = field(default_factory=list)

    def classified_logits(self) -> np.ndarray:
        """Logits aligned with input timebins, dropping the pipelined warm-up step."""
        return self.logits[1:] if self.sched == "pipe" else self.logits


class pipeline:
    """Run the TRIP pipeline on binned samples.

    Parameters
    ----------
    models (ModelPair) : networks and ROI generation settings
    """

    def __init__(self, models: ModelPair):
        self.models = models

    def _forward(self, model: Model, frame: np.ndarray, state, sparse: bool, counters: list):
        if sparse:
            counter = MacCounter()
            counters.append(counter)
            return forward_sparse(model, SparseActivations.from_dense(frame), state, counter)
        return forward_dense(model, frame, state)

    def run(self, sample: BinnedSample, mode: str = "tgk", sched: str = "seq", sparse: bool = True) -> InferenceResult:
        """Classify one sample.

        In the sequential schedule the classifier consumes the ROI of the same timebin.
        In the pipelined schedule the classifier step t + 1 consumes the ROI generated
        from timebin t, so pipelined logits[t + 1] equal sequential logits[t]. At step 0
        no ROI exists yet and the classifier stays idle: its logits are zero and its
        MacCounter is empty, so both schedules do the same work.

        Parameters
        ----------
        sample (BinnedSample) : counts of shape (T, 2, B, A)
        mode (str, default='tgk') : ROI generation with tgk or dap
        sched (str, default='seq') : seq or pipe
        sparse (bool, default=True) : event-driven forward with MAC counters, else dense

        Returns
        -------
        result (InferenceResult) : per-timebin ROIs, RoiFrames, logits and counters
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
        if sched not in SCHEDULES:
            raise ValueError(f"sched must be one of {SCHEDULES}, got '{sched}'")
        models = self.models
        if sample.frames.shape[1:] != models.roi.spec.input_shape:
            raise custom_errors.ShapeMismatch(
                f"sample frames {sample.frames.shape[1:]} do not match ROI network input {models.roi.spec.input_shape}"
            )

        roi_state = models.roi.initial_state()
        rois, roi_frames = [], []
        roi_counters, roi_gen_counters, roi_gen_operations = [], [], []
        for t in range(sample.timebins):
            frame = sample.frames[t].astype(np.float64)
            output, roi_state = self._forward(models.roi, frame, roi_state, sparse, roi_counters)
            roi = models.decode_output(output)
            counter = OperationCounter()
            roi_frames.append(models.generate_roi(frame, roi, mode, counter))
            rois.append(roi)
            roi_gen_counters.append(counter)
            roi_gen_operations.append(models.event_operations(frame, roi, mode))

        cls_state = models.classifier.initial_state()
        classifier_counters = []
        logits = []
        if sched == "pipe":
            logger.debug("Pipelined warm-up step leaves the classifier idle.")
            logits.append(np.zeros(models.classifier.spec.num_outputs))
            if sparse:
                classifier_counters.append(MacCounter())
        for roi_frame in roi_frames:
            output, cls_state = self._forward(models.classifier, roi_frame, cls_state, sparse, classifier_counters)
            logits.append(output)

        result = InferenceResult(
            rois=rois,
            roi_frames=np.stack(roi_frames),
            logits=np.stack(logits),
            prediction=0,
            sched=sched,
            roi_counters=roi_counters,
            classifier_counters=classifier_counters,
            roi_gen_counters=roi_gen_counters,
            roi_gen_operations=roi_gen_operations,
        )
        result.prediction = int(np.argmax(result.classified_logits().mean(axis=0)))

        return result

    def roi_table(self, result: InferenceResult) -> pd.DataFrame:
        """Per-timebin ROI parameters and DAP receptive field as a dataframe."""
        rows = []
        for t, roi in enumerate(result.rois):
            region = dap_region(roi, self.models.grid)
            rows.append(
                {
                    "timebin": t,
                    "g_x": roi.g_x,
                    "g_y": roi.g_y,
                    "delta": roi.delta,
                    "x_min": region.x_min,
                    "x_max": region.x_max,
                    "y_min": region.y_min,
                    "y_max": region.y_max,
                }
            )

        return pd.DataFrame(rows, columns=["timebin", "g_x", "g_y", "delta", "x_min", "x_max", "y_min", "y_max"])

    def predict(
        self, samples, names=None, mode: str = "tgk", sched: str = "seq", sparse: bool = True
    ) -> pd.DataFrame:
        """Classify several samples.

        Parameters
        ----------
        samples (list) : BinnedSample per sample
        names (list, default=None) : identifier per sample, defaults to the position
        mode (str, default='tgk') : tgk or dap
        sched (str, default='seq') : seq or pipe
        sparse (bool, default=True) : event-driven forward

        Returns
        -------
        predictions (pandas.DataFrame) : columns sample, label, prediction
        """
        if names is None:
            names = list(range(len(samples)))
        rows = []
        for name, sample in zip(names, samples):
            result = self.run(sample, mode=mode, sched=sched, sparse=sparse)
            rows.append({"sample": name, "label": sample.label, "prediction": result.prediction})

        return pd.DataFrame(rows, columns=["sample", "label", "prediction"])
