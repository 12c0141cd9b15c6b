"""Facade composing inference, training and simulation on one shared model pair."""

from importlib.metadata import version
from importlib.resources import files
import os
import sys
import logging
from typing import Union

import numpy as np

from trip_attention.core import custom_errors, pipeline, pipesim
from trip_attention.core.grad.train import trainer
from trip_attention.core.netspec import parse_spec_file
from trip_attention.core.weights import load_weights

logger = logging.getLogger(__name__)


def config_path(name: str) -> str:
    """Path of a configuration file shipped with the package, such as 'desk.net'."""
    return str(files("trip_attention").joinpath("configs", name))


def read_text(path_or_text: str) -> str:
    """Contents of a file, or the argument itself if it is not an existing path."""
    if os.path.isfile(path_or_text):
        with open(path_or_text, "r", encoding="utf-8") as f:
            return f.read()

    return path_or_text


def read_bytes(path_or_data: Union[str, bytes]) -> bytes:
    """Contents of a binary file, or the argument itself if it already is bytes."""
    if isinstance(path_or_data, (bytes, bytearray)):
        return bytes(path_or_data)
    with open(path_or_data, "rb") as f:
        return f.read()


class TRIP:
    """Class combining ROI prediction, ROI generation and classification of event streams.

    Networks without weights are randomly initialized; the ROI output layer starts at
    zero so that the first glimpse is centered on the image.

    Parameters
    ----------
    spec (str) : path or contents of a network spec file holding a roi and a classifier network
    roi_weights (str|bytes, default=None) : TRPW file path or contents for the ROI prediction network
    cls_weights (str|bytes, default=None) : TRPW file path or contents for the classification network
    seed (int, default=0) : seed of the random initialization
    cost_model (CostModel, default=CostModel()) : linear costs used by the simulator

    Properties
    ----------
    models : ModelPair shared by every component
    pipeline : run inference on binned samples
    trainer : end-to-end, quantization-aware and DAP fine-tuning
    simulator : multi-core latency and energy simulation

    Examples
    --------
    Build the laptop-scale pair and classify a synthetic sample.

    >>> from trip_attention.core.synthetic import SyntheticConfig, generate_synthetic_sample
    >>> trip = TRIP(config_path("desk.net"), seed=0)
    >>> sample, label, bbox = generate_synthetic_sample(1, SyntheticConfig(timebins=2))
    >>> result = trip.pipeline.run(sample, mode="dap")
    >>> result.logits.shape
    (2, 10)

    Enable logging from trip_attention.

    >>> import logging
    >>> logging.basicConfig(
    ... filename='example.log', encoding='utf-8', level=logging.DEBUG,
    ... format='%(asctime)s %(name)s %(filename)s %(levelname)s: %(message)s'
    ... )
    >>> logger = logging.getLogger('trip_attention')
    >>> trip = TRIP(config_path("desk.net"))
    """

    def __init__(
        self,
        spec: str,
        roi_weights: Union[str, bytes] = None,
        cls_weights: Union[str, bytes] = None,
        seed: int = 0,
        cost_model: pipesim.CostModel = pipesim.CostModel(),
    ):
        self.spec_file = parse_spec_file(read_text(spec))
        networks = self.spec_file.networks
        missing = {"roi_prediction", "classification"} - set(networks)
        if missing:
            raise custom_errors.ConfigInvalid(f"spec file is missing networks {sorted(missing)}")
        roi = None if roi_weights is None else load_weights(read_bytes(roi_weights), networks["roi_prediction"])
        classifier = (
            None if cls_weights is None else load_weights(read_bytes(cls_weights), networks["classification"])
        )
        self.models = pipeline.ModelPair.from_spec(self.spec_file, np.random.default_rng(seed), roi, classifier)

        # log initialization details
        self.log_init()

        # initialize trip_attention functionality with shared models
        self.exceptions = custom_errors
        self.pipeline = pipeline.pipeline(self.models)
        self.trainer = trainer(self.models)
        self.simulator = pipesim.simulator(self.models, cost_model)

        # issue warnings for automated functionality
        missing = [name for name, data in (("ROI", roi_weights), ("classification", cls_weights)) if data is None]
        if missing:
            logger.warning(f"No weights given for the {' and '.join(missing)} network, using random initialization.")

    def log_init(self):
        """Log versions for Python and required packages."""
        # determine versions for debugging
        self.version_spec = {}
        # Python
        self.version_spec["python"] = sys.version_info
        # packages
        names = ["trip_attention", "numpy", "pandas"]
        for name in names:
            self.version_spec[name] = version(name)

        logger.debug(f"Version Numbers: {self.version_spec}")
