"""Hard-attention classification of event camera streams with trainable ROI prediction."""

import logging
from importlib.metadata import version
from trip_attention.package import TRIP  # noqa: F401

# set version number
__version__ = version("trip_attention")

# initialize logging
logging.getLogger(__name__)
