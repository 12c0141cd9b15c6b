"""Event data model, EVT1 stream format, timebinning, and max-pool downsampling."""

import logging
import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Tuple

import numpy as np

from trip_attention.core import custom_errors

logger = logging.getLogger(__name__)

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHQ")
# one fixed width little-endian record per event
EVENT_DTYPE = np.dtype(
    [("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")]
)

# dense per-timebin event counts of shape (2, height, width)
TimebinFrame = np.ndarray


class Event(NamedTuple):
    """A single sensor event.

    Parameters
    ----------
    t (int) : timestamp in microseconds
    x (int) : column index
    y (int) : row index
    p (int) : polarity, 0 or 1
    """

    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventStreamHeader:
    """Geometry of an event stream.

    Parameters
    ----------
    width (int) : number of columns A
    height (int) : number of rows B
    count (int) : number of events in the stream
    """

    width: int
    height: int
    count: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"width and height must be positive, got {self.width}x{self.height}"
            )
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass(frozen=True)
class BinnedSample:
    """Timebinned event sample.

    Parameters
    ----------
    frames (numpy.ndarray) : event counts of shape (T, 2, height, width)
    label (int, default=None) : class index
    """

    frames: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise custom_errors.ShapeMismatch(
                f"frames must have shape (T, 2, height, width) with T >= 1, got {self.frames.shape}"
            )
        if self.frames.shape[1] != 2:
            raise custom_errors.ShapeMismatch(
                f"frames must have 2 polarity channels, got {self.frames.shape[1]}"
            )

    @property
    def timebins(self) -> int:
        """Number of timebins T."""
        return self.frames.shape[0]


def events_from_list(events: Iterable[Event]) -> np.ndarray:
    """Build a structured event array from Event tuples.

    Parameters
    ----------
    events (iterable) : Event tuples or (t, x, y, p) tuples

    Returns
    -------
    records (numpy.ndarray) : structured array with dtype EVENT_DTYPE

    Examples
    --------
    >>> records = events_from_list([Event(t=5, x=3, y=7, p=1)])
    >>> int(records["x"][0]), int(records["p"][0])
    (3, 1)
    """
    events = list(events)
    records = np.zeros(len(events), dtype=EVENT_DTYPE)
    if events:
        values = np.asarray(events, dtype=np.int64).reshape(-1, 4)
        records["t"] = values[:, 0]
        records["x"] = values[:, 1]
        records["y"] = values[:, 2]
        records["p"] = values[:, 3]

    return records


def _check_bounds(header: EventStreamHeader, events: np.ndarray) -> None:
    """Raise OutOfBoundsEvent for events outside of the header geometry."""
    outside = (
        (events["x"] >= header.width)
        | (events["y"] >= header.height)
        | (events["p"] > 1)
    )
    if np.any(outside):
        first = int(np.flatnonzero(outside)[0])
        raise custom_errors.OutOfBoundsEvent(
            f"event {first} {tuple(int(v) for v in events[first])[:4]} outside of {header.width}x{header.height} or invalid polarity"
        )


def write_event_stream(header: EventStreamHeader, events: np.ndarray) -> bytes:
    """Serialize events to the EVT1 binary format.

    Parameters
    ----------
    header (EventStreamHeader) : stream geometry, count is taken from events
    events (numpy.ndarray) : structured array with dtype EVENT_DTYPE

    Returns
    -------
    data (bytes) : magic, u16 width, u16 height, u64 count, then fixed width records
    """
    events = np.asarray(events, dtype=EVENT_DTYPE)
    _check_bounds(header, events)
    records = events.copy()
    records["pad"] = 0

    return HEADER.pack(MAGIC, header.width, header.height, len(records)) + records.tobytes()


def read_event_stream(data: bytes) -> Tuple[EventStreamHeader, np.ndarray]:
    """Parse an EVT1 binary stream.

    Parameters
    ----------
    data (bytes) : contents of an EVT1 file

    Returns
    -------
    header (EventStreamHeader) : stream geometry and event count
    events (numpy.ndarray) : structured array with dtype EVENT_DTYPE in file order
    """
    if len(data) < len(MAGIC) or data[0 : len(MAGIC)] != MAGIC:
        raise custom_errors.BadMagic(f"expected magic {MAGIC!r}, got {data[0:4]!r}")
    if len(data) < HEADER.size:
        raise custom_errors.TruncatedFile(
            f"header requires {HEADER.size} bytes, got {len(data)}"
        )
    _, width, height, count = HEADER.unpack_from(data, 0)
    try:
        header = EventStreamHeader(width=width, height=height, count=count)
    except ValueError as err:
        raise custom_errors.BadMagic(f"invalid header: {err}")

    end = HEADER.size + count * EVENT_DTYPE.itemsize
    if len(data) < end:
        raise custom_errors.TruncatedFile(
            f"header declares {count} events requiring {end} bytes, got {len(data)}"
        )
    if len(data) > end:
        logger.warning(f"Ignoring {len(data) - end} trailing bytes after {count} events.")

    events = np.frombuffer(data, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()
    _check_bounds(header, events)

    return header, events


def timebin(
    events: np.ndarray, header: EventStreamHeader, timebins: int, label: int = None
) -> BinnedSample:
    """Accumulate events into equal-duration timebins.

    The interval [t_min, t_max] of the stream is split into T equal intervals with the
    last interval closed. Bin indices use exact integer arithmetic.

    Parameters
    ----------
    events (numpy.ndarray) : time-sorted structured array with dtype EVENT_DTYPE
    header (EventStreamHeader) : stream geometry
    timebins (int) : number of timebins T
    label (int, default=None) : class index stored with the sample

    Returns
    -------
    sample (BinnedSample) : integer counts of shape (T, 2, height, width)
    """
    if timebins < 1:
        raise ValueError("timebins must be at least 1")
    if len(events) == 0:
        raise custom_errors.EmptyStream("cannot timebin a stream without events")

    t = events["t"].astype(np.int64)
    t_min = int(t.min())
    span = int(t.max()) - t_min
    if span == 0:
        index = np.zeros(len(t), dtype=np.int64)
    else:
        index = np.minimum(((t - t_min) * timebins) // span, timebins - 1)

    frames = np.zeros((timebins, 2, header.height, header.width), dtype=np.int32)
    np.add.at(
        frames,
        (index, events["p"].astype(np.intp), events["y"].astype(np.intp), events["x"].astype(np.intp)),
        1,
    )

    return BinnedSample(frames=frames, label=label)


def maxpool_downsample(frame: np.ndarray, k: int) -> np.ndarray:
    """Downsample by taking the maximum over non-overlapping k x k blocks.

    Frames whose height or width are not a multiple of k are zero-padded on the bottom
    and right. Any leading axes (polarity, timebin) are preserved.

    Parameters
    ----------
    frame (numpy.ndarray) : array whose last two axes are (height, width)
    k (int) : block size

    Returns
    -------
    pooled (numpy.ndarray) : array with last two axes (ceil(height/k), ceil(width/k))

    Examples
    --------
    >>> frame = np.zeros((2, 4, 4), dtype=np.int32)
    >>> frame[1, 3, 2] = 5
    >>> maxpool_downsample(frame, 2)[1].tolist()
    [[0, 0], [0, 5]]
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if k == 1:
        return frame.copy()

    height, width = frame.shape[-2:]
    pad_h = (-height) % k
    pad_w = (-width) % k
    if pad_h or pad_w:
        padding = [(0, 0)] * (frame.ndim - 2) + [(0, pad_h), (0, pad_w)]
        frame = np.pad(frame, padding)
    out_h = frame.shape[-2] // k
    out_w = frame.shape[-1] // k
    blocks = frame.reshape(frame.shape[:-2] + (out_h, k, out_w, k))

    return blocks.max(axis=(-3, -1))
