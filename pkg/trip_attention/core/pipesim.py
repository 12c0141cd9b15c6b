"""Count-driven multi-core dataflow simulator for sequential and pipelined TRIP inference.

Each core hosts a contiguous group of layers. A core's busy time and dynamic energy
are linear in the exact multiply-accumulate and event counts of the sparse forward;
no memory contention or network-on-chip effects are modeled.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from trip_attention.core import custom_errors
from trip_attention.core.events import BinnedSample
from trip_attention.core.net import (
    MacCounter,
    Model,
    SparseActivations,
    batchnorm,
    conv2d,
    forward_sparse,
    maxpool2d,
    relu,
)
from trip_attention.core.netspec import NetworkSpec
from trip_attention.core.pipeline import ModelPair, pipeline

logger = logging.getLogger(__name__)

ROLES = ("roi_conv", "roi_rnn_out", "roi_gen", "cls_conv", "cls_fc", "cls_out")
MODES = {"sequential": "sequential", "seq": "sequential", "pipelined": "pipelined", "pipe": "pipelined"}
TRACE_COLUMNS = ["step", "core_id", "role", "macs", "events_in", "events_out", "busy_s", "energy_j"]


@dataclass(frozen=True)
class CoreDescriptor:
    """One core of the mapping.

    Parameters
    ----------
    core_id (str) : name such as C1
    role (str) : roi_conv, roi_rnn_out, roi_gen, cls_conv, cls_fc or cls_out
    layers (tuple) : hosted layer indices of the role's network, empty for roi_gen
    """

    core_id: str
    role: str
    layers: Tuple[int, ...] = ()

    @property
    def network(self) -> Optional[str]:
        """roi, classifier, or None for ROI generation."""
        if self.role == "roi_gen":
            return None
        return "roi" if self.role.startswith("roi") else "classifier"


@dataclass(frozen=True)
class CoreMap:
    """Ordered cores along the dataflow."""

    cores: Tuple[CoreDescriptor, ...]

    def __len__(self) -> int:
        return len(self.cores)

    def by_network(self, network: Optional[str]) -> List[CoreDescriptor]:
        """Cores of one network in dataflow order."""
        return [core for core in self.cores if core.network == network]


@dataclass(frozen=True)
class CostModel:
    """Linear cost parameters. Defaults are non-physical and only meaningful as ratios.

    Parameters
    ----------
    time_per_mac (float, default=1e-9) : seconds per multiply-accumulate
    time_per_event_io (float, default=4e-9) : seconds per event read or written
    energy_per_mac (float, default=2e-12) : joules per multiply-accumulate
    energy_per_event_io (float, default=8e-12) : joules per event read or written
    static_power_per_core (float, default=5e-5) : watts per mapped core
    """

    time_per_mac: float = 1e-9
    time_per_event_io: float = 4e-9
    energy_per_mac: float = 2e-12
    energy_per_event_io: float = 8e-12
    static_power_per_core: float = 5e-5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value >= 0:
                raise custom_errors.ConfigInvalid(f"{name} must be non-negative, got {value}")


def layer_groups(spec: NetworkSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Split a network into conv blocks and single dense layers.

    Leading pooling layers join the first conv block; each conv block holds a conv
    layer and the BatchNorm and MaxPool layers following it.

    Returns
    -------
    groups (list) : ('conv', indices) or ('dense', (index,)) in layer order
    """
    groups = []
    pending = []
    for index, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            groups.append(("conv", tuple(pending) + (index,)))
            pending = []
        elif layer.kind in ("batchnorm", "maxpool"):
            if groups and groups[-1][0] == "conv" and not pending:
                groups[-1] = ("conv", groups[-1][1] + (index,))
            else:
                pending.append(index)
        else:
            if pending:
                groups.append(("conv", tuple(pending)))
                pending = []
            groups.append(("dense", (index,)))

    return groups


def default_core_map(roi_spec: Optional[NetworkSpec], cls_spec: NetworkSpec) -> CoreMap:
    """Map networks to cores: one core per conv block and ROI generation on its own core.

    The ROI network's recurrent and output layers share one core; every dense layer of
    the classifier gets a core, the output layer on a cls_out core. The DvsGesture pair
    maps to 9 cores.

    Parameters
    ----------
    roi_spec (NetworkSpec) : ROI prediction network, None for a single-network baseline
    cls_spec (NetworkSpec) : classification network

    Returns
    -------
    core_map (CoreMap) : cores C1, C2, ... in dataflow order
    """
    cores = []
    if roi_spec is not None:
        dense = []
        for kind, indices in layer_groups(roi_spec):
            if kind == "conv":
                cores.append(("roi_conv", indices))
            else:
                dense.extend(indices)
        cores.append(("roi_rnn_out", tuple(dense)))
        cores.append(("roi_gen", ()))
    for kind, indices in layer_groups(cls_spec):
        if kind == "conv":
            cores.append(("cls_conv", indices))
        elif cls_spec.layers[indices[0]].kind == "output":
            cores.append(("cls_out", indices))
        else:
            cores.append(("cls_fc", indices))

    return CoreMap(
        cores=tuple(CoreDescriptor(core_id=f"C{i + 1}", role=role, layers=layers) for i, (role, layers) in enumerate(cores))
    )


def validate_core_map(core_map: CoreMap, roi_spec: Optional[NetworkSpec], cls_spec: NetworkSpec) -> None:
    """Raise MappingInvalid unless every layer sits on exactly one core in dataflow order."""
    for core in core_map.cores:
        if core.role not in ROLES:
            raise custom_errors.MappingInvalid(f"core {core.core_id} has unknown role '{core.role}'")
    generators = [core for core in core_map.cores if core.role == "roi_gen"]
    if roi_spec is not None and len(generators) != 1:
        raise custom_errors.MappingInvalid(f"ROI generation must occupy exactly one core, got {len(generators)}")
    if roi_spec is None and (generators or core_map.by_network("roi")):
        raise custom_errors.MappingInvalid("single-network mapping cannot host ROI cores")
    if any(core.layers for core in generators):
        raise custom_errors.MappingInvalid("the ROI generation core cannot host network layers")

    for network, spec in (("roi", roi_spec), ("classifier", cls_spec)):
        if spec is None:
            continue
        hosted = [index for core in core_map.by_network(network) for index in core.layers]
        if sorted(hosted) != list(range(len(spec.layers))):
            raise custom_errors.MappingInvalid(
                f"{network} layers must each be mapped exactly once, got {sorted(hosted)}"
            )
        if hosted != sorted(hosted):
            raise custom_errors.MappingInvalid(f"{network} cores are not in dataflow order")


def _core_counts(core: CoreDescriptor, counter: MacCounter) -> Tuple[int, int, int]:
    macs = sum(counter.macs.get(index, 0) for index in core.layers)
    return macs, counter.events_in.get(core.layers[0], 0), counter.events_out.get(core.layers[-1], 0)


def pipeline_finish_times(busy: np.ndarray, ready: np.ndarray = None) -> np.ndarray:
    """Finish time of every stage and item in a linear pipeline.

    finish[s, i] = max(finish[s - 1, i], finish[s, i - 1]) + busy[s, i], where the
    first stage waits for ready[i] instead of a previous stage.

    Parameters
    ----------
    busy (numpy.ndarray) : busy time of shape (stages, items)
    ready (numpy.ndarray, default=None) : earliest start of each item at the first stage

    Returns
    -------
    finish (numpy.ndarray) : finish times of shape (stages, items)
    """
    busy = np.asarray(busy, dtype=np.float64)
    stages, items = busy.shape
    ready = np.zeros(items) if ready is None else np.asarray(ready, dtype=np.float64)
    finish = np.zeros((stages, items))
    for s in range(stages):
        for i in range(items):
            upstream = finish[s - 1, i] if s else ready[i]
            previous = finish[s, i - 1] if i else 0.0
            finish[s, i] = max(upstream, previous) + busy[s, i]

    return finish


def pipeline_makespan(busy: np.ndarray) -> float:
    """Completion time of the last item through all stages.

    Examples
    --------
    >>> pipeline_makespan([[3.0] * 10, [2.0] * 10])
    32.0
    """
    busy = np.asarray(busy, dtype=np.float64)
    if busy.size == 0:
        return 0.0

    return float(pipeline_finish_times(busy)[-1, -1])


@dataclass
class SimulationResult:
    """Trace and totals of one simulated sample.

    Parameters
    ----------
    trace (pandas.DataFrame) : one row per step and core with TRACE_COLUMNS
    mode (str) : sequential or pipelined
    latency_s (float) : makespan of the sample
    step_latency_s (list) : sequential per-timebin chain latency, or pipelined finish time of each classifier step
    dynamic_energy_j (float) : sum of core energies
    static_energy_j (float) : static power times cores times makespan
    classes (list) : argmax class of every classifier step
    cores (int) : number of mapped cores
    """

    trace: pd.DataFrame
    mode: str
    latency_s: float
    step_latency_s: List[float]
    dynamic_energy_j: float
    static_energy_j: float
    classes: List[int] = field(default_factory=list)
    cores: int = 0

    @property
    def energy_j(self) -> float:
        """Dynamic plus static energy."""
        return self.dynamic_energy_j + self.static_energy_j

    @property
    def macs(self) -> int:
        """Effective multiply-accumulates over all cores and steps."""
        return int(self.trace["macs"].sum())

    def summary(self) -> dict:
        """Totals as a plain dictionary."""
        return {
            "mode": self.mode,
            "cores": self.cores,
            "steps": int(self.trace["step"].nunique()) if len(self.trace) else 0,
            "macs": self.macs,
            "events_in": int(self.trace["events_in"].sum()),
            "events_out": int(self.trace["events_out"].sum()),
            "latency_s": self.latency_s,
            "dynamic_energy_j": self.dynamic_energy_j,
            "static_energy_j": self.static_energy_j,
            "energy_j": self.energy_j,
        }


def summary_text(result: SimulationResult) -> str:
    """JSON block of the totals."""
    return json.dumps(result.summary(), indent=2)


def timebin_totals(trace: pd.DataFrame) -> pd.DataFrame:
    """Per-step sums over cores."""
    return trace.groupby("step", as_index=False)[["macs", "events_in", "events_out", "busy_s", "energy_j"]].sum()


def _row(step: int, core: CoreDescriptor, macs: int, events_in: int, events_out: int, cost: CostModel) -> dict:
    return {
        "step": step,
        "core_id": core.core_id,
        "role": core.role,
        "macs": int(macs),
        "events_in": int(events_in),
        "events_out": int(events_out),
        "busy_s": macs * cost.time_per_mac + (events_in + events_out) * cost.time_per_event_io,
        "energy_j": macs * cost.energy_per_mac + (events_in + events_out) * cost.energy_per_event_io,
    }


def _stage_busy(trace: pd.DataFrame, cores: Sequence[CoreDescriptor], steps: int) -> np.ndarray:
    busy = np.zeros((len(cores), steps))
    for s, core in enumerate(cores):
        rows = trace[trace["core_id"] == core.core_id]
        busy[s, rows["step"].to_numpy()] = rows["busy_s"].to_numpy()

    return busy


def simulate(
    models: Union[ModelPair, Model],
    sample: BinnedSample,
    core_map: CoreMap = None,
    cost_model: CostModel = CostModel(),
    mode: str = "sequential",
    roi_mode: str = "tgk",
) -> SimulationResult:
    """Simulate one sample on a multi-core mapping.

    Counts come from the sparse forward, so they are exact. Sequentially, every
    timebin runs the whole chain before the next one starts. Pipelined, every core is
    a stage working on its next item as soon as its input is ready; the classifier
    step t + 1 consumes the ROI of timebin t and step 0 is an idle classifier step.

    Parameters
    ----------
    models (ModelPair|Model) : TRIP pair, or a single classification network for baselines
    sample (BinnedSample) : counts of shape (T, 2, B, A)
    core_map (CoreMap, default=None) : mapping, default_core_map when None
    cost_model (CostModel) : linear cost parameters
    mode (str, default='sequential') : sequential (seq) or pipelined (pipe)
    roi_mode (str, default='tgk') : ROI generation with tgk or dap

    Returns
    -------
    result (SimulationResult) : per-step per-core trace and totals
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}, got '{mode}'")
    mode = MODES[mode]
    pair = models if isinstance(models, ModelPair) else None
    roi_spec = pair.roi.spec if pair else None
    cls_model = pair.classifier if pair else models
    if core_map is None:
        core_map = default_core_map(roi_spec, cls_model.spec)
    validate_core_map(core_map, roi_spec, cls_model.spec)

    rows = []
    if pair:
        result = pipeline(pair).run(sample, mode=roi_mode, sched="pipe" if mode == "pipelined" else "seq")
        for t, counter in enumerate(result.roi_counters):
            for core in core_map.by_network("roi"):
                rows.append(_row(t, core, *_core_counts(core, counter), cost_model))
            for core in core_map.by_network(None):
                rows.append(
                    _row(
                        t,
                        core,
                        result.roi_gen_operations[t],
                        np.count_nonzero(sample.frames[t]),
                        np.count_nonzero(result.roi_frames[t]),
                        cost_model,
                    )
                )
        cls_counters = result.classifier_counters
        logits = result.logits
    else:
        if sample.frames.shape[1:] != cls_model.spec.input_shape:
            raise custom_errors.ShapeMismatch(
                f"sample frames {sample.frames.shape[1:]} do not match network input {cls_model.spec.input_shape}"
            )
        state = cls_model.initial_state()
        cls_counters, logits = [], []
        for t in range(sample.timebins):
            counter = MacCounter()
            output, state = forward_sparse(cls_model, SparseActivations.from_dense(sample.frames[t]), state, counter)
            cls_counters.append(counter)
            logits.append(output)
    for step, counter in enumerate(cls_counters):
        for core in core_map.by_network("classifier"):
            rows.append(_row(step, core, *_core_counts(core, counter), cost_model))

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    roi_cores = core_map.by_network("roi") + core_map.by_network(None)
    cls_cores = core_map.by_network("classifier")
    timebins = sample.timebins
    if mode == "sequential":
        totals = trace.groupby("step")["busy_s"].sum().reindex(range(timebins), fill_value=0.0)
        step_latency = [float(v) for v in totals]
        latency = float(sum(step_latency))
    else:
        cls_busy = _stage_busy(trace, cls_cores, len(cls_counters))
        if pair:
            roi_finish = pipeline_finish_times(_stage_busy(trace, roi_cores, timebins))
            ready = np.concatenate([[0.0], roi_finish[-1]])
            cls_finish = pipeline_finish_times(cls_busy, ready)
            latency = float(max(roi_finish[-1, -1], cls_finish[-1, -1]))
        else:
            cls_finish = pipeline_finish_times(cls_busy)
            latency = float(cls_finish[-1, -1])
        step_latency = [float(v) for v in cls_finish[-1]]

    dynamic = float(trace["energy_j"].sum())
    static = cost_model.static_power_per_core * len(core_map) * latency
    logger.debug(f"Simulated {timebins} timebins {mode}: latency={latency:.3e} s energy={dynamic + static:.3e} J")

    return SimulationResult(
        trace=trace,
        mode=mode,
        latency_s=latency,
        step_latency_s=step_latency,
        dynamic_energy_j=dynamic,
        static_energy_j=static,
        classes=[int(np.argmax(v)) for v in logits],
        cores=len(core_map),
    )


@dataclass(frozen=True)
class BlockGeometry:
    """Input footprint of one conv block's output positions.

    An output at (y, x) reads input rows y * stride - padding up to
    y * stride - padding + kernel - 1, and likewise for columns.

    Parameters
    ----------
    kernel (int) : composed receptive field size of the block
    stride (int) : composed stride of the block
    padding (int) : composed padding of the block
    """

    kernel: int
    stride: int
    padding: int

    def completion_key(self, y: int, x: int) -> Tuple[int, int]:
        """Raster position of the last input in the receptive field."""
        return (y * self.stride - self.padding + self.kernel - 1, x * self.stride - self.padding + self.kernel - 1)

    def receptive_field(self, y: int, x: int) -> Tuple[int, int, int, int]:
        """Inclusive (row_lo, row_hi, col_lo, col_hi)."""
        row_lo = y * self.stride - self.padding
        col_lo = x * self.stride - self.padding
        return row_lo, row_lo + self.kernel - 1, col_lo, col_lo + self.kernel - 1


def block_geometry(spec: NetworkSpec) -> List[BlockGeometry]:
    """Composed geometry of the leading conv blocks of a network."""
    blocks = []
    for kind, indices in layer_groups(spec):
        if kind != "conv":
            break
        kernel, stride, padding = 1, 1, 0
        for index in indices:
            layer = spec.layers[index]
            if layer.kind in ("conv", "maxpool"):
                pad = layer.padding if layer.kind == "conv" else 0
                kernel += (layer.kernel - 1) * stride
                padding += pad * stride
                stride *= layer.stride
        blocks.append(BlockGeometry(kernel=kernel, stride=stride, padding=padding))

    return blocks


def block_events(model: Model, frame: np.ndarray) -> List[np.ndarray]:
    """Nonzero (channel, y, x) positions of the input and of every leading conv block output."""
    x = np.asarray(frame, dtype=np.float64)
    events = [np.argwhere(x != 0)]
    for kind, indices in layer_groups(model.spec):
        if kind != "conv":
            break
        for index in indices:
            layer = model.layers[index]
            spec = layer.spec
            if spec.kind == "conv":
                x = conv2d(x, layer.weight, layer.params["bias"], spec.padding, spec.stride)
            elif spec.kind == "batchnorm":
                x = batchnorm(x, layer.params)
            else:
                x = maxpool2d(x, spec.kernel, spec.stride)
            if spec.relu_after:
                x = relu(x)
        events.append(np.argwhere(x != 0))

    return events


class ScheduleOp(NamedTuple):
    """One step of a depth-first schedule."""

    action: str
    layer: int
    channel: int
    y: int
    x: int


def depth_first_schedule(layer_events: Sequence[np.ndarray], blocks: Sequence[BlockGeometry]) -> List[ScheduleOp]:
    """Interleave event consumption and production across conv blocks.

    Input events are consumed in raster order. Before a block consumes an event at
    (y, x), every output of that block whose receptive field ends before (y, x) in
    raster order is complete; it is produced and immediately consumed by the next
    block. Remaining outputs are flushed at the end of the timebin, shallow blocks first.

    Parameters
    ----------
    layer_events (list) : (n, 3) arrays of (channel, y, x); entry 0 is the input, entry l + 1 the output of block l
    blocks (list) : BlockGeometry per block

    Returns
    -------
    ops (list) : ScheduleOp entries, consume for layers 0 to L - 1 and produce for layers 1 to L
    """
    if len(layer_events) != len(blocks) + 1:
        raise ValueError(f"expected {len(blocks) + 1} event lists for {len(blocks)} blocks, got {len(layer_events)}")

    def ordered(events, key):
        events = [tuple(int(v) for v in e) for e in np.asarray(events).reshape(-1, 3)]
        return sorted(events, key=key)

    raster = ordered(layer_events[0], key=lambda e: (e[1], e[2], e[0]))
    pending = [
        ordered(layer_events[level + 1], key=lambda e, b=block: (b.completion_key(e[1], e[2]), e[0]))
        for level, block in enumerate(blocks)
    ]
    cursors = [0] * len(blocks)
    ops = []

    def flush(level, before=None):
        queue = pending[level]
        block = blocks[level]
        while cursors[level] < len(queue):
            event = queue[cursors[level]]
            if before is not None and not block.completion_key(event[1], event[2]) < before:
                break
            cursors[level] += 1
            ops.append(ScheduleOp("produce", level + 1, *event))
            consume(level + 1, event)

    def consume(level, event):
        if level == len(blocks):
            return
        flush(level, before=(event[1], event[2]))
        ops.append(ScheduleOp("consume", level, *event))

    for event in raster:
        consume(0, event)
    for level in range(len(blocks)):
        flush(level)

    return ops


class simulator:
    """Simulate the shared models on a multi-core mapping and compare against a baseline.

    Parameters
    ----------
    models (ModelPair) : TRIP networks
    cost_model (CostModel, default=CostModel()) : linear cost parameters
    """

    def __init__(self, models: ModelPair, cost_model: CostModel = CostModel()):
        self.models = models
        self.cost_model = cost_model

    def simulate(
        self, sample: BinnedSample, mode: str = "sequential", roi_mode: str = "tgk", core_map: CoreMap = None
    ) -> SimulationResult:
        """Simulate one sample with the TRIP pair, see pipesim.simulate."""
        return simulate(self.models, sample, core_map, self.cost_model, mode, roi_mode)

    def bench(
        self,
        samples: Sequence[BinnedSample],
        baseline: Model = None,
        baseline_samples: Sequence[BinnedSample] = None,
        mode: str = "sequential",
        roi_mode: str = "tgk",
    ) -> pd.DataFrame:
        """Effective MACs, latency and energy per sample.

        Parameters
        ----------
        samples (list) : BinnedSamples at the ROI network resolution
        baseline (Model, default=None) : single classification network to compare against
        baseline_samples (list, default=None) : the same samples at the baseline resolution
        mode (str, default='sequential') : sequential or pipelined
        roi_mode (str, default='tgk') : tgk or dap

        Returns
        -------
        report (pandas.DataFrame) : one row per sample and system with columns sample, system, macs, latency_s, energy_j

        Examples
        --------
        >>> report = simulator(models).bench(samples)
        >>> list(report.columns)
        ['sample', 'system', 'macs', 'latency_s', 'energy_j']
        """
        if baseline is not None and (baseline_samples is None or len(baseline_samples) != len(samples)):
            raise ValueError("baseline_samples must hold one sample per sample when a baseline is given")
        rows = []
        for index, sample in enumerate(samples):
            runs = [("trip", self.models, sample)]
            if baseline is not None:
                runs.append(("baseline", baseline, baseline_samples[index]))
            for system, models, data in runs:
                result = simulate(models, data, None, self.cost_model, mode, roi_mode)
                rows.append(
                    {
                        "sample": index,
                        "system": system,
                        "macs": result.macs,
                        "latency_s": result.latency_s,
                        "energy_j": result.energy_j,
                    }
                )

        return pd.DataFrame(rows, columns=["sample", "system", "macs", "latency_s", "energy_j"])


def bench_ratios(report: pd.DataFrame) -> dict:
    """Baseline over TRIP ratio of summed MACs, latency and energy, NaN where TRIP sums to 0."""
    totals = report.groupby("system")[["macs", "latency_s", "energy_j"]].sum()
    ratios = {}
    for column in totals.columns:
        trip = float(totals.loc["trip", column])
        baseline = float(totals.loc["baseline", column])
        ratios[f"{column}_ratio"] = baseline / trip if trip else float("nan")

    return ratios
