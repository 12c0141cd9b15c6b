import json

import numpy as np
import pandas as pd
import pytest

from trip_attention.core import custom_errors, pipesim
from trip_attention.core.events import BinnedSample
from trip_attention.core.net import MacCounter, Model, SparseActivations, forward_sparse
from trip_attention.core.netspec import parse_spec_file
from trip_attention.core.pipeline import ModelPair
from trip_attention.core.synthetic import SyntheticConfig, generate_synthetic_sample
from trip_attention.package import config_path, read_text

BASELINE = """
net classifier 128x128
layer maxpool k=4
layer conv in=2 out=4 k=3 pad=1
layer batchnorm out=4
layer maxpool k=2
layer output in=1024 units=10
"""


@pytest.fixture(scope="module")
def spec_file():
    return parse_spec_file(read_text(config_path("desk.net")))


@pytest.fixture(scope="module")
def models(spec_file):
    return ModelPair.from_spec(spec_file, np.random.default_rng(0))


@pytest.fixture(scope="module")
def biased(spec_file):
    rng = np.random.default_rng(2)
    pair = ModelPair.from_spec(spec_file, rng)
    for model in (pair.roi, pair.classifier):
        for layer in model.layers:
            if layer.spec.has_weights:
                layer.params["bias"] = rng.normal(0.0, 0.5, size=layer.params["bias"].shape)

    return pair


@pytest.fixture(scope="module")
def samples():
    return [generate_synthetic_sample(seed, SyntheticConfig(timebins=3))[0] for seed in range(3)]


@pytest.fixture(scope="module")
def baseline():
    return Model.init(parse_spec_file(BASELINE).networks["classification"], np.random.default_rng(1))


def test_makespan():
    busy = np.array([[3.0] * 10, [2.0] * 10])
    assert pipesim.pipeline_makespan(busy) == 32.0
    assert busy.sum() == 50.0
    assert pipesim.pipeline_makespan(np.zeros((0, 0))) == 0.0


def test_finish_times_ready():
    finish = pipesim.pipeline_finish_times([[1.0, 1.0], [2.0, 2.0]], ready=[0.0, 5.0])
    assert finish.tolist() == [[1.0, 6.0], [3.0, 8.0]]


def test_default_core_counts(spec_file):
    assert len(pipesim.default_core_map(spec_file.networks["roi_prediction"], spec_file.networks["classification"])) == 8

    dvs = parse_spec_file(read_text(config_path("dvs_gesture.net"))).networks
    core_map = pipesim.default_core_map(dvs["roi_prediction"], dvs["classification"])
    assert len(core_map) == 9
    assert [core.role for core in core_map.cores] == [
        "roi_conv",
        "roi_conv",
        "roi_conv",
        "roi_rnn_out",
        "roi_gen",
        "cls_conv",
        "cls_conv",
        "cls_fc",
        "cls_out",
    ]
    assert core_map.cores[0].layers == (0, 1, 2, 3)
    assert core_map.cores[3].layers == (10, 11)

    seneca = parse_spec_file(read_text(config_path("seneca_baseline.net"))).networks["classification"]
    assert len(pipesim.default_core_map(None, seneca)) == 7


def test_invalid_core_maps(spec_file):
    roi_spec = spec_file.networks["roi_prediction"]
    cls_spec = spec_file.networks["classification"]
    cores = pipesim.default_core_map(roi_spec, cls_spec).cores

    def check(changed, message):
        with pytest.raises(custom_errors.MappingInvalid) as error:
            pipesim.validate_core_map(pipesim.CoreMap(tuple(changed)), roi_spec, cls_spec)
        assert message in str(error)

    check([c for c in cores if c.role != "roi_gen"], "ROI generation must occupy exactly one core")
    check(list(cores) + [pipesim.CoreDescriptor("C9", "cls_out", (7,))], "classifier layers must each be mapped exactly once")
    check(cores[0:1] + cores[2:], "roi layers must each be mapped exactly once")
    check([cores[1], cores[0]] + list(cores[2:]), "roi cores are not in dataflow order")
    check(list(cores) + [pipesim.CoreDescriptor("C9", "dsp")], "unknown role 'dsp'")
    check(
        [pipesim.CoreDescriptor(c.core_id, c.role, (0,)) if c.role == "roi_gen" else c for c in cores],
        "cannot host network layers",
    )

    with pytest.raises(custom_errors.MappingInvalid) as error:
        pipesim.validate_core_map(pipesim.CoreMap(cores), None, cls_spec)
    assert "single-network mapping cannot host ROI cores" in str(error)


def test_cost_model_invalid():
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        pipesim.CostModel(time_per_mac=-1.0)
    assert "time_per_mac must be non-negative" in str(error)


def test_trace_columns(models, samples):
    result = pipesim.simulate(models, samples[0])
    assert list(result.trace.columns) == pipesim.TRACE_COLUMNS
    assert len(result.trace) == 3 * 8
    assert result.cores == 8
    assert result.mode == "sequential"
    assert len(result.step_latency_s) == 3
    assert result.latency_s == pytest.approx(sum(result.step_latency_s))
    assert result.latency_s == pytest.approx(result.trace["busy_s"].sum())
    assert result.classes == [int(np.argmax(v)) for v in pipesim.pipeline(models).run(samples[0]).logits]


def test_counts_match_standalone(models, samples):
    sample = samples[1]
    result = pipesim.simulate(models, sample)
    trace = result.trace
    state = models.roi.initial_state()
    for t in range(sample.timebins):
        counter = MacCounter()
        _, state = forward_sparse(models.roi, SparseActivations.from_dense(sample.frames[t]), state, counter)
        for core in pipesim.default_core_map(models.roi.spec, models.classifier.spec).by_network("roi"):
            row = trace[(trace["step"] == t) & (trace["core_id"] == core.core_id)]
            assert int(row["macs"].iloc[0]) == sum(counter.macs[i] for i in core.layers)


def test_costs_linear(models, samples):
    cost = pipesim.CostModel(time_per_mac=2.0, time_per_event_io=3.0, energy_per_mac=5.0, energy_per_event_io=7.0)
    trace = pipesim.simulate(models, samples[0], cost_model=cost).trace
    events = trace["events_in"] + trace["events_out"]
    assert np.allclose(trace["busy_s"], 2.0 * trace["macs"] + 3.0 * events)
    assert np.allclose(trace["energy_j"], 5.0 * trace["macs"] + 7.0 * events)


def test_pipelined_not_slower(models, samples):
    for sample in samples:
        sequential = pipesim.simulate(models, sample, mode="seq")
        pipelined = pipesim.simulate(models, sample, mode="pipe")
        assert pipelined.mode == "pipelined"
        assert pipelined.latency_s <= sequential.latency_s + 1e-15
        assert pipelined.macs == sequential.macs
        assert pipelined.trace["step"].max() == sample.timebins
        assert pipelined.classes[1:] == sequential.classes


def test_pipelined_not_slower_with_biases(biased, samples):
    one_event = np.zeros((1, 2, 128, 128), dtype=np.int32)
    one_event[0, 1, 64, 64] = 1
    for sample in [BinnedSample(frames=one_event)] + samples:
        sequential = pipesim.simulate(biased, sample, mode="sequential")
        pipelined = pipesim.simulate(biased, sample, mode="pipelined")
        assert pipelined.latency_s <= sequential.latency_s + 1e-15
        assert pipelined.macs == sequential.macs
        assert pipelined.dynamic_energy_j == pytest.approx(sequential.dynamic_energy_j)
        idle = pipelined.trace[(pipelined.trace["step"] == 0) & pipelined.trace["role"].str.startswith("cls")]
        assert (idle["busy_s"] == 0).all()


def test_zero_event_sample(models):
    sample = BinnedSample(frames=np.zeros((4, 2, 128, 128), dtype=np.int32))
    result = pipesim.simulate(models, sample)
    assert (result.trace["busy_s"] == 0).all()
    assert result.dynamic_energy_j == 0.0
    assert result.energy_j == result.static_energy_j
    assert result.summary()["macs"] == 0


def test_zero_event_sample_with_biases(biased):
    # biases alone drive activity past the first conv block
    sample = BinnedSample(frames=np.zeros((2, 2, 128, 128), dtype=np.int32))
    result = pipesim.simulate(biased, sample)
    first = result.trace[result.trace["core_id"] == "C1"]
    assert (first["events_in"] == 0).all()
    assert (first["macs"] == 0).all()
    assert result.macs > 0
    assert result.dynamic_energy_j > 0


def test_summary(models, samples):
    result = pipesim.simulate(models, samples[0], mode="pipelined")
    summary = result.summary()
    assert list(summary) == [
        "mode",
        "cores",
        "steps",
        "macs",
        "events_in",
        "events_out",
        "latency_s",
        "dynamic_energy_j",
        "static_energy_j",
        "energy_j",
    ]
    assert summary["steps"] == 4
    assert json.loads(pipesim.summary_text(result)) == summary
    assert summary["static_energy_j"] == pytest.approx(pipesim.CostModel().static_power_per_core * 8 * result.latency_s)

    totals = pipesim.timebin_totals(result.trace)
    assert len(totals) == 4
    assert totals["macs"].sum() == summary["macs"]


def test_baseline_simulation(baseline, samples):
    result = pipesim.simulate(baseline, samples[0])
    assert result.cores == 2
    assert set(result.trace["role"]) == {"cls_conv", "cls_out"}

    with pytest.raises(custom_errors.ShapeMismatch):
        pipesim.simulate(baseline, BinnedSample(frames=np.ones((2, 2, 64, 64))))
    with pytest.raises(ValueError) as error:
        pipesim.simulate(baseline, samples[0], mode="parallel")
    assert "mode must be one of" in str(error)


def test_bench(models, baseline, samples):
    sim = pipesim.simulator(models)
    report = sim.bench(samples, baseline=baseline, baseline_samples=samples)
    assert list(report.columns) == ["sample", "system", "macs", "latency_s", "energy_j"]
    assert report["system"].tolist() == ["trip", "baseline"] * 3

    ratios = pipesim.bench_ratios(report)
    assert list(ratios) == ["macs_ratio", "latency_s_ratio", "energy_j_ratio"]
    totals = report.groupby("system")["macs"].sum()
    assert ratios["macs_ratio"] == pytest.approx(totals["baseline"] / totals["trip"])

    trip_only = sim.bench(samples[0:1])
    pd.testing.assert_frame_equal(trip_only, report.iloc[0:1].reset_index(drop=True))

    with pytest.raises(ValueError):
        sim.bench(samples, baseline=baseline)


def test_block_geometry(spec_file):
    blocks = pipesim.block_geometry(spec_file.networks["roi_prediction"])
    assert blocks == [pipesim.BlockGeometry(32, 16, 8), pipesim.BlockGeometry(4, 2, 1)]
    assert blocks[0].receptive_field(1, 2) == (8, 39, 24, 55)
    assert blocks[0].completion_key(1, 2) == (39, 55)


def replay(ops, layer_events, blocks):
    """Check that every output is produced after all inputs in its receptive field were consumed."""
    consumed = [set() for _ in layer_events]
    produced = [set() for _ in layer_events]
    for op in ops:
        event = (op.channel, op.y, op.x)
        if op.action == "consume":
            assert event not in consumed[op.layer]
            consumed[op.layer].add(event)
        else:
            assert event not in produced[op.layer]
            produced[op.layer].add(event)
            row_lo, row_hi, col_lo, col_hi = blocks[op.layer - 1].receptive_field(op.y, op.x)
            for c, y, x in layer_events[op.layer - 1]:
                if row_lo <= y <= row_hi and col_lo <= x <= col_hi:
                    assert (int(c), int(y), int(x)) in consumed[op.layer - 1]

    for level, events in enumerate(layer_events):
        expected = {tuple(int(v) for v in e) for e in events}
        if level < len(blocks):
            assert consumed[level] == expected
        if level > 0:
            assert produced[level] == expected


def test_depth_first_schedule_model(models, samples):
    blocks = pipesim.block_geometry(models.roi.spec)
    for t in range(3):
        layer_events = pipesim.block_events(models.roi, samples[2].frames[t])
        assert len(layer_events) == 3
        ops = pipesim.depth_first_schedule(layer_events, blocks)
        replay(ops, layer_events, blocks)


def test_depth_first_schedule_random(seeds):
    blocks = [pipesim.BlockGeometry(3, 1, 1), pipesim.BlockGeometry(4, 2, 1)]
    for seed in seeds:
        rng = np.random.default_rng(seed)
        layer_events = [
            np.argwhere(rng.random((2, 8, 8)) < 0.3),
            np.argwhere(rng.random((3, 8, 8)) < 0.3),
            np.argwhere(rng.random((2, 4, 4)) < 0.5),
        ]
        ops = pipesim.depth_first_schedule(layer_events, blocks)
        replay(ops, layer_events, blocks)
        # production is interleaved with input consumption
        first_produce = next((i for i, op in enumerate(ops) if op.action == "produce"), len(ops))
        last_input = max((i for i, op in enumerate(ops) if op.action == "consume" and op.layer == 0), default=-1)
        earliest = min(blocks[0].completion_key(int(y), int(x)) for _, y, x in layer_events[1])
        latest = max((int(y), int(x)) for _, y, x in layer_events[0])
        if earliest < latest:
            assert first_produce < last_input

    with pytest.raises(ValueError):
        pipesim.depth_first_schedule(layer_events[0:2], blocks)


@pytest.fixture(scope="module")
def seneca():
    spec = parse_spec_file(read_text(config_path("seneca_baseline.net"))).networks["classification"]
    return Model.init(spec, np.random.default_rng(3))


def check_improvement(models, baseline, samples):
    sim = pipesim.simulator(models)
    for mode in ("sequential", "pipelined"):
        report = sim.bench(samples, baseline=baseline, baseline_samples=samples, mode=mode)
        ratios = pipesim.bench_ratios(report)
        assert ratios["latency_s_ratio"] >= 2
        assert ratios["energy_j_ratio"] >= 2


def test_desk_improvement_over_baseline(models, seneca, samples):
    check_improvement(models, seneca, samples)


@pytest.mark.slow
def test_dvs_gesture_improvement_over_baseline(seneca, samples):
    spec_file = parse_spec_file(read_text(config_path("dvs_gesture.net")))
    models = ModelPair.from_spec(spec_file, np.random.default_rng(0))
    assert len(pipesim.default_core_map(models.roi.spec, models.classifier.spec)) == 9
    check_improvement(models, seneca, samples)
