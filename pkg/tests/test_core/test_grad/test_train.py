import dataclasses
import io
import logging

import numpy as np
import pandas as pd
import pytest

from trip_attention.__equality__ import compare_dfs, compare_models
from trip_attention.core import custom_errors
from trip_attention.cli import sample_seed
from trip_attention.core.config import from_key_values
from trip_attention.core.events import BinnedSample
from trip_attention.core.grad.train import (
    TrainConfig,
    dap_finetune,
    evaluate,
    metrics_to_csv,
    parse_schedule,
    qat_finetune,
    sparsity_columns,
    split_dataset,
    train,
    trainer,
)
from trip_attention.core.net import Model
from trip_attention.core.netspec import parse_spec_file
from trip_attention.core.pipeline import ModelPair, pipeline
from trip_attention.core.quantize import quantize_layer
from trip_attention.core.synthetic import SyntheticConfig, generate_synthetic_sample
from trip_attention.core.weights import load_weights, save_weights
from trip_attention.package import config_path, read_text

TINY = """
attention N=4 sigma=1 theta=3 scale=1

net roi 16x16
layer maxpool k=2
layer conv in=2 out=3 k=3 pad=1
layer batchnorm out=3
layer maxpool k=2
layer relu_rnn in=48 units=5
layer output in=5 units=3

net classifier 4x4
layer conv in=2 out=3 k=3 pad=1
layer batchnorm out=3
layer maxpool k=2
layer fully_connected in=12 units=6
layer output in=6 units=4
"""

WEIGHTS = {"weight", "bias", "gamma", "beta"}
FULL_SCHEDULE = ("roi:1", "roi:4", "roi:5", "classifier:0", "classifier:3", "classifier:4")


@pytest.fixture(scope="module")
def pair():
    spec_file = parse_spec_file(TINY)
    rng = np.random.default_rng(0)
    roi = Model.init(spec_file.networks["roi_prediction"], rng)
    for layer in roi.layers:
        if layer.spec.has_weights:
            layer.params["bias"] = rng.normal(0.0, 0.2, size=layer.params["bias"].shape)

    return ModelPair.from_spec(spec_file, rng, roi=roi)


@pytest.fixture(scope="module")
def dataset():
    rng = np.random.default_rng(1)
    samples = []
    for index in range(6):
        frames = (rng.random((2, 2, 16, 16)) < 0.3) * rng.integers(1, 3, size=(2, 2, 16, 16))
        samples.append(BinnedSample(frames=frames, label=index % 4))

    return samples


@pytest.fixture(scope="module")
def cfg():
    return TrainConfig(lr=0.01, optimizer="sgd", l1=0.0, epochs=2, batch_size=4, seed=3, dtype="float64")


def test_config_errors():
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        TrainConfig(lr=-1.0)
    assert "lr must be non-negative, got -1.0" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        TrainConfig(optimizer="rmsprop")
    assert "optimizer must be one of ['adam', 'sgd'], got 'rmsprop'" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        TrainConfig(trainable="neither")
    assert "trainable must be one of" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        TrainConfig(dtype="float16")
    assert "dtype must be float32 or float64, got 'float16'" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid):
        TrainConfig(test_fraction=1.0)
    with pytest.raises(custom_errors.ConfigInvalid):
        TrainConfig(batch_size=0)


def test_shipped_config():
    cfg = from_key_values(TrainConfig, read_text(config_path("desk_train.cfg")))
    assert cfg.seed == 42
    assert cfg.epochs == 200
    assert cfg.optimizer == "adam"


def test_split_dataset():
    train_idx, test_idx = split_dataset(10, 0.3, np.random.default_rng(5))
    assert len(train_idx) == 7 and len(test_idx) == 3
    assert sorted(np.concatenate([train_idx, test_idx]).tolist()) == list(range(10))
    again, _ = split_dataset(10, 0.3, np.random.default_rng(5))
    assert np.array_equal(train_idx, again)

    with pytest.raises(custom_errors.ConfigInvalid) as error:
        split_dataset(1, 0.9, np.random.default_rng(0))
    assert "test_fraction leaves no training samples" in str(error)


def test_sparsity_columns(pair):
    assert sparsity_columns(pair) == [
        "sparsity_layer_roi_3",
        "sparsity_layer_roi_4",
        "sparsity_layer_classifier_2",
        "sparsity_layer_classifier_3",
    ]


def test_evaluate(pair, dataset):
    metrics = evaluate(pair, dataset, batch_size=4)
    assert list(metrics) == ["accuracy", "loss"] + sparsity_columns(pair)
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert metrics["loss"] > 0
    assert all(0.0 <= metrics[c] <= 1.0 for c in sparsity_columns(pair))

    predictions = [pipeline(pair).run(sample).prediction for sample in dataset]
    expected = np.mean([p == s.label for p, s in zip(predictions, dataset)])
    assert metrics["accuracy"] == pytest.approx(expected)

    empty = evaluate(pair, [])
    assert np.isnan(empty["accuracy"])


def test_dataset_errors(pair, dataset, cfg):
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        train(pair, [], cfg)
    assert "dataset is empty" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        train(pair, [BinnedSample(frames=dataset[0].frames)], cfg)
    assert "sample 0 has label None, expected 0 to 3" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        train(pair, [BinnedSample(frames=np.zeros((2, 2, 8, 8)), label=0)], cfg)
    assert "do not match ROI network input (2, 16, 16)" in str(error)
    with pytest.raises(custom_errors.ConfigInvalid) as error:
        train(pair, [dataset[0], BinnedSample(frames=np.zeros((3, 2, 16, 16)), label=0)], cfg)
    assert "samples must share one shape" in str(error)


def test_zero_learning_rate(pair, dataset):
    for optimizer in ("sgd", "adam"):
        cfg = TrainConfig(lr=0.0, optimizer=optimizer, l1=0.0, epochs=1, batch_size=4)
        trained, metrics = train(pair, dataset, cfg)
        assert len(metrics) == 1
        compare_models(trained.roi, pair.roi, WEIGHTS)
        compare_models(trained.classifier, pair.classifier, WEIGHTS)


def test_l1_penalty_in_loss(pair, dataset):
    plain = TrainConfig(lr=0.0, l1=0.0, epochs=1, batch_size=6, dtype="float64")
    penalized = TrainConfig(lr=0.0, l1=1.0, epochs=1, batch_size=6, dtype="float64")
    _, without = train(pair, dataset, plain)
    _, with_l1 = train(pair, dataset, penalized)
    assert with_l1["loss"].iloc[0] > without["loss"].iloc[0]
    assert with_l1["train_acc"].iloc[0] == without["train_acc"].iloc[0]


def test_training_updates(pair, dataset, cfg, caplog):
    caplog.set_level(logging.INFO, logger="trip_attention")
    trained, metrics = train(pair, dataset, cfg)

    assert list(metrics.columns) == ["phase", "epoch", "loss", "train_acc", "test_acc"] + sparsity_columns(pair)
    assert metrics["epoch"].tolist() == [0, 1]
    assert set(metrics["phase"]) == {"train"}
    assert metrics["test_acc"].isna().all()
    assert (metrics["loss"] > 0).all()
    assert not np.array_equal(trained.roi.layers[5].params["bias"], pair.roi.layers[5].params["bias"])
    assert not np.array_equal(trained.classifier.layers[4].params["weight"], pair.classifier.layers[4].params["weight"])
    assert trained.roi.layers[1].params["weight"].dtype == np.float64

    messages = [m for name, _, m in caplog.record_tuples if name == "trip_attention.core.grad.train"]
    assert messages[0].startswith("train epoch 1/2: loss=")


def test_deterministic(pair, dataset, cfg):
    first, metrics1 = train(pair, dataset, cfg)
    second, metrics2 = train(pair, dataset, cfg)
    assert compare_dfs(metrics1, metrics2)
    assert compare_models(first.roi, second.roi)
    assert compare_models(first.classifier, second.classifier)


def test_trainable_roi_only(pair, dataset, cfg):
    trained, _ = train(pair, dataset, dataclasses.replace(cfg, trainable="roi"))
    compare_models(trained.classifier, pair.classifier)
    assert not np.array_equal(trained.roi.layers[5].params["bias"], pair.roi.layers[5].params["bias"])


def test_float32_training(pair, dataset):
    trained, metrics = train(pair, dataset, TrainConfig(lr=0.01, epochs=1, batch_size=3))
    assert np.isfinite(metrics["loss"]).all()
    assert trained.classifier.layers[0].params["weight"].dtype == np.float64


def test_parse_schedule(pair):
    assert parse_schedule(pair, FULL_SCHEDULE) == [
        ("roi", 1),
        ("roi", 4),
        ("roi", 5),
        ("classifier", 0),
        ("classifier", 3),
        ("classifier", 4),
    ]

    def check(schedule, message, error=custom_errors.ConfigInvalid):
        with pytest.raises(error) as raised:
            parse_schedule(pair, schedule)
        assert message in str(raised)

    check(["foo"], "schedule entry must be 'roi:<layer>' or 'classifier:<layer>', got 'foo'")
    check(["roi:x"], "got 'roi:x'")
    check(["roi:2"], "schedule entry 'roi:2' is not a weight layer")
    check(["roi:1", "roi:1"], "schedule entry 'roi:1' appears more than once")
    check(["roi:1"], "roi layer 4 is neither quantized nor scheduled", custom_errors.ScheduleIncomplete)

    partly = ModelPair(pair.roi, pair.classifier.quantize(), pair.grid, pair.decode)
    assert parse_schedule(partly, FULL_SCHEDULE[0:3]) == [("roi", 1), ("roi", 4), ("roi", 5)]


def test_qat_finetune(pair, dataset, caplog):
    caplog.set_level(logging.INFO, logger="trip_attention")
    cfg = TrainConfig(lr=0.01, optimizer="sgd", l1=0.0, batch_size=4, qat_schedule=FULL_SCHEDULE, qat_epochs=1)
    quantized, metrics = qat_finetune(pair, dataset, cfg)

    assert quantized.roi.is_quantized and quantized.classifier.is_quantized
    assert not pair.roi.is_quantized
    # the last step leaves nothing to train
    assert metrics["phase"].tolist() == ["qat_1", "qat_2", "qat_3", "qat_4", "qat_5"]
    # the first layer is quantized from the pre-trained weights and then frozen
    assert quantized.roi.layers[1].quant == quantize_layer(pair.roi.layers[1].params["weight"])

    messages = [m for name, _, m in caplog.record_tuples if name == "trip_attention.core.grad.train"]
    assert messages[0].startswith("QAT step 1/6: froze roi layer 1 with scale exponent")


def test_qat_without_epochs(pair, dataset):
    cfg = TrainConfig(qat_schedule=FULL_SCHEDULE, qat_epochs=0)
    quantized, metrics = qat_finetune(pair, dataset, cfg)
    assert quantized.roi.is_quantized and quantized.classifier.is_quantized
    assert metrics.empty
    assert list(metrics.columns)[0:5] == ["phase", "epoch", "loss", "train_acc", "test_acc"]


def test_dap_finetune(pair, dataset, cfg):
    unchanged, metrics = dap_finetune(pair, dataset, dataclasses.replace(cfg, dap_epochs=0))
    assert metrics.empty
    compare_models(unchanged.roi, pair.roi)
    compare_models(unchanged.classifier, pair.classifier)

    tuned, metrics = dap_finetune(pair, dataset, dataclasses.replace(cfg, dap_epochs=1))
    assert metrics["phase"].tolist() == ["dap"]
    compare_models(tuned.roi, pair.roi)
    assert not np.array_equal(tuned.classifier.layers[4].params["bias"], pair.classifier.layers[4].params["bias"])
    assert metrics["train_acc"].iloc[0] == pytest.approx(evaluate(tuned, dataset, mode="dap")["accuracy"])


def test_dap_after_qat_trains_quantized_weights(pair, dataset, cfg):
    quantized, _ = qat_finetune(pair, dataset, TrainConfig(qat_schedule=FULL_SCHEDULE, qat_epochs=0))
    # a classifier loaded from 4-bit weights carries no float weights
    loaded = load_weights(save_weights(quantized.classifier), quantized.classifier.spec)
    start = ModelPair(quantized.roi, loaded, quantized.grid, quantized.decode)

    tuned, _ = dap_finetune(start, dataset, dataclasses.replace(cfg, lr=0.5, dap_epochs=1))
    compare_models(tuned.roi, start.roi)
    assert tuned.classifier.is_quantized
    assert "weight" not in loaded.layers[0].params
    changed = False
    for index in tuned.classifier.spec.weight_layers():
        before, after = loaded.layers[index], tuned.classifier.layers[index]
        assert after.quant.scale_exponent == before.quant.scale_exponent
        assert after.quant == quantize_layer(after.params["weight"], before.quant.scale_exponent)
        changed |= after.quant != before.quant
    assert changed


def test_train_quantized_pair(pair, dataset, cfg):
    start = ModelPair(pair.roi.quantize(), pair.classifier.quantize(), pair.grid, pair.decode)
    trained, _ = train(start, dataset, dataclasses.replace(cfg, lr=0.5))
    assert trained.roi.is_quantized and trained.classifier.is_quantized
    assert any(
        trained.classifier.layers[i].quant != start.classifier.layers[i].quant
        for i in start.classifier.spec.weight_layers()
    )

    # zero learning rate keeps every 4-bit value
    frozen, _ = train(start, dataset, dataclasses.replace(cfg, lr=0.0))
    for a, b in zip(frozen.classifier.layers + frozen.roi.layers, start.classifier.layers + start.roi.layers):
        assert a.quant == b.quant

def test_metrics_to_csv(pair, dataset, cfg):
    _, metrics = train(pair, dataset, cfg)
    text = metrics_to_csv(metrics, cfg)
    header, _, body = text.partition("\n")
    assert header.startswith("# lr=0.01; optimizer=sgd; l1=0.0;")
    assert "seed=3" in header
    parsed = pd.read_csv(io.StringIO(body))
    assert list(parsed.columns) == list(metrics.columns)
    assert len(parsed) == 2


def test_trainer_installs(pair, dataset, cfg):
    models = pair.copy()
    roi = models.roi
    metrics = trainer(models).train(dataset, cfg)
    assert len(metrics) == 2
    assert models.roi is not roi
    assert not np.array_equal(models.roi.layers[5].params["bias"], roi.layers[5].params["bias"])


@pytest.fixture(scope="module")
def desk_run():
    spec_file = parse_spec_file(read_text(config_path("desk.net")))
    cfg = from_key_values(TrainConfig, read_text(config_path("desk_train.cfg")))
    generated = [
        generate_synthetic_sample(sample_seed(42, i), SyntheticConfig(timebins=8))
        for i in range(64)
    ]
    dataset = [sample for sample, _, _ in generated]
    boxes = [bbox for _, _, bbox in generated]
    initial = ModelPair.from_spec(spec_file, np.random.default_rng(0))
    trained, metrics = train(initial, dataset, cfg)

    return {"cfg": cfg, "initial": initial, "dataset": dataset, "boxes": boxes, "trained": trained, "metrics": metrics}


@pytest.mark.slow
def test_desk_accuracy(desk_run):
    assert desk_run["metrics"]["train_acc"].max() >= 0.95

    trip = pipeline(desk_run["trained"])
    distances = []
    for sample, (x_min, y_min, x_max, y_max) in zip(desk_run["dataset"], desk_run["boxes"]):
        for roi in trip.run(sample).rois:
            distances.append(np.hypot(roi.g_x - (x_min + x_max) / 2, roi.g_y - (y_min + y_max) / 2))
    assert np.mean(distances) < 16


@pytest.mark.slow
def test_desk_l1_sparsity(desk_run):
    cfg = desk_run["cfg"]
    stronger, _ = train(desk_run["initial"], desk_run["dataset"], dataclasses.replace(cfg, l1=10 * cfg.l1))
    columns = sparsity_columns(desk_run["trained"])
    base = evaluate(desk_run["trained"], desk_run["dataset"])
    sparse = evaluate(stronger, desk_run["dataset"])
    assert np.mean([1 - sparse[c] for c in columns]) < np.mean([1 - base[c] for c in columns])


@pytest.mark.slow
def test_desk_qat_beats_post_training(desk_run):
    trained = desk_run["trained"]
    schedule = tuple(f"roi:{i}" for i in trained.roi.spec.weight_layers()) + tuple(
        f"classifier:{i}" for i in trained.classifier.spec.weight_layers()
    )
    qat, _ = qat_finetune(trained, desk_run["dataset"], dataclasses.replace(desk_run["cfg"], qat_schedule=schedule))
    post = ModelPair(trained.roi.quantize(), trained.classifier.quantize(), trained.grid, trained.decode)
    assert evaluate(qat, desk_run["dataset"])["accuracy"] >= evaluate(post, desk_run["dataset"])["accuracy"]


@pytest.mark.slow
def test_desk_dap_close_to_tgk(desk_run):
    tgk = evaluate(desk_run["trained"], desk_run["dataset"], mode="tgk")["accuracy"]
    tuned, _ = dap_finetune(desk_run["trained"], desk_run["dataset"], desk_run["cfg"])
    dap = evaluate(tuned, desk_run["dataset"], mode="dap")["accuracy"]
    assert abs(dap - tgk) <= 0.02