"""End-to-end training, quantization-aware fine-tuning and DAP fine-tuning of model pairs."""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from trip_attention.core import custom_errors
from trip_attention.core.config import to_key_values
from trip_attention.core.events import BinnedSample
from trip_attention.core.grad import ops
from trip_attention.core.grad.graph import bind_model, forward_pair
from trip_attention.core.grad.optim import OPTIMIZERS, make_optimizer
from trip_attention.core.grad.tape import Tape
from trip_attention.core.pipeline import ModelPair
from trip_attention.core.quantize import quantize_layer

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
NETWORKS = {"roi": "roi", "classifier": "classifier"}
TRAINABLE = ("both", "roi", "classifier")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Parameters
    ----------
    lr (float, default=1e-4) : learning rate, 0 leaves parameters unchanged
    optimizer (str, default='adam') : sgd or adam
    l1 (float, default=1e-4) : L1 activation sparsity coefficient lambda
    l1_warmup (float, default=0.1) : fraction of epochs over which lambda ramps up linearly
    epochs (int, default=200) : epochs of end-to-end training
    batch_size (int, default=32) : samples per gradient step
    seed (int, default=0) : seed of the split and the shuffling
    test_fraction (float, default=0.0) : share of samples held out for test accuracy
    qat_schedule (tuple, default=()) : 'roi:<layer>' or 'classifier:<layer>' entries in freezing order
    qat_epochs (int, default=2) : epochs after each quantization step
    dap_epochs (int, default=10) : epochs of DAP fine-tuning
    trainable (str, default='both') : networks updated by train, both, roi or classifier
    dtype (str, default='float32') : floating point type of training tapes
    """

    lr: float = 1e-4
    optimizer: str = "adam"
    l1: float = 1e-4
    l1_warmup: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    test_fraction: float = 0.0
    qat_schedule: tuple = ()
    qat_epochs: int = 2
    dap_epochs: int = 10
    trainable: str = "both"
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr < 0:
            raise custom_errors.ConfigInvalid(f"lr must be non-negative, got {self.lr}")
        if self.l1 < 0:
            raise custom_errors.ConfigInvalid(f"l1 must be non-negative, got {self.l1}")
        if self.optimizer not in OPTIMIZERS:
            raise custom_errors.ConfigInvalid(f"optimizer must be one of {sorted(OPTIMIZERS)}, got '{self.optimizer}'")
        if min(self.epochs, self.qat_epochs, self.dap_epochs) < 0 or self.batch_size < 1:
            raise custom_errors.ConfigInvalid("epoch counts must be non-negative and batch_size positive")
        if not 0 <= self.test_fraction < 1 or not 0 <= self.l1_warmup <= 1:
            raise custom_errors.ConfigInvalid("test_fraction must be in [0, 1) and l1_warmup in [0, 1]")
        if self.trainable not in TRAINABLE:
            raise custom_errors.ConfigInvalid(f"trainable must be one of {TRAINABLE}, got '{self.trainable}'")
        if self.dtype not in ("float32", "float64"):
            raise custom_errors.ConfigInvalid(f"dtype must be float32 or float64, got '{self.dtype}'")


def _check_dataset(pair: ModelPair, dataset: Sequence[BinnedSample]) -> None:
    if len(dataset) == 0:
        raise custom_errors.ConfigInvalid("dataset is empty")
    shapes = {sample.frames.shape for sample in dataset}
    if len(shapes) != 1:
        raise custom_errors.ConfigInvalid(f"samples must share one shape, got {sorted(shapes)}")
    if next(iter(shapes))[1:] != pair.roi.spec.input_shape:
        raise custom_errors.ConfigInvalid(
            f"sample frames {next(iter(shapes))[1:]} do not match ROI network input {pair.roi.spec.input_shape}"
        )
    classes = pair.classifier.spec.num_outputs
    for index, sample in enumerate(dataset):
        if sample.label is None or not 0 <= sample.label < classes:
            raise custom_errors.ConfigInvalid(f"sample {index} has label {sample.label}, expected 0 to {classes - 1}")


def split_dataset(count: int, test_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train and test indices."""
    order = rng.permutation(count)
    n_test = int(round(count * test_fraction))
    train_idx = np.sort(order[n_test:])
    test_idx = np.sort(order[:n_test])
    if len(train_idx) == 0:
        raise custom_errors.ConfigInvalid("test_fraction leaves no training samples")

    return train_idx, test_idx


def sparsity_columns(pair: ModelPair) -> List[str]:
    """Metric column per ReLU layer, ROI network first."""
    return [f"sparsity_layer_roi_{i}" for i in pair.roi.spec.relu_layers()] + [
        f"sparsity_layer_classifier_{i}" for i in pair.classifier.spec.relu_layers()
    ]


def evaluate(pair: ModelPair, dataset: Sequence[BinnedSample], mode: str = "tgk", batch_size: int = 32) -> dict:
    """Accuracy and per-layer activation sparsity with BatchNorm running statistics.

    Parameters
    ----------
    pair (ModelPair) : networks
    dataset (list) : labeled BinnedSamples
    mode (str, default='tgk') : tgk or dap
    batch_size (int, default=32) : samples per forward

    Returns
    -------
    metrics (dict) : accuracy, loss, and the fraction of zero activations per ReLU layer
    """
    columns = sparsity_columns(pair)
    if len(dataset) == 0:
        return {"accuracy": float("nan"), "loss": float("nan"), **{c: float("nan") for c in columns}}

    dataset = list(dataset)
    correct = 0
    loss = 0.0
    zeros = np.zeros(len(columns))
    totals = np.zeros(len(columns))
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        tape = Tape()
        roi_bound = bind_model(tape, pair.roi, trainable=False)
        cls_bound = bind_model(tape, pair.classifier, trainable=False)
        frames = np.stack([sample.frames for sample in batch])
        labels = np.array([sample.label for sample in batch])
        outputs = forward_pair(tape, pair, roi_bound, cls_bound, frames, training=False, mode=mode)
        correct += int(np.sum(outputs.logits.value.argmax(axis=1) == labels))
        loss += float(ops.cross_entropy(outputs.logits, labels).value) * len(batch)
        for position, activation in enumerate(outputs.activations if columns else []):
            column = position % len(columns)
            zeros[column] += np.count_nonzero(activation.value == 0)
            totals[column] += activation.value.size

    metrics = {"accuracy": correct / len(dataset), "loss": loss / len(dataset)}
    metrics.update({c: float(z / t) for c, z, t in zip(columns, zeros, totals)})

    return metrics


def _update_running_stats(bound) -> None:
    for index, stats in sorted(bound.bn_stats.items()):
        params = bound.model.layers[index].params
        for mean, var in stats:
            params["mean"] = (1 - BN_MOMENTUM) * params["mean"] + BN_MOMENTUM * mean
            params["var"] = (1 - BN_MOMENTUM) * params["var"] + BN_MOMENTUM * var


def _add_shadow_weights(model) -> None:
    for layer in model.layers:
        if layer.quant is not None and "weight" not in layer.params:
            layer.params["weight"] = layer.quant.dequantize()


def _requantize(model) -> None:
    for layer in model.layers:
        if layer.quant is not None:
            layer.quant = quantize_layer(layer.params["weight"], layer.quant.scale_exponent)


def _fit(
    pair: ModelPair,
    dataset: Sequence[BinnedSample],
    cfg: TrainConfig,
    epochs: int,
    mode: str,
    train_roi: bool,
    train_classifier: bool,
    phase: str,
    straight_through: bool = False,
) -> pd.DataFrame:
    """Shared mini-batch loop updating pair in place, returning one metrics row per epoch.

    With straight_through, quantized layers of the trained networks keep learning
    through float shadow weights and are quantized again at their scale exponent
    after every optimizer step.
    """
    tuned = [model for model, on in ((pair.roi, train_roi), (pair.classifier, train_classifier)) if on]
    if straight_through and epochs:
        for model in tuned:
            _add_shadow_weights(model)
    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = split_dataset(len(dataset), cfg.test_fraction, rng)
    train_set = [dataset[i] for i in train_idx]
    test_set = [dataset[i] for i in test_idx]
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    dtype = np.dtype(cfg.dtype)
    warmup_epochs = math.ceil(cfg.l1_warmup * epochs)
    columns = ["phase", "epoch", "loss", "train_acc", "test_acc"] + sparsity_columns(pair)

    rows = []
    for epoch in range(epochs):
        l1 = cfg.l1 * min(1.0, (epoch + 1) / warmup_epochs) if warmup_epochs else cfg.l1
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            tape = Tape()
            roi_bound = bind_model(tape, pair.roi, train_roi, dtype, straight_through)
            cls_bound = bind_model(tape, pair.classifier, train_classifier, dtype, straight_through)
            frames = np.stack([sample.frames for sample in batch])
            labels = np.array([sample.label for sample in batch])
            outputs = forward_pair(tape, pair, roi_bound, cls_bound, frames, training=True, mode=mode)

            loss = ops.cross_entropy(outputs.logits, labels)
            if l1 > 0 and outputs.activations:
                penalty = outputs.activations[0].tape.constant(np.zeros((), dtype=dtype))
                for activation in outputs.activations:
                    penalty = ops.add(penalty, ops.l1(activation))
                loss = ops.add(loss, ops.affine(penalty, l1 / len(batch)))
            epoch_loss += float(loss.value) * len(batch)

            leaves = {("roi",) + key: node for key, node in roi_bound.trainable.items()}
            leaves.update({("classifier",) + key: node for key, node in cls_bound.trainable.items()})
            if leaves and loss.requires_grad:
                grads = tape.backward(loss)
                params = {}
                for key, node in leaves.items():
                    model = pair.roi if key[0] == "roi" else pair.classifier
                    params[key] = model.layers[key[1]].params[key[2]]
                optimizer.step(params, {key: grads[node] for key, node in leaves.items()})
                if straight_through:
                    for model in tuned:
                        _requantize(model)
            for bound in (roi_bound, cls_bound):
                if bound.trainable:
                    _update_running_stats(bound)

        train_metrics = evaluate(pair, train_set, mode, cfg.batch_size)
        test_metrics = evaluate(pair, test_set, mode, cfg.batch_size)
        row = {
            "phase": phase,
            "epoch": epoch,
            "loss": epoch_loss / len(train_set),
            "train_acc": train_metrics["accuracy"],
            "test_acc": test_metrics["accuracy"],
        }
        row.update({c: train_metrics[c] for c in columns[5:]})
        rows.append(row)
        logger.info(
            f"{phase} epoch {epoch + 1}/{epochs}: loss={row['loss']:.4f} train_acc={row['train_acc']:.3f} test_acc={row['test_acc']:.3f}"
        )

    return pd.DataFrame(rows, columns=columns)


def train(pair: ModelPair, dataset: Sequence[BinnedSample], cfg: TrainConfig) -> Tuple[ModelPair, pd.DataFrame]:
    """Train the ROI prediction and classification networks end to end with tGK.

    The loss is the cross-entropy of the mean of per-timebin logits plus lambda times
    the L1 norm of every ReLU activation, with backpropagation through time.

    Parameters
    ----------
    pair (ModelPair) : initial networks, not modified
    dataset (list) : BinnedSamples with labels
    cfg (TrainConfig) : hyperparameters

    Returns
    -------
    pair (ModelPair) : trained networks
    metrics (pandas.DataFrame) : one row per epoch
    """
    _check_dataset(pair, dataset)
    pair = pair.copy()
    metrics = _fit(
        pair,
        dataset,
        cfg,
        cfg.epochs,
        mode="tgk",
        train_roi=cfg.trainable in ("both", "roi"),
        train_classifier=cfg.trainable in ("both", "classifier"),
        phase="train",
        straight_through=True,
    )

    return pair, metrics


def parse_schedule(pair: ModelPair, schedule: Sequence[str]) -> List[Tuple[str, int]]:
    """Validate 'network:layer' schedule entries.

    Every weight layer must be quantized already or appear in the schedule.
    """
    entries = []
    for entry in schedule:
        network, _, layer = str(entry).partition(":")
        if network not in NETWORKS or not layer.isdigit():
            raise custom_errors.ConfigInvalid(f"schedule entry must be 'roi:<layer>' or 'classifier:<layer>', got '{entry}'")
        model = getattr(pair, NETWORKS[network])
        index = int(layer)
        if index not in model.spec.weight_layers():
            raise custom_errors.ConfigInvalid(f"schedule entry '{entry}' is not a weight layer")
        if (network, index) in entries:
            raise custom_errors.ConfigInvalid(f"schedule entry '{entry}' appears more than once")
        entries.append((network, index))

    for network in NETWORKS:
        model = getattr(pair, NETWORKS[network])
        for index in model.spec.weight_layers():
            if model.layers[index].quant is None and (network, index) not in entries:
                raise custom_errors.ScheduleIncomplete(f"{network} layer {index} is neither quantized nor scheduled")

    return entries


def qat_finetune(pair: ModelPair, dataset: Sequence[BinnedSample], cfg: TrainConfig) -> Tuple[ModelPair, pd.DataFrame]:
    """Quantization-aware fine-tuning following cfg.qat_schedule.

    Each step quantizes one layer to 4 bits and freezes it, then trains the layers that
    are still in floating point for cfg.qat_epochs. Frozen layers act as constants, so
    their gradients pass straight through to earlier layers.

    Parameters
    ----------
    pair (ModelPair) : pre-trained networks, not modified
    dataset (list) : BinnedSamples with labels
    cfg (TrainConfig) : hyperparameters with qat_schedule

    Returns
    -------
    pair (ModelPair) : fully quantized networks
    metrics (pandas.DataFrame) : one row per epoch of every step
    """
    _check_dataset(pair, dataset)
    schedule = parse_schedule(pair, cfg.qat_schedule)
    pair = pair.copy()
    logs = []
    for step, (network, index) in enumerate(schedule):
        model = getattr(pair, NETWORKS[network])
        layer = model.layers[index]
        if layer.quant is None:
            layer.quant = quantize_layer(layer.params["weight"])
        logger.info(f"QAT step {step + 1}/{len(schedule)}: froze {network} layer {index} with scale exponent {layer.quant.scale_exponent}")

        remaining = not (pair.roi.is_quantized and pair.classifier.is_quantized)
        if remaining and cfg.qat_epochs:
            logs.append(
                _fit(pair, dataset, cfg, cfg.qat_epochs, "tgk", True, True, phase=f"qat_{step + 1}")
            )

    columns = ["phase", "epoch", "loss", "train_acc", "test_acc"] + sparsity_columns(pair)
    metrics = pd.concat(logs, ignore_index=True) if logs else pd.DataFrame(columns=columns)

    return pair, metrics


def dap_finetune(pair: ModelPair, dataset: Sequence[BinnedSample], cfg: TrainConfig) -> Tuple[ModelPair, pd.DataFrame]:
    """Fine-tune the classifier on DAP crops from a frozen ROI prediction network.

    Parameters
    ----------
    pair (ModelPair) : tGK-trained networks, not modified
    dataset (list) : BinnedSamples with labels
    cfg (TrainConfig) : hyperparameters, dap_epochs epochs are run

    Returns
    -------
    pair (ModelPair) : unchanged ROI network and fine-tuned classifier
    metrics (pandas.DataFrame) : one row per epoch, accuracies measured with DAP
    """
    _check_dataset(pair, dataset)
    pair = pair.copy()
    metrics = _fit(pair, dataset, cfg, cfg.dap_epochs, "dap", False, True, phase="dap", straight_through=True)

    return pair, metrics


def metrics_to_csv(metrics: pd.DataFrame, cfg: TrainConfig) -> str:
    """Metrics CSV preceded by a comment line echoing the configuration."""
    echo = to_key_values(cfg).strip().replace("\n", "; ").replace(" = ", "=")

    return f"# {echo}\n" + metrics.to_csv(index=False, lineterminator="\n")


class trainer:
    """Train the shared models in place.

    Each method trains a copy of the current networks and then installs the result
    on the shared ModelPair, so the pipeline and simulator see the trained networks.

    Parameters
    ----------
    models (ModelPair) : networks shared with the other components
    """

    def __init__(self, models: ModelPair):
        self.models = models

    def _install(self, trained: ModelPair) -> None:
        self.models.roi = trained.roi
        self.models.classifier = trained.classifier

    def train(self, dataset: Sequence[BinnedSample], cfg: TrainConfig = TrainConfig()) -> pd.DataFrame:
        """End-to-end tGK training, see grad.train.train."""
        trained, metrics = train(self.models, dataset, cfg)
        self._install(trained)

        return metrics

    def qat_finetune(self, dataset: Sequence[BinnedSample], cfg: TrainConfig) -> pd.DataFrame:
        """Incremental quantization-aware fine-tuning, see grad.train.qat_finetune."""
        trained, metrics = qat_finetune(self.models, dataset, cfg)
        self._install(trained)

        return metrics

    def dap_finetune(self, dataset: Sequence[BinnedSample], cfg: TrainConfig = TrainConfig()) -> pd.DataFrame:
        """Classifier fine-tuning on DAP crops, see grad.train.dap_finetune."""
        trained, metrics = dap_finetune(self.models, dataset, cfg)
        self._install(trained)

        return metrics
