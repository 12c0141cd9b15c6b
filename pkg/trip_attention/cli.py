r"""Command line entry point for dataset generation, training, inference, benchmarking and visualization.

Examples
--------
#### generate 64 synthetic samples
trip gen-data --count 64 --seed 42 --out data
#### train the laptop-scale pair
trip train --spec desk.net --config desk_train.cfg --data data --out weights
#### classify with dynamic average pooling in the pipelined schedule
trip infer --spec desk.net --weights weights --data data --mode dap --sched pipe --out results
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np
import pandas as pd

from trip_attention.core import custom_errors
from trip_attention.core.attention import dap_region
from trip_attention.core.config import from_key_values
from trip_attention.core.events import read_event_stream, timebin, write_event_stream
from trip_attention.core.grad.train import TrainConfig, dap_finetune, metrics_to_csv, qat_finetune, train
from trip_attention.core.net import Model
from trip_attention.core.netspec import dense_macs, param_count, parse_spec_file
from trip_attention.core.pipeline import pipeline
from trip_attention.core.pipesim import TRACE_COLUMNS, CostModel, bench_ratios, simulate
from trip_attention.core.synthetic import SyntheticConfig, generate_synthetic_events
from trip_attention.core.visualize import render_frame, write_ppm
from trip_attention.core.weights import load_weights, save_weights
from trip_attention.package import TRIP, config_path, read_text

logger = logging.getLogger(__name__)

ROI_WEIGHTS = "roi.trpw"
CLASSIFIER_WEIGHTS = "classifier.trpw"
MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ["filename", "label", "bbox"]
EXIT_CONFIG = 2
EXIT_DATA = 3

# define options shared by the subcommands
options = {
    "--seed": {"action": "store", "type": int, "default": 0, "help": "Seed of generation and initialization."},
    "--spec": {
        "action": "store",
        "default": "desk.net",
        "help": "Network spec file, or the name of a shipped config such as dvs_gesture.net.",
    },
    "--weights": {
        "action": "store",
        "default": None,
        "help": f"Directory holding {ROI_WEIGHTS} and {CLASSIFIER_WEIGHTS}, random initialization if omitted.",
    },
    "--mode": {"action": "store", "default": "tgk", "choices": ["tgk", "dap"], "help": "ROI generation method."},
    "--sched": {"action": "store", "default": "seq", "choices": ["seq", "pipe"], "help": "Inference schedule."},
    "--cost-model": {
        "action": "store",
        "default": "cost_model.cfg",
        "help": "key = value cost model file, or the name of a shipped config.",
    },
    "--out": {"action": "store", "required": True, "help": "Output directory."},
    "--data": {"action": "store", "required": True, "help": f"Dataset directory with {MANIFEST}."},
    "--timebins": {"action": "store", "type": int, "default": 8, "help": "Number of timebins per sample."},
    "--jobs": {"action": "store", "type": int, "default": 1, "help": "Worker processes for independent samples."},
}

# alternative spellings of shared options
aliases = {"--out": ["--out-dir"]}

subcommands = {
    "gen-data": ["--seed", "--out", "--jobs"],
    "train": ["--seed", "--spec", "--weights", "--data", "--timebins", "--out"],
    "infer": ["--seed", "--spec", "--weights", "--mode", "--sched", "--data", "--timebins", "--out", "--jobs"],
    "bench": [
        "--seed",
        "--spec",
        "--weights",
        "--mode",
        "--sched",
        "--cost-model",
        "--data",
        "--timebins",
        "--out",
        "--jobs",
    ],
    "viz": ["--seed", "--spec", "--weights", "--mode", "--data", "--timebins", "--out"],
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-parser per subcommand."""
    parser = argparse.ArgumentParser(prog="trip", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="Logging level of trip_attention.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    parsers = {}
    for name, flags in subcommands.items():
        parsers[name] = sub.add_parser(name)
        for opt in flags:
            parsers[name].add_argument(opt, *aliases.get(opt, []), **options[opt])

    parsers["gen-data"].add_argument("--count", type=int, default=64, help="Number of samples.")
    parsers["gen-data"].add_argument("--canvas", type=int, default=128, help="Canvas width and height.")
    parsers["gen-data"].add_argument("--noise", type=int, default=8, help="Noise fragments per sample.")
    parsers["gen-data"].add_argument(
        "--timebins", type=int, default=32, help="Timebins of the generated samples, events are stored unbinned."
    )
    parsers["train"].add_argument("--config", default="desk_train.cfg", help="key = value training config.")
    parsers["train"].add_argument("--qat", action="store_true", help="Quantization-aware fine-tuning after training.")
    parsers["train"].add_argument("--dap", action="store_true", help="DAP fine-tuning of the classifier last.")
    parsers["infer"].add_argument("--dense", action="store_true", help="Dense forward instead of event-driven.")
    parsers["infer"].add_argument("--dump-roi", action="store_true", help="Save RoiFrames per sample as .npy.")
    parsers["bench"].add_argument("--baseline-spec", default="seneca_baseline.net", help="Single-network baseline.")
    parsers["bench"].add_argument("--baseline-weights", default=None, help="TRPW file of the baseline network.")
    parsers["bench"].add_argument("--no-baseline", action="store_true", help="Skip the baseline comparison.")
    parsers["viz"].add_argument("--sample", type=int, default=0, help="Position of the sample in the manifest.")

    return parser


def resolve_config(name: str) -> str:
    """Path of an existing file, falling back to a shipped config of that name."""
    if os.path.isfile(name):
        return name
    shipped = config_path(name)
    if os.path.isfile(shipped):
        return shipped
    raise FileNotFoundError(f"no such file or shipped config: '{name}'")


def sample_seed(seed: int, index: int) -> int:
    """Independent per-sample seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def ordered_map(func, items, jobs: int) -> list:
    """Map in input order, using worker processes when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(func, items))


def _generate_one(index: int, seed: int, config: SyntheticConfig):
    header, events, label, bbox = generate_synthetic_events(sample_seed(seed, index), config)
    return write_event_stream(header, events), label, bbox


def load_dataset(data_dir: str, timebins: int):
    """Read the manifest and timebin every listed EVT1 file.

    Returns
    -------
    manifest (pandas.DataFrame) : filename, label and bbox sorted by filename
    samples (list) : BinnedSample per manifest row
    """
    manifest = pd.read_csv(os.path.join(data_dir, MANIFEST), dtype={"filename": str, "bbox": str})
    manifest = manifest.sort_values("filename", ignore_index=True)
    samples = []
    for row in manifest.itertuples(index=False):
        with open(os.path.join(data_dir, row.filename), "rb") as f:
            header, events = read_event_stream(f.read())
        label = None if pd.isna(row.label) else int(row.label)
        samples.append(timebin(events, header, timebins, label=label))

    return manifest, samples


def load_trip(args) -> TRIP:
    """Facade from --spec and --weights."""
    spec = resolve_config(args.spec)
    if args.weights is None:
        return TRIP(spec, seed=args.seed)

    return TRIP(
        spec,
        roi_weights=os.path.join(args.weights, ROI_WEIGHTS),
        cls_weights=os.path.join(args.weights, CLASSIFIER_WEIGHTS),
        seed=args.seed,
    )


def write_text(path: str, text: str) -> None:
    """Write text with newline line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def cmd_gen_data(args) -> None:
    """Write count synthetic EVT1 samples and a manifest."""
    if args.count < 0:
        raise custom_errors.ConfigInvalid(f"count must be non-negative, got {args.count}")
    config = SyntheticConfig(canvas=args.canvas, noise_fragments=args.noise, timebins=args.timebins)
    os.makedirs(args.out, exist_ok=True)
    generated = ordered_map(partial(_generate_one, seed=args.seed, config=config), range(args.count), args.jobs)

    rows = []
    for index, (data, label, bbox) in enumerate(generated):
        filename = f"sample_{index:05d}.evt"
        with open(os.path.join(args.out, filename), "wb") as f:
            f.write(data)
        rows.append({"filename": filename, "label": label, "bbox": " ".join(str(v) for v in bbox)})
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    write_text(os.path.join(args.out, MANIFEST), manifest.to_csv(index=False, lineterminator="\n"))
    logger.info(f"Wrote {args.count} samples to '{args.out}'.")


def default_schedule(models) -> tuple:
    """Every weight layer, ROI network first, in layer order."""
    return tuple(f"roi:{i}" for i in models.roi.spec.weight_layers()) + tuple(
        f"classifier:{i}" for i in models.classifier.spec.weight_layers()
    )


def cmd_train(args) -> None:
    """Train end to end, optionally followed by QAT and DAP fine-tuning."""
    cfg = from_key_values(TrainConfig, read_text(resolve_config(args.config)))
    trip = load_trip(args)
    _, samples = load_dataset(args.data, args.timebins)

    pair, metrics = train(trip.models, samples, cfg)
    logs = [metrics]
    if args.qat:
        if not cfg.qat_schedule:
            cfg = dataclasses.replace(cfg, qat_schedule=default_schedule(pair))
        pair, metrics = qat_finetune(pair, samples, cfg)
        logs.append(metrics)
    if args.dap:
        pair, metrics = dap_finetune(pair, samples, cfg)
        logs.append(metrics)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, ROI_WEIGHTS), "wb") as f:
        f.write(save_weights(pair.roi))
    with open(os.path.join(args.out, CLASSIFIER_WEIGHTS), "wb") as f:
        f.write(save_weights(pair.classifier))
    metrics = pd.concat(logs, ignore_index=True)
    write_text(os.path.join(args.out, "metrics.csv"), metrics_to_csv(metrics, cfg))


def _infer_one(sample, models, mode: str, sched: str, sparse: bool):
    result = pipeline(models).run(sample, mode=mode, sched=sched, sparse=sparse)
    return result.prediction, result.roi_frames


def cmd_infer(args) -> None:
    """Predict every sample of a dataset."""
    trip = load_trip(args)
    manifest, samples = load_dataset(args.data, args.timebins)
    worker = partial(_infer_one, models=trip.models, mode=args.mode, sched=args.sched, sparse=not args.dense)
    results = ordered_map(worker, samples, args.jobs)

    os.makedirs(args.out, exist_ok=True)
    predictions = pd.DataFrame(
        {
            "sample": manifest["filename"],
            "label": [sample.label for sample in samples],
            "prediction": [prediction for prediction, _ in results],
        }
    )
    write_text(os.path.join(args.out, "predictions.csv"), predictions.to_csv(index=False, lineterminator="\n"))
    if args.dump_roi:
        roi_dir = os.path.join(args.out, "roi_frames")
        os.makedirs(roi_dir, exist_ok=True)
        for filename, (_, roi_frames) in zip(manifest["filename"], results):
            np.save(os.path.join(roi_dir, os.path.splitext(filename)[0] + ".npy"), roi_frames)


def _simulate_one(sample, models, cost_model: CostModel, mode: str, roi_mode: str):
    result = simulate(models, sample, None, cost_model, mode, roi_mode)
    return result.trace, result.summary()


def cmd_bench(args) -> None:
    """Simulate TRIP and a single-network baseline, report MACs, latency and energy."""
    trip = load_trip(args)
    cost_model = from_key_values(CostModel, read_text(resolve_config(args.cost_model)))
    manifest, samples = load_dataset(args.data, args.timebins)
    baseline = None
    if not args.no_baseline:
        baseline_spec = parse_spec_file(read_text(resolve_config(args.baseline_spec))).networks["classification"]
        if args.baseline_weights is None:
            logger.warning("No baseline weights given, using random initialization for the baseline network.")
            baseline = Model.init(baseline_spec, np.random.default_rng(args.seed))
        else:
            with open(args.baseline_weights, "rb") as f:
                baseline = load_weights(f.read(), baseline_spec)

    worker = partial(_simulate_one, models=trip.models, cost_model=cost_model, mode=args.sched, roi_mode=args.mode)
    traces = ordered_map(worker, samples, args.jobs)
    rows = [{"sample": name, "system": "trip", **summary} for name, (_, summary) in zip(manifest["filename"], traces)]
    if baseline is not None:
        worker = partial(_simulate_one, models=baseline, cost_model=cost_model, mode=args.sched, roi_mode=args.mode)
        for name, (_, summary) in zip(manifest["filename"], ordered_map(worker, samples, args.jobs)):
            rows.append({"sample": name, "system": "baseline", **summary})
    columns = ["sample", "system", "macs", "latency_s", "energy_j"]
    report = pd.DataFrame(rows)[columns] if rows else pd.DataFrame(columns=columns)

    trace_columns = ["sample"] + TRACE_COLUMNS
    frames = [t.assign(sample=name) for name, (t, _) in zip(manifest["filename"], traces)]
    trace = pd.concat(frames, ignore_index=True)[trace_columns] if frames else pd.DataFrame(columns=trace_columns)

    summary = {
        "samples": len(samples),
        "mode": args.mode,
        "sched": args.sched,
        "trip": report[report["system"] == "trip"][columns[2:]].sum().to_dict(),
        "networks": {
            role: {"params": param_count(spec), "dense_macs": dense_macs(spec)}
            for role, spec in trip.spec_file.networks.items()
        },
    }
    if baseline is not None:
        summary["baseline"] = report[report["system"] == "baseline"][columns[2:]].sum().to_dict()
        summary["baseline_network"] = {"params": param_count(baseline.spec), "dense_macs": dense_macs(baseline.spec)}
        if samples:
            summary["ratios"] = bench_ratios(report)
    text = json.dumps(summary, indent=2, default=float)

    os.makedirs(args.out, exist_ok=True)
    write_text(os.path.join(args.out, "bench.csv"), report.to_csv(index=False, lineterminator="\n"))
    write_text(os.path.join(args.out, "trace.csv"), trace.to_csv(index=False, lineterminator="\n"))
    write_text(os.path.join(args.out, "summary.txt"), text + "\n")
    print(text)


def cmd_viz(args) -> None:
    """Write one PPM per timebin with the ROI receptive field outlined."""
    trip = load_trip(args)
    manifest, samples = load_dataset(args.data, args.timebins)
    if not 0 <= args.sample < len(samples):
        raise custom_errors.ConfigInvalid(f"sample must be between 0 and {len(samples) - 1}, got {args.sample}")
    sample = samples[args.sample]
    result = trip.pipeline.run(sample, mode=args.mode)
    stem = os.path.splitext(manifest["filename"][args.sample])[0]

    os.makedirs(args.out, exist_ok=True)
    for t, roi in enumerate(result.rois):
        image = render_frame(sample.frames[t], dap_region(roi, trip.models.grid))
        with open(os.path.join(args.out, f"{stem}_t{t:03d}.ppm"), "wb") as f:
            f.write(write_ppm(image))


commands = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    """Run a subcommand, returning 0 on success, 2 for configuration errors and 3 for data errors."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s: %(message)s")

    try:
        commands[args.subcommand](args)
    except custom_errors.ConfigError as err:
        print(f"ERROR {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except custom_errors.DataError as err:
        print(f"ERROR {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"ERROR IoError: {err}", file=sys.stderr)
        return EXIT_DATA

    return 0


if __name__ == "__main__":
    sys.exit(main())
