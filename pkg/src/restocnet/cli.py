"""Command-line pipeline: preprocess, layer-wise conv training, head training,
evaluation, exports, compression reports and the fully-connected baseline.

Every subcommand accepts ``--config`` (an INI file or a preset name),
``--seed`` (overrides the config seed), ``--out`` and ``--workers``.
Exit codes: 0 success, 2 usage, 3 configuration, 4 dataset format,
5 checkpoint format, 6 pipeline order, 7 file system, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import classifier as clf
from . import config as cfg_mod
from . import convnet, data_io, export, fcsnn, metrics
from . import rng as rng_mod

log = logging.getLogger("restocnet")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_PIPELINE, EXIT_IO = 3, 4, 5, 6, 7


class PipelineStateError(RuntimeError):
    """A stage was run out of order (missing or already-trained layer)."""


# --------------------------------------------------------------------------
# Shared helpers


def load_experiment(arg: str, seed: int | None) -> cfg_mod.ExperimentConfig:
    path = Path(arg)
    if path.is_file():
        cfg = cfg_mod.load_config(path)
    elif arg in cfg_mod.PRESETS:
        cfg = cfg_mod.preset(arg)
    else:
        raise cfg_mod.ConfigError(f"{arg!r} is neither a config file nor a preset "
                                  f"({', '.join(cfg_mod.PRESETS)})")
    if seed is not None:
        if seed < 0:
            raise cfg_mod.ConfigError("seed must be non-negative")
        cfg = replace(cfg, seed=seed)
    return cfg


def _limit(data: data_io.LabeledImageSet, n) -> data_io.LabeledImageSet:
    return data if n is None else data.subset(0, min(n, len(data)))


def load_split(cfg: cfg_mod.ExperimentConfig, split: str, data_dir=None) -> data_io.LabeledImageSet:
    """Images for ``split``: a preprocessed cache if present, else raw + preprocessing."""
    directory = Path(data_dir or cfg.paths.data_dir)
    limit = cfg.train_limit if split == "train" else cfg.test_limit
    if (directory / f"{split}-images.rstp").is_file():
        return _limit(data_io.load_image_set(directory, split), limit)
    raw = _raw(cfg, directory, split)
    if cfg.preprocess == "none":
        return _limit(raw, limit)
    return _limit(_preprocess(cfg, directory)[split], limit)


def _raw(cfg, directory, split):
    loader = data_io.load_mnist if cfg.dataset == "mnist" else data_io.load_cifar10
    return loader(directory, split)


def _preprocess(cfg, directory) -> dict:
    """Contrast-normalize (and whiten) both splits with training-split statistics."""
    train = _limit(_raw(cfg, directory, "train"), cfg.train_limit)
    test = _limit(_raw(cfg, directory, "test"), cfg.test_limit)
    if cfg.preprocess == "none":
        return {"train": train, "test": test}
    train_n, stats = data_io.global_contrast_normalize(train, eps=cfg.gcn_eps)
    test_n, _ = data_io.global_contrast_normalize(test, stats)
    if cfg.preprocess == "gcn+zca":
        model = data_io.zca_fit(train_n, cfg.zca_epsilon, stats)
        train_n, test_n = data_io.zca_apply(model, train_n), data_io.zca_apply(model, test_n)
    return {"train": train_n, "test": test_n}


def _topology_blob(cfg: cfg_mod.ExperimentConfig) -> dict:
    return {"name": cfg.name, "topology": cfg_mod.format_topology(cfg.topology),
            "config": cfg_mod.dumps(cfg)}


def _load_ckpt(path) -> data_io.Checkpoint:
    return data_io.load_checkpoint(path)


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_path(args, default: str) -> Path:
    out = Path(args.out or default)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(cfg, **phases) -> dict:
    return {"master_seed": cfg.seed, "streams": phases}


# --------------------------------------------------------------------------
# Subcommands


def cmd_preprocess(args, cfg) -> int:
    out = _out_dir(args, "preprocessed")
    splits = _preprocess(cfg, Path(args.data or cfg.paths.data_dir))
    for data in splits.values():
        data_io.save_image_set(out, data)
    _write_json(out / "preprocess.json", {
        "dataset": cfg.dataset, "preprocess": cfg.preprocess, "zca_epsilon": cfg.zca_epsilon,
        "counts": {k: len(v) for k, v in splits.items()}, **_seeds(cfg)})
    log.info("preprocessed %s into %s", {k: len(v) for k, v in splits.items()}, out)
    return EXIT_OK


def cmd_train_conv(args, cfg) -> int:
    topo = cfg.topology
    layer = args.layer
    if not 1 <= layer <= len(topo.layers):
        raise cfg_mod.ConfigError(f"layer {layer} not in 1..{len(topo.layers)}")
    records = []
    if args.checkpoint:
        records = list(_load_ckpt(args.checkpoint).layers)
    if len(records) >= layer:
        raise PipelineStateError(f"layer {layer} is already trained in {args.checkpoint}")
    if len(records) < layer - 1:
        raise PipelineStateError(f"layer {len(records) + 1} must be trained before layer {layer}")
    spec = topo.layers[layer - 1]
    train = load_split(cfg, "train", args.data)
    stop = min(len(train), spec.train_start + spec.train_count)
    subset = train.images[spec.train_start:stop]
    log.info("training layer %d on images [%d, %d) seed %d", layer, spec.train_start, stop, cfg.seed)
    progress = (lambda it, n, thr: log.info("  iteration %d/%d mean threshold %.4f", it, n, thr.mean())) if args.verbose else None
    record = convnet.train_conv_layer(topo, records, layer, subset, cfg.seed,
                                      indices=np.arange(spec.train_start, stop),
                                      workers=args.workers, random_only=args.random_kernels,
                                      progress=progress)
    out = _out_path(args, f"layer{layer}.rstc")
    data_io.save_checkpoint(data_io.Checkpoint(_topology_blob(cfg), records + [record], cfg.seed),
                            out)
    _write_json(out.with_suffix(".json"), {
        "layer": layer, "train_range": [spec.train_start, stop],
        "random_kernels": args.random_kernels,
        **_seeds(cfg, init=[rng_mod.INIT, layer], dropout=[rng_mod.DROPOUT, layer],
                 stdp=[rng_mod.STDP, layer],
                 encode=[convnet.TRAIN_STREAM_BASE + layer])})
    log.info("wrote %s", out)
    return EXIT_OK


def _activations(cfg, ckpt, split, args) -> tuple[np.ndarray, np.ndarray]:
    if args.activations:
        return export.load_activations(args.activations, split)
    data = load_split(cfg, split, args.data)
    _require_layers(cfg, ckpt)
    offset = 0 if split == "train" else ACTIVATION_TEST_OFFSET
    x = convnet.forward_activations(cfg.topology, ckpt.layers, data.images, cfg.seed,
                                    indices=np.arange(len(data)) + offset, workers=args.workers)
    return x, data.labels


# Test images key their activation streams after every possible train index.
ACTIVATION_TEST_OFFSET = 1 << 32


def _require_layers(cfg, ckpt):
    if len(ckpt.layers) != len(cfg.topology.layers):
        raise PipelineStateError(f"checkpoint has {len(ckpt.layers)} trained layers, topology "
                                 f"needs {len(cfg.topology.layers)}")


def cmd_train_fc(args, cfg) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    _require_layers(cfg, ckpt)
    x, y = _activations(cfg, ckpt, "train", args)
    xt, yt = _activations(cfg, ckpt, "test", args)
    out = _out_path(args, "model.rstc")
    tc = cfg.train_config()
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    progress = (lambda m: log.info("  epoch %d loss %.4f test %.4f", m.epoch, m.loss,
                                   m.test_accuracy)) if args.verbose else None
    model, history = clf.train_classifier(x, y, tc, cfg.seed, xt, yt,
                                          log_path=out.with_suffix(".metrics.csv"),
                                          progress=progress)
    result = data_io.Checkpoint(ckpt.topology, ckpt.layers, ckpt.seed,
                                clf.model_to_arrays(model))
    data_io.save_checkpoint(result, out)
    final = history[-1]
    _write_json(out.with_suffix(".json"), {
        "epochs": tc.epochs, "final_loss": final.loss, "train_accuracy": final.train_accuracy,
        "test_accuracy": final.test_accuracy,
        **_seeds(cfg, classifier_init=[rng_mod.CLASSIFIER_INIT],
                 shuffle=[rng_mod.CLASSIFIER_SHUFFLE], dropout=[rng_mod.CLASSIFIER_DROPOUT],
                 activations=[convnet.ACTIVATION_STREAM])})
    print(f"test accuracy {final.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.classifier is None:
        raise PipelineStateError("checkpoint has no trained classifier")
    x, y = _activations(cfg, ckpt, "test", args)
    model = clf.model_from_arrays(ckpt.classifier)
    report = metrics.evaluate_accuracy(clf.predict(model, x), y, cfg.topology.n_classes)
    out = _out_dir(args, "eval")
    with open(out / "confusion.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.confusion.tolist())
    _write_json(out / "eval.json", {"accuracy": report.accuracy, "samples": report.total,
                                    **_seeds(cfg, activations=[convnet.ACTIVATION_STREAM])})
    print(f"accuracy {report.accuracy:.4f} on {report.total} images")
    return EXIT_OK


def standard_reports() -> list:
    """The reference comparisons: synaptic, then the two kernel-bank figures."""
    return [("synaptic 1600 fp32 vs 6400 binary", metrics.synaptic_compression(1600, 6400)),
            ("kernels 32x5x5 fp32 vs 36x3x3 binary", metrics.kernel_compression(32, 5, 36, 3)),
            ("kernels 64x7x7 fp32 vs 256x3x3 binary", metrics.kernel_compression(64, 7, 256, 3))]


def cmd_report_compression(args, cfg) -> int:
    reports = standard_reports()
    if args.kernels:
        nb, kb, ns, ks = args.kernels
        reports.append((f"kernels {nb}x{kb}x{kb} fp32 vs {ns}x{ks}x{ks} binary",
                        metrics.kernel_compression(nb, kb, ns, ks)))
    if args.synapses:
        nb, ns = args.synapses
        reports.append((f"synaptic {nb} fp32 vs {ns} binary",
                        metrics.synaptic_compression(nb, ns)))
    out = _out_dir(args, "compression")
    lines = [f"{label}: {r.text()}" for label, r in reports]
    (out / "compression.txt").write_text("\n".join(lines) + "\n")
    with open(out / "compression.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + metrics.CSV_HEADER)
        for label, r in reports:
            writer.writerow([label] + r.csv_row())
    print("\n".join(lines))
    return EXIT_OK


def cmd_export_kernels(args, cfg) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    out = _out_dir(args, "kernels")
    for l, record in enumerate(ckpt.layers, start=1):
        bits = record.bits if record.bits is not None else record.values > 0
        if ckpt.topology.get("kind") == "fcsnn":
            image = export.receptive_field_tiles(bits.reshape(bits.shape[0], -1).T)
        else:
            image = export.kernel_tiles(bits)
        export.write_pgm(out / f"layer{l}.pgm", image)
    log.info("wrote %d kernel tiles to %s", len(ckpt.layers), out)
    return EXIT_OK


def cmd_export_activations(args, cfg) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    out = _out_dir(args, "activations")
    splits = ("train", "test") if args.split == "both" else (args.split,)
    args.activations = None
    for split in splits:
        x, y = _activations(cfg, ckpt, split, args)
        export.export_activations(out, split, x, y)
    _write_json(out / "activations.json", {
        "splits": list(splits), "features": cfg.topology.feature_length(),
        **_seeds(cfg, activations=[convnet.ACTIVATION_STREAM])})
    return EXIT_OK


def cmd_run_fcsnn(args, cfg) -> int:
    fc = cfg.fcsnn
    if args.layout:
        fc = replace(fc, window=replace(fc.window, layout=args.layout))
    if args.neurons:
        fc = replace(fc, n_neurons=args.neurons)
    mnist = replace(cfg, dataset="mnist", preprocess="none")
    train = load_split(mnist, "train", args.data)
    test = load_split(mnist, "test", args.data)
    n_train = min(fc.train_count, len(train))
    images = train.images[:n_train].reshape(n_train, -1)
    progress = ((lambda i, n: log.info("  pattern %d/%d", i, n) if i % 500 == 0 else None)
                if args.verbose else None)
    state = fcsnn.train_fcsnn(fc, images, cfg.seed, progress)
    tagging = fcsnn.tag_neurons(state, fc, images, train.labels[:n_train], cfg.seed,
                                offset=ACTIVATION_TEST_OFFSET, workers=args.workers)
    counts = fcsnn.response_counts(state, fc, test.images.reshape(len(test), -1), cfg.seed,
                                   offset=2 * ACTIVATION_TEST_OFFSET, workers=args.workers)
    report = metrics.evaluate_accuracy(fcsnn.predict_from_counts(counts, tagging), test.labels)
    out = _out_dir(args, "fcsnn")
    bits = state.weights.T.reshape(fc.n_neurons, 1, 28, 28)
    record = data_io.LayerRecord(bits, state.theta.astype(np.float32), 0.0, 1.0)
    data_io.save_checkpoint(data_io.Checkpoint(
        {"kind": "fcsnn", "layout": fc.window.layout.value, "config": cfg_mod.dumps(
            replace(cfg, fcsnn=fc))}, [record], cfg.seed), out / "fcsnn.rstc")
    export.write_pgm(out / "receptive_fields.pgm", export.receptive_field_tiles(state.weights))
    _write_json(out / "fcsnn.json", {
        "layout": fc.window.layout.value, "neurons": fc.n_neurons, "train_patterns": n_train,
        "test_images": report.total, "accuracy": report.accuracy,
        "tags": tagging.tags.tolist(),
        **_seeds(cfg, init=[rng_mod.FCSNN_INIT], stdp=[rng_mod.FCSNN_STDP],
                 encode=[rng_mod.FCSNN_ENCODE])})
    print(f"accuracy {report.accuracy:.4f} on {report.total} images ({fc.window.layout.value})")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train-conv": cmd_train_conv,
    "train-fc": cmd_train_fc,
    "eval": cmd_eval,
    "report-compression": cmd_report_compression,
    "export-kernels": cmd_export_kernels,
    "export-activations": cmd_export_activations,
    "run-fcsnn": cmd_run_fcsnn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restocnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="mnist-16c3",
                        help="INI file or preset name (default: mnist-16c3)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument("--data", help="dataset or preprocessed-cache directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("preprocess", parents=[common], help="normalize and cache a dataset")
    p = sub.add_parser("train-conv", parents=[common], help="train one conv layer")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--checkpoint", help="checkpoint holding the earlier layers")
    p.add_argument("--random-kernels", action="store_true",
                   help="keep the initial kernels and zero thresholds")
    for name, text in (("train-fc", "train the classifier head"),
                       ("eval", "evaluate a trained checkpoint on the test split"),
                       ("export-activations", "write pooled activations to disk")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
        if name != "export-activations":
            p.add_argument("--activations", help="directory of exported activations")
        else:
            p.add_argument("--split", choices=("train", "test", "both"), default="both")
        if name == "train-fc":
            p.add_argument("--epochs", type=int, help="override the epoch count")
    p = sub.add_parser("report-compression", parents=[common], help="memory compression figures")
    p.add_argument("--kernels", type=int, nargs=4, metavar=("NB", "KB", "NS", "KS"))
    p.add_argument("--synapses", type=int, nargs=2, metavar=("NB", "NS"))
    p = sub.add_parser("export-kernels", parents=[common], help="render kernels as PGM")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("run-fcsnn", parents=[common], help="fully-connected binary SNN baseline")
    p.add_argument("--layout", choices=[layout.value for layout in fcsnn.Layout])
    p.add_argument("--neurons", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_experiment(args.config, args.seed)
        log.info("effective master seed %d", cfg.seed)
        return COMMANDS[args.command](args, cfg)
    except cfg_mod.ConfigError as exc:
        code, exc_ = EXIT_CONFIG, exc
    except (data_io.DataFormatError, data_io.DegenerateChannelError) as exc:
        code, exc_ = EXIT_DATA, exc
    except data_io.CheckpointError as exc:
        code, exc_ = EXIT_CHECKPOINT, exc
    except PipelineStateError as exc:
        code, exc_ = EXIT_PIPELINE, exc
    except OSError as exc:
        code, exc_ = EXIT_IO, exc
    print(f"error: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
