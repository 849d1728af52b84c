"""Command-line surface: train, eval, benchmark, analyze, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Artifacts land under ``--out`` when given, otherwise under a timestamped
directory below $DETKIT_OUTPUT (default ./runs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import lazyconf
from .data import collate_batch
from .engine import (
    CorruptCheckpoint,
    NonFiniteLoss,
    Trainer,
    load_checkpoint,
    round_robin,
    save_checkpoint,
    seed_everything,
)
from .evalbench import (
    BenchmarkRecord,
    COLUMNS,
    coco_ap_evaluate,
    count_parameters,
    device_peak_memory,
    emit_report,
    estimate_flops,
    measure_fps,
    results_to_coco_json,
)
from .models import SlotExecutionError, postprocess

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class IncompatibleCheckpoint(RuntimeError):
    """Checkpoint tensors do not fit the configured model."""


# ---------------------------------------------------------------------------
# shared plumbing


def _run_dir(command: str, out: str | None) -> Path:
    if out is not None:
        path = Path(out)
    else:
        root = Path(os.environ.get("DETKIT_OUTPUT", "runs"))
        path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_tree(config_path: str, overrides: list[str], seed: int | None) -> lazyconf.ConfigTree:
    tree = lazyconf.load_config(config_path)
    items = list(overrides)
    if seed is not None and "train" in tree:
        items.append(f"train.seed={seed}")
    return lazyconf.apply_overrides(tree, items)


def build_batches(dataset, batch_size: int, seed: int, size_divisibility: int = 32) -> list:
    """Pre-collate the whole dataset in a seed-derived order.

    The batch list is a pure function of (dataset, seed), which is what
    makes training resumable without loader state.
    """
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [
        collate_batch([dataset[int(i)] for i in order[start:start + batch_size]],
                      size_divisibility)
        for start in range(0, len(order), batch_size)
    ]


def run_evaluation(model, dataset, batch_size: int = 4, use_nms: bool = False,
                   nms_threshold: float = 0.8, top_k: int = 100):
    """Forward the whole dataset, postprocess, and score against its boxes."""
    model.eval()
    predictions, ground_truth, image_ids = [], [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            batch = collate_batch(samples, 32)
            output = model(batch.images, batch.padding_mask)
            limit = min(top_k, output.logits.shape[1] * output.logits.shape[2])
            detections = postprocess(output, batch.image_sizes, top_k=limit,
                                     use_nms=use_nms, nms_threshold=nms_threshold)
            for det, sample in zip(detections, samples):
                predictions.append({"boxes": det.boxes, "scores": det.scores,
                                    "labels": det.labels})
                ground_truth.append({"boxes": sample.boxes.data, "labels": sample.labels,
                                     "crowd": sample.crowd})
                image_ids.append(sample.image_id)
    metrics = coco_ap_evaluate(predictions, ground_truth)
    return metrics, predictions, image_ids


def _load_weights(model, checkpoint_path: str):
    state = load_checkpoint(checkpoint_path)
    try:
        model.load_state_dict(state.model)
    except RuntimeError as err:
        raise IncompatibleCheckpoint(
            f"checkpoint {checkpoint_path!r} does not fit the configured model: {err}"
        ) from err
    return state


def _format_metrics(metrics: dict) -> str:
    lines = []
    for key in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"):
        value = metrics[key]
        lines.append(f"{key}: " + ("-" if math.isnan(value) else f"{value:.4f}"))
    return "\n".join(lines)


def _train_run(tree: lazyconf.ConfigTree, out: Path) -> tuple[Trainer, dict]:
    """Shared train routine: seed, build, fit, write checkpoints."""
    train_cfg = lazyconf.instantiate(tree["train"])
    seed_everything(train_cfg.seed)
    model = lazyconf.instantiate(tree["model"])
    criterion = lazyconf.instantiate(tree["criterion"])
    dataset = lazyconf.instantiate(tree["data.train"])
    batches = build_batches(dataset, train_cfg.batch_size, train_cfg.seed)
    trainer = Trainer(model, criterion, train_cfg, round_robin(batches), out_dir=out)
    trainer.train()
    state = trainer.state()
    save_checkpoint(state, out / "final.ckpt")
    artifacts = {"final": out / "final.ckpt"}
    if trainer.ema is not None:
        ema_state = dataclasses.replace(
            state, model=trainer.ema.model_state(model), ema=None)
        save_checkpoint(ema_state, out / "ema.ckpt")
        artifacts["ema"] = out / "ema.ckpt"
    return trainer, artifacts


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = _run_dir("train", args.out)
    tree = _load_tree(args.config, args.overrides, args.seed)
    lazyconf.dump_config(tree, out / "config_dump.py")
    trainer, artifacts = _train_run(tree, out)
    last = trainer.records[-1].losses["total"] if trainer.records else float("nan")
    print(f"trained {trainer.iteration} iterations; final loss {last:.4f}")
    for kind, path in artifacts.items():
        print(f"{kind} checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _run_dir("eval", args.out)
    tree = _load_tree(args.config, args.overrides, args.seed)
    if args.seed is not None:
        seed_everything(args.seed)
    model = lazyconf.instantiate(tree["model"])
    _load_weights(model, args.checkpoint)
    dataset = lazyconf.instantiate(tree["data.val"])
    use_nms = args.nms_threshold is not None and not args.no_nms
    threshold = args.nms_threshold if args.nms_threshold is not None else 0.8
    metrics, predictions, image_ids = run_evaluation(
        model, dataset, batch_size=int(tree.get("data.eval_batch_size", 4)),
        use_nms=use_nms, nms_threshold=threshold,
    )
    results_to_coco_json(predictions, image_ids,
                         category_map=getattr(dataset, "category_map", None),
                         path=out / "results.json")
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True))
    print(_format_metrics(metrics))
    print(f"results: {out / 'results.json'}")
    return EXIT_OK


def _failure_row(name: str, message: str) -> str:
    cells = [name, "-", f"error: {message}"] + ["-"] * 10
    return "| " + " | ".join(cells) + " |"


def cmd_benchmark(args) -> int:
    checkpoints = list(args.checkpoints or [])
    checkpoints += [""] * (len(args.configs) - len(checkpoints))
    records, failures = [], []
    for config_path, checkpoint in zip(args.configs, checkpoints):
        name = Path(config_path).stem
        started = time.perf_counter()
        try:
            tree = _load_tree(config_path, [], args.seed)
            name = tree.get("project", name)
            seed_everything(args.seed if args.seed is not None else 0)
            model = lazyconf.instantiate(tree["model"])
            dataset = lazyconf.instantiate(tree["data.val"])
            inputs = []
            for index in range(min(4, len(dataset))):
                batch = collate_batch([dataset[index]], 32)
                inputs.append((batch.images, batch.padding_mask))
            flops = estimate_flops(model, inputs)
            height, width = dataset[0].image.shape[:2]
            fps = measure_fps(model, input_shape=(3, height, width),
                              warmup_iters=args.warmup, timed_iters=args.timed)
            metrics = dict.fromkeys(("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"),
                                    float("nan"))
            if checkpoint:
                _load_weights(model, checkpoint)
                metrics, _, _ = run_evaluation(model, dataset)
            train_spec = tree.get("train")
            epochs = 0
            if train_spec is not None:
                max_iter = tree["train.max_iter"]
                batch_size = tree.get("train.batch_size", 1)
                dataset_len = max(len(lazyconf.instantiate(tree["data.train"])), 1)
                epochs = max(1, round(max_iter * batch_size / dataset_len))
            records.append(BenchmarkRecord(
                model_name=name,
                epochs=epochs,
                ap=metrics["AP"], ap50=metrics["AP50"], ap75=metrics["AP75"],
                ap_s=metrics["AP_S"], ap_m=metrics["AP_M"], ap_l=metrics["AP_L"],
                params=count_parameters(model)[0],
                flops_mean=flops.mean, flops_std=flops.std,
                fps=fps.fps,
                peak_memory=device_peak_memory(),
                wall_hours=(time.perf_counter() - started) / 3600.0,
            ))
        except Exception as err:  # isolation: one broken model must not sink the run
            failures.append((name, str(err)))
    if not records and failures:
        for name, message in failures:
            print(f"benchmark failed for {name}: {message}", file=sys.stderr)
        return EXIT_RUNTIME
    text = emit_report(records, format=args.format)
    if args.format == "markdown" and failures:
        text += "\n".join(_failure_row(name, message) for name, message in failures) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    tree = _load_tree(args.config, args.overrides, args.seed)
    seed_everything(args.seed if args.seed is not None else 0)
    model = lazyconf.instantiate(tree["model"])
    if args.checkpoint:
        _load_weights(model, args.checkpoint)
    if args.tool == "params":
        total, trainable = count_parameters(model)
        print(f"params: total={total} trainable={trainable}")
        return EXIT_OK
    dataset = lazyconf.instantiate(tree["data.val"])
    if args.tool == "flops":
        inputs = []
        for index in range(min(4, len(dataset))):
            batch = collate_batch([dataset[index]], 32)
            inputs.append((batch.images, batch.padding_mask))
        estimate = estimate_flops(model, inputs)
        print(f"GFLOPs: {estimate.gmean:.3f} ± {estimate.gstd:.3f}")
        return EXIT_OK
    height, width = dataset[0].image.shape[:2]
    result = measure_fps(model, input_shape=(3, height, width),
                         warmup_iters=args.warmup, timed_iters=args.timed)
    print(f"FPS: {result.fps:.2f} (latency mean {result.mean_latency * 1e3:.2f} ms, "
          f"median {result.median_latency * 1e3:.2f} ms, "
          f"std {result.std_latency * 1e3:.2f} ms)")
    return EXIT_OK


# ablation studies: (label, config overrides, eval settings)
NMS_STUDY = [
    ("no-nms", [], {"use_nms": False}),
    ("nms@0.8", [], {"use_nms": True, "nms_threshold": 0.8}),
]
FREEZE_STUDY = [(f"freeze_stages={n}", [f"train.freeze_stages={n}"], {}) for n in (0, 1, 2)]
HPARAM_STUDY = [
    ("lr(2e-5,2e-5,2e-4) cw=1.0",
     ["train.backbone_lr=2e-5", "train.offsets_refpoints_lr=2e-5", "train.encdec_lr=2e-4",
      "criterion.weights.class_weight=1.0"], {}),
    ("lr(2e-5,2e-5,2e-4) cw=2.0",
     ["train.backbone_lr=2e-5", "train.offsets_refpoints_lr=2e-5", "train.encdec_lr=2e-4",
      "criterion.weights.class_weight=2.0"], {}),
    ("lr(1e-5,1e-4,1e-4) cw=1.0",
     ["train.backbone_lr=1e-5", "train.offsets_refpoints_lr=1e-4", "train.encdec_lr=1e-4",
      "criterion.weights.class_weight=1.0"], {}),
    ("lr(1e-5,1e-4,1e-4) cw=2.0",
     ["train.backbone_lr=1e-5", "train.offsets_refpoints_lr=1e-4", "train.encdec_lr=1e-4",
      "criterion.weights.class_weight=2.0"], {}),
]


def _delta_cell(value: float, reference: float | None) -> str:
    if math.isnan(value):
        return "-"
    cell = f"{value * 100:.1f}"
    if reference is not None and not math.isnan(reference):
        cell += f" ({(value - reference) * 100:+.1f})"
    return cell


def cmd_ablate(args) -> int:
    out = _run_dir("ablate", args.out)
    studies = {"nms": NMS_STUDY, "freeze": FREEZE_STUDY, "hparams": HPARAM_STUDY}
    study = studies[args.study]
    rows: list[tuple[str, dict | str]] = []

    if args.study == "nms":
        # one training, two decodings
        tree = _load_tree(args.config, args.overrides, args.seed)
        trainer, _ = _train_run(tree, out / "base")
        dataset = lazyconf.instantiate(tree["data.val"])
        for label, _, eval_kwargs in study:
            try:
                metrics, _, _ = run_evaluation(trainer.model, dataset, **eval_kwargs)
                rows.append((label, metrics))
            except Exception as err:
                rows.append((label, str(err)))
    else:
        for label, overrides, eval_kwargs in study:
            try:
                tree = _load_tree(args.config, list(args.overrides) + overrides, args.seed)
                trainer, _ = _train_run(tree, out / label.replace("/", "_"))
                dataset = lazyconf.instantiate(tree["data.val"])
                metrics, _, _ = run_evaluation(trainer.model, dataset, **eval_kwargs)
                rows.append((label, metrics))
            except Exception as err:
                rows.append((label, str(err)))

    reference: float | None = None
    lines = ["| Variant | AP | AP50 |", "|---|---|---|"]
    for label, payload in rows:
        if isinstance(payload, str):
            lines.append(f"| {label} | error: {payload} | - |")
            continue
        if reference is None:
            lines.append(f"| {label} | {_delta_cell(payload['AP'], None)} "
                         f"| {_delta_cell(payload['AP50'], None)} |")
            reference = payload["AP"]
            reference50 = payload["AP50"]
        else:
            lines.append(f"| {label} | {_delta_cell(payload['AP'], reference)} "
                         f"| {_delta_cell(payload['AP50'], reference50)} |")
    text = "\n".join(lines) + "\n"
    (out / "ablation.md").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detkit",
                                     description="detection-transformer toolbox")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides, dotted paths")

    train = sub.add_parser("train", help="train a model from a config")
    train.add_argument("--config", required=True)
    common(train)
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--nms-threshold", type=float, default=None)
    evaluate.add_argument("--no-nms", action="store_true",
                          help="force NMS off (the default decode)")
    common(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    benchmark = sub.add_parser("benchmark", help="comparison table across configs")
    benchmark.add_argument("--configs", nargs="+", required=True)
    benchmark.add_argument("--checkpoints", nargs="*", default=None,
                           help="optional, aligned with --configs")
    benchmark.add_argument("--out", default=None)
    benchmark.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    benchmark.add_argument("--warmup", type=int, default=50)
    benchmark.add_argument("--timed", type=int, default=200)
    benchmark.add_argument("--seed", type=int, default=None)
    benchmark.set_defaults(func=cmd_benchmark)

    analyze = sub.add_parser("analyze", help="params / flops / fps for one config")
    analyze.add_argument("--config", required=True)
    analyze.add_argument("--tool", choices=("flops", "fps", "params"), required=True)
    analyze.add_argument("--checkpoint", default=None)
    analyze.add_argument("--warmup", type=int, default=50)
    analyze.add_argument("--timed", type=int, default=200)
    common(analyze)
    analyze.set_defaults(func=cmd_analyze)

    ablate = sub.add_parser("ablate", help="run a toy-scale ablation study")
    ablate.add_argument("--study", choices=("nms", "freeze", "hparams"), required=True)
    ablate.add_argument("--config", required=True)
    common(ablate)
    ablate.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except lazyconf.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SlotExecutionError as err:
        print(f"error in model slot {err.slot!r}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CorruptCheckpoint, IncompatibleCheckpoint, NonFiniteLoss) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:
        print(f"error ({type(err).__name__}): {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
