"""Command-line interface.

Exit code 0 on success; on failure a machine-readable JSON error line is
printed to stderr and the exit code is nonzero.
"""

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import data_pipeline as dp
from . import harness, networks, segmentation
from .evaluation import (
    ConfusionMatrix,
    crop_conditional_predict,
    macro_metrics,
    topk_accuracy,
)
from .layers import softmax_xent
from .synthetic import gen_minivillage


@click.group()
def cli():
    """Crop-disease CNN training and evaluation harness."""


@cli.command("gen-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--images-per-class", default=10, show_default=True)
@click.option("--size", default=64, show_default=True, type=click.Choice([32, 64], case_sensitive=False))
def gen_synthetic_cmd(out_dir, seed, images_per_class, size):
    """Generate the synthetic surrogate corpus (images, masks, manifest)."""
    records = gen_minivillage(out_dir, seed=seed,
                              images_per_class=images_per_class, size=int(size))
    click.echo(f"wrote {len(records)} images under {out_dir}")


@cli.command("segment")
@click.option("--input-dir", required=True, type=click.Path(exists=True))
@click.option("--output-dir", required=True, type=click.Path())
@click.option("--saturation-min", default=0.15, show_default=True)
@click.option("--brightness-lo", default=0.1, show_default=True)
@click.option("--brightness-hi", default=0.98, show_default=True)
@click.option("--a-max", default=-5.0, show_default=True)
@click.option("--radius", default=2, show_default=True)
@click.option("--largest-component/--no-largest-component", default=True, show_default=True)
@click.option("--truth-dir", type=click.Path(exists=True),
              help="Ground-truth mask dir; writes an IoU report CSV.")
def segment_cmd(input_dir, output_dir, saturation_min, brightness_lo,
                brightness_hi, a_max, radius, largest_component, truth_dir):
    """Segment every PNG in a directory; background is zeroed."""
    params = segmentation.SegmentationParams(
        saturation_min=saturation_min, brightness_lo=brightness_lo,
        brightness_hi=brightness_hi, a_max=a_max, radius=radius,
        largest_component=largest_component,
    )
    in_dir = Path(input_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ious = []
    for path in sorted(in_dir.glob("*.png")):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        mask = segmentation.compute_leaf_mask(arr, params)
        seg = segmentation.apply_mask(arr, mask)
        Image.fromarray(
            np.clip(np.round(seg * 255.0), 0, 255).astype(np.uint8)
        ).save(out / path.name, format="PNG")
        if truth_dir:
            truth_path = Path(truth_dir) / path.name
            if truth_path.exists():
                with Image.open(truth_path) as tm:
                    truth = np.asarray(tm.convert("L")) > 127
                ious.append((path.name, segmentation.mask_iou(mask, truth)))
    if truth_dir:
        report = out / "iou_report.csv"
        with open(report, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "iou"])
            for name, iou in ious:
                writer.writerow([name, f"{iou:.6f}"])
            if ious:
                writer.writerow(["mean", f"{np.mean([i for _, i in ious]):.6f}"])
        click.echo(f"mean IoU {np.mean([i for _, i in ious]):.4f} "
                   f"over {len(ious)} images -> {report}")


@cli.command("split")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--fraction", default=0.8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--check", is_flag=True, help="Verify zero leaf-group leakage.")
def split_cmd(manifest, fraction, seed, check):
    """Report (and optionally verify) a leaf-grouped train/test split."""
    records = dp.load_manifest(manifest)
    train, test = dp.grouped_split(records, dp.SplitSpec(fraction, seed))
    click.echo(f"train {len(train)} / test {len(test)} "
               f"(target fraction {fraction})")
    if check:
        train_groups = {r.leaf_group_id for r in train if r.leaf_group_id}
        test_groups = {r.leaf_group_id for r in test if r.leaf_group_id}
        leaked = train_groups & test_groups
        if leaked:
            raise ValueError(f"leaf-group leakage: {sorted(leaked)[:5]}")
        click.echo("no leaf-group leakage")


@cli.command("train")
@click.argument("config_string")
@click.option("--data", "manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=None, type=int, help="Override 30-epoch default.")
@click.option("--desk/--full", default=True, show_default=True)
@click.option("--pretrained", type=click.Path(exists=True),
              help="Pretrained checkpoint (required for TransferLearning).")
def train_cmd(config_string, manifest, out_dir, seed, epochs, desk, pretrained):
    """Train one experiment cell, e.g. AlexNet:TrainingFromScratch:Color:80-20."""
    cfg = harness.parse_config(config_string, seed=seed, desk=desk,
                               pretrained_path=pretrained)
    if epochs is not None:
        from dataclasses import replace
        cfg.optimizer = replace(cfg.optimizer, total_epochs=epochs,
                                step_epochs=max(1, epochs // 3))
    logs, ckpt = harness.run_experiment(
        cfg, manifest, out_dir,
        progress=lambda log: click.echo(
            f"epoch {log.epoch:2d} lr {log.lr:.5f} "
            f"train {log.train_loss:.4f} test {log.test_loss:.4f} "
            f"acc {log.report.accuracy:.4f} F1 {log.report.mean_f1:.4f}"
        ),
    )
    click.echo(f"checkpoint -> {ckpt}")


@cli.command("matrix")
@click.option("--data", "manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--filter", "pattern", default=None,
              help="Cell filter, '*' per field, e.g. 'GoogLeNet:*:*:80-20'.")
@click.option("--desk/--full", default=True, show_default=True)
@click.option("--seed", "matrix_seed", default=0, show_default=True)
@click.option("--epochs", default=None, type=int)
@click.option("--pretrained-alexnet", type=click.Path(exists=True))
@click.option("--pretrained-googlenet", type=click.Path(exists=True))
def matrix_cmd(manifest, out_dir, pattern, desk, matrix_seed, epochs,
               pretrained_alexnet, pretrained_googlenet):
    """Run the 60-cell experiment matrix (or a filtered subset)."""
    pretrained = {}
    if pretrained_alexnet:
        pretrained["AlexNet"] = pretrained_alexnet
    if pretrained_googlenet:
        pretrained["GoogLeNet"] = pretrained_googlenet
    results = harness.run_matrix(
        manifest, out_dir, pattern=pattern, desk=desk, matrix_seed=matrix_seed,
        epochs=epochs, pretrained=pretrained or None,
        progress=lambda log: click.echo(
            f"{log.config} epoch {log.epoch:2d} F1 {log.report.mean_f1:.4f}"
        ),
    )
    click.echo(f"{len(results)} cells -> {out_dir}/summary.csv, {out_dir}/table1.csv")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--topk", default=None, type=int)
@click.option("--known-crop", is_flag=True,
              help="Also report crop-conditional accuracy.")
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(checkpoint, manifest, topk, known_crop, out_path):
    """Evaluate a checkpoint on a manifest; optional top-k and
    crop-conditional accuracy."""
    registry = dp.load_registry()
    records = dp.load_manifest(manifest, registry)
    ckpt = networks.load_checkpoint(checkpoint)
    net = networks.net_from_checkpoint(ckpt)
    mini = net.arch.endswith("_mini")
    size = net.input_size if mini else 256
    cache = harness._ImageCache("Color", size)
    means = dp.channel_means([cache.get(r) for r in records])
    crop = None if mini else net.input_size
    all_logits = []
    labels = []
    for start in range(0, len(records), 256):
        chunk = records[start:start + 256]
        x, y = cache.batch(chunk, means, crop)
        all_logits.append(net.forward(x.astype(np.float32))[net.main_head])
        labels.append(y)
    logits = np.concatenate(all_logits)
    labels = np.concatenate(labels)
    cm = ConfusionMatrix(len(registry))
    cm.update(labels, np.argmax(logits, axis=1))
    report = macro_metrics(cm)
    lines = {
        "accuracy": report.accuracy,
        "mean_f1": report.mean_f1,
        "mean_precision": report.mean_precision,
        "mean_recall": report.mean_recall,
        "samples": report.sample_count,
    }
    if topk:
        lines[f"top{topk}_accuracy"] = topk_accuracy(logits, labels, topk)
    if known_crop:
        hits = 0
        for row, rec in zip(logits, records):
            crop_name = rec.known_crop or registry.entry(rec.class_id).crop
            pred = crop_conditional_predict(row, crop_name, registry)
            hits += int(pred == rec.class_id)
        lines["crop_conditional_accuracy"] = hits / len(records)
    for key, val in lines.items():
        click.echo(f"{key}: {val:.4f}" if isinstance(val, float) else f"{key}: {val}")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(lines, fh, indent=2)
            fh.write("\n")


@cli.command("report")
@click.option("--logs-dir", required=True, type=click.Path(exists=True))
@click.option("--group-by", required=True,
              type=click.Choice(sorted(harness.GROUPINGS)))
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(logs_dir, group_by, out_dir):
    """Aggregate epoch logs into progression plot data (CSV + SVG)."""
    rows = harness.read_epoch_logs(logs_dir)
    csv_path, svg_path = harness.emit_progression(rows, group_by, out_dir)
    click.echo(f"wrote {csv_path} and {svg_path}")


@cli.command("viz-activations")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--layer", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--variant", default="Color", show_default=True,
              type=click.Choice(dp.VARIANTS))
def viz_cmd(checkpoint, image_path, layer, out_path, variant):
    """Dump a channel-activation grid image for one layer."""
    shape, grid = harness.dump_activations(checkpoint, image_path, layer,
                                           out_path, variant)
    click.echo(f"{grid[0]}x{grid[1]} grid ({shape[0]}x{shape[1]} px) -> {out_path}")


def main():
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        click.echo(json.dumps({"error": "usage", "message": exc.format_message()}),
                   err=True)
        sys.exit(exc.exit_code or 2)
    except click.Abort:
        sys.exit(130)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
                   err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
