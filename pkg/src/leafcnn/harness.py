"""The experiment matrix runner: config notation, the per-epoch training and
evaluation loop, progression aggregation and activation dumps.

Experiment cells are written in the colon notation
``Architecture:TrainingMechanism:DatasetType:Train-Test-Split`` and the full
matrix is the 2 x 2 x 3 x 5 = 60-cell cross product.
"""

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data_pipeline as dp
from . import networks
from .evaluation import ConfusionMatrix, macro_metrics
from .layers import softmax_xent
from .optim import OptimizerConfig, init_velocity, lr_at_epoch, sgd_step
from .synthetic import gen_minivillage

ARCHITECTURES = ("AlexNet", "GoogLeNet")
MECHANISMS = ("TransferLearning", "TrainingFromScratch")
DATASET_TYPES = ("Color", "GrayScale", "Segmented")
SPLITS = ("80-20", "60-40", "50-50", "40-60", "20-80")

_RESET_LAYERS = {
    "alexnet": {"fc8"},
    "googlenet": {"loss1/classifier", "loss2/classifier", "loss3/classifier"},
    "alexnet_mini": {"fc5"},
    "googlenet_mini": {"classifier"},
}

EPOCH_LOG_FIELDS = [
    "config", "epoch", "lr", "train_loss", "test_loss", "accuracy",
    "mean_precision", "mean_recall", "mean_f1", "sample_count",
    "per_class_precision", "per_class_recall", "per_class_f1",
]


class ConfigError(ValueError):
    """Malformed experiment configuration string."""


@dataclass
class ExperimentConfig:
    architecture: str = "AlexNet"
    mechanism: str = "TrainingFromScratch"
    dataset_type: str = "Color"
    split: str = "80-20"
    seed: int = 0
    optimizer: OptimizerConfig | None = None
    desk: bool = True
    desk_input_size: int = 32
    pretrained_path: str | None = None

    def __post_init__(self):
        if self.optimizer is None:
            if self.desk:
                # The mini architectures train on small images; a higher
                # rate and smaller batch reach the plateau within budget.
                self.optimizer = OptimizerConfig(base_lr=0.02, batch_size=32)
            else:
                batch = 100 if self.architecture == "AlexNet" else 24
                self.optimizer = OptimizerConfig(batch_size=batch)

    @property
    def train_fraction(self):
        return int(self.split.split("-")[0]) / 100.0

    @property
    def arch_tag(self):
        base = "alexnet" if self.architecture == "AlexNet" else "googlenet"
        return base + ("_mini" if self.desk else "")

    def cell_name(self):
        return format_config(self)

    def log_stem(self):
        return self.cell_name().replace(":", "_")


def format_config(cfg):
    return ":".join([cfg.architecture, cfg.mechanism, cfg.dataset_type, cfg.split])


def parse_config(text, **overrides):
    """Parse the colon notation into an ExperimentConfig (inverse of
    format_config); errors name the offending field."""
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigError(
            f"expected 4 colon-separated fields, got {len(parts)}: {text!r}"
        )
    arch, mech, dtype, split = parts
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}")
    if mech not in MECHANISMS:
        raise ConfigError(f"unknown training mechanism {mech!r}")
    if dtype not in DATASET_TYPES:
        raise ConfigError(f"unknown dataset type {dtype!r}")
    if split not in SPLITS:
        raise ConfigError(f"unknown train-test split {split!r}")
    return ExperimentConfig(
        architecture=arch, mechanism=mech, dataset_type=dtype, split=split,
        **overrides,
    )


def all_cells():
    """Canonical enumeration of the 60-cell matrix."""
    return [
        f"{a}:{m}:{d}:{s}"
        for a in ARCHITECTURES
        for m in MECHANISMS
        for d in DATASET_TYPES
        for s in SPLITS
    ]


def match_filter(cell, pattern):
    """Filter pattern with '*' wildcards per colon field."""
    if pattern is None:
        return True
    pat_parts = pattern.split(":")
    cell_parts = cell.split(":")
    if len(pat_parts) != 4:
        raise ConfigError(f"filter needs 4 colon-separated fields: {pattern!r}")
    return all(p == "*" or p == c for p, c in zip(pat_parts, cell_parts))


def cell_seed(matrix_seed, cell):
    """Per-cell seed: matrix seed combined with a stable hash of the cell."""
    digest = hashlib.blake2s(cell.encode("utf-8"), digest_size=4).digest()
    return (matrix_seed * 1_000_003 + int.from_bytes(digest, "little")) % (2 ** 31)


@dataclass
class EpochLog:
    config: str
    epoch: int
    lr: float
    train_loss: float
    test_loss: float
    report: object


def _fmt(x):
    return format(float(x), ".10g")


def _center_crop(x, size):
    h, w = x.shape[-2:]
    if h == size and w == size:
        return x
    top = (h - size) // 2
    left = (w - size) // 2
    return x[..., top:top + size, left:left + size]


class _ImageCache:
    """Prepared-image cache for one (corpus, variant) pair."""

    def __init__(self, variant, size):
        self.variant = variant
        self.size = size
        self._store = {}

    def get(self, record):
        t = self._store.get(record.image_path)
        if t is None:
            t = dp.prepare_image(record.image_path, self.variant, size=self.size)
            self._store[record.image_path] = t
        return t

    def batch(self, records, means, crop=None):
        x = np.stack([self.get(r) for r in records])
        x = x - means.reshape(1, 3, 1, 1)
        if crop is not None:
            x = _center_crop(x, crop)
        y = np.array([r.class_id for r in records], dtype=np.int64)
        return x, y


def _corpus_image_size(records):
    with Image.open(records[0].image_path) as im:
        return im.size[0]


def _evaluate(net, cache, records, means, crop, class_count, batch=256,
              aux_weights=None):
    cm = ConfusionMatrix(class_count)
    loss_sum = 0.0
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        x, y = cache.batch(chunk, means, crop)
        heads = net.forward(x.astype(np.float32))
        logits = heads[net.main_head]
        loss, _, _ = softmax_xent(logits, y)
        loss_sum += loss * len(chunk)
        cm.update(y, np.argmax(logits, axis=1))
    report = macro_metrics(cm)
    return report, loss_sum / len(records), cm


def _train_batch(net, x, y, rng):
    heads = net.forward(x, train=True, rng=rng)
    total_loss = 0.0
    head_grads = {}
    for name, weight in net.heads:
        loss, _, dlogits = softmax_xent(heads[name], y)
        total_loss += weight * loss
        head_grads[name] = (dlogits * np.float32(weight)).astype(np.float32)
    net.zero_grads()
    net.backward(head_grads)
    return total_loss


def run_experiment(cfg, manifest, out_dir, registry=None, progress=None,
                   stop_check=None):
    """Train one experiment cell for the configured number of epochs.

    Per epoch: deterministic shuffled batches, forward/backward/SGD, then a
    full evaluation on the test side recording both train and test loss.
    Epoch rows are flushed to the log CSV as they complete, so an
    interrupted run leaves a valid prefix. The final checkpoint is written
    under out_dir/checkpoints.

    ``stop_check`` (called with each EpochLog) may return True to stop
    early once a target is reached.
    """
    registry = registry or dp.load_registry()
    if isinstance(manifest, (str, Path)):
        records = dp.load_manifest(manifest, registry)
    else:
        records = list(manifest)
    if not records:
        raise ValueError("empty manifest")
    out_dir = Path(out_dir)
    (out_dir / "logs").mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    corpus_size = _corpus_image_size(records)
    if cfg.desk:
        net_input = corpus_size
        crop = None
        cache_size = corpus_size
    else:
        cache_size = 256
        net_input = {"alexnet": 227, "googlenet": 224}[cfg.arch_tag]
        crop = net_input

    init = networks.InitPolicy(seed=cfg.seed)
    net = networks.build(cfg.arch_tag, len(registry), net_input, init)

    if cfg.mechanism == "TransferLearning":
        if cfg.pretrained_path is None:
            raise ValueError(
                "TransferLearning needs a pretrained checkpoint path"
            )
        ckpt = networks.load_checkpoint(cfg.pretrained_path)
        if ckpt.arch != net.arch:
            raise networks.CheckpointError(
                f"checkpoint architecture {ckpt.arch!r} != {net.arch!r}"
            )
        networks.transfer_reset(
            net, ckpt, _RESET_LAYERS[net.arch],
            networks.InitPolicy(seed=cfg.seed + 1),
        )

    split = dp.SplitSpec(cfg.train_fraction, cfg.seed)
    train_recs, test_recs = dp.grouped_split(records, split)

    cache = _ImageCache(cfg.dataset_type, cache_size)
    means = dp.channel_means([cache.get(r) for r in train_recs])

    opt = cfg.optimizer
    params = net.parameters()
    velocity = init_velocity(params)
    drop_rng = np.random.default_rng([cfg.seed, 777])

    log_path = out_dir / "logs" / (cfg.log_stem() + ".csv")
    logs = []
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_FIELDS)
        fh.flush()
        for epoch in range(opt.total_epochs):
            lr = lr_at_epoch(opt, epoch)
            batches = dp.make_batches(train_recs, opt.batch_size, cfg.seed, epoch)
            loss_sum = 0.0
            for batch_recs in batches:
                x, y = cache.batch(batch_recs, means, crop)
                loss = _train_batch(net, x.astype(np.float32), y, drop_rng)
                sgd_step(params, net.gradients(), velocity, lr, opt)
                loss_sum += loss * len(batch_recs)
            train_loss = loss_sum / len(train_recs)
            report, test_loss, _ = _evaluate(
                net, cache, test_recs, means, crop, len(registry)
            )
            report.epoch = epoch
            report.train_loss = train_loss
            report.test_loss = test_loss
            log = EpochLog(cfg.cell_name(), epoch, lr, train_loss, test_loss, report)
            logs.append(log)
            writer.writerow([
                log.config, epoch, _fmt(lr), _fmt(train_loss), _fmt(test_loss),
                _fmt(report.accuracy), _fmt(report.mean_precision),
                _fmt(report.mean_recall), _fmt(report.mean_f1),
                report.sample_count,
                ";".join(_fmt(v) for v in report.precision),
                ";".join(_fmt(v) for v in report.recall),
                ";".join(_fmt(v) for v in report.f1),
            ])
            fh.flush()
            if progress:
                progress(log)
            if stop_check and stop_check(log):
                break
    ckpt_path = out_dir / "checkpoints" / (cfg.log_stem() + ".vgnt")
    networks.save_checkpoint(net, ckpt_path)
    return logs, ckpt_path


def pretrain_surrogate(arch_tag, data_dir, out_path, seed=0, images_per_class=6,
                       size=32, epochs=4, registry=None):
    """Surrogate pretraining for desk-scale transfer learning: classify the
    crop only (14 classes) on a disjoint synthetic corpus, then save the
    checkpoint for transfer_reset into a 38-class network."""
    registry = registry or dp.load_registry()
    records = gen_minivillage(
        data_dir, seed=seed + 104729, images_per_class=images_per_class,
        size=size, label_by_crop=True, registry=registry,
    )
    net = networks.build(arch_tag, len(registry.crops), size,
                         networks.InitPolicy(seed=seed))
    cache = _ImageCache("Color", size)
    means = dp.channel_means([cache.get(r) for r in records])
    opt = OptimizerConfig(base_lr=0.02, batch_size=50,
                          total_epochs=max(epochs, 1),
                          step_epochs=max(epochs, 1))
    params = net.parameters()
    velocity = init_velocity(params)
    rng = np.random.default_rng([seed, 778])
    for epoch in range(epochs):
        for batch_recs in dp.make_batches(records, opt.batch_size, seed, epoch):
            x, y = cache.batch(batch_recs, means)
            _train_batch(net, x.astype(np.float32), y, rng)
            sgd_step(params, net.gradients(), velocity, opt.base_lr, opt)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    networks.save_checkpoint(net, out_path)
    return out_path


def run_matrix(manifest, out_dir, pattern=None, desk=True, matrix_seed=0,
               epochs=None, pretrained=None, progress=None, registry=None):
    """Execute every matrix cell matching the filter and write summaries.

    Emits summary.csv (one row per executed cell, final-epoch metrics) and
    table1.csv (rows split x dataset type, columns architecture x mechanism,
    each cell the final mean F1 with precision, recall and accuracy).
    """
    registry = registry or dp.load_registry()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [c for c in all_cells() if match_filter(c, pattern)]
    results = {}
    pretrain_cache = {}
    for cell in cells:
        seed = cell_seed(matrix_seed, cell)
        cfg = parse_config(cell, seed=seed, desk=desk)
        if epochs is not None:
            cfg.optimizer = replace(
                cfg.optimizer, total_epochs=epochs,
                step_epochs=max(1, epochs // 3),
            )
        if cfg.mechanism == "TransferLearning":
            if pretrained and cfg.architecture in pretrained:
                cfg.pretrained_path = pretrained[cfg.architecture]
            elif desk:
                key = cfg.arch_tag
                if key not in pretrain_cache:
                    corpus_size = _corpus_image_size(
                        dp.load_manifest(manifest, registry)
                        if isinstance(manifest, (str, Path)) else list(manifest)
                    )
                    pretrain_cache[key] = pretrain_surrogate(
                        key, out_dir / "pretrain_data" / key,
                        out_dir / "checkpoints" / f"pretrained_{key}.vgnt",
                        seed=matrix_seed, size=corpus_size,
                    )
                cfg.pretrained_path = str(pretrain_cache[key])
            else:
                raise ValueError(
                    f"cell {cell}: full-scale transfer learning needs "
                    "--pretrained checkpoints"
                )
        logs, _ = run_experiment(cfg, manifest, out_dir, registry,
                                 progress=progress)
        results[cell] = logs[-1]
    _write_summaries(results, out_dir)
    return results


def _write_summaries(results, out_dir):
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "config", "architecture", "mechanism", "dataset_type", "split",
            "epoch", "mean_f1", "mean_precision", "mean_recall", "accuracy",
            "train_loss", "test_loss",
        ])
        for cell, log in results.items():
            a, m, d, s = cell.split(":")
            r = log.report
            writer.writerow([
                cell, a, m, d, s, log.epoch, _fmt(r.mean_f1),
                _fmt(r.mean_precision), _fmt(r.mean_recall), _fmt(r.accuracy),
                _fmt(log.train_loss), _fmt(log.test_loss),
            ])
    combos = [(a, m) for a in ARCHITECTURES for m in MECHANISMS]
    with open(out_dir / "table1.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "dataset_type"] + [f"{a}:{m}" for a, m in combos])
        for s in SPLITS:
            for d in DATASET_TYPES:
                row = [s, d]
                for a, m in combos:
                    log = results.get(f"{a}:{m}:{d}:{s}")
                    if log is None:
                        row.append("")
                    else:
                        r = log.report
                        row.append(
                            f"{r.mean_f1:.4f} ({r.mean_precision:.4f}, "
                            f"{r.mean_recall:.4f}, {r.accuracy:.4f})"
                        )
                writer.writerow(row)


GROUPINGS = {
    "architecture": 0,
    "mechanism": 1,
    "dataset_type": 2,
    "split": 3,
}


def read_epoch_logs(logs_dir):
    rows = []
    for path in sorted(Path(logs_dir).glob("*.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append(row)
    return rows


def emit_progression(rows, group_by, out_dir):
    """Per-group per-epoch mean and min-max band of mean F1 and losses.

    Writes progression_<group_by>.csv and a matching SVG line chart.
    """
    if group_by not in GROUPINGS:
        raise ConfigError(f"unknown grouping {group_by!r} "
                          f"(choose from {sorted(GROUPINGS)})")
    if not rows:
        raise ValueError("no epoch logs to aggregate")
    idx = GROUPINGS[group_by]
    series = {}
    for row in rows:
        key = row["config"].split(":")[idx]
        series.setdefault(key, {}).setdefault(int(row["epoch"]), []).append({
            "mean_f1": float(row["mean_f1"]),
            "train_loss": float(row["train_loss"]),
            "test_loss": float(row["test_loss"]),
        })
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"progression_{group_by}.csv"
    fields = ["mean_f1", "train_loss", "test_loss"]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["group", "epoch"]
        for f in fields:
            header += [f + "_mean", f + "_min", f + "_max"]
        writer.writerow(header)
        for key in sorted(series):
            for epoch in sorted(series[key]):
                vals = series[key][epoch]
                row = [key, epoch]
                for f in fields:
                    xs = [v[f] for v in vals]
                    row += [_fmt(np.mean(xs)), _fmt(min(xs)), _fmt(max(xs))]
                writer.writerow(row)
    svg_path = out_dir / f"progression_{group_by}.svg"
    _plot_progression(series, group_by, svg_path)
    return csv_path, svg_path


def _plot_progression(series, group_by, svg_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for key in sorted(series):
        epochs = sorted(series[key])
        f1_mean = [np.mean([v["mean_f1"] for v in series[key][e]]) for e in epochs]
        f1_lo = [min(v["mean_f1"] for v in series[key][e]) for e in epochs]
        f1_hi = [max(v["mean_f1"] for v in series[key][e]) for e in epochs]
        ax1.plot(epochs, f1_mean, label=str(key))
        ax1.fill_between(epochs, f1_lo, f1_hi, alpha=0.2)
        tl = [np.mean([v["train_loss"] for v in series[key][e]]) for e in epochs]
        vl = [np.mean([v["test_loss"] for v in series[key][e]]) for e in epochs]
        ax2.plot(epochs, tl, label=f"{key} train")
        ax2.plot(epochs, vl, linestyle="--", label=f"{key} test")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean F1")
    ax1.legend(fontsize=7)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("loss")
    ax2.legend(fontsize=7)
    fig.suptitle(f"progression grouped by {group_by}")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def dump_activations(checkpoint_path, image_path, layer_name, out_path,
                     variant="Color"):
    """Forward one image to the named layer and tile the channel activations
    into a square-ish grid image (row-major channel order, each channel
    min-max normalized to [0,255]; constant channels map to 0)."""
    ckpt = networks.load_checkpoint(checkpoint_path)
    net = networks.net_from_checkpoint(ckpt)
    if all(node.name != layer_name for node in net.nodes):
        raise KeyError(f"unknown layer {layer_name!r} in {net.arch}")
    mini = net.arch.endswith("_mini")
    size = net.input_size if mini else 256
    x = dp.prepare_image(image_path, variant, size=size)[None]
    if not mini:
        x = _center_crop(x, net.input_size)
    _, captured = net.forward(x.astype(np.float32), capture={layer_name})
    act = captured[layer_name][0]
    if act.ndim == 1:
        act = act[:, None, None]
    channels, h, w = act.shape
    cols = math.ceil(math.sqrt(channels))
    grid_rows = math.ceil(channels / cols)
    grid = np.zeros((grid_rows * h, cols * w), dtype=np.uint8)
    for c in range(channels):
        tile = act[c].astype(np.float64)
        lo, hi = tile.min(), tile.max()
        if hi > lo:
            norm = (tile - lo) / (hi - lo) * 255.0
        else:
            norm = np.zeros_like(tile)
        r, col = divmod(c, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = np.round(norm).astype(np.uint8)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(out_path, format="PNG")
    return grid.shape, (grid_rows, cols)
