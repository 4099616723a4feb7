"""Release acceptance gate: twelve numbered criteria.

Each test prints exactly one [PASS]/[FAIL] line (bypassing pytest capture)
and then asserts, so a full run always shows the complete scorecard.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from leafcnn import data_pipeline as dp
from leafcnn import networks, segmentation
from leafcnn.evaluation import (
    ConfusionMatrix,
    crop_restricted_baseline,
    macro_metrics,
    random_baseline,
)
from leafcnn.harness import (
    ExperimentConfig,
    OptimizerConfig,
    pretrain_surrogate,
    run_experiment,
    run_matrix,
)
from leafcnn.layers import (
    LRN,
    Conv2D,
    Dropout,
    FullyConnected,
    Inception,
    MaxPool,
    softmax_xent,
)
from leafcnn.optim import lr_at_epoch
from leafcnn.synthetic import gen_minivillage

from gradcheck import (
    check_layer_input_grad,
    check_layer_param_grad,
    numeric_grad,
    rel_error,
    sample_indices,
)


@pytest.fixture
def verdict(capfd):
    def _verdict(num, label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {label}: {detail}"
        with capfd.disabled():
            print(line, flush=True)
        assert ok, line
    return _verdict


@pytest.fixture(scope="module")
def learn_corpus(tmp_path_factory, registry):
    """The standard desk-scale learning corpus: 100 images per class, 64 px."""
    root = tmp_path_factory.mktemp("learn_corpus")
    records = gen_minivillage(root, seed=1, images_per_class=100, size=64,
                              registry=registry)
    return records


@pytest.fixture(scope="module")
def scarce_corpus(tmp_path_factory, registry):
    """A data-scarce fine-tuning corpus: 8 images per class, 32 px."""
    root = tmp_path_factory.mktemp("scarce_corpus")
    records = gen_minivillage(root, seed=2, images_per_class=8, size=32,
                              registry=registry)
    return records


@pytest.fixture(scope="module")
def variant_corpus(tmp_path_factory, registry):
    """A mid-size corpus for the dataset-variant comparison: 20/class, 32 px."""
    root = tmp_path_factory.mktemp("variant_corpus")
    records = gen_minivillage(root, seed=2, images_per_class=20, size=32,
                              registry=registry)
    return root, records


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory, registry):
    """The smallest corpus that exercises every matrix cell: 2/class, 32 px."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    records = gen_minivillage(root, seed=7, images_per_class=2, size=32,
                              registry=registry)
    return records


def test_criterion_01_gradient_correctness(verdict):
    """Every layer kind passes 64-bit central finite-difference checks."""
    t0 = time.time()
    rng = np.random.default_rng(11)
    eps, tol, pts = 1e-5, 1e-6, 20
    worst = 0.0

    conv = Conv2D("c", 2, 3, 3, stride=1, pad=1, dtype=np.float64)
    conv.zero_grads()
    x = rng.standard_normal((2, 2, 6, 6))
    worst = max(worst, check_layer_input_grad(conv, x, rng, pts, eps, tol))
    worst = max(worst, check_layer_param_grad(conv, x, rng, pts, eps, tol))

    fc = FullyConnected("f", 12, 7, dtype=np.float64)
    fc.zero_grads()
    x = rng.standard_normal((4, 12))
    worst = max(worst, check_layer_input_grad(fc, x, rng, pts, eps, tol))
    worst = max(worst, check_layer_param_grad(fc, x, rng, pts, eps, tol))

    lrn = LRN("n")
    x = rng.standard_normal((2, 8, 4, 4))
    worst = max(worst, check_layer_input_grad(lrn, x, rng, pts, eps, tol))

    pool = MaxPool("p", 2, stride=2)
    # distinct values so the argmax is stable under the probe step
    x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float64))
    x = (x / x.size).reshape(2, 2, 6, 6)
    worst = max(worst, check_layer_input_grad(pool, x, rng, pts, eps, tol))

    mod = Inception("i", 2, 2, 2, 2, 2, 2, 2, dtype=np.float64)
    for _, p in mod.params.items():
        p[...] = 0.5 * rng.standard_normal(p.shape)
    mod.zero_grads()
    x = rng.standard_normal((2, 2, 5, 5))
    worst = max(worst, check_layer_input_grad(mod, x, rng, pts, eps, tol))
    worst = max(worst, check_layer_param_grad(mod, x, rng, pts, eps, tol))

    # softmax + cross-entropy: analytic dlogits against the loss itself
    logits = rng.standard_normal((6, 9))
    labels = rng.integers(0, 9, size=6)
    _, _, dlogits = softmax_xent(logits, labels)
    idx = sample_indices(rng, logits.size, pts)
    num = numeric_grad(lambda: softmax_xent(logits, labels)[0], logits, idx, eps)
    for i, g in num.items():
        worst = max(worst, rel_error(dlogits.reshape(-1)[i], g))

    # dropout with the mask frozen after one training-mode forward
    drop = Dropout("d", 0.5)
    x = rng.standard_normal((8, 8))
    drop.forward(x, train=True, rng=np.random.default_rng(3))
    mask = drop._mask.copy()
    probe = rng.standard_normal(x.shape)
    analytic = drop.backward(probe)
    idx = sample_indices(rng, x.size, pts)
    num = numeric_grad(lambda: float(np.sum(x * mask * probe)), x, idx, eps)
    for i, g in num.items():
        worst = max(worst, rel_error(analytic.reshape(-1)[i], g))

    elapsed = time.time() - t0
    verdict(1, "gradient correctness", worst <= tol and elapsed < 60.0,
            f"max rel error {worst:.2e} (tol {tol:.0e}), {elapsed:.1f}s")


def test_criterion_02_baseline_arithmetic(verdict, registry):
    rb = random_baseline(38)
    r2 = crop_restricted_baseline(registry, 2)
    r3 = crop_restricted_baseline(registry, 3)
    ok = (rb == 1.0 / 38.0
          and r2[:2] == (33, 9) and round(r2[2], 3) == 0.273
          and r3[:2] == (25, 5) and round(r3[2], 3) == 0.200)
    verdict(2, "baseline arithmetic", ok,
            f"random {rb:.2%}; n>=2 -> {r2[0]} classes, {r2[1]} crops, "
            f"{r2[2]:.3f}; n>=3 -> {r3[0]} classes, {r3[1]} crops, {r3[2]:.3f}")


def test_criterion_03_learning_rate_schedule(verdict):
    cfg = OptimizerConfig()
    seq = [lr_at_epoch(cfg, e) for e in range(30)]
    want = [0.005] * 10 + [0.0005] * 10 + [0.00005] * 10
    ok = all(a == pytest.approx(b, rel=1e-12) for a, b in zip(seq, want))
    verdict(3, "learning-rate schedule", ok,
            "30 epochs = {0.005}x10, {0.0005}x10, {0.00005}x10")


def _loop_macro(counts):
    """Independent per-class loop oracle for the macro metrics."""
    k = len(counts)
    precs, recs, f1s = [], [], []
    correct = 0
    total = 0
    for c in range(k):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(k)) - tp
        fn = sum(counts[c][r] for r in range(k)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precs.append(prec)
        recs.append(rec)
        f1s.append(f1)
        correct += tp
        total += sum(counts[c])
    acc = correct / total if total else 0.0
    return (sum(precs) / k, sum(recs) / k, sum(f1s) / k, acc)


def test_criterion_04_metric_oracle_equivalence(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 41))
        counts = rng.integers(0, 50, size=(k, k))
        if counts.sum() == 0:
            counts[0, 0] = 1
        rep = macro_metrics(ConfusionMatrix(k, counts))
        prec, rec, f1, acc = _loop_macro(counts.tolist())
        worst = max(worst, abs(rep.mean_precision - prec),
                    abs(rep.mean_recall - rec), abs(rep.mean_f1 - f1),
                    abs(rep.accuracy - acc))
    hand = macro_metrics(ConfusionMatrix(2, np.array([[8, 2], [3, 7]])))
    ok = worst <= 1e-12 and abs(hand.mean_f1 - 0.74937) <= 1e-5
    verdict(4, "metric oracle equivalence", ok,
            f"1000 matrices, max |delta| {worst:.1e}; "
            f"hand case macro F1 {hand.mean_f1:.5f}")


def test_criterion_05_split_integrity(verdict):
    t0 = time.time()
    rng = np.random.default_rng(5)
    fractions = [0.8, 0.6, 0.5, 0.4, 0.2]
    leaks = 0
    worst_miss = 0.0
    for i in range(10_000):
        frac = fractions[i % 5]
        n_groups = int(rng.integers(3, 41))
        sizes = rng.integers(1, 4, size=n_groups)
        records = []
        for g, size in enumerate(sizes):
            gid = f"leaf{g}" if size > 1 else None
            for j in range(size):
                records.append(dp.SampleRecord(f"img{g}_{j}.png", 0, gid))
        train, test = dp.grouped_split(records, dp.SplitSpec(frac, seed=i))
        tg = {r.leaf_group_id for r in train if r.leaf_group_id}
        sg = {r.leaf_group_id for r in test if r.leaf_group_id}
        leaks += len(tg & sg)
        miss = abs(len(train) - frac * len(records)) / sizes.max()
        worst_miss = max(worst_miss, miss)
    elapsed = time.time() - t0
    ok = leaks == 0 and worst_miss <= 1.0 and elapsed < 60.0
    verdict(5, "split integrity", ok,
            f"10000 manifests, {leaks} leaks, worst miss "
            f"{worst_miss:.2f} groups, {elapsed:.1f}s")


@pytest.mark.parametrize("arch", ["AlexNet", "GoogLeNet"])
def test_criterion_06_desk_scale_learning(verdict, learn_corpus, tmp_path,
                                          arch):
    t0 = time.time()
    cfg = ExperimentConfig(architecture=arch, dataset_type="Color",
                           split="80-20", seed=0)
    logs, _ = run_experiment(
        cfg, learn_corpus, tmp_path, stop_check=lambda log:
        log.report.accuracy >= 0.90 and log.report.mean_f1 >= 0.88,
    )
    elapsed = time.time() - t0
    last = logs[-1]
    ok = (last.report.accuracy >= 0.90 and last.report.mean_f1 >= 0.88
          and last.epoch < 30 and elapsed < 900.0)
    verdict(6, f"desk-scale learning ({arch})", ok,
            f"epoch {last.epoch}: accuracy {last.report.accuracy:.3f}, "
            f"mean F1 {last.report.mean_f1:.3f}, {elapsed:.0f}s")


def test_criterion_07_transfer_vs_scratch(verdict, scarce_corpus, tmp_path):
    opt = OptimizerConfig(base_lr=0.01, batch_size=32,
                          total_epochs=8, step_epochs=8)
    wins = 0
    pairs = []
    for s in range(5):
        ckpt = pretrain_surrogate(
            "alexnet_mini", tmp_path / f"pre{s}", tmp_path / f"pre{s}.vgnt",
            seed=s, images_per_class=40, size=32, epochs=20,
        )
        tf = ExperimentConfig(architecture="AlexNet",
                              mechanism="TransferLearning", seed=s,
                              optimizer=opt, pretrained_path=str(ckpt))
        sc = ExperimentConfig(architecture="AlexNet",
                              mechanism="TrainingFromScratch", seed=s,
                              optimizer=opt)
        ltf, _ = run_experiment(tf, scarce_corpus, tmp_path / f"tf{s}")
        lsc, _ = run_experiment(sc, scarce_corpus, tmp_path / f"sc{s}")
        ftf, fsc = ltf[-1].report.mean_f1, lsc[-1].report.mean_f1
        wins += ftf >= fsc
        pairs.append(f"{ftf:.3f}>={fsc:.3f}" if ftf >= fsc
                     else f"{ftf:.3f}<{fsc:.3f}")
    verdict(7, "transfer-vs-scratch ordering", wins >= 4,
            f"transfer >= scratch in {wins}/5 paired runs ({', '.join(pairs)})")


def test_criterion_08_variant_ordering(verdict, variant_corpus, tmp_path):
    root, _ = variant_corpus
    wins = 0
    triples = []
    for s in range(5):
        out = tmp_path / f"m{s}"
        run_matrix(root / "manifest.csv", out,
                   pattern="AlexNet:TrainingFromScratch:*:80-20",
                   matrix_seed=s, epochs=9)
        f1s = {}
        with open(out / "summary.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                f1s[row["dataset_type"]] = float(row["mean_f1"])
        assert set(f1s) == {"Color", "GrayScale", "Segmented"}
        wins += (f1s["GrayScale"] < f1s["Color"]
                 and f1s["GrayScale"] < f1s["Segmented"])
        triples.append(f"C {f1s['Color']:.2f}/S {f1s['Segmented']:.2f}"
                       f"/G {f1s['GrayScale']:.2f}")
    verdict(8, "dataset-variant ordering", wins >= 4,
            f"GrayScale strictly lowest in {wins}/5 seeds ({'; '.join(triples)})")


def test_criterion_09_parameter_counts(verdict):
    alex = networks.build("alexnet", 38, 227, networks.InitPolicy(seed=0))
    goog = networks.build("googlenet", 38, 224, networks.InitPolicy(seed=0))
    n_alex = networks.count_params(alex)
    n_goog = networks.count_params(goog, main_path_only=True)
    ok = 55e6 <= n_alex <= 63e6 and 4e6 <= n_goog <= 8e6
    verdict(9, "parameter counts", ok,
            f"alexnet {n_alex:,} in [55e6, 63e6]; "
            f"googlenet main path {n_goog:,} in [4e6, 8e6]")


def test_criterion_10_determinism(verdict, scarce_corpus, tmp_path):
    cfg = ExperimentConfig(seed=3, optimizer=OptimizerConfig(
        base_lr=0.02, batch_size=32, total_epochs=2, step_epochs=2))
    run_experiment(cfg, scarce_corpus, tmp_path / "a")
    run_experiment(cfg, scarce_corpus, tmp_path / "b")
    logs_a = sorted((tmp_path / "a" / "logs").glob("*.csv"))
    logs_b = sorted((tmp_path / "b" / "logs").glob("*.csv"))
    same = (len(logs_a) == len(logs_b) == 1
            and logs_a[0].read_bytes() == logs_b[0].read_bytes())
    verdict(10, "determinism", same,
            f"rerun epoch-log CSV byte-identical "
            f"({logs_a[0].stat().st_size} bytes)")


def _reference_lab(rgb):
    """Scalar CIE Lab (D65, 2 degrees) computed from first principles."""
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4
    r, g, b = (lin(c) for c in rgb)
    x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047
    y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b
    z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29
    return (116 * f(y) - 16, 500 * (f(x) - f(y)), 200 * (f(y) - f(z)))


def test_criterion_11_segmentation_quality(verdict, variant_corpus):
    import colorsys

    root, records = variant_corpus
    ious = []
    from PIL import Image
    for rec in records[:150]:
        path = Path(rec.image_path)
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(root / "masks" / path.name) as tm:
            truth = np.asarray(tm.convert("L")) > 127
        mask = segmentation.compute_leaf_mask(arr)
        ious.append(segmentation.mask_iou(mask, truth))
    mean_iou = float(np.mean(ious))

    rng = np.random.default_rng(11)
    worst_hsb = worst_lab = 0.0
    for rgb in rng.random((200, 3)):
        h, s, v = segmentation.rgb_to_hsb(rgb)
        oh, os_, ov = colorsys.rgb_to_hsv(*rgb)
        worst_hsb = max(worst_hsb, abs(h / 360.0 - oh), abs(s - os_),
                        abs(v - ov))
        lab = segmentation.rgb_to_lab(rgb)
        ref = _reference_lab(rgb)
        worst_lab = max(worst_lab, *(abs(a - b) for a, b in zip(lab, ref)))

    ok = mean_iou >= 0.90 and worst_hsb <= 1e-6 and worst_lab <= 1e-6
    verdict(11, "segmentation quality", ok,
            f"mean IoU {mean_iou:.3f} >= 0.90; HSB delta {worst_hsb:.1e}, "
            f"Lab delta {worst_lab:.1e}")


def test_criterion_12_matrix_completeness(verdict, tiny_corpus, tmp_path):
    results = run_matrix(tiny_corpus, tmp_path / "full", epochs=1)
    with open(tmp_path / "full" / "table1.csv", newline="",
              encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    filled = sum(1 for row in rows[1:] for cell in row[2:] if cell.strip())
    t0 = time.time()
    smoke = run_matrix(tiny_corpus, tmp_path / "smoke",
                       pattern="*:*:Color:80-20", epochs=1)
    smoke_time = time.time() - t0
    ok = (len(results) == 60 and len(rows) == 16 and filled == 60
          and len(smoke) == 4 and smoke_time < 3600.0)
    verdict(12, "matrix completeness", ok,
            f"60/60 cells, table 15x4 fully populated; 4-cell smoke "
            f"{smoke_time:.0f}s")
