"""Network builder, init, checkpoint, and transfer-reset tests."""

import numpy as np
import pytest

from leafcnn.layers import Inception
from leafcnn.networks import (
    Checkpoint,
    CheckpointError,
    InitPolicy,
    build,
    build_alexnet38,
    build_desk_variant,
    build_googlenet38,
    count_params,
    load_checkpoint,
    net_from_checkpoint,
    save_checkpoint,
    transfer_reset,
)
from leafcnn.tensor import ShapeMismatchError


def alexnet_param_sheet():
    """Independent layer-arithmetic sheet for the 38-class AlexNet."""
    convs = [  # (cout, cin, k)
        (96, 3, 11), (256, 96, 5), (384, 256, 3), (384, 384, 3), (256, 384, 3),
    ]
    fcs = [(9216, 4096), (4096, 4096), (4096, 38)]
    total = sum(co * ci * k * k + co for co, ci, k in convs)
    total += sum(d * m + m for d, m in fcs)
    return total


GOOGLENET_INCEPTIONS = [  # (cin, b1, b3r, b3, b5r, b5, bpool)
    (192, 64, 96, 128, 16, 32, 32),
    (256, 128, 128, 192, 32, 96, 64),
    (480, 192, 96, 208, 16, 48, 64),
    (512, 160, 112, 224, 24, 64, 64),
    (512, 128, 128, 256, 24, 64, 64),
    (512, 112, 144, 288, 32, 64, 64),
    (528, 256, 160, 320, 32, 128, 128),
    (832, 256, 160, 320, 32, 128, 128),
    (832, 384, 192, 384, 48, 128, 128),
]


def inception_param_count(cin, b1, b3r, b3, b5r, b5, bp):
    return (cin * b1 + b1 + cin * b3r + b3r + 9 * b3r * b3 + b3 +
            cin * b5r + b5r + 25 * b5r * b5 + b5 + cin * bp + bp)


def googlenet_main_param_sheet():
    total = 3 * 64 * 49 + 64          # conv1 7x7
    total += 64 * 64 + 64             # conv2 reduce 1x1
    total += 64 * 192 * 9 + 192       # conv2 3x3
    total += sum(inception_param_count(*row) for row in GOOGLENET_INCEPTIONS)
    total += 1024 * 38 + 38           # loss3 classifier
    return total


@pytest.fixture(scope="module")
def alexnet():
    return build_alexnet38()


@pytest.fixture(scope="module")
def googlenet():
    return build_googlenet38()


class TestAlexNet:

    def test_fc8_extent_is_38(self, alexnet):
        assert alexnet.node("fc8").layer.dout == 38

    def test_dropout_after_fc6_and_fc7(self, alexnet):
        names = [n.name for n in alexnet.nodes]
        dropouts = [n.name for n in alexnet.nodes if n.layer.kind == "Dropout"]
        assert len(dropouts) == 2
        for d in dropouts:
            assert alexnet.node(d).layer.ratio == 0.5
        # Dropout nodes sit later in the graph than their fc layers.
        assert names.index(dropouts[0]) > names.index("fc6")
        assert names.index(dropouts[1]) > names.index("fc7")

    def test_layer_ordering(self, alexnet):
        kinds = [n.layer.kind for n in alexnet.nodes]
        assert kinds.count("Conv") == 5
        assert kinds.count("FullyConnected") == 3
        assert kinds.count("LRN") == 2
        assert kinds.count("MaxPool") == 3

    def test_zero_input_forward_finite(self, alexnet):
        heads = alexnet.forward(np.zeros((1, 3, 227, 227), np.float32))
        logits = heads[alexnet.main_head]
        assert logits.shape == (1, 38)
        assert np.isfinite(logits).all()

    def test_param_count_matches_arithmetic_sheet(self, alexnet):
        assert count_params(alexnet) == alexnet_param_sheet()

    def test_param_count_in_acceptance_band(self, alexnet):
        assert 55e6 <= count_params(alexnet) <= 63e6


class TestGoogLeNet:

    def test_nine_inception_modules(self, googlenet):
        assert sum(1 for n in googlenet.nodes if isinstance(n.layer, Inception)) == 9

    def test_three_38way_classifiers(self, googlenet):
        clfs = [n for n in googlenet.nodes
                if n.layer.kind == "FullyConnected" and n.layer.dout == 38]
        assert len(clfs) == 3

    def test_head_loss_weights(self, googlenet):
        weights = dict(googlenet.heads)
        assert weights[googlenet.main_head] == 1.0
        aux = [w for name, w in googlenet.heads if name != googlenet.main_head]
        assert aux == [0.3, 0.3]

    def test_zero_input_forward_finite(self, googlenet):
        heads = googlenet.forward(np.zeros((1, 3, 224, 224), np.float32))
        for logits in heads.values():
            assert logits.shape == (1, 38)
            assert np.isfinite(logits).all()

    def test_main_path_param_count_matches_sheet(self, googlenet):
        assert count_params(googlenet, main_path_only=True) == googlenet_main_param_sheet()

    def test_main_path_count_in_acceptance_band(self, googlenet):
        assert 4e6 <= count_params(googlenet, main_path_only=True) <= 8e6

    def test_inception_channel_rows(self, googlenet):
        rows = [(n.layer.cin,) + n.layer.spec for n in googlenet.nodes
                if isinstance(n.layer, Inception)]
        assert rows == GOOGLENET_INCEPTIONS


class TestDeskVariants:
    @pytest.mark.parametrize("arch", ["alexnet_mini", "googlenet_mini"])
    @pytest.mark.parametrize("size", [32, 64])
    def test_classifier_extent(self, arch, size):
        net = build_desk_variant(arch, class_count=38, input_size=size)
        heads = net.forward(np.zeros((1, 3, size, size), np.float32))
        assert heads[net.main_head].shape == (1, 38)

    def test_unsupported_input_size(self):
        with pytest.raises(ValueError):
            build_desk_variant("alexnet_mini", input_size=48)

    def test_googlenet_mini_has_concat(self):
        net = build_desk_variant("googlenet_mini")
        assert any(isinstance(n.layer, Inception) for n in net.nodes)

    def test_param_counts_below_one_twentieth(self):
        full_alex = alexnet_param_sheet()
        full_goog = googlenet_main_param_sheet()
        mini_alex = count_params(build_desk_variant("alexnet_mini"))
        mini_goog = count_params(build_desk_variant("googlenet_mini"))
        assert mini_alex < full_alex / 20
        assert mini_goog < full_goog / 20


class TestInitPolicy:
    def test_seeded_determinism(self):
        a = build_desk_variant("alexnet_mini", init=InitPolicy(seed=5))
        b = build_desk_variant("alexnet_mini", init=InitPolicy(seed=5))
        for key, arr in a.parameters().items():
            np.testing.assert_array_equal(arr, b.parameters()[key])

    def test_different_seeds_differ(self):
        a = build_desk_variant("alexnet_mini", init=InitPolicy(seed=1))
        b = build_desk_variant("alexnet_mini", init=InitPolicy(seed=2))
        diffs = [not np.array_equal(arr, b.parameters()[key])
                 for key, arr in a.parameters().items() if arr.ndim >= 2]
        assert any(diffs)

    def test_biases_zero(self):
        net = build_desk_variant("alexnet_mini", init=InitPolicy(seed=0))
        for key, arr in net.parameters().items():
            if key.endswith("bias"):
                np.testing.assert_array_equal(arr, 0.0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = build_desk_variant("alexnet_mini", init=InitPolicy(seed=3))
        path = tmp_path / "net.vgnt"
        save_checkpoint(net, path)
        ckpt = load_checkpoint(path)
        assert ckpt.arch == "alexnet_mini"
        assert ckpt.class_count == 38
        params = net.parameters()
        assert set(ckpt.tensors) == set(params)
        for key, arr in params.items():
            np.testing.assert_array_equal(ckpt.tensors[key], arr)

    def test_truncated_file_rejected(self, tmp_path):
        net = build_desk_variant("alexnet_mini", init=InitPolicy(seed=3))
        path = tmp_path / "net.vgnt"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        for cut in (4, 9, len(blob) // 2, len(blob) - 4):
            (tmp_path / "cut.vgnt").write_bytes(blob[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "cut.vgnt")

    def test_corrupted_data_rejected(self, tmp_path):
        net = build_desk_variant("alexnet_mini", init=InitPolicy(seed=3))
        path = tmp_path / "net.vgnt"
        save_checkpoint(net, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.vgnt"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_net_from_checkpoint(self, tmp_path):
        net = build_desk_variant("googlenet_mini", init=InitPolicy(seed=4))
        path = tmp_path / "net.vgnt"
        save_checkpoint(net, path)
        rebuilt = net_from_checkpoint(load_checkpoint(path))
        for key, arr in net.parameters().items():
            np.testing.assert_array_equal(rebuilt.parameters()[key], arr)


class TestTransferReset:
    def _pretrained(self, arch="alexnet_mini", class_count=38):
        net = build_desk_variant(arch, class_count=class_count,
                                 init=InitPolicy(seed=9))
        return net, Checkpoint(arch, class_count, 32, net.parameters())

    def test_reset_layer_changes_only_reset_slots(self):
        src, ckpt = self._pretrained()
        dst = build_desk_variant("alexnet_mini", init=InitPolicy(seed=20))
        clf = [n.name for n in dst.nodes if n.layer.kind == "FullyConnected"][-1]
        transfer_reset(dst, ckpt, {clf})
        for key, arr in dst.parameters().items():
            layer = key.rpartition("/")[0]
            if layer == clf:
                continue
            np.testing.assert_array_equal(arr, ckpt.tensors[key])
        # The classifier weight was actually reinitialized away.
        assert not np.array_equal(dst.parameters()[f"{clf}/weight"],
                                  ckpt.tensors[f"{clf}/weight"])

    def test_empty_reset_set_is_identity(self):
        _, ckpt = self._pretrained()
        dst = build_desk_variant("alexnet_mini", init=InitPolicy(seed=21))
        transfer_reset(dst, ckpt, set())
        for key, arr in dst.parameters().items():
            np.testing.assert_array_equal(arr, ckpt.tensors[key])

    def test_reset_across_class_counts(self):
        # Pretrained on 14 classes, target 38: only the classifier differs.
        src, ckpt = self._pretrained(class_count=14)
        dst = build_desk_variant("alexnet_mini", class_count=38,
                                 init=InitPolicy(seed=22))
        clf = [n.name for n in dst.nodes if n.layer.kind == "FullyConnected"][-1]
        ckpt.tensors = {k: v for k, v in ckpt.tensors.items()
                        if k.rpartition("/")[0] != clf}
        transfer_reset(dst, ckpt, {clf})
        assert dst.node(clf).layer.dout == 38

    def test_unknown_reset_name(self):
        _, ckpt = self._pretrained()
        dst = build_desk_variant("alexnet_mini")
        with pytest.raises(KeyError):
            transfer_reset(dst, ckpt, {"nope"})

    def test_shape_mismatch_outside_reset_set(self):
        _, ckpt = self._pretrained(class_count=14)
        dst = build_desk_variant("alexnet_mini", class_count=38)
        with pytest.raises(ShapeMismatchError):
            transfer_reset(dst, ckpt, set())


class TestBuildDispatch:
    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            build("vgg16")
