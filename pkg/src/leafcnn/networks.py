"""Network graphs: the adapted 38-class AlexNet and GoogLeNet, scaled desk
variants, transfer-learning weight reset, parameter counting and checkpoints.

A NetworkGraph is an ordered, topologically sorted list of nodes; each node
names its inputs, so branching (inception internals are composite layers,
auxiliary classifiers are explicit branches) and the linear AlexNet both fit
the same structure. Heads are (node name, loss weight) pairs; evaluation
always uses the first (main) head.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import ShapeMismatchError

CHECKPOINT_MAGIC = b"VGNT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or mismatched checkpoint file."""


@dataclass
class InitPolicy:
    """Parameter initialization: fan-in scaled uniform for conv weights,
    zero-mean Gaussian for fc weights, constant biases. Seeded and
    deterministic: the same seed yields identical initial parameters.

    fc_std=None (the default) scales the fc standard deviation by fan-in,
    sqrt(2 / fan_in); a float fixes it for every fc layer."""

    conv_gain: float = 2.0
    fc_std: float = None
    bias_const: float = 0.0
    seed: int = 0

    def initialize(self, net):
        rng = np.random.default_rng(self.seed)
        for node in net.nodes:
            self._init_layer(node.layer, rng)

    def init_layers(self, net, names):
        """Reinitialize only the named layers, drawing from a fresh stream."""
        rng = np.random.default_rng(self.seed)
        by_name = {node.name: node for node in net.nodes}
        for name in names:
            self._init_layer(by_name[name].layer, rng)

    def _init_layer(self, layer, rng):
        for slot in sorted(layer.params):
            p = layer.params[slot]
            if slot.endswith("bias"):
                p[...] = self.bias_const
            elif p.ndim >= 2:
                if p.ndim == 2:  # fc weight [D,M]
                    std = self.fc_std
                    if std is None:
                        std = float(np.sqrt(2.0 / p.shape[0]))
                    p[...] = rng.normal(0.0, std, size=p.shape)
                else:  # conv weight [Cout,Cin,kh,kw]
                    fan_in = int(np.prod(p.shape[1:]))
                    bound = float(np.sqrt(3.0 * self.conv_gain / fan_in))
                    p[...] = rng.uniform(-bound, bound, size=p.shape)
            else:
                p[...] = 0.0


@dataclass
class Node:
    name: str
    layer: L.Layer
    inputs: list


@dataclass
class NetworkGraph:
    arch: str
    class_count: int
    input_size: int
    nodes: list = field(default_factory=list)
    heads: list = field(default_factory=list)  # (node name, loss weight)

    def __post_init__(self):
        self._by_name = {n.name: n for n in self.nodes}

    def add(self, layer, inputs=("prev",)):
        if layer.name in self._by_name:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        prev = self.nodes[-1].name if self.nodes else "input"
        resolved = [prev if i == "prev" else i for i in inputs]
        node = Node(layer.name, layer, resolved)
        self.nodes.append(node)
        self._by_name[layer.name] = node
        return node

    def node(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}") from None

    @property
    def main_head(self):
        return self.heads[0][0]

    def forward(self, x, train=False, rng=None, capture=None):
        """Run the graph; returns {head name: logits}.

        When ``capture`` is a set of node names, their activations are
        returned as a second dict.
        """
        acts = {"input": x}
        captured = {}
        for node in self.nodes:
            ins = [acts[i] for i in node.inputs]
            arg = ins[0] if len(ins) == 1 and node.layer.kind != "Concat" else ins
            acts[node.name] = node.layer.forward(arg, train=train, rng=rng)
            if capture and node.name in capture:
                captured[node.name] = acts[node.name]
        heads = {name: acts[name] for name, _ in self.heads}
        if capture is not None:
            return heads, captured
        return heads

    def zero_grads(self):
        for node in self.nodes:
            node.layer.zero_grads()

    def backward(self, head_grads):
        """Reverse accumulation from {head name: dlogits}; fills layer grads."""
        grads = dict(head_grads)
        for node in reversed(self.nodes):
            dy = grads.pop(node.name, None)
            if dy is None:
                continue
            dx = node.layer.backward(dy)
            dxs = dx if isinstance(dx, list) else [dx]
            for inp, d in zip(node.inputs, dxs):
                if inp == "input":
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + d
                else:
                    grads[inp] = d

    def parameters(self):
        out = {}
        for node in self.nodes:
            for slot, arr in node.layer.params.items():
                out[f"{node.name}/{slot}"] = arr
        return out

    def gradients(self):
        out = {}
        for node in self.nodes:
            for slot, arr in node.layer.grads.items():
                out[f"{node.name}/{slot}"] = arr
        return out


def count_params(net, main_path_only=False):
    """Total parameter element count; main_path_only drops auxiliary-classifier
    layers (names starting with 'loss1/' or 'loss2/')."""
    total = 0
    for name, arr in net.parameters().items():
        if main_path_only and (name.startswith("loss1/") or name.startswith("loss2/")):
            continue
        total += arr.size
    return total


def _conv_relu(net, name, cin, cout, kernel, stride=1, pad=0, inputs=("prev",)):
    net.add(L.Conv2D(name, cin, cout, kernel, stride, pad), inputs)
    net.add(L.ReLU("relu_" + name))


def build_alexnet38(class_count=38, init=None):
    """38-output AlexNet: 5 conv + 3 fc, LRN+pool after conv1/conv2, pool
    after conv5, ReLU on the first 7 parameterized layers, dropout 0.5 on
    fc6/fc7. Input crop 227x227x3, ungrouped convolutions throughout."""
    net = NetworkGraph("alexnet", class_count, 227)
    _conv_relu(net, "conv1", 3, 96, 11, stride=4)          # 227 -> 55
    net.add(L.LRN("norm1"))
    net.add(L.MaxPool("pool1", 3, stride=2))               # 55 -> 27
    _conv_relu(net, "conv2", 96, 256, 5, pad=2)
    net.add(L.LRN("norm2"))
    net.add(L.MaxPool("pool2", 3, stride=2))               # 27 -> 13
    _conv_relu(net, "conv3", 256, 384, 3, pad=1)
    _conv_relu(net, "conv4", 384, 384, 3, pad=1)
    _conv_relu(net, "conv5", 384, 256, 3, pad=1)
    net.add(L.MaxPool("pool5", 3, stride=2))               # 13 -> 6
    net.add(L.Flatten("flat"))
    net.add(L.FullyConnected("fc6", 256 * 6 * 6, 4096))
    net.add(L.ReLU("relu_fc6"))
    net.add(L.Dropout("drop6", 0.5))
    net.add(L.FullyConnected("fc7", 4096, 4096))
    net.add(L.ReLU("relu_fc7"))
    net.add(L.Dropout("drop7", 0.5))
    net.add(L.FullyConnected("fc8", 4096, class_count))
    net.heads = [("fc8", 1.0)]
    (init or InitPolicy()).initialize(net)
    return net


_GOOGLENET_INCEPTIONS = [
    # name, b1, b3r, b3, b5r, b5, bpool
    ("inception_3a", 64, 96, 128, 16, 32, 32),
    ("inception_3b", 128, 128, 192, 32, 96, 64),
    ("inception_4a", 192, 96, 208, 16, 48, 64),
    ("inception_4b", 160, 112, 224, 24, 64, 64),
    ("inception_4c", 128, 128, 256, 24, 64, 64),
    ("inception_4d", 112, 144, 288, 32, 64, 64),
    ("inception_4e", 256, 160, 320, 32, 128, 128),
    ("inception_5a", 256, 160, 320, 32, 128, 128),
    ("inception_5b", 384, 192, 384, 48, 128, 128),
]


def _aux_classifier(net, prefix, from_node, cin, spatial, class_count):
    net.add(L.AvgPool(prefix + "/avgpool", 5, stride=3), (from_node,))
    out_sp = (spatial - 5) // 3 + 1
    net.add(L.Conv2D(prefix + "/conv", cin, 128, 1))
    net.add(L.ReLU(prefix + "/relu_conv"))
    net.add(L.Flatten(prefix + "/flat"))
    net.add(L.FullyConnected(prefix + "/fc", 128 * out_sp * out_sp, 1024))
    net.add(L.ReLU(prefix + "/relu_fc"))
    net.add(L.Dropout(prefix + "/drop", 0.7))
    net.add(L.FullyConnected(prefix + "/classifier", 1024, class_count))


def build_googlenet38(class_count=38, init=None, aux_loss_weight=0.3):
    """38-output GoogLeNet: stem, 9 inception modules, two auxiliary
    classifiers (loss1 after inception_4a, loss2 after inception_4d) and the
    main loss3 classifier. Training loss = main + 0.3 * each auxiliary; eval
    uses the main classifier only. Input crop 224x224x3."""
    net = NetworkGraph("googlenet", class_count, 224)
    _conv_relu(net, "conv1/7x7_s2", 3, 64, 7, stride=2, pad=3)   # 224 -> 112
    net.add(L.MaxPool("pool1/3x3_s2", 3, stride=2))              # 112 -> 55
    net.add(L.LRN("pool1/norm1"))
    _conv_relu(net, "conv2/3x3_reduce", 64, 64, 1)
    _conv_relu(net, "conv2/3x3", 64, 192, 3, pad=1)
    net.add(L.LRN("conv2/norm2"))
    net.add(L.MaxPool("pool2/3x3_s2", 3, stride=2))              # 55 -> 27
    cin = 192
    spatial = 27
    main = "pool2/3x3_s2"
    for name, b1, b3r, b3, b5r, b5, bpool in _GOOGLENET_INCEPTIONS:
        inc = L.Inception(name, cin, b1, b3r, b3, b5r, b5, bpool)
        net.add(inc, (main,))
        main = name
        cin = inc.out_channels(cin)
        if name == "inception_3b":
            net.add(L.MaxPool("pool3/3x3_s2", 3, stride=2), (main,))  # 27 -> 13
            main = "pool3/3x3_s2"
            spatial = 13
        elif name == "inception_4e":
            net.add(L.MaxPool("pool4/3x3_s2", 3, stride=2), (main,))  # 13 -> 6
            main = "pool4/3x3_s2"
            spatial = 6
        elif name == "inception_4a":
            _aux_classifier(net, "loss1", "inception_4a", cin, spatial, class_count)
        elif name == "inception_4d":
            _aux_classifier(net, "loss2", "inception_4d", cin, spatial, class_count)
    net.add(L.AvgPool("pool5/6x6_s1", spatial), ("inception_5b",))
    net.add(L.Flatten("pool5/flat"))
    net.add(L.Dropout("pool5/drop", 0.4))
    net.add(L.FullyConnected("loss3/classifier", cin, class_count))
    net.heads = [
        ("loss3/classifier", 1.0),
        ("loss1/classifier", aux_loss_weight),
        ("loss2/classifier", aux_loss_weight),
    ]
    (init or InitPolicy()).initialize(net)
    return net


def build_desk_variant(arch, class_count=38, input_size=32, init=None):
    """Channel-reduced mini architectures for desk-scale runs.

    AlexNetMini: 3 conv (one LRN+pool pair) + 2 fc + softmax head.
    GoogLeNetMini: stem conv -> pool -> 2 inception modules -> global average
    pool -> 1 fc classifier. Same layer kinds as the full builds.
    """
    if input_size not in (32, 64):
        raise ValueError(f"unsupported desk input size {input_size} (use 32 or 64)")
    if arch == "alexnet_mini":
        net = NetworkGraph(arch, class_count, input_size)
        _conv_relu(net, "conv1", 3, 12, 5, stride=2, pad=2)   # s -> s/2
        net.add(L.LRN("norm1"))
        net.add(L.MaxPool("pool1", 2, stride=2))              # s/2 -> s/4
        _conv_relu(net, "conv2", 12, 24, 3, pad=1)
        net.add(L.MaxPool("pool2", 2, stride=2))              # s/4 -> s/8
        _conv_relu(net, "conv3", 24, 48, 3, pad=1)
        net.add(L.MaxPool("pool3", 2, stride=2))              # s/8 -> s/16
        sp = input_size // 16
        net.add(L.Flatten("flat"))
        net.add(L.FullyConnected("fc4", 48 * sp * sp, 96))
        net.add(L.ReLU("relu_fc4"))
        net.add(L.Dropout("drop4", 0.5))
        net.add(L.FullyConnected("fc5", 96, class_count))
        net.heads = [("fc5", 1.0)]
    elif arch == "googlenet_mini":
        net = NetworkGraph(arch, class_count, input_size)
        _conv_relu(net, "conv1", 3, 12, 3, stride=2, pad=1)   # s -> s/2
        net.add(L.MaxPool("pool1", 2, stride=2))              # s/2 -> s/4
        inc_a = L.Inception("inception_a", 12, 8, 12, 16, 2, 4, 4)
        net.add(inc_a)                                        # 32 channels
        net.add(L.MaxPool("pool2", 2, stride=2))              # s/4 -> s/8
        inc_b = L.Inception("inception_b", 32, 16, 16, 24, 4, 8, 8)
        net.add(inc_b)                                        # 56 channels
        net.add(L.AvgPool("pool3", input_size // 8))          # global
        net.add(L.Flatten("flat"))
        net.add(L.Dropout("drop", 0.4))
        net.add(L.FullyConnected("classifier", 56, class_count))
        net.heads = [("classifier", 1.0)]
    else:
        raise ValueError(f"unknown desk architecture {arch!r}")
    (init or InitPolicy()).initialize(net)
    return net


_BUILDERS = {
    "alexnet": lambda class_count, input_size, init: build_alexnet38(class_count, init),
    "googlenet": lambda class_count, input_size, init: build_googlenet38(class_count, init),
    "alexnet_mini": lambda class_count, input_size, init: build_desk_variant(
        "alexnet_mini", class_count, input_size, init),
    "googlenet_mini": lambda class_count, input_size, init: build_desk_variant(
        "googlenet_mini", class_count, input_size, init),
}


def build(arch, class_count=38, input_size=None, init=None):
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}")
    return _BUILDERS[arch](class_count, input_size or 32, init)


@dataclass
class Checkpoint:
    arch: str
    class_count: int
    input_size: int
    tensors: dict  # "layer/slot" -> float32 ndarray


def save_checkpoint(net_or_ckpt, path):
    """Write the VGNT checkpoint format: magic, u16 version, length-prefixed
    UTF-8 JSON header (slot table with offsets, class_count, architecture
    tag), raw little-endian float32 data, then a 64-bit digest of the data
    region."""
    if isinstance(net_or_ckpt, NetworkGraph):
        ckpt = Checkpoint(
            net_or_ckpt.arch,
            net_or_ckpt.class_count,
            net_or_ckpt.input_size,
            net_or_ckpt.parameters(),
        )
    else:
        ckpt = net_or_ckpt
    entries = []
    blobs = []
    offset = 0
    for key in sorted(ckpt.tensors):
        layer, _, slot = key.rpartition("/")
        arr = np.ascontiguousarray(ckpt.tensors[key], dtype="<f4")
        entries.append({
            "layer": layer,
            "slot": slot,
            "shape": list(arr.shape),
            "offset": offset,
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "architecture": ckpt.arch,
        "class_count": ckpt.class_count,
        "input_size": ckpt.input_size,
        "entries": entries,
    }, sort_keys=True).encode("utf-8")
    data = b"".join(blobs)
    digest = hashlib.blake2b(data, digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data)
        fh.write(digest)


def load_checkpoint(path):
    """Read and verify a VGNT checkpoint. Raises CheckpointError on a corrupt
    header, truncated data, or digest mismatch; never returns a partial net."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a VGNT checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    hstart = 10
    if len(raw) < hstart + hlen + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    try:
        header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    data = raw[hstart + hlen:-8]
    digest = raw[-8:]
    if hashlib.blake2b(data, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: data digest mismatch")
    tensors = {}
    for ent in header["entries"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        end = start + count * 4
        if end > len(data):
            raise CheckpointError(f"{path}: slot {ent['layer']}/{ent['slot']} overruns data")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        tensors[f"{ent['layer']}/{ent['slot']}"] = arr.copy()
    return Checkpoint(
        header["architecture"], header["class_count"],
        header.get("input_size", 0), tensors,
    )


def transfer_reset(net, pretrained, reset_layers, init=None):
    """Copy all parameters from a pretrained checkpoint except the named
    reset layers, which are reinitialized. Every layer stays trainable."""
    init = init or InitPolicy(seed=1)
    names = {node.name for node in net.nodes}
    unknown = set(reset_layers) - names
    if unknown:
        raise KeyError(f"unknown reset layer name(s): {sorted(unknown)}")
    params = net.parameters()
    for key, arr in params.items():
        layer, _, _ = key.rpartition("/")
        if layer in reset_layers:
            continue
        src = pretrained.tensors.get(key)
        if src is None:
            raise ShapeMismatchError(f"checkpoint missing slot {key}")
        if src.shape != arr.shape:
            raise ShapeMismatchError(
                f"slot {key}: checkpoint shape {src.shape} != network {arr.shape}"
            )
        arr[...] = src
    init.init_layers(net, reset_layers)
    return net


def net_from_checkpoint(ckpt, init=None):
    """Rebuild the architecture named in a checkpoint and load its weights."""
    net = build(ckpt.arch, ckpt.class_count, ckpt.input_size or None, init)
    transfer_reset(net, ckpt, set())
    return net
