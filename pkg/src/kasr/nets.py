"""Network construction, initialization and checkpointing.

Three architectures: the learned degradation net (HR -> LR), a compact
EDSR-style super-resolution net (LR -> HR), and a small patch discriminator
emitting real/fake logit maps. All are built from a handful of layer types
on top of the tensor engine.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be parsed or verified."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, in_ch, out_ch, ksize=3, stride=1, padding=1, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.padding = ksize, stride, padding
        self.weight = Tensor(
            np.zeros((out_ch, in_ch, ksize, ksize), dtype=dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LeakyReLU:
    def __init__(self, slope=0.2):
        self.slope = slope

    def __call__(self, x):
        return T.leaky_relu(x, self.slope)

    def params(self):
        return []


class MaxPool2d:
    def __init__(self, window, stride):
        self.window, self.stride = window, stride

    def __call__(self, x):
        return T.maxpool2d(x, self.window, self.stride)

    def params(self):
        return []


class DepthToSpace:
    def __init__(self, block):
        self.block = block

    def __call__(self, x):
        return T.depth_to_space(x, self.block)

    def params(self):
        return []


class ResidualBlock:
    """conv -> LeakyReLU -> conv with an additive skip, no normalization."""

    def __init__(self, features, slope=0.2):
        self.conv1 = Conv2d(features, features)
        self.act = LeakyReLU(slope)
        self.conv2 = Conv2d(features, features)

    def __call__(self, x):
        return T.add(x, self.conv2(self.act(self.conv1(x))))

    def params(self):
        return [("conv1." + n, p) for n, p in self.conv1.params()] + [
            ("conv2." + n, p) for n, p in self.conv2.params()
        ]


class Network:
    """Ordered layer graph with named parameter access.

    ``build`` records the builder kind and arguments so checkpoints can
    reconstruct the architecture before restoring weights.
    """

    def __init__(self, name, scale=None, build=None):
        self.name = name
        self.scale = scale
        self.build = build or {}

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def parameters(self):
        """List of (qualified name, tensor) in a fixed, deterministic order."""
        raise NotImplementedError

    def param_tensors(self):
        return [p for _, p in self.parameters()]

    def num_params(self):
        return sum(p.size for p in self.param_tensors())

    def zero_grad(self):
        for p in self.param_tensors():
            p.grad = None


class _Sequential(Network):
    def __init__(self, name, layers, scale=None, build=None):
        super().__init__(name, scale=scale, build=build)
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{n}", p) for n, p in layer.params())
        return out


class SRNet(Network):
    """Compact EDSR-style net: head, residual body with a global skip,
    sub-pixel upsampler, tail."""

    def __init__(self, scale, features, blocks):
        super().__init__(
            "sr",
            scale=scale,
            build={"kind": "sr", "args": {"scale": scale, "features": features, "blocks": blocks}},
        )
        self.head = Conv2d(3, features)
        self.body = [ResidualBlock(features) for _ in range(blocks)]
        if scale in (2, 3):
            self.upsampler = [
                Conv2d(features, features * scale * scale),
                DepthToSpace(scale),
            ]
        else:  # scale 4: two successive x2 stages
            self.upsampler = [
                Conv2d(features, features * 4),
                DepthToSpace(2),
                Conv2d(features, features * 4),
                DepthToSpace(2),
            ]
        self.tail = Conv2d(features, 3)

    def forward(self, x):
        h = self.head(x)
        y = h
        for block in self.body:
            y = block(y)
        y = T.add(y, h)
        for layer in self.upsampler:
            y = layer(y)
        return self.tail(y)

    def parameters(self):
        out = [("head." + n, p) for n, p in self.head.params()]
        for i, block in enumerate(self.body):
            out.extend((f"body.{i}.{n}", p) for n, p in block.params())
        for i, layer in enumerate(self.upsampler):
            out.extend((f"up.{i}.{n}", p) for n, p in layer.params())
        out.extend(("tail." + n, p) for n, p in self.tail.params())
        return out


def build_kans_net(scale, hidden=32, slope=0.2):
    """Degradation net: three 3x3 convs with LeakyReLU, max-pool decimation.

    Output spatial dims are input / scale; the final activation is the
    identity so training never clips gradients inside the graph.
    """
    if scale not in (1, 2, 3, 4):
        raise ContractError(f"build_kans_net: scale must be 1, 2, 3 or 4, got {scale}")
    if hidden < 1:
        raise ContractError(f"build_kans_net: hidden must be >= 1, got {hidden}")
    layers = [Conv2d(3, hidden), LeakyReLU(slope), Conv2d(hidden, hidden), LeakyReLU(slope)]
    if scale in (2, 4):
        layers.extend(MaxPool2d(2, 2) for _ in range(int(math.log2(scale))))
    elif scale == 3:
        layers.append(MaxPool2d(3, 3))
    layers.append(Conv2d(hidden, 3))
    return _Sequential(
        "kans",
        layers,
        scale=scale,
        build={"kind": "kans", "args": {"scale": scale, "hidden": hidden, "slope": slope}},
    )


def build_sr_net(scale, features=32, blocks=4):
    if scale not in (2, 3, 4):
        raise ContractError(f"build_sr_net: scale must be 2, 3 or 4, got {scale}")
    return SRNet(scale, features, blocks)


def build_discriminator(base=32):
    """Patch critic: two strided convs then a 3x3 conv to a logit map."""
    if base < 1:
        raise ContractError(f"build_discriminator: base must be >= 1, got {base}")
    layers = [
        Conv2d(3, base, stride=2),
        LeakyReLU(0.2),
        Conv2d(base, 2 * base, stride=2),
        LeakyReLU(0.2),
        Conv2d(2 * base, 1),
    ]
    return _Sequential(
        "disc", layers, build={"kind": "disc", "args": {"base": base}}
    )


_BUILDERS = {
    "kans": build_kans_net,
    "sr": build_sr_net,
    "disc": build_discriminator,
}


def build_from_spec(spec):
    kind = spec["kind"]
    if kind not in _BUILDERS:
        raise CheckpointError(f"unknown network kind {kind!r}")
    net = _BUILDERS[kind](**spec["args"])
    net.name = spec.get("name", net.name)
    return net


def init_params(net, seed):
    """Fill conv weights with uniform(-b, b), b = sqrt(1/fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    for name, p in net.parameters():
        if p.data.ndim == 4:
            _, in_ch, kh, kw = p.data.shape
            bound = math.sqrt(1.0 / (in_ch * kh * kw))
            p.data[...] = rng.uniform(-bound, bound, p.data.shape).astype(p.dtype)
        else:
            p.data[...] = 0.0
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# magic "KASR" | version u32 | config JSON (u32 len + bytes)
# | net specs JSON (u32 len + bytes) | entry count u32
# | per entry: name (u32 len + bytes), dtype tag u8 (0=f32, 1=f64),
#   ndim u8, dims u32 each, raw little-endian values.

MAGIC = b"KASR"
VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(nets, config, path):
    """Write nets and the config echo; the round trip is bit-exact."""
    config_dict = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    specs = [dict(net.build, name=net.name) for net in nets]
    entries = []
    for net in nets:
        for name, p in net.parameters():
            entries.append((f"{net.name}.{name}", p.data))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for blob in (json.dumps(config_dict), json.dumps(specs)):
            raw = blob.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            raw_name = name.encode("utf-8")
            tag = 0 if data.dtype == np.float32 else 1
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", tag, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh, n, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path):
    """Rebuild the stored networks and TrainConfig from a checkpoint file."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unknown checkpoint version {version}")
        blobs = []
        for what in ("config", "net specs"):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, what + " length"))
            blobs.append(_read_exact(fh, length, what).decode("utf-8"))
        config_dict, specs = json.loads(blobs[0]), json.loads(blobs[1])
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, "entry header"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag} for {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"values of {name}")
            entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    nets = []
    for spec in specs:
        net = build_from_spec(spec)
        for name, p in net.parameters():
            key = f"{net.name}.{name}"
            if key not in entries:
                raise CheckpointError(f"checkpoint missing parameter {key}")
            stored = entries[key]
            if stored.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {key}: {stored.shape} vs {p.data.shape}"
                )
            p.data = stored.astype(stored.dtype, copy=False)
        nets.append(net)

    from .trainer import TrainConfig  # deferred: trainer imports this module

    return nets, TrainConfig.from_dict(config_dict)
