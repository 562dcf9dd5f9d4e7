"""Layer stack and model assembly for the binary-embedding convnet.

The embedding layer computes tanh(relu(batchnorm(x @ W + b))), which keeps
every output in [0, 1) and concentrates trained activations near {0, 1}.
The classifier is a plain linear layer that consumes only the embedding
output.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, FormatError

VALID_CODE_LENGTHS = (16, 24, 32, 48, 64, 128)

CHECKPOINT_MAGIC = b"DBEC"
CHECKPOINT_VERSION = 1


def dbe_activation_scalar(t: float) -> float:
    """Scalar reference for the embedding nonlinearity: tanh(max(0, t))."""
    return math.tanh(max(0.0, t))


@dataclass
class ModelConfig:
    code_length: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    dense_width: int = 1000
    input_shape: tuple[int, int, int] = (1, 28, 28)  # C, H, W
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.input_shape = tuple(self.input_shape)
        if self.code_length not in VALID_CODE_LENGTHS:
            raise ConfigurationError(
                f"code_length must be one of {VALID_CODE_LENGTHS}, "
                f"got {self.code_length}"
            )
        if min(self.conv_channels) < 1 or self.dense_width < 1 or self.num_classes < 1:
            raise ConfigurationError("all widths must be positive")
        c, h, w = self.input_shape
        if c < 1 or h % 4 or w % 4:
            raise ConfigurationError(
                f"input shape {self.input_shape} must have positive channels and "
                "spatial dims divisible by 4 (two 2x2 pooling stages)"
            )

    def to_dict(self) -> dict:
        return {
            "code_length": self.code_length,
            "conv_channels": list(self.conv_channels),
            "dense_width": self.dense_width,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            code_length=d["code_length"],
            conv_channels=tuple(d["conv_channels"]),
            dense_width=d["dense_width"],
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            seed=d.get("seed", 0),
        )


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, rng, cin, cout, dtype, k=3, stride=1, padding=1):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(
            _he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm:
    def __init__(self, num_features, dtype, momentum=0.9, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode):
        return ad.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=(mode == "train"),
            momentum=self.momentum,
            eps=self.eps,
        )


class ReLU:
    def params(self):
        return {}

    def forward(self, x, mode):
        return ad.relu(x)


class MaxPool2x2:
    def params(self):
        return {}

    def forward(self, x, mode):
        return ad.maxpool2x2(x)


class Flatten:
    def params(self):
        return {}

    def forward(self, x, mode):
        return ad.reshape(x, (x.shape[0], -1))


class Dense:
    def __init__(self, rng, din, dout, dtype, init="he"):
        if init == "he":
            w = _he_uniform(rng, (din, dout), din, dtype)
        else:
            w = _glorot_uniform(rng, (din, dout), din, dout, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, mode):
        return ad.add(ad.matmul(x, self.weight), self.bias)


class DBELayer:
    """Binary embedding head: linear projection, batch norm over the code
    features, then relu and tanh. Keeps a handle on the pre-activation T
    (post-batchnorm) for density analysis."""

    def __init__(self, rng, d, code_length, dtype):
        self.code_length = code_length
        self.project = Dense(rng, d, code_length, dtype, init="glorot")
        self.norm = BatchNorm(code_length, dtype)
        self.last_preactivation: Tensor | None = None

    def params(self):
        out = {}
        for k, v in self.project.params().items():
            out[f"project.{k}"] = v
        for k, v in self.norm.params().items():
            out[f"norm.{k}"] = v
        return out

    def state(self):
        return {f"norm.{k}": v for k, v in self.norm.state().items()}

    def forward(self, x, mode):
        t = self.norm.forward(self.project.forward(x, mode), mode)
        self.last_preactivation = t
        return ad.tanh_act(ad.relu(t))


class Model:
    """Ordered layer stack ending in a DBELayer followed by a linear
    classifier over the embedding output."""

    def __init__(self, config: ModelConfig, layers, embed: DBELayer, classifier: Dense):
        self.config = config
        self.layers = layers  # backbone, excludes embed and classifier
        self.embed = embed
        self.classifier = classifier

    def parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for key, tensor in layer.params().items():
                named[f"layer{i}.{key}"] = tensor
        for key, tensor in self.embed.params().items():
            named[f"embed.{key}"] = tensor
        for key, tensor in self.classifier.params().items():
            named[f"classifier.{key}"] = tensor
        return named

    def state_buffers(self) -> dict[str, np.ndarray]:
        named: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "state"):
                for key, buf in layer.state().items():
                    named[f"layer{i}.{key}"] = buf
        for key, buf in self.embed.state().items():
            named[f"embed.{key}"] = buf
        return named

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.parameters().items()}
        out.update({k: b.copy() for k, b in self.state_buffers().items()})
        return out

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        buffers = self.state_buffers()
        for key, arr in snap.items():
            if key in params:
                np.copyto(params[key].data, arr)
            elif key in buffers:
                np.copyto(buffers[key], arr)
            else:
                raise ConfigurationError(f"snapshot key {key!r} not in model")


def build_dbe_lenet(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Two conv/batchnorm/relu/pool blocks, a wide dense layer, the binary
    embedding head, and a linear classifier.

    Parameter draws happen in construction order from one seeded
    generator, so equal seeds give bit-identical models.
    """
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    c_in, h, w = cfg.input_shape
    c1, c2 = cfg.conv_channels
    layers = [
        Conv2d(rng, c_in, c1, dtype),
        BatchNorm(c1, dtype),
        ReLU(),
        MaxPool2x2(),
        Conv2d(rng, c1, c2, dtype),
        BatchNorm(c2, dtype),
        ReLU(),
        MaxPool2x2(),
        Flatten(),
        Dense(rng, c2 * (h // 4) * (w // 4), cfg.dense_width, dtype, init="he"),
        ReLU(),
    ]
    embed = DBELayer(rng, cfg.dense_width, cfg.code_length, dtype)
    classifier = Dense(rng, cfg.code_length, cfg.num_classes, dtype, init="glorot")
    return Model(cfg, layers, embed, classifier)


def forward_embed(model: Model, images: Tensor, mode: str = "infer"):
    """Run the full network. Returns (Z, logits, T) where Z is the
    embedding output in [0, 1), logits the classifier scores, and T the
    embedding pre-activation used for density analysis."""
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    expect = model.config.input_shape
    if images.data.ndim != 4 or tuple(images.data.shape[1:]) != expect:
        raise DimensionError(
            f"input shape {images.data.shape} does not match model input {expect}"
        )
    x = images
    for layer in model.layers:
        x = layer.forward(x, mode)
    z = model.embed.forward(x, mode)
    logits = model.classifier.forward(z, mode)
    return z, logits, model.embed.last_preactivation


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "DBEC" | u16 version | u32 json length | config json (utf-8)
# | u32 record count | records of:
#   u16 name length | name utf-8 | u8 ndim | ndim * u32 dims | f32 data
# All integers and floats little-endian. Round-trips are bit-exact.


def save_checkpoint(model: Model, path) -> None:
    if any(t.dtype != np.float32 for t in model.parameters().values()):
        raise ConfigurationError("checkpoints store float32 models only")
    records = {k: t.data for k, t in model.parameters().items()}
    records.update(model.state_buffers())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"checkpoint truncated reading {what} at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic at byte 0")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len, "config")))
    (count,) = struct.unpack("<I", take(4, "record count"))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        records[name] = data.reshape(dims).copy()
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes at byte {off}")

    model = build_dbe_lenet(cfg)
    model.load_snapshot(records)
    return model
