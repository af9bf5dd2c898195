"""Desk-scale classifiers: a one-hidden-layer MLP and a two-block CNN."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import ParameterSet, Tensor, affine, conv2d, flatten, maxpool2d, relu

ARCHS = ("mlp", "small_cnn")
DEFAULT_HIDDEN = {"mlp": (256,), "small_cnn": (32, 64, 128)}

CHECKPOINT_MAGIC = b"SMCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "small_cnn"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    hidden: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.hidden:
            object.__setattr__(self, "hidden", DEFAULT_HIDDEN[self.arch])
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        want = 1 if self.arch == "mlp" else 3
        if len(self.hidden) != want:
            raise ValueError(f"{self.arch} takes {want} hidden widths, got {self.hidden}")
        if min(self.hidden) < 1:
            raise ValueError(f"hidden widths must be positive, got {self.hidden}")
        if self.arch == "small_cnn" and (self.input_shape[1] % 4 or self.input_shape[2] % 4):
            raise ValueError(f"small_cnn needs height and width divisible by 4, got {self.input_shape}")


class Model:
    """Architecture plus the initial parameters drawn by :func:`build`.

    ``forward`` is a pure function of ``(params, x)``: pass gradient-tracking
    leaves under a tape to train, or plain arrays to evaluate.
    """

    def __init__(self, spec: ModelSpec, params: ParameterSet):
        self.spec = spec
        self.params = params

    def forward(self, params: Mapping[str, Tensor | np.ndarray], x) -> Tensor:
        if self.spec.arch == "mlp":
            h = relu(affine(flatten(_t(x)), params["fc1.w"], params["fc1.b"]))
            return affine(h, params["fc2.w"], params["fc2.b"])
        h = maxpool2d(relu(conv2d(x, params["conv1.w"], params["conv1.b"], padding=1)))
        h = maxpool2d(relu(conv2d(h, params["conv2.w"], params["conv2.b"], padding=1)))
        h = relu(affine(flatten(h), params["fc1.w"], params["fc1.b"]))
        return affine(h, params["fc2.w"], params["fc2.b"])

    def logits(self, x: np.ndarray, params: ParameterSet | None = None) -> np.ndarray:
        values = (params or self.params).values
        return self.forward(values, x).data


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> Model:
    """Instantiate ``spec`` with He-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    c, H, W = spec.input_shape
    K = spec.num_classes
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    if spec.arch == "mlp":
        (h,) = spec.hidden
        d = c * H * W
        shapes["fc1.w"] = ((d, h), d)
        shapes["fc1.b"] = ((h,), 0)
        shapes["fc2.w"] = ((h, K), h)
        shapes["fc2.b"] = ((K,), 0)
    else:
        c1, c2, h = spec.hidden
        shapes["conv1.w"] = ((c1, c, 3, 3), c * 9)
        shapes["conv1.b"] = ((c1,), 0)
        shapes["conv2.w"] = ((c2, c1, 3, 3), c1 * 9)
        shapes["conv2.b"] = ((c2,), 0)
        d = c2 * (H // 4) * (W // 4)
        shapes["fc1.w"] = ((d, h), d)
        shapes["fc1.b"] = ((h,), 0)
        shapes["fc2.w"] = ((h, K), h)
        shapes["fc2.b"] = ((K,), 0)
    values = {
        name: _he_uniform(rng, shape, fan_in, dtype) if fan_in else np.zeros(shape, dtype=dtype)
        for name, (shape, fan_in) in shapes.items()
    }
    return Model(spec, ParameterSet(values))


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        raise ValueError("top-1 accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_top1(model: Model, dataset, params: ParameterSet | None = None, batch_size: int = 500) -> float:
    """Top-1 accuracy of ``model`` on ``dataset`` with normalization only."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    params = params or model.params
    correct = 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = dataset.normalized(idx, dtype=next(iter(params.values.values())).dtype)
        pred = np.argmax(model.forward(params.values, x).data, axis=1)
        correct += int(np.sum(pred == dataset.labels[idx]))
    return correct / n


def save_checkpoint(path, params: ParameterSet) -> None:
    """Write named tensors as: magic, version byte, count, then per tensor
    name, shape header and a float64 little-endian payload."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<BI", CHECKPOINT_VERSION, len(params))
    for name, value in params.values.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, dtype=np.float64) -> ParameterSet:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    values = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            if pos + 8 * size > len(buf):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            values[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(dtype)
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return ParameterSet(values)
