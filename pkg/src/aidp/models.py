"""Classifier with low/high feature taps and the two-branch discriminator.

Parameters live in plain ``dict[str, np.ndarray]``.  A forward pass wraps
them as tensors, either as constants (inference, attacks, purification) or
as differentiable leaves (training).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

MAGIC = b"AIDP"
FORMAT_VERSION = 1
TYPE_TAGS = {"classifier": 1, "discriminator": 2}

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: Tuple[int, int, int] = (1, 32, 32)
    widths: Tuple[int, ...] = (16, 32, 64)
    num_classes: int = 4
    tap_low: int = 0
    tap_high: int = 2
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W) with positive extents, got {self.input_shape}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("widths must be a non-empty list of positive channel counts")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0 <= self.tap_low < self.tap_high < self.num_blocks:
            raise ConfigError(
                f"need 0 <= tap_low < tap_high < {self.num_blocks}, got {self.tap_low}, {self.tap_high}"
            )
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel and stride must be positive")
        h, w = self.input_shape[1:]
        for _ in self.widths:
            h = (h + 2 * (self.kernel // 2) - self.kernel) // self.stride + 1
            w = (w + 2 * (self.kernel // 2) - self.kernel) // self.stride + 1
            if h < 1 or w < 1:
                raise ConfigError("input too small for the requested number of downsampling blocks")

    def tap_shapes(self) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
        """(C, H, W) of the low and high taps."""
        shapes = []
        h, w = self.input_shape[1:]
        pad = self.kernel // 2
        for width in self.widths:
            h = (h + 2 * pad - self.kernel) // self.stride + 1
            w = (w + 2 * pad - self.kernel) // self.stride + 1
            shapes.append((width, h, w))
        return shapes[self.tap_low], shapes[self.tap_high]


@dataclass(frozen=True)
class DiscriminatorSpec:
    c_low: int
    c_high: int
    branch_widths: Tuple[int, ...] = (64, 64)
    trunk_widths: Tuple[int, ...] = (64, 32)
    taps: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "branch_widths", tuple(int(v) for v in self.branch_widths))
        object.__setattr__(self, "trunk_widths", tuple(int(v) for v in self.trunk_widths))

    @classmethod
    def full_width(cls, c_low: int, c_high: int, three_hidden: bool = False, taps: str = "both") -> "DiscriminatorSpec":
        """Full-width layout: branches of 1024, trunk 1024 -> 512 -> 1."""
        depth = 3 if three_hidden else 2
        return cls(c_low, c_high, (1024,) * depth, (1024, 512), taps)

    @classmethod
    def for_classifier(cls, cspec: ClassifierSpec, **kw) -> "DiscriminatorSpec":
        (cl, _, _), (ch, _, _) = cspec.tap_shapes()
        return cls(cl, ch, **kw)

    @property
    def uses_low(self) -> bool:
        return self.taps in ("both", "low_only")

    @property
    def uses_high(self) -> bool:
        return self.taps in ("both", "high_only")

    def validate(self) -> None:
        if self.taps not in ("both", "low_only", "high_only"):
            raise ConfigError(f"taps must be both, low_only or high_only, got {self.taps!r}")
        if self.c_low < 1 or self.c_high < 1:
            raise ConfigError("tap channel counts must be positive")
        if not self.branch_widths or min(self.branch_widths) < 1:
            raise ConfigError("branch_widths must be a non-empty list of positive widths")
        if any(w < 1 for w in self.trunk_widths):
            raise ConfigError("trunk_widths must be positive")

    @property
    def trunk_input_width(self) -> int:
        return self.branch_widths[-1] * (int(self.uses_low) + int(self.uses_high))


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class ClassifierModel:
    spec: ClassifierSpec
    params: Params
    frozen: bool = False

    def param_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        if requires_grad and self.frozen:
            raise ConfigError("classifier parameters are frozen")
        return T.parameters(self.params.items(), requires_grad)

    def forward(self, x: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tuple[Tensor, Tensor, Tensor]:
        return classifier_forward(self, x, params)

    def __call__(self, x: Tensor) -> Tensor:
        return classifier_forward(self, x)[0]

    def logits(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self(T.constant(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes))

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)

    def freeze(self) -> "ClassifierModel":
        self.frozen = True
        return self

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.spec, {k: v.copy() for k, v in self.params.items()}, self.frozen)


@dataclass
class DiscriminatorModel:
    spec: DiscriminatorSpec
    params: Params

    def param_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return T.parameters(self.params.items(), requires_grad)

    def logit(self, h_low: Tensor, h_high: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        return discriminator_logit(self, h_low, h_high, params)

    def __call__(self, h_low: Tensor, h_high: Tensor) -> Tensor:
        return discriminate(self, h_low, h_high)

    def copy(self) -> "DiscriminatorModel":
        return DiscriminatorModel(self.spec, {k: v.copy() for k, v in self.params.items()})


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> ClassifierModel:
    """He-initialised classifier with zero biases, deterministic in ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = spec.input_shape[0]
    k = spec.kernel
    for i, width in enumerate(spec.widths):
        fan_in = c_in * k * k
        params[f"block{i}.weight"] = _he(rng, (width, c_in, k, k), fan_in)
        params[f"block{i}.bias"] = np.zeros(width)
        c_in = width
    params["head.weight"] = _he(rng, (spec.num_classes, c_in), c_in)
    params["head.bias"] = np.zeros(spec.num_classes)
    return ClassifierModel(spec, params)


def classifier_forward(
    model: ClassifierModel, x: Tensor, params: Optional[Dict[str, Tensor]] = None
) -> Tuple[Tensor, Tensor, Tensor]:
    """Logits [N,K] plus the post-ReLU outputs of the two tap blocks."""
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"classifier expects input [N, {', '.join(map(str, spec.input_shape))}], got {x.shape}")
    p = params if params is not None else model.param_tensors()
    h = x
    taps = {}
    for i in range(spec.num_blocks):
        h = T.relu(T.conv2d(h, p[f"block{i}.weight"], p[f"block{i}.bias"], spec.stride, spec.kernel // 2))
        taps[i] = h
    logits = T.affine(T.global_average_pool(h), p["head.weight"], p["head.bias"])
    return logits, taps[spec.tap_low], taps[spec.tap_high]


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> DiscriminatorModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Params = {}
    for branch, width_in in (("low", spec.c_low), ("high", spec.c_high)):
        if (branch == "low" and not spec.uses_low) or (branch == "high" and not spec.uses_high):
            continue
        for i, width in enumerate(spec.branch_widths):
            params[f"{branch}.{i}.weight"] = _he(rng, (width, width_in), width_in)
            params[f"{branch}.{i}.bias"] = np.zeros(width)
            width_in = width
    width_in = spec.trunk_input_width
    for i, width in enumerate(spec.trunk_widths):
        params[f"trunk.{i}.weight"] = _he(rng, (width, width_in), width_in)
        params[f"trunk.{i}.bias"] = np.zeros(width)
        width_in = width
    params["out.weight"] = _he(rng, (1, width_in), width_in)
    params["out.bias"] = np.zeros(1)
    return DiscriminatorModel(spec, params)


def _mlp(h: Tensor, p: Dict[str, Tensor], prefix: str, depth: int) -> Tensor:
    for i in range(depth):
        h = T.relu(T.affine(h, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"]))
    return h


def discriminator_logit(
    model: DiscriminatorModel, h_low: Tensor, h_high: Tensor, params: Optional[Dict[str, Tensor]] = None
) -> Tensor:
    """Pre-sigmoid discriminator output, shape [N]."""
    spec = model.spec
    if h_low.ndim != 4 or h_low.shape[1] != spec.c_low:
        raise ShapeError(f"h_low must be [N, {spec.c_low}, H, W], got {h_low.shape}")
    if h_high.ndim != 4 or h_high.shape[1] != spec.c_high:
        raise ShapeError(f"h_high must be [N, {spec.c_high}, H, W], got {h_high.shape}")
    if h_low.shape[0] != h_high.shape[0]:
        raise ShapeError("h_low and h_high batch sizes differ")
    p = params if params is not None else model.param_tensors()
    depth = len(spec.branch_widths)
    parts = []
    if spec.uses_low:
        parts.append(_mlp(T.global_average_pool(h_low), p, "low", depth))
    if spec.uses_high:
        parts.append(_mlp(T.global_average_pool(h_high), p, "high", depth))
    h = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    h = _mlp(h, p, "trunk", len(spec.trunk_widths))
    z = T.affine(h, p["out.weight"], p["out.bias"])
    return _flatten_column(z)


def _flatten_column(z: Tensor) -> Tensor:
    n = z.shape[0]
    return Tensor._result(z.data.reshape(n), "squeeze", (z,), lambda g: (g.reshape(n, 1),))


def discriminate(model: DiscriminatorModel, h_low: Tensor, h_high: Tensor) -> Tensor:
    """Probability that each example is adversarial, shape [N], strictly inside (0, 1)."""
    return T.sigmoid(discriminator_logit(model, h_low, h_high))


def parameter_count(model: Union[ClassifierModel, DiscriminatorModel]) -> int:
    return int(sum(v.size for v in model.params.values()))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _spec_record(model) -> bytes:
    return json.dumps(dataclasses.asdict(model.spec), sort_keys=True, separators=(",", ":")).encode()


def model_bytes(model: Union[ClassifierModel, DiscriminatorModel]) -> bytes:
    kind = "classifier" if isinstance(model, ClassifierModel) else "discriminator"
    spec = _spec_record(model)
    out = [MAGIC, struct.pack("<IB", FORMAT_VERSION, TYPE_TAGS[kind]), struct.pack("<I", len(spec)), spec]
    out.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        encoded = name.encode()
        out.append(struct.pack("<H", len(encoded)) + encoded)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_model(model: Union[ClassifierModel, DiscriminatorModel], path) -> None:
    Path(path).write_bytes(model_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_bytes(buf: bytes, expect: Optional[str] = None) -> Union[ClassifierModel, DiscriminatorModel]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a model file", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}", 4)
    tag_pos = r.pos
    (tag,) = r.unpack("<B", "type tag")
    kinds = {v: k for k, v in TYPE_TAGS.items()}
    if tag not in kinds:
        raise FormatError(f"unknown type tag {tag}", tag_pos)
    kind = kinds[tag]
    if expect is not None and kind != expect:
        raise FormatError(f"type tag says {kind}, expected {expect}", tag_pos)
    (spec_len,) = r.unpack("<I", "spec length")
    spec_pos = r.pos
    try:
        spec_dict = json.loads(r.take(spec_len, "spec record").decode())
        spec = ClassifierSpec(**spec_dict) if kind == "classifier" else DiscriminatorSpec(**spec_dict)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed spec record: {exc}", spec_pos) from None
    (count,) = r.unpack("<I", "parameter count")
    params: Params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "parameter name").decode()
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if ndim else 1
        payload = r.take(8 * size, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last parameter", r.pos)
    model = ClassifierModel(spec, params) if kind == "classifier" else DiscriminatorModel(spec, params)
    reference = build_classifier(spec) if kind == "classifier" else build_discriminator(spec)
    for name, ref in reference.params.items():
        if name not in params or params[name].shape != ref.shape:
            raise FormatError(f"parameter {name!r} missing or mis-shaped")
    return model


def load_model(path, expect: Optional[str] = None) -> Union[ClassifierModel, DiscriminatorModel]:
    return model_from_bytes(Path(path).read_bytes(), expect)
