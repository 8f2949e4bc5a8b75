"""Small classifier architectures with per-layer activation tracing.

Three fixed architectures (mlp, small_cnn, small_resnet), deterministic
fan-in-scaled init, and a versioned binary checkpoint format. Forward
passes attach an ActivationTrace whose tensors stay part of the autodiff
graph, so energy objectives built on the trace are differentiable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    avgpool2d,
    bias_add,
    conv2d,
    flatten,
    matmul,
    maxpool2d,
    relu,
)

__all__ = [
    "ROLE_LAYER_INPUT",
    "ROLE_PRE_RELU",
    "ROLE_POST_RELU",
    "ROLE_LAYER_OUTPUT",
    "TraceEntry",
    "ActivationTrace",
    "Model",
    "CheckpointError",
    "build_model",
    "forward_traced",
    "predict",
    "extend_head",
    "weights_hash",
    "save_checkpoint",
    "load_checkpoint",
]

ROLE_LAYER_INPUT = "layer_input"
ROLE_PRE_RELU = "pre_relu"
ROLE_POST_RELU = "post_relu"
ROLE_LAYER_OUTPUT = "layer_output"

_ROLES = frozenset({ROLE_LAYER_INPUT, ROLE_PRE_RELU, ROLE_POST_RELU, ROLE_LAYER_OUTPUT})

ARCHITECTURES = ("mlp", "small_cnn", "small_resnet")


@dataclass
class TraceEntry:
    layer: str
    role: str
    tensor: Tensor
    dense_mac_count: int  # per sample; 0 for non-parametric roles

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown trace role {self.role!r}")


@dataclass
class ActivationTrace:
    """Ordered record of activations seen during one forward pass.

    ``layer_input`` entries exist for every parametric layer and carry its
    dense MAC count; ReLU layers record ``pre_relu``/``post_relu`` pairs;
    other layers record their output. A tensor shared between entries
    (e.g. a post-ReLU map that is also the next conv's input) appears in
    several entries but is counted once by density metrics.
    """

    entries: list[TraceEntry] = field(default_factory=list)
    n_samples: int = 0

    def add(self, layer: str, role: str, tensor: Tensor, dense_mac_count: int = 0) -> None:
        self.entries.append(TraceEntry(layer, role, tensor, dense_mac_count))

    def with_role(self, role: str) -> list[TraceEntry]:
        if role not in _ROLES:
            raise ValueError(f"unknown trace role {role!r}")
        return [e for e in self.entries if e.role == role]

    def unique_tensors(self) -> list[Tensor]:
        """Trace tensors deduplicated by identity, in first-seen order."""
        seen: set[int] = set()
        out: list[Tensor] = []
        for e in self.entries:
            if id(e.tensor) not in seen:
                seen.add(id(e.tensor))
                out.append(e.tensor)
        return out


# -- layers -------------------------------------------------------------


class _Linear:
    def __init__(self, name: str, w: Tensor, b: Tensor):
        self.name = name
        self.w = w
        self.b = b

    @property
    def mac_per_sample(self) -> int:
        return int(self.w.shape[0] * self.w.shape[1])

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        if trace is not None:
            trace.add(self.name, ROLE_LAYER_INPUT, x, self.mac_per_sample)
        return bias_add(matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class _Conv2d:
    def __init__(self, name: str, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0):
        self.name = name
        self.w = w
        self.b = b
        self.stride = stride
        self.padding = padding

    def mac_per_sample(self, in_hw: tuple[int, int]) -> int:
        o, c, kh, kw = self.w.shape
        h_out = (in_hw[0] + 2 * self.padding - kh) // self.stride + 1
        w_out = (in_hw[1] + 2 * self.padding - kw) // self.stride + 1
        return int(c * o * kh * kw * h_out * w_out)

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        if trace is not None:
            trace.add(self.name, ROLE_LAYER_INPUT, x, self.mac_per_sample(x.shape[2:]))
        return bias_add(conv2d(x, self.w, self.stride, self.padding), self.b)

    def parameters(self):
        return [self.w, self.b]


class _ReLU:
    def __init__(self, name: str):
        self.name = name

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        out = relu(x)
        if trace is not None:
            trace.add(self.name, ROLE_PRE_RELU, x)
            trace.add(self.name, ROLE_POST_RELU, out)
        return out

    def parameters(self):
        return []


class _MaxPool:
    def __init__(self, name: str, kernel: int):
        self.name = name
        self.kernel = kernel

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        out = maxpool2d(x, self.kernel)
        if trace is not None:
            trace.add(self.name, ROLE_LAYER_OUTPUT, out)
        return out

    def parameters(self):
        return []


class _AvgPool:
    def __init__(self, name: str, kernel: int):
        self.name = name
        self.kernel = kernel

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        out = avgpool2d(x, self.kernel)
        if trace is not None:
            trace.add(self.name, ROLE_LAYER_OUTPUT, out)
        return out

    def parameters(self):
        return []


class _Flatten:
    # pure reshape: produces no trace entry of its own
    def __init__(self, name: str):
        self.name = name

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        return flatten(x)

    def parameters(self):
        return []


class _Residual:
    """conv-relu-conv body with identity skip, closed by a ReLU.

    With all-zero body weights and nonnegative input the block is exactly
    the identity: relu(x + 0) == x.
    """

    def __init__(self, name: str, body: list):
        self.name = name
        self.body = body
        self.out_relu = _ReLU(f"{name}.relu_out")

    def apply(self, x: Tensor, trace: ActivationTrace | None) -> Tensor:
        y = x
        for layer in self.body:
            y = layer.apply(y, trace)
        return self.out_relu.apply(x + y, trace)

    def parameters(self):
        params = []
        for layer in self.body:
            params.extend(layer.parameters())
        return params


# -- model --------------------------------------------------------------


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or from another version."""


@dataclass
class Model:
    arch: str
    input_shape: tuple[int, ...]
    num_classes: int
    head_width: int
    layers: list
    masked_class: int | None = None

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    @property
    def head(self) -> _Linear:
        last = self.layers[-1]
        if not isinstance(last, _Linear):
            raise GraphError("model has no linear head")
        return last

    @property
    def dtype(self):
        return self.parameters()[0].data.dtype


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _conv_layer(name, rng, c_in, c_out, k, padding, dtype) -> _Conv2d:
    w = _he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
    return _Conv2d(name, w, _zeros(c_out, dtype), stride=1, padding=padding)


def _linear_layer(name, rng, d_in, d_out, dtype) -> _Linear:
    w = _he_normal(rng, (d_in, d_out), d_in, dtype)
    return _Linear(name, w, _zeros(d_out, dtype))


def build_model(arch: str, input_shape, num_classes: int, seed: int,
                dtype=np.float32) -> Model:
    """Deterministically initialise one of the fixed architectures."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    layers: list = []
    if arch == "mlp":
        if isinstance(input_shape, int):
            input_shape = (input_shape,)
        input_shape = tuple(int(s) for s in input_shape)
        d = int(np.prod(input_shape))
        if len(input_shape) != 1:
            raise ShapeError(f"mlp expects a flat input shape, got {input_shape}")
        hidden = 128
        layers = [
            _linear_layer("fc1", rng, d, hidden, dtype),
            _ReLU("relu1"),
            _linear_layer("fc2", rng, hidden, hidden, dtype),
            _ReLU("relu2"),
            _linear_layer("head", rng, hidden, num_classes, dtype),
        ]
    else:
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) != 3:
            raise ShapeError(f"{arch} expects a (C, H, W) input shape, got {input_shape}")
        c, h, w = input_shape
        if arch == "small_cnn":
            if h % 8 or w % 8:
                raise ShapeError(f"small_cnn needs spatial dims divisible by 8, got {(h, w)}")
            widths = (16, 32, 64)
            layers = []
            c_in = c
            for i, c_out in enumerate(widths, start=1):
                layers += [
                    _conv_layer(f"conv{i}", rng, c_in, c_out, 3, 1, dtype),
                    _ReLU(f"relu{i}"),
                    _MaxPool(f"pool{i}", 2),
                ]
                c_in = c_out
            flat = widths[-1] * (h // 8) * (w // 8)
            layers += [_Flatten("flatten"), _linear_layer("head", rng, flat, num_classes, dtype)]
        else:  # small_resnet
            if h % 4 or w % 4:
                raise ShapeError(f"small_resnet needs spatial dims divisible by 4, got {(h, w)}")
            width = 16
            layers = [
                _conv_layer("stem", rng, c, width, 3, 1, dtype),
                _ReLU("stem_relu"),
                _MaxPool("stem_pool", 2),
            ]
            for i in (1, 2):
                body = [
                    _conv_layer(f"block{i}.conv1", rng, width, width, 3, 1, dtype),
                    _ReLU(f"block{i}.relu1"),
                    _conv_layer(f"block{i}.conv2", rng, width, width, 3, 1, dtype),
                ]
                layers.append(_Residual(f"block{i}", body))
            layers += [
                _AvgPool("pool_out", 2),
                _Flatten("flatten"),
                _linear_layer("head", rng, width * (h // 4) * (w // 4), num_classes, dtype),
            ]
    return Model(arch=arch, input_shape=input_shape, num_classes=num_classes,
                 head_width=num_classes, layers=layers)


def forward_traced(model: Model, batch) -> tuple[Tensor, ActivationTrace]:
    """Run the model on a batch, returning logits and the attached trace."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (x.shape[0],) + model.input_shape
    if x.shape != expected:
        raise ShapeError(f"batch shape {x.shape} does not match model input "
                         f"(N,) + {model.input_shape}")
    trace = ActivationTrace(n_samples=int(x.shape[0]))
    for layer in model.layers:
        x = layer.apply(x, trace)
    return x, trace


def predict(model: Model, batch) -> np.ndarray:
    """Class labels under the model's evaluation mode (masked head honoured)."""
    logits, _ = forward_traced(model, batch)
    return masked_argmax(logits.data, model.masked_class)


def masked_argmax(logits_data: np.ndarray, masked_class: int | None) -> np.ndarray:
    scores = np.asarray(logits_data, dtype=np.float64)
    if masked_class is not None:
        scores = scores.copy()
        scores[:, masked_class] = -np.inf
    return scores.argmax(axis=1)


def extend_head(model: Model) -> Model:
    """Widen the head by one zero-initialised output; other weights untouched."""
    head = model.head
    w, b = head.w, head.b
    new_w = np.concatenate([w.data, np.zeros((w.shape[0], 1), dtype=w.data.dtype)], axis=1)
    new_b = np.concatenate([b.data, np.zeros(1, dtype=b.data.dtype)])
    head.w = Tensor(new_w, requires_grad=True)
    head.b = Tensor(new_b, requires_grad=True)
    model.head_width += 1
    return model


def weights_hash(model: Model) -> str:
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


# -- checkpoints --------------------------------------------------------

_MAGIC = b"SVCK"
_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Write magic + version + JSON descriptor + raw little-endian float32 weights."""
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 weights; model is {model.dtype}")
    params = model.parameters()
    descriptor = {
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "head_width": model.head_width,
        "masked_class": model.masked_class,
        "param_shapes": [list(p.shape) for p in params],
    }
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8 or blob[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(_MAGIC)
    version, desc_len = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != _VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported "
                              f"(expected {_VERSION})")
    if offset + desc_len > len(blob):
        raise CheckpointError(f"{path}: truncated checkpoint descriptor")
    try:
        descriptor = json.loads(blob[offset:offset + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint descriptor") from exc
    offset += desc_len
    model = build_model(descriptor["arch"], tuple(descriptor["input_shape"]),
                        descriptor["num_classes"], seed=0)
    while model.head_width < descriptor["head_width"]:
        extend_head(model)
    model.masked_class = descriptor["masked_class"]
    params = model.parameters()
    shapes = [tuple(s) for s in descriptor["param_shapes"]]
    if shapes != [p.shape for p in params]:
        raise CheckpointError(f"{path}: descriptor parameter shapes do not match "
                              f"architecture {descriptor['arch']}")
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(blob) - offset != expected:
        raise CheckpointError(f"{path}: weight payload is {len(blob) - offset} bytes, "
                              f"expected {expected} (truncated or trailing data)")
    for p in params:
        count = p.size
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        p.data = np.ascontiguousarray(values.reshape(p.shape)).astype(np.float32)
        offset += count * 4
    return model
