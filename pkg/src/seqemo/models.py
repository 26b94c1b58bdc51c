"""Declarative model specs, the model forward/backward pass, and checkpoints.

Two builders produce the reference architectures:

* :func:`build_deep_cnn` - four ReLU convolutions (500 filters; widths 5, 7, 1, 1;
  strides 1, 2, 2, 1), global max pooling, softmax output, dropout 0.2 between
  consecutive layers. The width-1 stride-2 convolution is kept literally: it
  is a pointwise projection that discards every other frame.
* :func:`build_clstm_attention` - conv(256, 5) / maxpool(2) / conv(64, 5) /
  maxpool(2) / two 128-unit BLSTMs / sequence-to-vector pooling / dense(64, tanh)
  / softmax output. ``pooling="attention"`` is the main model; ``last_state``,
  ``global_max`` and ``global_avg`` are the ablation variants.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import layers as L
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .numeric import TRAIN_DTYPE, glorot_uniform_init, make_rng, orthogonal_init, softmax

LAYER_KINDS = (
    "conv1d",
    "maxpool1d",
    "global_maxpool",
    "global_avgpool",
    "blstm",
    "attention",
    "last_state",
    "dense",
    "dropout",
    "softmax_output",
)
SEQ2VEC_KINDS = ("global_maxpool", "global_avgpool", "attention", "last_state")
POOLING_TO_KIND = {
    "attention": "attention",
    "last_state": "last_state",
    "global_max": "global_maxpool",
    "global_avg": "global_avgpool",
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    width: int | None = None
    stride: int | None = None
    activation: str | None = None
    pool: int | None = None
    units: int | None = None
    rate: float | None = None
    classes: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        required = {
            "conv1d": ("filters", "width", "stride"),
            "maxpool1d": ("pool",),
            "blstm": ("units",),
            "dense": ("units",),
            "softmax_output": ("classes",),
        }.get(self.kind, ())
        for name in required:
            value = getattr(self, name)
            if value is None or value < 1:
                raise ConfigError(f"{self.kind}: {name} must be a positive integer, got {value!r}")
        if self.kind == "blstm" and self.units % 2:
            raise ConfigError(f"blstm: units must be even (split across two directions), got {self.units}")
        if self.kind == "dropout" and not (self.rate is not None and 0 <= self.rate < 1):
            raise ConfigError(f"dropout: rate must lie in [0, 1), got {self.rate!r}")
        if self.activation not in (None, "relu", "tanh"):
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_dim: int = 13
    min_length: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        kinds = [layer.kind for layer in self.layers]
        if not kinds or kinds[-1] != "softmax_output":
            raise ConfigError(f"{self.name}: the last layer must be softmax_output")
        if kinds.count("softmax_output") != 1:
            raise ConfigError(f"{self.name}: exactly one softmax_output layer is allowed")
        if self.layers[-1].classes != self.num_classes:
            raise ConfigError(f"{self.name}: softmax_output has {self.layers[-1].classes} classes, spec says {self.num_classes}")
        if sum(k in SEQ2VEC_KINDS for k in kinds) != 1:
            raise ConfigError(f"{self.name}: exactly one sequence-to-vector layer is required")
        pooled = False
        for kind in kinds:
            if kind in SEQ2VEC_KINDS:
                pooled = True
            elif pooled and kind in ("conv1d", "maxpool1d", "blstm"):
                raise ConfigError(f"{self.name}: sequence layer {kind} after the sequence-to-vector layer")
            elif not pooled and kind in ("dense", "softmax_output"):
                raise ConfigError(f"{self.name}: {kind} before the sequence-to-vector layer")
        object.__setattr__(self, "min_length", self._compute_min_length())

    def output_length(self, length):
        """Time length reaching the sequence-to-vector layer (0 if too short)."""
        out = length
        for layer in self.layers:
            if layer.kind == "conv1d":
                out = L.conv_output_length(out, layer.width, layer.stride)
            elif layer.kind == "maxpool1d":
                out = L.pool_output_length(out, layer.pool)
            elif layer.kind in SEQ2VEC_KINDS:
                break
        return out

    def _compute_min_length(self) -> int:
        length = 1
        while not self._length_ok(length):
            length += 1
            if length > 1_000_000:
                raise ConfigError(f"{self.name}: no input length satisfies the layer stack")
        return length

    def _length_ok(self, length: int) -> bool:
        for layer in self.layers:
            if layer.kind == "conv1d":
                if length < layer.width:
                    return False
                length = L.conv_output_length(length, layer.width, layer.stride)
            elif layer.kind == "maxpool1d":
                if length < layer.pool:
                    return False
                length = L.pool_output_length(length, layer.pool)
            elif layer.kind in SEQ2VEC_KINDS:
                return length >= 1
        return length >= 1

    def core_layers(self) -> list[LayerSpec]:
        """Layers as listed in the architecture tables, i.e. without dropout."""
        return [layer for layer in self.layers if layer.kind != "dropout"]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            name=data["name"],
            layers=tuple(LayerSpec(**layer) for layer in data["layers"]),
            num_classes=int(data["num_classes"]),
            input_dim=int(data.get("input_dim", 13)),
        )


def _with_dropout(layers: list[LayerSpec], rate: float) -> list[LayerSpec]:
    if rate <= 0:
        return layers
    out = []
    for i, layer in enumerate(layers):
        out.append(layer)
        if i < len(layers) - 1:
            out.append(LayerSpec("dropout", rate=rate))
    return out


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def build_deep_cnn(num_classes: int, filters: int = 500, dropout: float = 0.2) -> ModelSpec:
    layers = [
        LayerSpec("conv1d", filters=filters, width=5, stride=1, activation="relu"),
        LayerSpec("conv1d", filters=filters, width=7, stride=2, activation="relu"),
        LayerSpec("conv1d", filters=filters, width=1, stride=2, activation="relu"),
        LayerSpec("conv1d", filters=filters, width=1, stride=1, activation="relu"),
        LayerSpec("global_maxpool"),
        LayerSpec("softmax_output", classes=num_classes),
    ]
    return ModelSpec("deep_cnn", tuple(_with_dropout(layers, dropout)), num_classes)


def build_clstm_attention(
    num_classes: int,
    pooling: str = "attention",
    conv_filters: tuple[int, int] = (256, 64),
    lstm_units: int = 128,
    dense_units: int = 64,
    dropout: float = 0.0,
) -> ModelSpec:
    if pooling not in POOLING_TO_KIND:
        raise ConfigError(f"pooling must be one of {sorted(POOLING_TO_KIND)}, got {pooling!r}")
    layers = [
        LayerSpec("conv1d", filters=conv_filters[0], width=5, stride=1, activation="relu"),
        LayerSpec("maxpool1d", pool=2),
        LayerSpec("conv1d", filters=conv_filters[1], width=5, stride=1, activation="relu"),
        LayerSpec("maxpool1d", pool=2),
        LayerSpec("blstm", units=lstm_units),
        LayerSpec("blstm", units=lstm_units),
        LayerSpec(POOLING_TO_KIND[pooling]),
        LayerSpec("dense", units=dense_units, activation="tanh"),
        LayerSpec("softmax_output", classes=num_classes),
    ]
    name = "clstm_" + pooling
    return ModelSpec(name, tuple(_with_dropout(layers, dropout)), num_classes)


ARCHITECTURES = ("cnn", "clstm-attn", "clstm-last", "clstm-gmax", "clstm-gavg")


def build_architecture(arch: str, num_classes: int, width_scale: float = 1.0, clstm_dropout: float = 0.0) -> ModelSpec:
    """Map a command-line architecture name to a spec; ``width_scale`` shrinks every layer width."""
    if arch == "cnn":
        return build_deep_cnn(num_classes, filters=_scaled(500, width_scale))
    pooling = {"clstm-attn": "attention", "clstm-last": "last_state", "clstm-gmax": "global_max", "clstm-gavg": "global_avg"}
    if arch not in pooling:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    half = _scaled(64, width_scale)
    return build_clstm_attention(
        num_classes,
        pooling[arch],
        conv_filters=(_scaled(256, width_scale), _scaled(64, width_scale)),
        lstm_units=2 * half,
        dense_units=_scaled(64, width_scale),
        dropout=clstm_dropout,
    )


# -- parameters -------------------------------------------------------------


def _layer_names(spec: ModelSpec) -> list[str | None]:
    counters: dict[str, int] = {}
    names: list[str | None] = []
    for layer in spec.layers:
        if layer.kind in ("conv1d", "blstm", "dense"):
            counters[layer.kind] = counters.get(layer.kind, 0) + 1
            prefix = {"conv1d": "conv", "blstm": "blstm", "dense": "dense"}[layer.kind]
            names.append(f"{prefix}{counters[layer.kind]}")
        elif layer.kind == "attention":
            names.append("attention")
        elif layer.kind == "softmax_output":
            names.append("output")
        else:
            names.append(None)
    return names


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of parameter name to shape, derived from the ModelSpec alone."""
    shapes: dict[str, tuple[int, ...]] = {}
    channels = spec.input_dim
    for layer, name in zip(spec.layers, _layer_names(spec)):
        kind = layer.kind
        if kind == "conv1d":
            shapes[f"{name}.kernel"] = (layer.width, channels, layer.filters)
            shapes[f"{name}.bias"] = (layer.filters,)
            channels = layer.filters
        elif kind == "blstm":
            hidden = layer.units // 2
            for direction in ("fw", "bw"):
                shapes[f"{name}.{direction}_W"] = (channels, 4 * hidden)
                shapes[f"{name}.{direction}_U"] = (hidden, 4 * hidden)
                shapes[f"{name}.{direction}_b"] = (4 * hidden,)
            channels = layer.units
        elif kind == "attention":
            shapes["attention.w"] = (channels,)
        elif kind == "dense":
            shapes[f"{name}.W"] = (channels, layer.units)
            shapes[f"{name}.b"] = (layer.units,)
            channels = layer.units
        elif kind == "softmax_output":
            shapes["output.W"] = (channels, layer.classes)
            shapes["output.b"] = (layer.classes,)
            channels = layer.classes
    return shapes


def init_params(spec: ModelSpec, seed: int, dtype=TRAIN_DTYPE) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, orthogonal recurrent matrices, zero biases (LSTM forget gate = 1)."""
    rng = make_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(spec).items():
        leaf = name.split(".")[1]
        if leaf == "kernel":
            width, c_in, c_out = shape
            params[name] = glorot_uniform_init(rng, width * c_in, width * c_out, shape, dtype)
        elif leaf in ("W", "fw_W", "bw_W"):
            params[name] = glorot_uniform_init(rng, shape[0], shape[1], shape, dtype)
        elif leaf in ("fw_U", "bw_U"):
            params[name] = orthogonal_init(rng, shape, dtype)
        elif leaf in ("fw_b", "bw_b"):
            hidden = shape[0] // 4
            bias = np.zeros(shape, dtype=dtype)
            bias[hidden : 2 * hidden] = 1.0
            params[name] = bias
        elif leaf == "w":
            params[name] = glorot_uniform_init(rng, shape[0], 1, shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


# -- model ------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    tape: list = field(repr=False, default_factory=list)
    attention: np.ndarray | None = None


class Model:
    """A ModelSpec plus its named parameter tensors."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        expected = parameter_shapes(spec)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            if missing or extra:
                raise ConfigError(f"parameter names do not match spec: missing {missing}, unexpected {extra}")
            params = {k: params[k] for k in expected}
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.spec = spec
        # one memory layout everywhere, so BLAS sums in the same order after a checkpoint reload
        self.params = {k: np.ascontiguousarray(v) for k, v in params.items()}
        self._names = _layer_names(spec)

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int, dtype=TRAIN_DTYPE) -> "Model":
        return cls(spec, init_params(spec, seed, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def check_lengths(self, lengths) -> None:
        lengths = np.asarray(lengths)
        short = np.flatnonzero(lengths < self.spec.min_length)
        if short.size:
            items = ", ".join(f"item {i} ({lengths[i]} frames)" for i in short[:10])
            raise DataError(
                f"{self.spec.name}: sequences shorter than the minimum of {self.spec.min_length} frames: {items}"
            )

    def forward(self, features, lengths=None, mode: str = "infer", rng=None, mask: bool = False) -> ForwardResult:
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.spec.input_dim:
            raise ShapeError(f"{self.spec.name}: expected (batch, time, {self.spec.input_dim}) features, got {x.shape}")
        batch, steps, _ = x.shape
        if lengths is None:
            lengths = np.full(batch, steps)
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (batch,) or np.any(lengths > steps) or np.any(lengths < 1):
            raise DataError(f"lengths must be {batch} values in [1, {steps}], got {lengths.tolist()}")
        self.check_lengths(lengths)
        if mode == "train" and rng is None and any(l.kind == "dropout" and l.rate > 0 for l in self.spec.layers):
            raise ConfigError("train mode with dropout needs an rng")
        seq_lengths = lengths if mask else None
        p = self.params
        tape = []
        attention = None
        for layer, name in zip(self.spec.layers, self._names):
            kind = layer.kind
            if kind == "conv1d":
                x, cache = L.conv1d_forward(x, p[f"{name}.kernel"], p[f"{name}.bias"], layer.stride, layer.activation, name)
                if seq_lengths is not None:
                    seq_lengths = L.conv_output_length(seq_lengths, layer.width, layer.stride)
            elif kind == "maxpool1d":
                x, cache = L.maxpool1d_forward(x, layer.pool)
                if seq_lengths is not None:
                    seq_lengths = L.pool_output_length(seq_lengths, layer.pool)
            elif kind == "blstm":
                bp = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(name + ".")}
                x, cache = L.blstm_forward(x, bp, seq_lengths)
            elif kind == "attention":
                (x, attention), cache = L.attention_forward(x, p["attention.w"], seq_lengths)
            elif kind == "global_maxpool":
                x, cache = L.global_maxpool_forward(x, seq_lengths)
            elif kind == "global_avgpool":
                x, cache = L.global_avgpool_forward(x, seq_lengths)
            elif kind == "last_state":
                x, cache = L.last_state_forward(x, seq_lengths)
            elif kind == "dense":
                x, cache = L.dense_forward(x, p[f"{name}.W"], p[f"{name}.b"], layer.activation, name)
            elif kind == "dropout":
                x, cache = L.dropout_forward(x, layer.rate, mode, rng)
            elif kind == "softmax_output":
                x, cache = L.dense_forward(x, p["output.W"], p["output.b"], None, "output")
            tape.append(cache)
        return ForwardResult(logits=x, probs=softmax(x, axis=-1), tape=tape, attention=attention)

    def backward(self, dlogits, tape) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dx = dlogits
        for layer, name, cache in reversed(list(zip(self.spec.layers, self._names, tape))):
            kind = layer.kind
            if kind == "conv1d":
                dx, g = L.conv1d_backward(dx, cache)
            elif kind == "maxpool1d":
                dx, g = L.maxpool1d_backward(dx, cache)
            elif kind == "blstm":
                dx, g = L.blstm_backward(dx, cache)
            elif kind == "attention":
                dx, g = L.attention_backward(dx, cache)
                name = "attention"
            elif kind == "global_maxpool":
                dx, g = L.global_maxpool_backward(dx, cache)
            elif kind == "global_avgpool":
                dx, g = L.global_avgpool_backward(dx, cache)
            elif kind == "last_state":
                dx, g = L.last_state_backward(dx, cache)
            elif kind in ("dense", "softmax_output"):
                dx, g = L.dense_backward(dx, cache)
            elif kind == "dropout":
                dx, g = L.dropout_backward(dx, cache)
            for leaf, value in g.items():
                grads[f"{name}.{leaf}"] = value
        return {k: grads[k].astype(self.params[k].dtype, copy=False) for k in self.params}


def model_forward(model: Model, batch, mode: str = "infer", rng=None, mask: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Logits and class probabilities for a :class:`~seqemo.training.SequenceBatch`."""
    result = model.forward(batch.features, batch.lengths, mode=mode, rng=rng, mask=mask)
    return result.logits, result.probs


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"SEQEMO1\x00"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sII")  # magic, format version, header length


def save_checkpoint(model: Model, path, metadata: dict[str, Any] | None = None) -> None:
    """JSON header (spec, tensor index, metadata) followed by one little-endian float32 blob."""
    index = []
    chunks = []
    offset = 0
    for name, value in model.params.items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "tensors": index,
        "blob_nbytes": len(blob),
        "blob_crc32": zlib.crc32(blob),
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Model, dict[str, Any]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file is {len(raw)} bytes, too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a seqemo checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    body = raw[_PREFIX.size :]
    if len(body) < header_len:
        raise CheckpointError(f"{path}: truncated header ({len(body)} of {header_len} bytes)")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    blob = body[header_len:]
    if len(blob) != header.get("blob_nbytes"):
        raise CheckpointError(f"{path}: tensor blob is {len(blob)} bytes, header says {header.get('blob_nbytes')} (truncated?)")
    if zlib.crc32(blob) != header.get("blob_crc32"):
        raise CheckpointError(f"{path}: tensor blob checksum mismatch (file corrupted)")
    try:
        spec = ModelSpec.from_dict(header["model_spec"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model spec in header ({exc})") from exc
    expected = parameter_shapes(spec)
    tensors = header.get("tensors", [])
    if len(tensors) != len(expected):
        raise CheckpointError(f"{path}: checkpoint holds {len(tensors)} tensors, model spec needs {len(expected)}")
    params = {}
    for entry in tensors:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name!r} with shape {shape} does not match the model spec")
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape)) or start + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {name!r} extends past the blob")
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    return Model(spec, params), header.get("metadata", {})


def with_params(model: Model, **updates) -> Model:
    params = dict(model.params)
    params.update(updates)
    return Model(model.spec, params)


def spec_summary(spec: ModelSpec) -> str:
    lines = [f"{spec.name} (min input length {spec.min_length} frames)"]
    for i, layer in enumerate(spec.core_layers(), 1):
        details = ", ".join(f"{k}={v}" for k, v in layer.to_dict().items() if k != "kind")
        lines.append(f"  {i}. {layer.kind}" + (f" ({details})" if details else ""))
    return "\n".join(lines)


__all__ = [
    "ARCHITECTURES",
    "ForwardResult",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "build_architecture",
    "build_clstm_attention",
    "build_deep_cnn",
    "init_params",
    "load_checkpoint",
    "model_forward",
    "parameter_shapes",
    "save_checkpoint",
    "spec_summary",
]
