"""NAWEnet topology: five convolutional sections, a three-layer dense head, and the WENET1 model file."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from wenets import tensor_nn as nn
from wenets.corpus import TargetMapper, affine_mapper
from wenets.dsp_io import SAMPLE_RATE, SEGMENT_LENGTH
from wenets.errors import ModelFileError, ShapeError
from wenets.settings import check_against_schema

MODEL_MAGIC = b"WENET1"
MODEL_VERSION = 1
DENSE_HIDDEN = 512
DEFAULT_DROPOUT = 0.5

# (conv specs as (f_n, f_l), pool kind, pool window) for S1..S5.
CANONICAL_SECTIONS: tuple[tuple[tuple[tuple[int, int], ...], str, int], ...] = (
    (((192, 11),), "average", 4),
    (((192, 7),), "max", 2),
    (((256, 7),), "max", 4),
    (((512, 7), (512, 7)), "max", 3),
    (((512, 7), (512, 7)), "max", 2),
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SectionConfig:
    conv_specs: tuple[tuple[int, int], ...]
    pool_kind: Literal["average", "max"]
    pool_k: int
    effective_rate: float
    sample_spacing_ms: float
    l_in: int
    l_out: int

    @property
    def f_n(self) -> int:
        return self.conv_specs[-1][0]

    def describe(self) -> str:
        convs = [f"C-{f_n}-{f_l}" for f_n, f_l in self.conv_specs]
        pool = f"{'A' if self.pool_kind == 'average' else 'M'}-{self.pool_k}"
        return ",".join([*convs, "B", f"P-{self.f_n}", pool])


@dataclass(frozen=True)
class NetworkConfig:
    sections: tuple[SectionConfig, ...]
    dense_layers: tuple[tuple[int, int], ...]
    dropout_p: float = DEFAULT_DROPOUT
    input_length: int = SEGMENT_LENGTH
    bn_between_convs: bool = False

    @property
    def flatten_size(self) -> int:
        return self.sections[-1].f_n * self.sections[-1].l_out

    def validate(self) -> None:
        if not self.sections or not self.dense_layers:
            raise ShapeError("network needs at least one section and one dense layer")
        length = self.input_length
        for index, section in enumerate(self.sections, start=1):
            if section.l_in != length:
                raise ShapeError(f"S{index} expects l_in {section.l_in}, previous stage yields {length}")
            if section.pool_k < 1 or section.l_in % section.pool_k or section.l_in // section.pool_k != section.l_out:
                raise ShapeError(
                    f"S{index}: l_in {section.l_in} is not divisible into l_out {section.l_out} by pool {section.pool_k}"
                )
            if not 1 <= len(section.conv_specs) <= 2:
                raise ShapeError(f"S{index} must hold one or two convolutions")
            if section.pool_kind not in ("average", "max"):
                raise ShapeError(f"S{index}: unknown pool kind {section.pool_kind!r}")
            length = section.l_out
        if self.dense_layers[0][0] != self.flatten_size:
            raise ShapeError(f"L1 d_i {self.dense_layers[0][0]} does not match flatten size {self.flatten_size}")
        for (_, d_o), (d_i, _) in zip(self.dense_layers, self.dense_layers[1:]):
            if d_o != d_i:
                raise ShapeError(f"dense chain breaks: {d_o} outputs feed {d_i} inputs")
        if self.dense_layers[-1][1] != 1:
            raise ShapeError("the last dense layer must emit a single value")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout probability out of range: {self.dropout_p}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> NetworkConfig:
        sections = tuple(
            SectionConfig(
                conv_specs=tuple(tuple(spec) for spec in section["conv_specs"]),
                pool_kind=section["pool_kind"],
                pool_k=section["pool_k"],
                effective_rate=section["effective_rate"],
                sample_spacing_ms=section["sample_spacing_ms"],
                l_in=section["l_in"],
                l_out=section["l_out"],
            )
            for section in data["sections"]
        )
        return cls(
            sections=sections,
            dense_layers=tuple(tuple(layer) for layer in data["dense_layers"]),
            dropout_p=data["dropout_p"],
            input_length=data["input_length"],
            bn_between_convs=data["bn_between_convs"],
        )

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def make_config(
    section_specs=CANONICAL_SECTIONS,
    dense_hidden: int = DENSE_HIDDEN,
    input_length: int = SEGMENT_LENGTH,
    dropout_p: float = DEFAULT_DROPOUT,
    bn_between_convs: bool = False,
) -> NetworkConfig:
    """Derive lengths and effective rates for a section chain and check it assembles."""
    sections = []
    length = input_length
    rate = float(SAMPLE_RATE)
    for index, (conv_specs, pool_kind, pool_k) in enumerate(section_specs, start=1):
        if length % pool_k:
            raise ShapeError(f"S{index}: length {length} is not divisible by pool window {pool_k}")
        sections.append(
            SectionConfig(
                conv_specs=tuple(tuple(spec) for spec in conv_specs),
                pool_kind=pool_kind,
                pool_k=pool_k,
                effective_rate=rate,
                sample_spacing_ms=1000.0 / rate,
                l_in=length,
                l_out=length // pool_k,
            )
        )
        length //= pool_k
        rate /= pool_k

    flatten = sections[-1].f_n * sections[-1].l_out
    config = NetworkConfig(
        sections=tuple(sections),
        dense_layers=((flatten, dense_hidden), (dense_hidden, dense_hidden), (dense_hidden, 1)),
        dropout_p=dropout_p,
        input_length=input_length,
        bn_between_convs=bn_between_convs,
    )
    config.validate()
    return config


def canonical_config(dropout_p: float = DEFAULT_DROPOUT, bn_between_convs: bool = False) -> NetworkConfig:
    return make_config(dropout_p=dropout_p, bn_between_convs=bn_between_convs)


def tiny_variant_config(
    width_scale: float,
    length_scale: float,
    dropout_p: float = DEFAULT_DROPOUT,
    bn_between_convs: bool = False,
) -> NetworkConfig:
    """Same five-section topology with scaled filter counts, dense width and input length."""
    if not 0.0 < width_scale <= 1.0 or not 0.0 < length_scale <= 1.0:
        raise ShapeError(f"scales must lie in (0, 1], got {width_scale}, {length_scale}")
    exact_length = SEGMENT_LENGTH * length_scale
    input_length = round(exact_length)
    if input_length < 1 or abs(exact_length - input_length) > 1e-6:
        raise ShapeError(f"length_scale {length_scale} gives a non-integral input length {exact_length}")

    def scaled(width: int) -> int:
        return max(1, round(width * width_scale))

    specs = tuple(
        (tuple((scaled(f_n), f_l) for f_n, f_l in convs), kind, k) for convs, kind, k in CANONICAL_SECTIONS
    )
    return make_config(specs, scaled(DENSE_HIDDEN), input_length, dropout_p, bn_between_convs)


def gradcheck_config() -> NetworkConfig:
    """Smallest pool-divisible tiny variant (input 384), used for end-to-end gradient checks."""
    return tiny_variant_config(width_scale=1 / 48, length_scale=0.016)


# ---------------------------------------------------------------- model


@dataclass(eq=False)
class Model:
    config: NetworkConfig
    layers: list[tuple[str, nn.Layer]]
    target_metric: str = "pesq"
    mapper: TargetMapper = field(default_factory=affine_mapper)
    fingerprint: str = ""

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0][1].parameters()["weights"].dtype

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{param}": value for name, layer in self.layers for param, value in layer.parameters().items()
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{buf}": value for name, layer in self.layers for buf, value in layer.buffers().items()}

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers of each layer, in topological order."""
        arrays = []
        for name, layer in self.layers:
            arrays.extend((f"{name}.{key}", value) for key, value in layer.parameters().items())
            arrays.extend((f"{name}.{key}", value) for key, value in layer.buffers().items())
        return arrays

    def layer(self, name: str) -> nn.Layer:
        for layer_name, layer in self.layers:
            if layer_name == name:
                return layer
        raise KeyError(name)


def make_fingerprint(seed: int, config: NetworkConfig) -> str:
    return f"seed={seed};config={config.digest()}"


def _layer_plan(config: NetworkConfig) -> list[tuple[str, str, tuple]]:
    """(name, kind, dims) for every layer; shared by allocation and closed-form counting."""
    plan = []
    channels = 1
    for index, section in enumerate(config.sections, start=1):
        prefix = f"s{index}"
        n_convs = len(section.conv_specs)
        for position, (f_n, f_l) in enumerate(section.conv_specs, start=1):
            suffix = str(position) if n_convs > 1 and config.bn_between_convs else ""
            plan.append((f"{prefix}.conv{position}", "conv", (channels, f_n, f_l)))
            channels = f_n
            if config.bn_between_convs and position < n_convs:
                plan.append((f"{prefix}.bn{suffix}", "batchnorm", (f_n,)))
                plan.append((f"{prefix}.prelu{suffix}", "prelu", (f_n,)))
        suffix = str(n_convs) if n_convs > 1 and config.bn_between_convs else ""
        plan.append((f"{prefix}.bn{suffix}", "batchnorm", (channels,)))
        plan.append((f"{prefix}.prelu{suffix}", "prelu", (channels,)))
        plan.append((f"{prefix}.pool", section.pool_kind, (section.pool_k,)))

    plan.append(("flatten", "flatten", ()))
    for index, (d_i, d_o) in enumerate(config.dense_layers, start=1):
        plan.append((f"l{index}", "dense", (d_i, d_o)))
        if index < len(config.dense_layers):
            plan.append((f"l{index}.prelu", "prelu", (d_o,)))
            plan.append((f"l{index}.dropout", "dropout", (config.dropout_p,)))
    return plan


def _allocate(config: NetworkConfig, rng: np.random.Generator | None, dtype) -> list[tuple[str, nn.Layer]]:
    layers: list[tuple[str, nn.Layer]] = []
    for name, kind, dims in _layer_plan(config):
        if kind == "conv":
            c_in, f_n, f_l = dims
            if rng is None:
                layer = nn.ConvLayer(np.zeros((f_n, c_in, f_l), dtype=dtype), np.zeros(f_n, dtype=dtype))
            else:
                layer = nn.ConvLayer.initialized(c_in, f_n, f_l, rng, dtype)
        elif kind == "dense":
            d_i, d_o = dims
            if rng is None:
                layer = nn.DenseLayer(np.zeros((d_o, d_i), dtype=dtype), np.zeros(d_o, dtype=dtype))
            else:
                layer = nn.DenseLayer.initialized(d_i, d_o, rng, dtype)
        elif kind == "batchnorm":
            layer = nn.BatchNormLayer.initialized(dims[0], dtype)
        elif kind == "prelu":
            layer = nn.PReLULayer.initialized(dims[0], dtype)
        elif kind == "average":
            layer = nn.AvgPool(dims[0])
        elif kind == "max":
            layer = nn.MaxPool(dims[0])
        elif kind == "dropout":
            layer = nn.Dropout(dims[0])
        else:
            layer = nn.Flatten()
        layers.append((name, layer))
    return layers


def build(
    config: NetworkConfig,
    rng: np.random.Generator,
    target_metric: str = "pesq",
    mapper: TargetMapper | None = None,
    dtype=np.float32,
    seed: int = 0,
) -> Model:
    """Assemble and initialize a model; convolution and dense weights use Kaiming fan-out."""
    config.validate()
    return Model(
        config=config,
        layers=_allocate(config, rng, dtype),
        target_metric=target_metric,
        mapper=mapper or affine_mapper(),
        fingerprint=make_fingerprint(seed, config),
    )


@dataclass
class ForwardCache:
    mode: str
    layer_caches: list[Any]
    section_shapes: list[tuple[int, ...]]


def forward(
    model: Model, batch: np.ndarray, mode: nn.Mode = "eval", rng: np.random.Generator | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Predictions in mapped target space, one per segment, plus the cache backward needs."""
    x = np.asarray(batch)
    expected = (1, model.config.input_length)
    if x.ndim != 3 or x.shape[1:] != expected:
        raise ShapeError(f"expected input [N, 1, {model.config.input_length}], got {x.shape}")
    if mode == "train" and x.shape[0] < 2:
        raise ShapeError("train-mode forward needs at least two segments per batch")
    x = x.astype(model.dtype, copy=False)

    caches = []
    section_shapes = []
    for name, layer in model.layers:
        x, cache = layer.forward(x, mode, rng)
        caches.append(cache)
        if name.endswith(".pool"):
            section_shapes.append(x.shape)
    nn.ensure_finite(x, "network output")
    return x[:, 0], ForwardCache(mode, caches, section_shapes)


def backprop(model: Model, cache: ForwardCache, d_predictions: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Input gradient and parameter gradients for an upstream gradient on the predictions."""
    if cache.mode != "train":
        raise ValueError(f"backward needs a train-mode forward cache, got {cache.mode!r}")
    grad = np.asarray(d_predictions, dtype=model.dtype).reshape(-1, 1)
    grads: dict[str, np.ndarray] = {}
    for (name, layer), layer_cache in zip(reversed(model.layers), reversed(cache.layer_caches)):
        grad, layer_grads = layer.backward(grad, layer_cache)
        for param, value in layer_grads.items():
            grads[f"{name}.{param}"] = value
    return grad, grads


def backward(model: Model, cache: ForwardCache, d_predictions: np.ndarray) -> dict[str, np.ndarray]:
    _, grads = backprop(model, cache, d_predictions)
    return grads


def check_network(
    model: Model,
    batch: np.ndarray,
    tolerance: float = 1e-4,
    max_entries: int | None = 12,
    seed: int = 0,
    corrupt_group: str | None = None,
) -> nn.GradCheckReport:
    """End-to-end finite-difference check of a 64-bit model in train mode.

    Dropout masks are pinned by reseeding for every evaluation and batch-norm
    running statistics are restored afterwards.
    """
    x = np.array(batch, dtype=np.float64)
    saved = {name: value.copy() for name, value in model.buffers().items()}
    upstream = np.random.default_rng(seed + 1).standard_normal(x.shape[0])

    def loss_fn() -> float:
        predictions, _ = forward(model, x, "train", np.random.default_rng(seed))
        return float(np.dot(predictions, upstream))

    _, cache = forward(model, x, "train", np.random.default_rng(seed))
    grad_x, grads = backprop(model, cache, upstream)
    arrays = {"input": x, **model.parameters()}
    analytic = {"input": grad_x, **grads}
    if corrupt_group is not None:
        analytic[corrupt_group] = -analytic[corrupt_group]
    try:
        return nn.grad_check(loss_fn, arrays, analytic, tolerance, max_entries, np.random.default_rng(seed + 2))
    finally:
        for name, value in saved.items():
            model.buffers()[name][...] = value


# ---------------------------------------------------------------- counting


@dataclass
class ParamCount:
    rows: list[tuple[str, str, int]]

    @property
    def total(self) -> int:
        return sum(count for _, _, count in self.rows)

    @property
    def conv_extractor(self) -> int:
        return sum(count for name, _, count in self.rows if name.startswith("s"))

    @property
    def dense_head(self) -> int:
        return self.total - self.conv_extractor

    def group(self, prefix: str) -> int:
        return sum(count for name, _, count in self.rows if name == prefix or name.startswith(prefix + "."))

    def layer(self, name: str) -> int:
        return sum(count for row_name, _, count in self.rows if row_name == name)


def _planned_count(kind: str, dims: tuple) -> int:
    if kind == "conv":
        c_in, f_n, f_l = dims
        return f_n * c_in * f_l + f_n
    if kind == "dense":
        d_i, d_o = dims
        return d_i * d_o + d_o
    if kind == "batchnorm":
        return 2 * dims[0]
    if kind == "prelu":
        return dims[0]
    return 0


def config_param_count(config: NetworkConfig) -> ParamCount:
    """Closed-form parameter counts straight from the layer formulas (no allocation)."""
    return ParamCount([(name, kind, _planned_count(kind, dims)) for name, kind, dims in _layer_plan(config)])


def count_params(model: Model) -> ParamCount:
    return ParamCount([(name, layer.kind, layer.param_count()) for name, layer in model.layers])


def shape_trace(config: NetworkConfig) -> list[dict]:
    rows = []
    for index, section in enumerate(config.sections, start=1):
        rows.append(
            {
                "stage": f"S{index}",
                "layers": section.describe(),
                "effective_rate_hz": round(section.effective_rate, 1),
                "l_in": section.l_in,
                "spacing_ms": round(section.sample_spacing_ms, 3),
                "l_out": section.l_out,
                "channels": section.f_n,
            }
        )
    for index, (d_i, d_o) in enumerate(config.dense_layers, start=1):
        rows.append({"stage": f"L{index}", "layers": "dense", "d_i": d_i, "d_o": d_o})
    return rows


# ---------------------------------------------------------------- WENET1 files


def _metadata(model: Model) -> dict[str, str]:
    return {
        "target_metric": model.target_metric,
        "mapping_kind": model.mapper.kind,
        "mapping_a": float(model.mapper.center).hex(),
        "mapping_b": float(model.mapper.spread).hex(),
        "network_config": json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")),
        "fingerprint": model.fingerprint,
    }


def save(model: Model, path: Path | str) -> None:
    """Write a WENET1 file: magic, u16 version, metadata lines, float32 groups, CRC-32."""
    metadata = "".join(f"{key}={value}\n" for key, value in sorted(_metadata(model).items()))
    meta_bytes = metadata.encode("utf-8")
    payload = bytearray(struct.pack("<I", len(meta_bytes)))
    payload.extend(meta_bytes)
    for _, array in model.state_arrays():
        flat = np.ascontiguousarray(array, dtype="<f4").reshape(-1)
        payload.extend(struct.pack("<I", flat.size))
        payload.extend(flat.tobytes())

    blob = MODEL_MAGIC + struct.pack("<H", MODEL_VERSION) + bytes(payload) + struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)
    logger.debug("Saved %s (%d bytes, %d groups).", path, len(blob), len(model.state_arrays()))


def _parse_metadata(block: bytes) -> dict[str, str]:
    try:
        text = block.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFileError("metadata is not valid UTF-8") from exc
    metadata = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise ModelFileError(f"malformed metadata line: {line!r}")
        metadata[key] = value
    check_against_schema(metadata, "model_metadata.schema.json", ModelFileError)
    return metadata


def load(path: Path | str) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc

    header = len(MODEL_MAGIC) + 2
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFileError("bad magic")
    if len(blob) < header + 8:
        raise ModelFileError("truncated model file")
    (version,) = struct.unpack_from("<H", blob, len(MODEL_MAGIC))
    if version != MODEL_VERSION:
        raise ModelFileError(f"version mismatch: file has {version}, expected {MODEL_VERSION}")
    payload = blob[header:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise ModelFileError("checksum failure (file truncated or corrupted)")

    (meta_length,) = struct.unpack_from("<I", payload, 0)
    if 4 + meta_length > len(payload):
        raise ModelFileError("truncated metadata block")
    metadata = _parse_metadata(payload[4 : 4 + meta_length])
    try:
        config = NetworkConfig.from_dict(json.loads(metadata["network_config"]))
        config.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"invalid network config in model file: {exc}") from exc

    mapper = TargetMapper(
        metadata["mapping_kind"], float.fromhex(metadata["mapping_a"]), float.fromhex(metadata["mapping_b"])
    )
    model = Model(config, _allocate(config, None, np.float32), metadata["target_metric"], mapper, metadata["fingerprint"])

    position = 4 + meta_length
    for name, array in model.state_arrays():
        if position + 4 > len(payload):
            raise ModelFileError(f"truncated parameter group {name}")
        (count,) = struct.unpack_from("<I", payload, position)
        position += 4
        if count != array.size or position + 4 * count > len(payload):
            raise ModelFileError(f"parameter group {name} holds {count} values, expected {array.size}")
        array[...] = np.frombuffer(payload, dtype="<f4", count=count, offset=position).reshape(array.shape)
        position += 4 * count
    if position != len(payload):
        raise ModelFileError(f"{len(payload) - position} trailing bytes after the last parameter group")
    return model
