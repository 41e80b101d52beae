"""Template classifier: definition, training, tapped forward passes, persistence.

The template network is a small sequential CNN whose post-activation
feature maps ("taps") provide the feature dictionary every other module
consumes. A trained network is frozen into a :class:`NetworkCheckpoint`
that can be saved, reloaded bit-exactly, and content-addressed by a
SHA-256 fingerprint.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DegenerateInputError,
    DimensionError,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"IMPR"
CHECKPOINT_VERSION = 1

# layer grammar: conv / relu / maxpool2 / gap / dense, applied sequentially
LAYER_KINDS = ("conv", "relu", "maxpool2", "gap", "dense")


@dataclass(frozen=True)
class Layer:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_features: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind == "dense":
            d.update(out_features=self.out_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        kind = d.get("kind")
        if kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
        return cls(
            kind=kind,
            out_channels=int(d.get("out_channels", 0)),
            kernel=int(d.get("kernel", 0)),
            stride=int(d.get("stride", 1)),
            padding=int(d.get("padding", 0)),
            out_features=int(d.get("out_features", 0)),
        )


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> Layer:
    return Layer("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def relu() -> Layer:
    return Layer("relu")


def maxpool2() -> Layer:
    return Layer("maxpool2")


def global_avgpool() -> Layer:
    return Layer("gap")


def dense(out_features: int) -> Layer:
    return Layer("dense", out_features=out_features)


@dataclass
class NetworkSpec:
    """Architecture description plus the tap-point selection.

    ``tap_points`` lists layer indices whose outputs are captured during a
    tapped forward pass; every tap must refer to a layer with a 4-D
    (N,C,H,W) output and the list must be strictly increasing.
    """

    input_channels: int
    input_height: int
    input_width: int
    num_classes: int
    layers: list[Layer]
    tap_points: list[int]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network spec has no layers")
        shapes = self.layer_shapes()
        if not self.tap_points:
            raise ConfigError("at least one tap point is required")
        if any(b <= a for a, b in zip(self.tap_points, self.tap_points[1:])):
            raise ConfigError(f"tap points must be strictly increasing, got {self.tap_points}")
        for idx in self.tap_points:
            if not 0 <= idx < len(self.layers):
                raise ConfigError(f"tap index {idx} out of range for {len(self.layers)} layers")
            if len(shapes[idx]) != 4:
                raise ConfigError(f"tap index {idx} refers to layer {self.layers[idx].kind!r} whose output is not 4-D")
        if self.tapped_channels() <= 0:
            raise ConfigError("total tapped channel count must be positive")

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer for a batch of size N (symbolic N=-1)."""
        shape: tuple[int, ...] = (-1, self.input_channels, self.input_height, self.input_width)
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 4:
                    raise ConfigError(f"layer {i}: conv requires a 4-D input, got {shape}")
                _, c, h, w = shape
                if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                    raise ConfigError(f"layer {i}: kernel {layer.kernel} exceeds padded input {h}x{w}")
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                shape = (-1, layer.out_channels, ho, wo)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "maxpool2":
                if len(shape) != 4 or shape[2] < 2 or shape[3] < 2:
                    raise ConfigError(f"layer {i}: maxpool2 needs a 4-D input with extent >= 2, got {shape}")
                shape = (shape[0], shape[1], shape[2] // 2, shape[3] // 2)
            elif layer.kind == "gap":
                if len(shape) != 4:
                    raise ConfigError(f"layer {i}: gap requires a 4-D input, got {shape}")
                shape = (shape[0], shape[1])
            elif layer.kind == "dense":
                if len(shape) != 2:
                    raise ConfigError(f"layer {i}: dense requires a 2-D input (after gap), got {shape}")
                shape = (shape[0], layer.out_features)
            shapes.append(shape)
        return shapes

    def tap_names(self) -> list[str]:
        return [f"layer{idx:02d}_{self.layers[idx].kind}" for idx in self.tap_points]

    def tapped_channels(self) -> int:
        shapes = self.layer_shapes()
        return sum(shapes[idx][1] for idx in self.tap_points)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
            "tap_points": list(self.tap_points),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(
                input_channels=int(d["input_channels"]),
                input_height=int(d["input_height"]),
                input_width=int(d["input_width"]),
                num_classes=int(d["num_classes"]),
                layers=[Layer.from_dict(ld) for ld in d["layers"]],
                tap_points=[int(i) for i in d["tap_points"]],
            )
        except KeyError as exc:
            raise ConfigError(f"network spec document is missing field {exc}") from exc


def default_tap_points(layers: list[Layer]) -> list[int]:
    """Tap every post-activation conv-block output (each relu after a conv)."""
    taps = []
    for i, layer in enumerate(layers):
        if layer.kind == "relu" and i > 0 and layers[i - 1].kind == "conv":
            taps.append(i)
    return taps


def small_spec(input_channels: int, input_size: int, num_classes: int,
               widths: tuple[int, ...] = (16, 32, 64)) -> NetworkSpec:
    """Default desk-scale template: three conv+relu+maxpool blocks, gap, dense."""
    layers: list[Layer] = []
    for width in widths:
        layers += [conv(width, kernel=3, stride=1, padding=1), relu(), maxpool2()]
    layers += [global_avgpool(), dense(num_classes)]
    return NetworkSpec(
        input_channels=input_channels,
        input_height=input_size,
        input_width=input_size,
        num_classes=num_classes,
        layers=layers,
        tap_points=default_tap_points(layers),
    )


@dataclass
class TappedForward:
    """Logits plus the captured tap activations, in spec order."""

    logits: T.Tensor
    taps: list[tuple[str, T.Tensor]]


@dataclass
class NetworkCheckpoint:
    """Frozen template network: spec, parameters, normalization, metadata.

    ``norm_mean``/``norm_std`` are per-channel dataset statistics applied
    to [0,1] pixels before the first layer; they are part of the
    fingerprinted content because they change every downstream code.
    """

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    norm_mean: list[float]
    norm_std: list[float]
    metadata: dict = field(default_factory=dict)
    _fingerprint: str | None = field(default=None, repr=False, compare=False)

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = hashlib.sha256(_serialize_body(self)).hexdigest()
        return self._fingerprint

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def astype(self, dtype) -> "NetworkCheckpoint":
        """Copy with parameters cast to ``dtype`` (for float64 gradient checks)."""
        return NetworkCheckpoint(
            spec=self.spec,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            norm_mean=list(self.norm_mean),
            norm_std=list(self.norm_std),
            metadata=dict(self.metadata),
        )


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal conv/dense weights, zero biases; fully seeded."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    shapes = spec.layer_shapes()
    in_shape: tuple[int, ...] = (-1, spec.input_channels, spec.input_height, spec.input_width)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c_in = in_shape[1]
            fan_in = c_in * layer.kernel * layer.kernel
            params[f"layer{i:02d}.weight"] = (
                rng.standard_normal((layer.out_channels, c_in, layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
            ).astype(dtype)
            params[f"layer{i:02d}.bias"] = np.zeros(layer.out_channels, dtype=dtype)
        elif layer.kind == "dense":
            f_in = in_shape[1]
            params[f"layer{i:02d}.weight"] = (
                rng.standard_normal((f_in, layer.out_features)) * np.sqrt(2.0 / f_in)
            ).astype(dtype)
            params[f"layer{i:02d}.bias"] = np.zeros(layer.out_features, dtype=dtype)
        in_shape = shapes[i]
    return params


def forward_with_taps(net: NetworkCheckpoint, images, param_tensors: dict[str, T.Tensor] | None = None) -> TappedForward:
    """Run the template forward, capturing tap activations.

    ``images`` is an N,C,H,W array or Tensor of [0,1] pixels matching the
    spec geometry. Pure function of (checkpoint, images); differentiable
    back to the pixels when executed inside a Tape. ``param_tensors``
    substitutes trainable parameter tensors during template training.
    """
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    spec = net.spec
    expected = (spec.input_channels, spec.input_height, spec.input_width)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(
            f"input geometry mismatch: expected (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}"
        )
    dtype = x.dtype

    def param(name: str) -> T.Tensor:
        if param_tensors is not None:
            return param_tensors[name]
        return T.Tensor(net.params[name].astype(dtype, copy=False))

    inv_std = 1.0 / np.asarray(net.norm_std, dtype=dtype)
    shift = -np.asarray(net.norm_mean, dtype=dtype) * inv_std
    out = T.channel_affine(x, inv_std, shift)

    tap_set = set(spec.tap_points)
    taps: list[tuple[str, T.Tensor]] = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            out = T.conv2d(out, param(f"layer{i:02d}.weight"), param(f"layer{i:02d}.bias"),
                           stride=layer.stride, padding=layer.padding)
        elif layer.kind == "relu":
            out = T.relu(out)
        elif layer.kind == "maxpool2":
            out = T.maxpool2(out)
        elif layer.kind == "gap":
            out = T.avgpool_global(out)
        elif layer.kind == "dense":
            out = T.dense(out, param(f"layer{i:02d}.weight"), param(f"layer{i:02d}.bias"))
        if i in tap_set:
            taps.append((f"layer{i:02d}_{layer.kind}", out))
    return TappedForward(logits=out, taps=taps)


def _trainable_tensors(net: NetworkCheckpoint) -> dict[str, T.Tensor]:
    return {name: T.Tensor(arr, requires_grad=True) for name, arr in net.params.items()}


def evaluate(net: NetworkCheckpoint, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Classification accuracy over a labeled set (inference only)."""
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        logits = forward_with_taps(net, batch).logits.data
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(images)


def train_template(
    spec: NetworkSpec,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    epochs: int = 2,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    dataset_name: str = "unnamed",
) -> NetworkCheckpoint:
    """Train the template classifier with Adam and cross-entropy.

    Training is plumbing: its only purpose is to produce a feature
    dictionary at desk scale. Fully seeded; records the final test
    accuracy (train accuracy when no test split is given) in metadata.
    """
    if len(train_images) == 0:
        raise DegenerateInputError("training dataset is empty")
    if train_labels.min() < 0 or train_labels.max() >= spec.num_classes:
        raise ConfigError(
            f"labels must lie in [0, {spec.num_classes}), got [{train_labels.min()}, {train_labels.max()}]"
        )
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")

    norm_mean = [float(train_images[:, c].mean()) for c in range(spec.input_channels)]
    norm_std = [max(float(train_images[:, c].std()), 1e-4) for c in range(spec.input_channels)]
    net = NetworkCheckpoint(
        spec=spec,
        params=init_params(spec, seed=seed),
        norm_mean=norm_mean,
        norm_std=norm_std,
    )
    tensors = _trainable_tensors(net)
    net.params = {name: t.data for name, t in tensors.items()}
    ordered = [tensors[name] for name in sorted(tensors)]
    opt = T.AdamOptimizer(lr=lr)
    rng = np.random.default_rng(seed)

    for epoch in range(epochs):
        order = rng.permutation(len(train_images))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = T.Tensor(train_images[idx])
            with T.Tape() as tape:
                logits = forward_with_taps(net, batch, param_tensors=tensors).logits
                loss = T.cross_entropy(logits, train_labels[idx])
            if not np.isfinite(loss.data).all():
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}; try a lower learning rate than {lr}"
                )
            T.backward(loss, tape)
            opt.step(ordered)
            for t in ordered:
                t.grad = None

    if test_images is not None and test_labels is not None:
        accuracy = evaluate(net, test_images, test_labels)
    else:
        accuracy = evaluate(net, train_images, train_labels)
    net.metadata = {
        "dataset": dataset_name,
        "accuracy": accuracy,
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
        "optimizer": "adam",
    }
    net._fingerprint = None
    return net


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
#
# Little-endian layout: magic "IMPR", version u32, length-prefixed UTF-8
# JSON document (spec + normalization + metadata), tensor count u32, then
# per tensor: length-prefixed name, dtype tag u8 (0=f32, 1=f64), rank u32,
# dims u64[rank], raw values. The fingerprint is SHA-256 over everything
# after the magic.

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def _document(net: NetworkCheckpoint) -> dict:
    return {
        "spec": net.spec.to_dict(),
        "norm_mean": [float(v) for v in net.norm_mean],
        "norm_std": [float(v) for v in net.norm_std],
        "metadata": net.metadata,
    }


def _serialize_body(net: NetworkCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    doc = json.dumps(_document(net), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(doc)))
    buf.write(doc)
    names = net.param_names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(net.params[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise ConfigError(f"parameter {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def save_checkpoint(net: NetworkCheckpoint, path) -> str:
    """Write the checkpoint; returns its fingerprint."""
    body = _serialize_body(net)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body)
    net._fingerprint = hashlib.sha256(body).hexdigest()
    return net._fingerprint


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> NetworkCheckpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        body = fh.read()
    fh2 = io.BytesIO(body)
    (version,) = struct.unpack("<I", _read_exact(fh2, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (doc_len,) = struct.unpack("<I", _read_exact(fh2, 4, "document length"))
    doc_bytes = _read_exact(fh2, doc_len, "spec document")
    try:
        doc = json.loads(doc_bytes.decode("utf-8"))
        spec = NetworkSpec.from_dict(doc["spec"])
        norm_mean = [float(v) for v in doc["norm_mean"]]
        norm_std = [float(v) for v in doc["norm_std"]]
        metadata = doc.get("metadata", {})
    except (ValueError, KeyError, ConfigError) as exc:
        raise CorruptCheckpointError(f"checkpoint spec document is invalid: {exc}") from exc
    (count,) = struct.unpack("<I", _read_exact(fh2, 4, "tensor count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh2, 4, "name length"))
        name = _read_exact(fh2, name_len, "tensor name").decode("utf-8")
        (tag,) = struct.unpack("<B", _read_exact(fh2, 1, "dtype tag"))
        if tag not in _TAG_DTYPES:
            raise CorruptCheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
        dtype = _TAG_DTYPES[tag]
        (rank,) = struct.unpack("<I", _read_exact(fh2, 4, "rank"))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh2, 8 * rank, "dims"))
        nbytes = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
        raw = _read_exact(fh2, nbytes, f"values of {name!r}")
        params[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    net = NetworkCheckpoint(spec=spec, params=params, norm_mean=norm_mean, norm_std=norm_std, metadata=metadata)
    net._fingerprint = hashlib.sha256(body).hexdigest()
    return net
