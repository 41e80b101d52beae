"""Impression codes: per-tap channel statistics of template activations.

A code is the concatenation, over all tap points, of per-channel spatial
means (and, depending on the schema, population variances) of the tapped
feature maps. Codes from whole datasets are ensembled batch-norm style:
one mean/variance per channel over every sample and spatial position.
Distance between codes from the same template is the Euclidean norm of
the flattened difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import CodeFileError, DegenerateInputError, DimensionError, IncompatibleCodesError
from .network import NetworkCheckpoint, forward_with_taps


class CodeSchema(str, Enum):
    MEAN_ONLY = "mean"
    VAR_ONLY = "var"
    MEAN_VAR = "meanvar"

    @property
    def has_mean(self) -> bool:
        return self in (CodeSchema.MEAN_ONLY, CodeSchema.MEAN_VAR)

    @property
    def has_var(self) -> bool:
        return self in (CodeSchema.VAR_ONLY, CodeSchema.MEAN_VAR)

    @classmethod
    def parse(cls, tag: str) -> "CodeSchema":
        try:
            return cls(tag)
        except ValueError:
            raise CodeFileError(f"unknown schema tag {tag!r}; expected one of {[s.value for s in cls]}") from None


@dataclass(frozen=True)
class TapStats:
    """Statistics of one tap point; arrays are per-channel."""

    name: str
    mean: np.ndarray | None
    var: np.ndarray | None

    @property
    def channels(self) -> int:
        arr = self.mean if self.mean is not None else self.var
        return len(arr)


@dataclass(frozen=True)
class ImpressionCode:
    """A point in impression space, tied to one template network."""

    schema: CodeSchema
    fingerprint: str
    taps: tuple[TapStats, ...]
    ensemble_size: int = 1

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise CodeFileError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        for tap in self.taps:
            if self.schema.has_mean != (tap.mean is not None) or self.schema.has_var != (tap.var is not None):
                raise CodeFileError(f"tap {tap.name!r} does not carry the arrays its schema {self.schema.value!r} requires")
            if tap.var is not None and (tap.var < 0).any():
                raise CodeFileError(f"tap {tap.name!r} has a negative variance entry")

    @property
    def dimension(self) -> int:
        per = int(self.schema.has_mean) + int(self.schema.has_var)
        return per * sum(tap.channels for tap in self.taps)

    def to_vector(self) -> np.ndarray:
        """Flatten tap-by-tap (mean then variance within a tap) to float64."""
        parts = []
        for tap in self.taps:
            if tap.mean is not None:
                parts.append(np.asarray(tap.mean, dtype=np.float64))
            if tap.var is not None:
                parts.append(np.asarray(tap.var, dtype=np.float64))
        return np.concatenate(parts)

    def mean_half(self) -> "ImpressionCode":
        """The MeanOnly restriction of a code that carries means."""
        if not self.schema.has_mean:
            raise IncompatibleCodesError("code has no mean component to restrict to")
        return ImpressionCode(
            schema=CodeSchema.MEAN_ONLY,
            fingerprint=self.fingerprint,
            taps=tuple(TapStats(t.name, t.mean, None) for t in self.taps),
            ensemble_size=self.ensemble_size,
        )


def check_compatible(a: ImpressionCode, b: ImpressionCode) -> None:
    """Raise IncompatibleCodesError naming the first differing field."""
    if a.schema != b.schema:
        raise IncompatibleCodesError(f"schema mismatch: {a.schema.value!r} vs {b.schema.value!r}")
    if a.fingerprint != b.fingerprint:
        raise IncompatibleCodesError(
            f"network fingerprint mismatch: {a.fingerprint[:12]}... vs {b.fingerprint[:12]}..."
        )
    names_a = [t.name for t in a.taps]
    names_b = [t.name for t in b.taps]
    if names_a != names_b:
        raise IncompatibleCodesError(f"tap structure mismatch: {names_a} vs {names_b}")
    for ta, tb in zip(a.taps, b.taps):
        if ta.channels != tb.channels:
            raise IncompatibleCodesError(
                f"tap {ta.name!r} channel count mismatch: {ta.channels} vs {tb.channels}"
            )


def distance(a: ImpressionCode, b: ImpressionCode) -> float:
    """Euclidean distance between two codes of identical structure."""
    check_compatible(a, b)
    return float(np.linalg.norm(a.to_vector() - b.to_vector()))


def encode(net: NetworkCheckpoint, image: np.ndarray, schema: CodeSchema = CodeSchema.MEAN_VAR) -> ImpressionCode:
    """Code of a single image: per-channel spatial statistics of each tap."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise DimensionError(f"encode takes a single image, got batch of {image.shape[0]}")
    tf = forward_with_taps(net, image)
    taps = []
    for name, act in tf.taps:
        mean_t, var_t = T.channel_stats(act, over_batch=False)
        taps.append(
            TapStats(
                name=name,
                mean=mean_t.data[0].copy() if schema.has_mean else None,
                var=var_t.data[0].copy() if schema.has_var else None,
            )
        )
    return ImpressionCode(schema=schema, fingerprint=net.fingerprint(), taps=tuple(taps), ensemble_size=1)


class EnsembleAccumulator:
    """Streaming per-channel statistics over a dataset, batch-norm style.

    Accumulates count / sum / sum-of-squares per tap channel in float64
    (mandatory regardless of activation precision: the sum-of-squares form
    loses precision for huge streams otherwise). Merging accumulators is
    associative and commutative, so partitions may be processed in any
    order; results agree within documented tolerance.
    """

    def __init__(self, net: NetworkCheckpoint, schema: CodeSchema = CodeSchema.MEAN_VAR):
        self.net = net
        self.schema = schema
        self.images = 0
        self._sums: list[np.ndarray] | None = None
        self._sumsqs: list[np.ndarray] | None = None
        self._names: list[str] = []

    def update(self, images: np.ndarray) -> None:
        """Fold a mini-batch of images into the running statistics."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        tf = forward_with_taps(self.net, images)
        if self._sums is None:
            self._names = [name for name, _ in tf.taps]
            self._sums = [np.zeros(act.shape[1], dtype=np.float64) for _, act in tf.taps]
            self._sumsqs = [np.zeros(act.shape[1], dtype=np.float64) for _, act in tf.taps]
        self.images += images.shape[0]
        for i, (_, act) in enumerate(tf.taps):
            a = act.data.astype(np.float64)
            self._sums[i] += a.sum(axis=(0, 2, 3))
            self._sumsqs[i] += (a * a).sum(axis=(0, 2, 3))

    def merge(self, other: "EnsembleAccumulator") -> None:
        if other._sums is None:
            return
        if self._sums is None:
            self._names = list(other._names)
            self._sums = [s.copy() for s in other._sums]
            self._sumsqs = [s.copy() for s in other._sumsqs]
            self.images = other.images
            self.count = other.count
            return
        if self._names != other._names:
            raise IncompatibleCodesError("cannot merge accumulators with different tap structures")
        for i in range(len(self._sums)):
            self._sums[i] += other._sums[i]
            self._sumsqs[i] += other._sumsqs[i]
        self.images += other.images

    def finalize(self) -> ImpressionCode:
        if self._sums is None or self.images == 0:
            raise DegenerateInputError("ensemble over an empty dataset")
        spec = self.net.spec
        shapes = spec.layer_shapes()
        taps = []
        for i, name in enumerate(self._names):
            idx = spec.tap_points[i]
            _, _, h, w = shapes[idx]
            m = self.images * h * w
            mean = self._sums[i] / m
            var = np.maximum(self._sumsqs[i] / m - mean * mean, 0.0)
            taps.append(
                TapStats(
                    name=name,
                    mean=mean.astype(np.float64) if self.schema.has_mean else None,
                    var=var.astype(np.float64) if self.schema.has_var else None,
                )
            )
        return ImpressionCode(
            schema=self.schema,
            fingerprint=self.net.fingerprint(),
            taps=tuple(taps),
            ensemble_size=self.images,
        )


def encode_ensemble(
    net: NetworkCheckpoint,
    images: np.ndarray | Iterable[np.ndarray],
    schema: CodeSchema = CodeSchema.MEAN_VAR,
    batch_size: int = 64,
) -> ImpressionCode:
    """Ensembled code of a whole image set (the salient-feature code).

    ``images`` is either one N,C,H,W array or an iterable of mini-batches
    with uniform geometry. Order- and partition-invariant within 1e-5
    relative tolerance.
    """
    acc = EnsembleAccumulator(net, schema)
    if isinstance(images, np.ndarray):
        if images.ndim == 3:
            images = images[None]
        if len(images) == 0:
            raise DegenerateInputError("ensemble over an empty dataset")
        for start in range(0, len(images), batch_size):
            acc.update(images[start : start + batch_size])
    else:
        for batch in images:
            acc.update(batch)
    return acc.finalize()


# ---------------------------------------------------------------------------
# persistence: UTF-8 JSON with >= 9 significant digits
# ---------------------------------------------------------------------------


def _float_list(arr: np.ndarray) -> list[float]:
    # float(np.float32) is the exact binary value; repr round-trips it
    return [float(v) for v in arr]


def save_code(code: ImpressionCode, path) -> None:
    doc = {
        "schema": code.schema.value,
        "fingerprint": code.fingerprint,
        "ensemble_size": code.ensemble_size,
        "taps": [
            {
                "name": tap.name,
                **({"mean": _float_list(tap.mean)} if tap.mean is not None else {}),
                **({"var": _float_list(tap.var)} if tap.var is not None else {}),
            }
            for tap in code.taps
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_code(path) -> ImpressionCode:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CodeFileError(f"cannot read code file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CodeFileError(f"code file {path} is not valid JSON: {exc}") from exc
    try:
        schema = CodeSchema.parse(doc["schema"])
        fingerprint = str(doc["fingerprint"])
        ensemble_size = int(doc["ensemble_size"])
        taps = []
        for entry in doc["taps"]:
            mean = np.asarray(entry["mean"], dtype=np.float64) if "mean" in entry else None
            var = np.asarray(entry["var"], dtype=np.float64) if "var" in entry else None
            if mean is not None and var is not None and len(mean) != len(var):
                raise CodeFileError(f"tap {entry['name']!r}: mean and var lengths differ")
            for arr in (mean, var):
                if arr is not None and not np.isfinite(arr).all():
                    raise CodeFileError(f"tap {entry['name']!r} contains non-finite values")
            taps.append(TapStats(name=str(entry["name"]), mean=mean, var=var))
    except (KeyError, TypeError, ValueError) as exc:
        raise CodeFileError(f"code file {path} is malformed: {exc}") from exc
    return ImpressionCode(schema=schema, fingerprint=fingerprint, taps=tuple(taps), ensemble_size=ensemble_size)


def iter_single_codes(
    net: NetworkCheckpoint,
    images: np.ndarray,
    schema: CodeSchema = CodeSchema.MEAN_VAR,
) -> Iterator[ImpressionCode]:
    """Per-image codes of a batch, computed in one forward pass."""
    images = np.asarray(images)
    tf = forward_with_taps(net, images)
    stats = [(name, *T.channel_stats(act, over_batch=False)) for name, act in tf.taps]
    fp = net.fingerprint()
    for n in range(images.shape[0]):
        taps = tuple(
            TapStats(
                name=name,
                mean=mean_t.data[n].copy() if schema.has_mean else None,
                var=var_t.data[n].copy() if schema.has_var else None,
            )
            for name, mean_t, var_t in stats
        )
        yield ImpressionCode(schema=schema, fingerprint=fp, taps=taps, ensemble_size=1)
