"""Decoding half: synthesize images whose code matches a target code.

Pixels start as clamped mid-gray Gaussian noise and are updated for k
iterations: augment (pad/random-crop plus random horizontal flip),
forward through the template, squared-distance loss between the current
code and the target, backward to the pixels, Adam step, clamp to [0,1].
The same loop also serves translation, which adds a pixel-space content
term anchored at the source images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .codes import CodeSchema, ImpressionCode, check_compatible, encode
from .errors import ConfigError, DimensionError, IncompatibleCodesError, NumericError, OptimizationDivergedError
from .network import NetworkCheckpoint, forward_with_taps


class MatchingMode(str, Enum):
    PER_IMAGE = "per-image"
    BATCH_ENSEMBLE = "ensemble"

    @classmethod
    def parse(cls, tag: str) -> "MatchingMode":
        try:
            return cls(tag)
        except ValueError:
            raise ConfigError(f"unknown matching mode {tag!r}; expected one of {[m.value for m in cls]}") from None


@dataclass
class SynthesisConfig:
    """Optimization hyperparameters for decoding.

    Defaults are the published recipe: batch of 32 images, 2000 Adam
    iterations at learning rate 0.1 with betas (0.5, 0.9), random
    pad-and-crop jitter plus probability-0.5 horizontal flips.
    """

    iterations: int = 2000
    learning_rate: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    batch_size: int = 32
    init_mean: float = 0.5
    init_std: float = 0.2
    shift: int = 4
    flip_prob: float = 0.5
    matching_mode: MatchingMode = MatchingMode.PER_IMAGE
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.matching_mode, str) and not isinstance(self.matching_mode, MatchingMode):
            self.matching_mode = MatchingMode.parse(self.matching_mode)
        self.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.shift < 0:
            raise ConfigError(f"shift must be >= 0, got {self.shift}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")


@dataclass
class SynthesisResult:
    """Final images plus the loss record of the run.

    ``loss_trajectory`` has one total-loss entry per iteration.
    ``per_image_losses`` is an unaugmented evaluation of the final images.
    The impression/content split is populated by translation runs.
    """

    images: np.ndarray
    loss_trajectory: np.ndarray
    per_image_losses: np.ndarray
    impression_trajectory: np.ndarray | None = None
    content_trajectory: np.ndarray | None = None


def validate_target(net: NetworkCheckpoint, target: ImpressionCode) -> None:
    """Check that ``target`` was produced by ``net`` (same taps, channels)."""
    if target.fingerprint != net.fingerprint():
        raise IncompatibleCodesError(
            f"target code fingerprint {target.fingerprint[:12]}... does not match "
            f"network {net.fingerprint()[:12]}..."
        )
    names = [t.name for t in target.taps]
    if names != net.spec.tap_names():
        raise IncompatibleCodesError(f"tap structure mismatch: code has {names}, network has {net.spec.tap_names()}")


def impression_loss(
    net: NetworkCheckpoint,
    images: T.Tensor | np.ndarray,
    target: ImpressionCode,
    matching_mode: MatchingMode = MatchingMode.PER_IMAGE,
) -> tuple[T.Tensor, np.ndarray]:
    """Squared code-matching loss, differentiable back to the pixels.

    Per-image mode encodes every image separately and averages
    0.5*||z_n - target||^2 over the batch; ensemble mode encodes the whole
    batch as one code and returns 0.5*||z* - target||^2. The second return
    value always holds per-image squared half-distances (the averaged
    terms themselves in per-image mode, a diagnostic in ensemble mode).
    """
    x = images if isinstance(images, T.Tensor) else T.Tensor(images)
    validate_target(net, target)
    dtype = x.dtype
    tf = forward_with_taps(net, x)
    n = x.shape[0]
    over_batch = matching_mode is MatchingMode.BATCH_ENSEMBLE
    schema = target.schema

    per_image_acc: T.Tensor | None = None
    scalar_acc: T.Tensor | None = None
    diag = np.zeros(n, dtype=np.float64) if over_batch else None
    for tap_stats, (name, act) in zip(target.taps, tf.taps):
        if act.shape[1] != tap_stats.channels:
            raise IncompatibleCodesError(
                f"tap {name!r} channel count mismatch: network {act.shape[1]}, code {tap_stats.channels}"
            )
        mean_t, var_t = T.channel_stats(act, over_batch=over_batch)
        terms = []
        if schema.has_mean:
            terms.append(T.square(T.sub(mean_t, T.Tensor(np.asarray(tap_stats.mean, dtype=dtype)))))
        if schema.has_var:
            terms.append(T.square(T.sub(var_t, T.Tensor(np.asarray(tap_stats.var, dtype=dtype)))))
        if over_batch:
            # per-image diagnostics need per-sample stats, computed off-tape
            a = act.data
            m_i = a.mean(axis=(2, 3), dtype=np.float64)
            v_i = ((a - m_i[:, :, None, None]) ** 2).mean(axis=(2, 3), dtype=np.float64)
            if schema.has_mean:
                diag += ((m_i - np.asarray(tap_stats.mean, dtype=np.float64)) ** 2).sum(axis=1)
            if schema.has_var:
                diag += ((v_i - np.asarray(tap_stats.var, dtype=np.float64)) ** 2).sum(axis=1)
        for term in terms:
            if over_batch:
                s = T.sum_all(term)
                scalar_acc = s if scalar_acc is None else T.add(scalar_acc, s)
            else:
                s = T.sum_axis(term, 1)
                per_image_acc = s if per_image_acc is None else T.add(per_image_acc, s)

    if over_batch:
        loss = T.scale(scalar_acc, 0.5)
        per_image = 0.5 * diag
    else:
        per_image_half = T.scale(per_image_acc, 0.5)
        loss = T.mean_all(per_image_half)
        per_image = per_image_half.data.astype(np.float64)
    return loss, per_image


def _content_loss(x: T.Tensor, anchor: T.Tensor) -> T.Tensor:
    """Pixel-space anchor term: mean over the batch of 0.5*||x_n - a_n||^2."""
    n = x.shape[0]
    return T.scale(T.sum_all(T.square(T.sub(x, anchor))), 0.5 / n)


def matching_loop(
    net: NetworkCheckpoint,
    target: ImpressionCode,
    cfg: SynthesisConfig,
    init_images: np.ndarray | None = None,
    anchor: np.ndarray | None = None,
    lam: float = 0.0,
) -> SynthesisResult:
    """The shared decode/translate optimization loop (seeded, deterministic)."""
    validate_target(net, target)
    spec = net.spec
    geometry = (spec.input_channels, spec.input_height, spec.input_width)
    rng = np.random.default_rng(cfg.seed)

    if init_images is None:
        pixels = np.clip(
            rng.normal(cfg.init_mean, cfg.init_std, size=(cfg.batch_size,) + geometry), 0.0, 1.0
        ).astype(cfg.dtype)
    else:
        pixels = np.array(init_images, dtype=cfg.dtype)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[1:] != geometry:
            raise DimensionError(f"init images have geometry {pixels.shape[1:]}, network expects {geometry}")
    batch = pixels.shape[0]

    anchor_t: T.Tensor | None = None
    if anchor is not None and lam > 0.0:
        anchor_arr = np.asarray(anchor, dtype=cfg.dtype)
        if anchor_arr.shape != pixels.shape:
            raise DimensionError(f"anchor shape {anchor_arr.shape} does not match images {pixels.shape}")
        anchor_t = T.Tensor(anchor_arr)

    x = T.Tensor(pixels, requires_grad=True)
    state = T.AdamState.for_array(x.data)
    augment = cfg.shift > 0 or cfg.flip_prob > 0
    totals = np.zeros(cfg.iterations)
    imps = np.zeros(cfg.iterations)
    cons = np.zeros(cfg.iterations)

    for step in range(1, cfg.iterations + 1):
        offsets = rng.integers(0, 2 * cfg.shift + 1, size=(batch, 2)) if cfg.shift > 0 else np.zeros((batch, 2), dtype=int)
        flips = rng.random(batch) < cfg.flip_prob if cfg.flip_prob > 0 else np.zeros(batch, dtype=bool)
        try:
            with T.Tape() as tape:
                xin = T.pad_crop_flip(x, cfg.shift, offsets, flips) if augment else x
                imp, _ = impression_loss(net, xin, target, cfg.matching_mode)
                if anchor_t is not None:
                    content = _content_loss(x, anchor_t)
                    total = T.add(imp, T.scale(content, lam))
                else:
                    content = None
                    total = imp
            T.backward(total, tape)
        except NumericError as exc:
            raise OptimizationDivergedError(f"non-finite loss at iteration {step}: {exc}", iteration=step) from exc
        T.adam_step(x.data, x.grad, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, step)
        np.clip(x.data, 0.0, 1.0, out=x.data)
        x.grad = None
        totals[step - 1] = total.item()
        imps[step - 1] = imp.item()
        cons[step - 1] = content.item() if content is not None else 0.0

    _, final_per_image = impression_loss(net, x.data, target, cfg.matching_mode)
    return SynthesisResult(
        images=x.data.copy(),
        loss_trajectory=totals,
        per_image_losses=final_per_image,
        impression_trajectory=imps if anchor is not None else None,
        content_trajectory=cons if anchor is not None else None,
    )


def synthesize(
    net: NetworkCheckpoint,
    target: ImpressionCode,
    cfg: SynthesisConfig,
    init_images: np.ndarray | None = None,
) -> SynthesisResult:
    """Decode a target code into images (one-shot synthesis when the target
    is a single exemplar's code). ``init_images`` overrides the noise init."""
    return matching_loop(net, target, cfg, init_images=init_images)


def encode_target(net: NetworkCheckpoint, image: np.ndarray, schema: CodeSchema = CodeSchema.MEAN_VAR) -> ImpressionCode:
    """Convenience: the code of one exemplar image, for one-shot synthesis."""
    return encode(net, image, schema)
