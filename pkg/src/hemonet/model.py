"""The three network variants that share one convolutional encoder.

* ``single_task``:    encoder -> global average pool -> dense head -> p(positive)
* ``multi_task``:     adds a decoder branch off the bottleneck that predicts the
                      center slice's mask, trained with an auxiliary pixel loss
* ``task_dependent``: additionally converts the predicted mask into an estimated
                      blood volume (mm^3) and concatenates that scalar, after
                      standardization, onto the pooled bottleneck vector feeding
                      the classification head

All parameters live in a flat name -> Tensor registry with deterministic
seeded initialization, so models rebuild bit-identically from (arch, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import ops
from .tensor import Tensor

VARIANTS = ("single_task", "multi_task", "task_dependent")
DEFAULT_VOXEL_VOLUME = 0.5 * 0.5 * 5.0  # mm^3


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "task_dependent"
    input_slices: int = 5
    height: int = 64
    width: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    convs_per_stage: int = 2
    decoder_channels: tuple[int, ...] = (32, 16, 8)
    head_hidden: int = 32
    # divisor that standardizes the mm^3 feature before it joins the head
    # input; None resolves to the full field-of-view volume of one slice
    volume_norm_mm3: Optional[float] = None
    use_skip_connections: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.input_slices < 1 or self.input_slices % 2 == 0:
            raise ValueError(f"input_slices must be odd and positive, got {self.input_slices}")
        stages = len(self.encoder_channels)
        if stages < 1 or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be non-empty positive widths")
        factor = 2 ** stages
        if self.height % factor or self.width % factor:
            raise ValueError(
                f"input {self.height}x{self.width} not divisible by 2^{stages} "
                f"required by {stages} pooling stages"
            )
        if self.variant != "single_task":
            if len(self.decoder_channels) != stages:
                raise ValueError(
                    f"decoder needs {stages} stages to restore {self.height}x{self.width}, "
                    f"got {len(self.decoder_channels)}"
                )
            if min(self.decoder_channels) < 1:
                raise ValueError("decoder_channels must be positive widths")
        if self.convs_per_stage < 1 or self.head_hidden < 1:
            raise ValueError("convs_per_stage and head_hidden must be positive")
        if self.volume_norm_mm3 is not None and self.volume_norm_mm3 <= 0:
            raise ValueError("volume_norm_mm3 must be positive")

    @property
    def has_decoder(self) -> bool:
        return self.variant != "single_task"

    @property
    def bottleneck_features(self) -> int:
        return self.encoder_channels[-1]

    @property
    def head_input_features(self) -> int:
        return self.bottleneck_features + (1 if self.variant == "task_dependent" else 0)

    def resolved(self) -> "ArchConfig":
        """Fill derived defaults so the config serializes unambiguously."""
        if self.volume_norm_mm3 is not None:
            return self
        return replace(self, volume_norm_mm3=self.height * self.width * DEFAULT_VOXEL_VOLUME)


@dataclass
class Predictions:
    """Batch outputs; tensors stay attached to the graph for training."""

    cls_prob: Tensor  # (batch,)
    seg_probs: Optional[Tensor]  # (batch, H, W), absent for single_task
    volume_mm3: Optional[Tensor]  # (batch,), raw mm^3, task_dependent only


def blood_volume_feature(seg_probs, voxel_volume: float) -> Tensor:
    """Estimated blood volume: voxel volume times the summed mask probabilities.

    Accepts one map (H, W) or a batch (batch, H, W); stays differentiable so
    classification gradients reach the decoder through it.
    """
    if voxel_volume <= 0:
        raise ValueError(f"voxel_volume must be positive, got {voxel_volume}")
    probs = seg_probs if isinstance(seg_probs, Tensor) else Tensor(np.asarray(seg_probs))
    if probs.data.min() < 0.0 or probs.data.max() > 1.0:
        raise ValueError("segmentation probabilities must lie in [0, 1]")
    return ops.mul(ops.reduce_sum(probs, axis=(-2, -1)), float(voxel_volume))


class Model:
    """A parameter registry plus the forward graph for one variant."""

    def __init__(self, arch: ArchConfig, params: dict[str, Tensor], dtype):
        self.arch = arch.resolved()
        self.params = params
        self.dtype = np.dtype(dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_parameter_data(self, name: str, data: np.ndarray) -> None:
        p = self.params[name]
        if p.data.shape != data.shape:
            raise ValueError(
                f"parameter {name!r} expects shape {p.data.shape}, got {data.shape}"
            )
        p.data = data.astype(p.data.dtype, copy=True)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, data in snapshot.items():
            self.set_parameter_data(name, data)

    # -- forward ---------------------------------------------------------

    def forward(self, batch, voxel_volume: Optional[float] = None) -> Predictions:
        arch = self.arch
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.data.ndim != 4 or x.data.shape[1:] != (arch.input_slices, arch.height, arch.width):
            raise ValueError(
                f"batch shape {x.data.shape} does not match architecture input "
                f"(*, {arch.input_slices}, {arch.height}, {arch.width})"
            )

        t = x
        pre_pool = []
        for s in range(1, len(arch.encoder_channels) + 1):
            for c in range(1, arch.convs_per_stage + 1):
                t = ops.relu(
                    ops.conv2d(
                        t,
                        self.params[f"enc{s}.conv{c}.w"],
                        self.params[f"enc{s}.conv{c}.b"],
                        padding="same",
                    )
                )
            pre_pool.append(t)
            t = ops.max_pool2d(t, 2)
        bottleneck = t
        pooled = ops.reduce_mean(bottleneck, axis=(2, 3))

        seg_probs = None
        volume = None
        if arch.has_decoder:
            d = bottleneck
            n_stages = len(arch.decoder_channels)
            for s in range(1, n_stages + 1):
                d = ops.nearest_upsample2d(d, 2)
                if arch.use_skip_connections:
                    d = ops.concat([d, pre_pool[n_stages - s]], axis=1)
                d = ops.relu(
                    ops.conv2d(d, self.params[f"dec{s}.conv.w"], self.params[f"dec{s}.conv.b"],
                               padding="same")
                )
            logits = ops.conv2d(d, self.params["seg.out.w"], self.params["seg.out.b"],
                                padding="valid")
            seg_probs = ops.sigmoid(
                ops.reshape(logits, (x.data.shape[0], arch.height, arch.width))
            )

        head_in = pooled
        if arch.variant == "task_dependent":
            if voxel_volume is None:
                raise ValueError("task_dependent forward requires the batch voxel_volume")
            volume = blood_volume_feature(seg_probs, voxel_volume)
            feature = ops.mul(volume, 1.0 / arch.volume_norm_mm3)
            head_in = ops.concat([pooled, ops.reshape(feature, (-1, 1))], axis=1)

        h = ops.leaky_relu(ops.dense(head_in, self.params["head.fc1.w"], self.params["head.fc1.b"]))
        logit = ops.dense(h, self.params["head.out.w"], self.params["head.out.b"])
        cls_prob = ops.sigmoid(ops.reshape(logit, (-1,)))
        return Predictions(cls_prob=cls_prob, seg_probs=seg_probs, volume_mm3=volume)


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


def build_model(arch: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """Instantiate a variant with deterministic seeded initialization."""
    arch = arch.resolved()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in):
        params[name] = Tensor(_he_uniform(rng, shape, fan_in, dtype),
                              requires_grad=True, name=name)
        bias = name[:-2] + ".b"
        params[bias] = Tensor(np.zeros(shape[0] if len(shape) == 4 else shape[1], dtype=dtype),
                              requires_grad=True, name=bias)

    c_in = arch.input_slices
    skip_feed = list(arch.encoder_channels)
    for s, ch in enumerate(arch.encoder_channels, 1):
        for c in range(1, arch.convs_per_stage + 1):
            add(f"enc{s}.conv{c}.w", (ch, c_in, 3, 3), c_in * 9)
            c_in = ch
    if arch.has_decoder:
        c_in = arch.bottleneck_features
        for s, ch in enumerate(arch.decoder_channels, 1):
            if arch.use_skip_connections:
                c_in += skip_feed[len(arch.decoder_channels) - s]
            add(f"dec{s}.conv.w", (ch, c_in, 3, 3), c_in * 9)
            c_in = ch
        add("seg.out.w", (1, c_in, 1, 1), c_in)
    add("head.fc1.w", (arch.head_input_features, arch.head_hidden), arch.head_input_features)
    add("head.out.w", (arch.head_hidden, 1), arch.head_hidden)
    return Model(arch, params, dtype)
