"""Pre-activation wide residual network producing region features V (C x G)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor, as_tensor


@dataclass
class EncoderConfig:
    """Layout of the residual image encoder.

    Stage ``i`` has ``base_width * 2**i * widen_factor`` channels and
    ``blocks_per_stage`` pre-activation blocks; the first block of each stage
    applies that stage's stride. The desk-scale default gives C=64, g=4.
    """

    input_size: int = 32
    blocks_per_stage: int = 2
    widen_factor: int = 2
    base_width: int = 8
    num_stages: int = 3
    stem_stride: int = 1
    stage_strides: tuple[int, ...] = (2, 2, 2)
    dropout: float = 0.0

    def __post_init__(self):
        self.stage_strides = tuple(self.stage_strides)
        if len(self.stage_strides) != self.num_stages:
            raise ConfigError("stage_strides", f"need {self.num_stages} entries, got {len(self.stage_strides)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must lie in [0, 1), got {self.dropout}")
        if self.input_size % self.downsample:
            raise ConfigError("input_size", f"{self.input_size} not divisible by total stride {self.downsample}")

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        """WRN16-4 on 224x224 inputs: C=256, G=14x14."""
        return cls(input_size=224, blocks_per_stage=2, widen_factor=4, base_width=16, num_stages=3,
                   stem_stride=2, stage_strides=(2, 2, 2), dropout=0.3)

    @property
    def depth(self) -> int:
        # WRN naming convention: 6n + 4 for three stages of n two-conv blocks
        return 2 * self.blocks_per_stage * self.num_stages + 4

    @property
    def downsample(self) -> int:
        return self.stem_stride * int(np.prod(self.stage_strides))

    @property
    def stage_widths(self) -> list[int]:
        return [self.base_width * (2 ** i) * self.widen_factor for i in range(self.num_stages)]

    @property
    def channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def grid_side(self) -> int:
        return self.input_size // self.downsample

    @property
    def grid_area(self) -> int:
        return self.grid_side ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisualFeatures:
    V: Tensor
    source_id: str | int | None = None


class ResidualBlock(Module):
    """bn -> relu -> conv3x3 -> bn -> relu -> dropout -> conv3x3, plus shortcut.

    A 1x1 strided projection replaces the identity shortcut whenever the
    channel count or spatial size changes.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.bn1 = BatchNorm(in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.bn2 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=1, padding=1)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng, stride=stride) if (in_ch != out_ch or stride != 1) else None
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise DimensionError(f"residual block expects {self.in_ch} channels, got {x.shape[1]}")
        pre = ops.relu(self.bn1(x))
        y = ops.relu(self.bn2(self.conv1(pre)))
        y = self.conv2(ops.dropout(y, self.dropout, rng, self.training))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        return ops.add(skip, y)


def residual_block(x: Tensor, block: ResidualBlock, rng: np.random.Generator | None = None) -> Tensor:
    return block(x, rng)


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.base_width, 3, rng, stride=cfg.stem_stride, padding=1)
        blocks = []
        in_ch = cfg.base_width
        for width, stride in zip(cfg.stage_widths, cfg.stage_strides):
            for b in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(in_ch, width, stride if b == 0 else 1, cfg.dropout, rng))
                in_ch = width
        self.blocks = blocks
        self.bn_out = BatchNorm(in_ch)

    def shape_trace(self, batch: int = 1) -> list[tuple[int, ...]]:
        """Feature-map shapes after the stem and after each block."""
        side = self.cfg.input_size // self.cfg.stem_stride
        shapes = [(batch, self.cfg.base_width, side, side)]
        for block in self.blocks:
            stride = block.conv1.stride
            side = (side - 1) // stride + 1
            shapes.append((batch, block.out_ch, side, side))
        return shapes

    def feature_map(self, images: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        size = self.cfg.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise DimensionError(f"image encoder expects (B, 3, {size}, {size}) input, got {images.shape}")
        x = self.stem(images)
        for block in self.blocks:
            x = block(x, rng)
        return ops.relu(self.bn_out(x))

    def __call__(self, images: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """(B, 3, H, W) -> V of shape (B, C, G); a single (3, H, W) image gives (C, G)."""
        images = as_tensor(images)
        single = images.ndim == 3
        if single:
            images = ops.reshape(images, (1,) + images.shape)
        fmap = self.feature_map(images, rng)
        B, C, g, _ = fmap.shape
        V = ops.reshape(fmap, (B, C, g * g))
        return ops.reshape(V, (C, g * g)) if single else V


def encode_image(img: Tensor, encoder: ImageEncoder, rng: np.random.Generator | None = None,
                 source_id=None) -> VisualFeatures:
    return VisualFeatures(encoder(img, rng), source_id)
