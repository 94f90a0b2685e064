"""Stage-1 encoder-decoder localizer and its WCE + soft Dice training loss."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BoundingBox, SoftMap
from .preprocess import WORKING_SHAPE

__all__ = [
    "ConfigError",
    "LocLossConfig",
    "LocNet",
    "LocNetConfig",
    "boxes_to_mask",
    "composite_loss",
    "load_locnet",
    "locnet_forward",
    "positive_class_weight",
    "save_locnet",
    "soft_dice_loss",
    "wce_loss",
]

PROB_EPS = 1e-7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LocNetConfig:
    depth: int = 4
    base_filters: int = 16
    kernel_size: int = 3
    input_shape: tuple[int, int] = WORKING_SHAPE
    # >1 average-pools the input before the network and upsamples the softmap back;
    # used only to make CPU-scale experiments affordable
    input_downsample: int = 1

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_filters < 1:
            raise ConfigError("depth and base_filters must be >= 1")
        if self.input_downsample < 1:
            raise ConfigError("input_downsample must be >= 1")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        div = (2 ** self.depth) * self.input_downsample
        if any(s % div for s in self.input_shape):
            raise ConfigError(
                f"input shape {self.input_shape} not divisible by 2^depth * downsample = {div}"
            )

    def filters(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(self.depth + 1)]


@dataclass(frozen=True)
class LocLossConfig:
    wce_weight: float = 0.8
    dice_weight: float = 0.2
    positive_class_weight: float = 28.0
    dice_smooth: float = 1.0

    def __post_init__(self) -> None:
        if abs(self.wce_weight + self.dice_weight - 1.0) > 1e-9:
            raise ConfigError("wce_weight + dice_weight must equal 1")
        if self.positive_class_weight <= 0:
            raise ConfigError("positive_class_weight must be > 0")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be > 0")


class DoubleConv(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, k: int = 3):
        super().__init__(
            nn.Conv2d(c_in, c_out, k, padding=k // 2, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, k, padding=k // 2, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )


class LocNet(nn.Module):
    """U-Net style fully convolutional network emitting a per-pixel probability."""

    def __init__(self, cfg: LocNetConfig = LocNetConfig()):
        super().__init__()
        self.cfg = cfg
        f = cfg.filters()
        k = cfg.kernel_size
        self.down = nn.ModuleList()
        c_in = 1
        for i in range(cfg.depth):
            self.down.append(DoubleConv(c_in, f[i], k))
            c_in = f[i]
        self.bottleneck = DoubleConv(f[cfg.depth - 1], f[cfg.depth], k)
        self.up = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(f[i + 1], f[i], 2, stride=2))
            self.up_conv.append(DoubleConv(2 * f[i], f[i], k))
        self.head = nn.Conv2d(f[0], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        if self.cfg.input_downsample > 1:
            x = F.avg_pool2d(x, self.cfg.input_downsample)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, conv, skip in zip(self.up, self.up_conv, reversed(skips)):
            x = conv(torch.cat([up(x), skip], dim=1))
        x = self.head(x)
        if self.cfg.input_downsample > 1:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) whitened images -> (B, 1, H, W) probabilities."""
        return torch.sigmoid(self.logits(x))


@torch.no_grad()
def locnet_forward(image: np.ndarray, model: LocNet) -> SoftMap:
    """Softmap for one whitened image; runs the network in evaluation mode."""
    image = np.asarray(image)
    if tuple(image.shape) != model.cfg.input_shape:
        raise ConfigError(f"expected input of shape {model.cfg.input_shape}, got {image.shape}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(image, dtype=dtype)[None, None]
    probs = model(x)[0, 0].cpu().numpy().astype(np.float64)
    model.train(was_training)
    return SoftMap(np.clip(probs, 0.0, 1.0))


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, SoftMap):
        x = x.probs
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_shapes(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(y.shape)}")


def wce_loss(softmap, target, pos_weight: float = 28.0) -> torch.Tensor:
    """Mean over pixels of -[w*y*log p + (1-y)*log(1-p)] with p clamped to [eps, 1-eps]."""
    p = _as_tensor(softmap)
    y = _as_tensor(target, p)
    _check_shapes(p, y)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(pos_weight * y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def soft_dice_loss(softmap, target, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth).

    Inputs with more than two dimensions are treated as a batch over the
    leading axis; the per-sample losses are averaged.
    """
    p = _as_tensor(softmap)
    y = _as_tensor(target, p)
    _check_shapes(p, y)
    if p.dim() <= 2:
        p, y = p.reshape(1, -1), y.reshape(1, -1)
    else:
        p, y = p.reshape(p.shape[0], -1), y.reshape(y.shape[0], -1)
    inter = (p * y).sum(dim=1)
    dice = (2.0 * inter + smooth) / (p.sum(dim=1) + y.sum(dim=1) + smooth)
    return (1.0 - dice).mean()


def composite_loss(softmap, target, cfg: LocLossConfig = LocLossConfig()) -> torch.Tensor:
    return (cfg.wce_weight * wce_loss(softmap, target, cfg.positive_class_weight)
            + cfg.dice_weight * soft_dice_loss(softmap, target, cfg.dice_smooth))


def boxes_to_mask(boxes: list[BoundingBox], shape: tuple[int, int]) -> np.ndarray:
    """Binary mask equal to 1 on the union of the boxes."""
    mask = np.zeros(shape, dtype=np.uint8)
    h, w = shape
    for b in boxes:
        if not b.inside(h, w):
            raise ValueError(f"box {b.as_tuple()} outside frame {shape}")
        mask[b.y_min:b.y_max, b.x_min:b.x_max] = 1
    return mask


def positive_class_weight(masks) -> float:
    """Background-to-foreground pixel ratio over a set of target masks."""
    fg = sum(float(np.count_nonzero(m)) for m in masks)
    total = sum(float(np.size(m)) for m in masks)
    if fg == 0:
        raise ValueError("no foreground pixels")
    return (total - fg) / fg


@dataclass
class LocNetCheckpoint:
    model: LocNet
    loss_cfg: LocLossConfig = field(default_factory=LocLossConfig)
    provenance: dict = field(default_factory=dict)


def save_locnet(path: str | Path, model: LocNet, loss_cfg: LocLossConfig, extra: dict | None = None) -> None:
    """Write ``<path>.pt`` parameters and a ``<path>.json`` sidecar with every hyperparameter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path.with_suffix(".pt"))
    sidecar = {"locnet": asdict(model.cfg), "loss": asdict(loss_cfg)}
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_locnet(path: str | Path) -> LocNetCheckpoint:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = LocNetConfig(**meta.pop("locnet"))
    loss_cfg = LocLossConfig(**meta.pop("loss"))
    model = LocNet(cfg)
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    model.eval()
    return LocNetCheckpoint(model=model, loss_cfg=loss_cfg, provenance=meta.get("provenance", {}))
