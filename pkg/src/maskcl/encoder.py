"""Two-branch encoder: RGB branch, mask branch, predictor head, fusion head.

Both branches share one small convolutional architecture (conv stages with
stride 2, global average pooling, dense map to the feature dimension) but
never share parameters. The predictor maps D -> D after the RGB branch; the
fusion head maps the concatenated branch outputs 2D -> D. Both heads are
affine by default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .memory import BankTriplet

CKPT_FORMAT = "maskcl-ckpt-v1"


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    nonlinear_heads: bool = False
    fusion_mask_weight: float = 0.8  # mask share of the fusion head's initial average

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be positive, got {self.conv_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not 0.0 <= self.fusion_mask_weight <= 1.0:
            raise ValueError(f"fusion_mask_weight must lie in [0, 1], got {self.fusion_mask_weight}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder config key(s): {sorted(unknown)}")
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(int(c) for c in d["conv_channels"])
        return cls(**d)


class ConvEncoder(nn.Module):
    """Small convolutional backbone: stride-2 conv stages, GAP, dense to D."""

    def __init__(self, in_channels: int, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        prev = in_channels
        for c in config.conv_channels:
            layers.append(nn.Conv2d(prev, c, config.kernel_size, stride=2, padding=config.kernel_size // 2))
            layers.append(nn.ReLU())
            prev = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, config.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.head(h.mean(dim=(2, 3)))


@dataclass
class BranchOutput:
    """Per-batch forward results.

    ``x`` and ``x_tilde`` are the raw branch outputs; ``z`` and ``f`` are
    computed from their unit-normalized versions so head inputs keep a stable
    scale while the branch norms drift during training.
    """

    x: torch.Tensor
    x_tilde: torch.Tensor
    z: torch.Tensor
    f: torch.Tensor


class TwoBranchModel(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        self.config.validate()
        d = self.config.feature_dim
        self.rgb_encoder = ConvEncoder(3, self.config)
        self.mask_encoder = ConvEncoder(1, self.config)
        self.predictor = nn.Linear(d, d)
        self.fusion = nn.Linear(2 * d, d)
        self.head_act = nn.ReLU() if self.config.nonlinear_heads else nn.Identity()
        # the fused feature starts as a mask-weighted average of both branches
        # so fused cluster centers carry clothes-invariant signal from the
        # first epoch onward (RGB variance otherwise drowns it out under an
        # untrained backbone); the predictor keeps its random init
        with torch.no_grad():
            w_rgb, w_mask = 1.0 - self.config.fusion_mask_weight, self.config.fusion_mask_weight
            self.fusion.weight.copy_(torch.cat([torch.eye(d) * w_rgb, torch.eye(d) * w_mask], dim=1))
            self.fusion.bias.zero_()

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _prep(self, batch, channels: int) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch)
        if channels == 1 and t.ndim == 3:
            t = t[..., None]
        if t.ndim != 4 or t.shape[-1] != channels:
            raise ValueError(f"expected batch of shape B x H x W x {channels}, got {tuple(t.shape)}")
        dtype = self.predictor.weight.dtype
        return t.to(dtype).permute(0, 3, 1, 2)

    def encode_rgb(self, images) -> torch.Tensor:
        """B x H x W x 3 images in [0, 1] -> B x D features."""
        return self.rgb_encoder(self._prep(images, 3))

    def encode_mask(self, masks) -> torch.Tensor:
        """B x H x W (x 1) masks in [0, 1] -> B x D features."""
        return self.mask_encoder(self._prep(masks, 1))

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.feature_dim:
            raise ValueError(f"predictor expects dim {self.feature_dim}, got {x.shape[-1]}")
        return self.head_act(self.predictor(x))

    def fuse(self, x: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
        if x.shape != x_tilde.shape or x.shape[-1] != self.feature_dim:
            raise ValueError(
                f"fusion expects two tensors of dim {self.feature_dim}, got {tuple(x.shape)} and {tuple(x_tilde.shape)}"
            )
        return self.head_act(self.fusion(torch.cat([x, x_tilde], dim=-1)))

    def forward_all(self, images, masks) -> BranchOutput:
        x = self.encode_rgb(images)
        x_tilde = self.encode_mask(masks)
        xn = nn.functional.normalize(x, dim=1)
        xtn = nn.functional.normalize(x_tilde, dim=1)
        return BranchOutput(x=x, x_tilde=x_tilde, z=self.predict(xn), f=self.fuse(xn, xtn))


def build_model(config: EncoderConfig | None = None, seed: int | None = None) -> TwoBranchModel:
    if seed is not None:
        torch.manual_seed(seed)
    return TwoBranchModel(config)


def save_checkpoint(
    path: str | Path,
    model: TwoBranchModel,
    banks: Optional[BankTriplet] = None,
    epoch: int = 0,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "encoder_config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "banks": banks.state_dict() if banks is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[TwoBranchModel, Optional[BankTriplet], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(str(path), weights_only=True)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"unsupported checkpoint format tag: {payload.get('format')!r}")
    model = TwoBranchModel(EncoderConfig.from_dict(payload["encoder_config"]))
    model.load_state_dict(payload["model_state"])
    banks = BankTriplet.from_state(payload["banks"]) if payload["banks"] is not None else None
    meta = {"epoch": payload["epoch"], **payload.get("extra", {})}
    return model, banks, meta
