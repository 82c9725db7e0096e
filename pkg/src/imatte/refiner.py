"""Matte refinement: turn a coarse instance mask into a soft alpha matte.

A convolutional local branch (strides 1/2/4) and a patchified self-attention
global branch (strides 4/8/16) both consume image plus coarse mask; fusion
starts at the global bottleneck and walks up through the local features to
full resolution. A final uncertainty-gated residual corrects pixels whose
intermediate alpha is ambiguous. Training uses a hard-sample mining loss over
the top-30% error pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import AlphaMatte, Image, InstanceMask, ShapeError
from .localizer import AttentionBlock, sine_position_encoding

HARD_FRACTION = 0.30
UNCERTAIN_LO = 0.1
UNCERTAIN_HI = 0.9


@dataclass(frozen=True)
class MrnConfig:
    local_widths: tuple[int, int, int] = (16, 32, 64)
    global_width: int = 64
    global_blocks: int = 2
    heads: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MrnConfig":
        d = dict(d)
        d["local_widths"] = tuple(d["local_widths"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class MrnInput:
    image: Image
    coarse_mask: InstanceMask

    def __post_init__(self):
        if (self.image.height, self.image.width) != self.coarse_mask.shape:
            raise ShapeError(f"image {self.image.height}x{self.image.width} vs coarse mask "
                             f"{self.coarse_mask.shape}")


@dataclass(frozen=True, eq=False)
class HardPixelSet:
    """Row-major flat indices of the highest-error pixels."""

    indices: np.ndarray
    fraction: float = HARD_FRACTION


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(4, cout),
        nn.ReLU(),
    )


class MatteRefiner(nn.Module):
    """Dual-branch refinement network. Input channels: RGB + soft coarse mask."""

    def __init__(self, cfg: MrnConfig | None = None):
        super().__init__()
        self.cfg = cfg or MrnConfig()
        w1, w2, w3 = self.cfg.local_widths
        g = self.cfg.global_width

        self.local1 = _conv_block(4, w1, stride=1)
        self.local2 = _conv_block(w1, w2, stride=2)
        self.local3 = _conv_block(w2, w3, stride=2)

        self.patchify = nn.Conv2d(4, g, kernel_size=4, stride=4)
        self.global_attn4 = AttentionBlock(g, self.cfg.heads)
        self.pool8 = _conv_block(g, g, stride=2)
        self.global_attn8 = AttentionBlock(g, self.cfg.heads)
        self.pool16 = _conv_block(g, g, stride=2)

        self.fuse4 = _conv_block(g + w3, w3, stride=1)
        self.fuse2 = _conv_block(w3 + w2, w2, stride=1)
        self.fuse1 = _conv_block(w2 + w1, w1, stride=1)
        # correction heads start at zero: the untrained refiner reproduces the
        # coarse mask exactly and training can only move away from it
        self.matte_head = nn.Conv2d(w1, 1, 3, padding=1)
        self.residual_head = nn.Conv2d(w1 + 1, 1, 3, padding=1)
        nn.init.zeros_(self.matte_head.weight)
        nn.init.zeros_(self.matte_head.bias)
        nn.init.zeros_(self.residual_head.weight)
        nn.init.zeros_(self.residual_head.bias)

    def _attend(self, x: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
        _, d, h, w = x.shape
        tokens = x.squeeze(0).permute(1, 2, 0).reshape(h * w, d)
        tokens = tokens + sine_position_encoding(h, w, d, dtype=x.dtype, device=x.device)
        tokens = block(tokens)
        return tokens.reshape(h, w, d).permute(2, 0, 1).unsqueeze(0)

    def forward(self, pixels: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
        """(3, H, W) pixels + (H, W) soft mask -> (H, W) alpha in [0, 1]."""
        x = torch.cat([pixels, coarse.unsqueeze(0)], dim=0).unsqueeze(0)
        l1 = self.local1(x)
        l2 = self.local2(l1)
        l3 = self.local3(l2)

        g4 = self._attend(self.patchify(x), self.global_attn4)
        g8 = self._attend(self.pool8(g4), self.global_attn8)
        g16 = self.pool16(g8)

        up4 = F.interpolate(g16, size=l3.shape[2:], mode="bilinear", align_corners=False)
        f4 = self.fuse4(torch.cat([up4, l3], dim=1))
        up2 = F.interpolate(f4, size=l2.shape[2:], mode="bilinear", align_corners=False)
        f2 = self.fuse2(torch.cat([up2, l2], dim=1))
        up1 = F.interpolate(f2, size=l1.shape[2:], mode="bilinear", align_corners=False)
        f1 = self.fuse1(torch.cat([up1, l1], dim=1))

        # corrections are applied to the coarse mask in logit space: certain
        # pixels pass through exactly and the output stays in (0, 1) without a
        # gradient-killing hard clamp
        coarse_logit = torch.logit(coarse.clamp(1e-4, 1.0 - 1e-4)).unsqueeze(0).unsqueeze(0)
        inter_logit = coarse_logit + self.matte_head(f1)
        intermediate = torch.sigmoid(inter_logit)
        gate = ((intermediate > UNCERTAIN_LO) & (intermediate < UNCERTAIN_HI)).to(x.dtype)
        residual = self.residual_head(torch.cat([f1, intermediate], dim=1))
        out = torch.sigmoid(inter_logit + gate * residual)
        return out.squeeze(0).squeeze(0)


def refine_matte(model: MatteRefiner, inp: MrnInput, instance_id: int = 0) -> AlphaMatte:
    """Run the refiner on one image/coarse-mask pair."""
    dtype = next(model.parameters()).dtype
    pixels = torch.as_tensor(np.ascontiguousarray(inp.image.pixels.transpose(2, 0, 1))).to(dtype)
    coarse = torch.as_tensor(inp.coarse_mask.mask).to(dtype)
    with torch.no_grad():
        alpha = model(pixels, coarse)
    return AlphaMatte(alpha.cpu().numpy().astype(np.float32), instance_id=instance_id)


def hard_pixel_count(total: int, fraction: float = HARD_FRACTION) -> int:
    return int(math.ceil(fraction * total))


def select_hard_pixels(pred: AlphaMatte, gt: AlphaMatte) -> HardPixelSet:
    """Top-30% pixels by |pred - gt|, descending; ties resolved by ascending
    row-major index."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    err = np.abs(pred.alpha.astype(np.float64) - gt.alpha.astype(np.float64)).ravel()
    k = hard_pixel_count(err.size)
    order = np.argsort(-err, kind="stable")
    return HardPixelSet(indices=order[:k].copy())


def mrn_loss(pred: AlphaMatte, gt: AlphaMatte, lam: float = 1.0) -> float:
    """Hard-sample mining objective: overall MAE plus lam times the MAE over
    the top-30% error pixels."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    hard = select_hard_pixels(pred, gt)
    err = np.abs(pred.alpha.astype(np.float64) - gt.alpha.astype(np.float64)).ravel()
    return float(err.mean() + lam * err[hard.indices].mean())


def mrn_loss_torch(pred: torch.Tensor, gt: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Differentiable loss; the hard set is selected under stop-gradient."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    err = (pred - gt).abs().reshape(-1)
    with torch.no_grad():
        order = np.argsort(-err.detach().cpu().numpy(), kind="stable")
        k = hard_pixel_count(err.numel())
        hard_idx = torch.as_tensor(order[:k].copy(), device=pred.device)
    return err.mean() + lam * err[hard_idx].mean()
