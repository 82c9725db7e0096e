"""Cross-round conflict reasoning: maintain the three-valued conflict map
between the previous prediction and the newest prompts, embed it, and add it
to the image features.

Cell values: 0 = agreement, 1 = model said background but the user says
foreground, 2 = model said foreground but the user says background. The map
is recomputed from scratch each round; earlier rounds do not accumulate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import _kernels
from .core import InstanceMask, encode_gray_png
from .prompts import BACKGROUND, FOREGROUND, FeatureMap, Prompt

AGREE = 0
SAYS_FG = 1
SAYS_BG = 2

CLICK_RADIUS = 3.0          # 3px-radius disc
STROKE_HALF_WIDTH = 1.5     # 3px-wide stroke
BOX_BAND_HALF_WIDTH = 1.5   # 3px border band

DEFAULT_EMBED_WIDTH = 16


@dataclass(frozen=True, eq=False)
class ConflictMap:
    """H x W grid over {0, 1, 2}."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.uint8)
        if vals.ndim != 2:
            raise ValueError(f"ConflictMap must be 2D, got shape {vals.shape}")
        if vals.size and vals.max() > 2:
            raise ValueError("ConflictMap cells must lie in {0, 1, 2}")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def empty_conflict_map(height: int, width: int) -> ConflictMap:
    return ConflictMap(np.zeros((height, width), dtype=np.uint8))


def prompt_footprint(prompt: Prompt, height: int, width: int) -> np.ndarray:
    """Boolean grid of the area a visual prompt asserts; text asserts nothing."""
    if prompt.kind == "click":
        (x, y), = prompt.points
        return _kernels.disc_footprint(height, width, x, y, CLICK_RADIUS)
    if prompt.kind == "scribble":
        pts = np.asarray(prompt.points, dtype=np.float64)
        return _kernels.stroke_footprint(height, width, pts, STROKE_HALF_WIDTH)
    if prompt.kind == "box":
        (x1, y1), (x2, y2) = prompt.points
        return _kernels.box_band_footprint(height, width, x1, y1, x2, y2, BOX_BAND_HALF_WIDTH)
    return np.zeros((height, width), dtype=bool)


def update_conflict_map(prev_pred: InstanceMask | None, new_prompts: list[Prompt],
                        prev_map: ConflictMap) -> ConflictMap:
    """Recompute the conflict map for one round of new prompts.

    With no previous prediction (round 0) every cell reports agreement.
    """
    height, width = prev_map.shape
    values = np.zeros((height, width), dtype=np.uint8)
    if prev_pred is None:
        return ConflictMap(values)
    if prev_pred.shape != prev_map.shape:
        raise ValueError(f"prediction dims {prev_pred.shape} do not match map {prev_map.shape}")

    fg_before = prev_pred.binarized
    for prompt in new_prompts:
        if prompt.kind == "text":
            continue
        prompt.check_bounds(height, width)
        footprint = prompt_footprint(prompt, height, width)
        if prompt.polarity == FOREGROUND:
            values[footprint & ~fg_before] = SAYS_FG
        elif prompt.polarity == BACKGROUND:
            values[footprint & fg_before] = SAYS_BG
    return ConflictMap(values)


class ConflictEmbedding(nn.Module):
    """Learnable per-value embedding table plus projection into feature width.

    The table starts at zero so an untrained module leaves image features
    untouched; the projection is bias-free for the same reason.
    """

    def __init__(self, embed_width: int = DEFAULT_EMBED_WIDTH, feature_width: int = 64):
        super().__init__()
        self.embed_width = embed_width
        self.feature_width = feature_width
        self.table = nn.Embedding(3, embed_width)
        nn.init.zeros_(self.table.weight)
        if embed_width != feature_width:
            self.proj = nn.Linear(embed_width, feature_width, bias=False)
        else:
            self.proj = nn.Identity()


def embed_conflict_map(cmap: ConflictMap, emb: ConflictEmbedding, fmap: FeatureMap) -> FeatureMap:
    """Area-resize the per-pixel conflict embedding to feature resolution and
    add it to the feature map.

    Area-averaging a per-pixel table lookup equals looking up the per-cell
    one-hot coverage fractions, so the pooling runs as a pixel kernel and
    only the (differentiable) lookup runs in torch.
    """
    coverage = _kernels.onehot_area_pool(cmap.values, fmap.stride, 3)
    if coverage.shape[:2] != (fmap.height, fmap.width):
        raise ValueError(f"conflict map {cmap.shape} does not resize to feature grid "
                         f"{(fmap.height, fmap.width)} at stride {fmap.stride}")
    cov = torch.as_tensor(coverage, dtype=fmap.data.dtype, device=fmap.data.device)
    embedded = cov @ emb.table.weight
    return FeatureMap(data=fmap.data + emb.proj(embedded), stride=fmap.stride)


def conflict_map_png(cmap: ConflictMap) -> bytes:
    """PNG encoding for UI display: values 0/1/2 map to gray 0/128/255."""
    lut = np.array([0, 128, 255], dtype=np.uint8)
    return encode_gray_png(lut[cmap.values])
