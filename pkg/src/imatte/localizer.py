"""Prompt-conditioned instance localization network.

A small convolutional encoder with an attention bottleneck produces a strided
feature map; a query-based decoder (cross-attention into image cells, then
joint self-attention of object/text/visual queries with prompt tokens) emits
per-query masks and human/non-human class rows. Includes the combined
class/mask training loss and the target-query selection rule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conflict import ConflictEmbedding, ConflictMap, embed_conflict_map
from .core import HUMAN, OTHER, Image, InstanceMask
from .prompts import FeatureMap, PromptEmbedding, PromptEncoder

ATTN_SUPPRESS = -1e9  # softmax weight underflows to exactly 0
DICE_EPS = 1e-6
CLASS_INDEX = {HUMAN: 0, OTHER: 1}


@dataclass(frozen=True)
class IscnConfig:
    d: int = 64
    heads: int = 4
    stages: int = 3
    n_object: int = 8
    n_text: int = 4
    n_visual: int = 4
    stride: int = 4
    conflict_width: int = 16
    mask_width: int = 32

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"embedding width {self.d} not divisible by {self.heads} heads")
        if self.stages < 1:
            raise ValueError("need at least one decoder stage")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError("stride must be a positive power of two")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IscnConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class QueryBank:
    """The three learnable query sets flowing through the decoder."""

    object_queries: torch.Tensor
    text_queries: torch.Tensor
    visual_queries: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat([self.object_queries, self.text_queries, self.visual_queries], dim=0)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.object_queries.shape[0], self.text_queries.shape[0],
                self.visual_queries.shape[0])


@dataclass(frozen=True, eq=False)
class DecoderOutput:
    """Per-query embeddings, mask logits/probabilities, and class rows."""

    mask_embeddings: torch.Tensor   # N_o x d
    class_embeddings: torch.Tensor  # N_o x d
    mask_logits: torch.Tensor       # N_o x H x W
    masks: torch.Tensor             # sigmoid of mask_logits
    class_logits: torch.Tensor      # N_o x 2
    classes: torch.Tensor           # softmax rows, order (human, other)


def sine_position_encoding(height: int, width: int, channels: int,
                           dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2D sinusoidal position encoding, flattened to (H*W, C)."""
    half = channels // 2
    n_freq = max(half // 2, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(n_freq, dtype=dtype, device=device) / n_freq)
    ys = torch.arange(height, dtype=dtype, device=device)[:, None] * freqs[None, :]
    xs = torch.arange(width, dtype=dtype, device=device)[:, None] * freqs[None, :]
    enc = torch.zeros(height, width, channels, dtype=dtype, device=device)
    enc[:, :, 0:2 * n_freq:2] = torch.sin(ys)[:, None, :].expand(height, width, n_freq)
    enc[:, :, 1:2 * n_freq:2] = torch.cos(ys)[:, None, :].expand(height, width, n_freq)
    enc[:, :, half:half + 2 * n_freq:2] = torch.sin(xs)[None, :, :].expand(height, width, n_freq)
    enc[:, :, half + 1:half + 2 * n_freq:2] = torch.cos(xs)[None, :, :].expand(height, width, n_freq)
    return enc.reshape(height * width, channels)


class Mlp(nn.Module):
    def __init__(self, width: int, out_width: int, layers: int = 3):
        super().__init__()
        dims = [width] * layers + [out_width]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class AttentionBlock(nn.Module):
    """Self-attention + FFN with post-norm residuals."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, width * 4), nn.ReLU(), nn.Linear(width * 4, width))
        self.norm2 = nn.LayerNorm(width)

    def forward(self, tokens: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        x, _ = self.attn(tokens.unsqueeze(0), tokens.unsqueeze(0), tokens.unsqueeze(0),
                         attn_mask=attn_mask, need_weights=False)
        tokens = self.norm1(tokens + x.squeeze(0))
        return self.norm2(tokens + self.ffn(tokens))


class ImageEncoder(nn.Module):
    """Four conv blocks (downsampling to the configured stride) with one
    global self-attention block at the bottleneck."""

    def __init__(self, width: int, stride: int = 4, heads: int = 4):
        super().__init__()
        self.stride = stride
        n_down = int(math.log2(stride))
        strides = [2] * n_down + [1] * max(4 - n_down, 0)
        chans = [3] + [max(width // 2, 8)] * (len(strides) - 1) + [width]
        convs = []
        for i, s in enumerate(strides):
            convs.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=s, padding=1))
        self.conv1 = convs[0]
        self.blocks = nn.ModuleList(convs)
        self.norms = nn.ModuleList(nn.GroupNorm(4, c) for c in chans[1:])
        self.bottleneck = AttentionBlock(width, heads)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """(3, H, W) pixels -> (H', W', d) features."""
        x = pixels.unsqueeze(0)
        for conv, norm in zip(self.blocks, self.norms):
            x = F.relu(norm(conv(x)))
        _, d, h, w = x.shape
        tokens = x.squeeze(0).permute(1, 2, 0).reshape(h * w, d)
        tokens = tokens + sine_position_encoding(h, w, d, dtype=x.dtype, device=x.device)
        tokens = self.bottleneck(tokens)
        return tokens.reshape(h, w, d)


class DecoderStage(nn.Module):
    """One decoder stage: query cross-attention into image cells, then joint
    self-attention over (object, text, visual) queries plus prompt tokens."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_self = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, width * 4), nn.ReLU(), nn.Linear(width * 4, width))
        self.norm_ffn = nn.LayerNorm(width)

    def forward(self, bank: QueryBank, fmap: FeatureMap,
                prompts: PromptEmbedding | None = None,
                prev_mask: InstanceMask | None = None) -> QueryBank:
        n_o, n_t, n_v = bank.counts
        queries = bank.concat()
        cells = fmap.data.reshape(-1, fmap.channels)
        keys = cells + sine_position_encoding(fmap.height, fmap.width, fmap.channels,
                                              dtype=cells.dtype, device=cells.device)
        x, _ = self.cross_attn(queries.unsqueeze(0), keys.unsqueeze(0), cells.unsqueeze(0),
                               need_weights=False)
        queries = self.norm_cross(queries + x.squeeze(0))

        tokens = joint_tokens(QueryBank(queries[:n_o], queries[n_o:n_o + n_t], queries[n_o + n_t:]),
                              prompts)
        attn_mask = prompt_suppression_mask(bank.counts, prompts, prev_mask,
                                            dtype=tokens.dtype, device=tokens.device)
        y, _ = self.self_attn(tokens.unsqueeze(0), tokens.unsqueeze(0), tokens.unsqueeze(0),
                              attn_mask=attn_mask, need_weights=False)
        tokens = self.norm_self(tokens + y.squeeze(0))
        tokens = self.norm_ffn(tokens + self.ffn(tokens))
        updated = tokens[:n_o + n_t + n_v]
        return QueryBank(updated[:n_o], updated[n_o:n_o + n_t], updated[n_o + n_t:])


def joint_tokens(bank: QueryBank, prompts: PromptEmbedding | None) -> torch.Tensor:
    """Token sequence the joint self-attention runs over: all query sets plus
    any prompt vectors."""
    parts = [bank.concat()]
    if prompts is not None:
        parts.append(prompts.vectors)
    return torch.cat(parts, dim=0)


def prompt_suppression_mask(counts: tuple[int, int, int], prompts: PromptEmbedding | None,
                            prev_mask: InstanceMask | None,
                            dtype=torch.float32, device=None) -> torch.Tensor | None:
    """Additive attention mask that stops object queries attending to prompt
    tokens lying in the previous prediction's background. Text tokens carry
    no location and are never suppressed."""
    if prompts is None or prev_mask is None:
        return None
    n_o, n_t, n_v = counts
    n_queries = n_o + n_t + n_v
    total = n_queries + prompts.vectors.shape[0]
    fg = prev_mask.binarized
    h, w = fg.shape
    suppressed_cols = []
    for i, (x, y) in enumerate(prompts.locations):
        if np.isnan(x) or np.isnan(y):
            continue
        xi = min(max(int(round(x)), 0), w - 1)
        yi = min(max(int(round(y)), 0), h - 1)
        if not fg[yi, xi]:
            suppressed_cols.append(n_queries + i)
    if not suppressed_cols:
        return None
    mask = torch.zeros(total, total, dtype=dtype, device=device)
    mask[:n_o, suppressed_cols] = ATTN_SUPPRESS
    return mask


class InstanceLocalizer(nn.Module):
    """End-to-end promptable localizer: encoder, decoder stages, and heads."""

    def __init__(self, cfg: IscnConfig | None = None, text_encoder: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg or IscnConfig()
        d = self.cfg.d
        self.encoder = ImageEncoder(d, self.cfg.stride, self.cfg.heads)
        self.prompt_encoder = PromptEncoder(d, text_encoder)
        self.conflict_embed = ConflictEmbedding(self.cfg.conflict_width, d)
        self.object_queries = nn.Parameter(torch.randn(self.cfg.n_object, d) * 0.02)
        self.text_queries = nn.Parameter(torch.randn(self.cfg.n_text, d) * 0.02)
        self.visual_queries = nn.Parameter(torch.randn(self.cfg.n_visual, d) * 0.02)
        self.stages = nn.ModuleList(DecoderStage(d, self.cfg.heads) for _ in range(self.cfg.stages))
        self.mask_embed_head = Mlp(d, self.cfg.mask_width, layers=3)
        self.class_embed_head = Mlp(d, d, layers=2)
        self.classifier = nn.Linear(d, 2)
        self.pixel_proj = self._build_pixel_decoder(d, self.cfg.mask_width, self.cfg.stride)

    @staticmethod
    def _build_pixel_decoder(d: int, mask_width: int, stride: int) -> nn.Module:
        # upsamples strided features back to pixel resolution so the mask
        # dot-product happens at full detail
        layers: list[nn.Module] = [nn.Conv2d(d, d, 3, padding=1), nn.GroupNorm(4, d), nn.ReLU()]
        width = d
        remaining = stride
        while remaining > 1:
            nxt = mask_width if remaining == 2 else max(width // 2, mask_width)
            layers += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(width, nxt, 3, padding=1),
            ]
            if remaining > 2:
                layers += [nn.GroupNorm(4, nxt), nn.ReLU()]
            width = nxt
            remaining //= 2
        if width != mask_width:
            layers.append(nn.Conv2d(width, mask_width, 1))
        return nn.Sequential(*layers)

    def initial_queries(self) -> QueryBank:
        return QueryBank(self.object_queries, self.text_queries, self.visual_queries)

    def encode_image(self, image: Image) -> FeatureMap:
        if image.height < self.cfg.stride or image.width < self.cfg.stride:
            raise ValueError(f"image {image.height}x{image.width} smaller than stride "
                             f"{self.cfg.stride}")
        pixels = torch.as_tensor(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))
        pixels = pixels.to(next(self.parameters()).dtype)
        return FeatureMap(data=self.encoder(pixels), stride=self.cfg.stride)

    def predict_mask_and_class(self, fmap: FeatureMap, queries: QueryBank,
                               image_size: tuple[int, int]) -> DecoderOutput:
        mask_emb = self.mask_embed_head(queries.object_queries)
        class_emb = self.class_embed_head(queries.object_queries)
        pix = self.pixel_proj(fmap.data.permute(2, 0, 1).unsqueeze(0)).squeeze(0)
        logits = torch.einsum("nd,dhw->nhw", mask_emb, pix)
        logits = logits[:, :image_size[0], :image_size[1]]
        class_logits = self.classifier(class_emb)
        return DecoderOutput(
            mask_embeddings=mask_emb,
            class_embeddings=class_emb,
            mask_logits=logits,
            masks=torch.sigmoid(logits),
            class_logits=class_logits,
            classes=torch.softmax(class_logits, dim=-1),
        )

    def forward(self, image: Image, prompts: list, prev_mask: InstanceMask | None = None,
                conflict: ConflictMap | None = None, with_features: bool = False):
        fmap = self.encode_image(image)
        if conflict is not None:
            fmap = embed_conflict_map(conflict, self.conflict_embed, fmap)
        prompt_emb = self.prompt_encoder.encode(prompts, fmap, (image.height, image.width))
        bank = self.initial_queries()
        for stage in self.stages:
            bank = stage(bank, fmap, prompt_emb, prev_mask)
        out = self.predict_mask_and_class(fmap, bank, (image.height, image.width))
        return (out, fmap) if with_features else out

    def forward_all_stages(self, image: Image, prompts: list,
                           prev_mask: InstanceMask | None = None,
                           conflict: ConflictMap | None = None,
                           with_features: bool = False):
        """Predictions after every decoder stage (for deep supervision);
        the last element equals the plain forward output."""
        fmap = self.encode_image(image)
        if conflict is not None:
            fmap = embed_conflict_map(conflict, self.conflict_embed, fmap)
        prompt_emb = self.prompt_encoder.encode(prompts, fmap, (image.height, image.width))
        bank = self.initial_queries()
        outs = []
        for stage in self.stages:
            bank = stage(bank, fmap, prompt_emb, prev_mask)
            outs.append(self.predict_mask_and_class(fmap, bank, (image.height, image.width)))
        return (outs, fmap) if with_features else outs


def target_query_index(out: DecoderOutput) -> int:
    """Query with the highest human probability times mask confidence (mean
    of the top quartile of its mask probabilities); ties go to the lowest
    query index."""
    masks = out.masks.detach().cpu().numpy()
    classes = out.classes.detach().cpu().numpy()
    n, h, w = masks.shape
    k = max(1, math.ceil(0.25 * h * w))
    flat = masks.reshape(n, -1)
    top_mean = np.partition(flat, flat.shape[1] - k, axis=1)[:, flat.shape[1] - k:].mean(axis=1)
    scores = classes[:, CLASS_INDEX[HUMAN]] * top_mean
    return int(np.argmax(scores))


def select_target(out: DecoderOutput) -> tuple[InstanceMask, str]:
    """The selected query's mask and class label."""
    idx = target_query_index(out)
    classes = out.classes.detach().cpu().numpy()
    label = HUMAN if classes[idx, 0] >= classes[idx, 1] else OTHER
    mask = out.masks.detach().cpu().numpy()[idx]
    return InstanceMask(np.clip(mask, 0.0, 1.0)), label


def _check_binary(gt: torch.Tensor) -> None:
    if not torch.all((gt == 0.0) | (gt == 1.0)):
        raise ValueError("localizer targets must be binary {0, 1} masks")


def _pair_loss_terms(out: DecoderOutput, gt: torch.Tensor, class_idx: int,
                     query: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    logits = out.mask_logits[query]
    ce = F.cross_entropy(out.class_logits[query:query + 1],
                         torch.tensor([class_idx], device=logits.device))
    bce = F.binary_cross_entropy_with_logits(logits, gt)
    p = torch.sigmoid(logits)
    dice = 1.0 - (2.0 * (p * gt).sum()) / (p.sum() + gt.sum() + DICE_EPS)
    return ce, bce, dice


def match_query(out: DecoderOutput, gt_mask: InstanceMask, gt_class: str = HUMAN) -> int:
    """Lowest-combined-loss query for the single interactive target."""
    gt = torch.as_tensor(gt_mask.mask, dtype=out.mask_logits.dtype,
                         device=out.mask_logits.device)
    _check_binary(gt)
    class_idx = CLASS_INDEX[gt_class]
    with torch.no_grad():
        losses = []
        for q in range(out.mask_logits.shape[0]):
            ce, bce, dice = _pair_loss_terms(out, gt, class_idx, q)
            losses.append(float(0.1 * ce + bce + dice))
    return int(np.argmin(losses))


def iscn_loss(out: DecoderOutput, gt_mask: InstanceMask, gt_class: str = HUMAN,
              query: int | None = None) -> torch.Tensor:
    """Matched-pair training loss: 0.1 * class CE + mask BCE + mask Dice."""
    gt = torch.as_tensor(gt_mask.mask, dtype=out.mask_logits.dtype,
                         device=out.mask_logits.device)
    _check_binary(gt)
    if query is None:
        query = match_query(out, gt_mask, gt_class)
    ce, bce, dice = _pair_loss_terms(out, gt, CLASS_INDEX[gt_class], query)
    return 0.1 * ce + bce + dice
