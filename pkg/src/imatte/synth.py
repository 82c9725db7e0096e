"""Synthetic data tooling: the classic iterative compositor baseline, a
pluggable latent-feature provider with a query-based matte interpreter, and
dataset packaging in the standard sample layout.

The interpreter decodes per-instance mattes and human/other labels from
channel-concatenated multi-scale features. The shipped provider synthesizes
deterministic features (random-projection pyramid plus normalized Gaussian
attention blobs); a generative-model-backed provider can be swapped in behind
the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from scipy.optimize import linear_sum_assignment

from .core import (HUMAN, OTHER, AlphaMatte, Image, InstanceRecord, composite,
                   save_sample)
from .localizer import AttentionBlock, Mlp, sine_position_encoding

PROVIDER_SCALES = (4, 8, 16)
PROVIDER_CHANNELS = 8
PROVIDER_ATTN_MAPS = 4
INTERPRETER_QUERIES = 8
CLASS_WEIGHT = 0.1


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Multi-scale latent maps plus token-to-pixel attention maps."""

    latent_maps: list[np.ndarray]          # each (h_i, w_i, c_i), finest first
    cross_attention_maps: list[np.ndarray]  # each (h0, w0), nonnegative

    def __post_init__(self):
        if not self.latent_maps:
            raise ValueError("FeatureBundle needs at least one latent map")
        for m in self.cross_attention_maps:
            if m.min() < 0:
                raise ValueError("attention maps must be nonnegative")

    def concat(self) -> np.ndarray:
        """Resize everything to the finest latent scale and channel-concat."""
        h0, w0 = self.latent_maps[0].shape[:2]
        parts = []
        for m in self.latent_maps:
            parts.append(_resize_bilinear(m, h0, w0))
        for m in self.cross_attention_maps:
            parts.append(_resize_bilinear(m[:, :, None], h0, w0))
        return np.concatenate(parts, axis=2)


@dataclass(frozen=True, eq=False)
class InterpreterOutput:
    mattes: torch.Tensor        # N x H x W in [0, 1]
    matte_logits: torch.Tensor  # N x H x W
    labels: torch.Tensor        # N x 2 softmax rows, order (human, other)
    label_logits: torch.Tensor  # N x 2


def _resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if grid.shape[:2] == (out_h, out_w):
        return grid.astype(np.float32)
    t = torch.as_tensor(grid.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).numpy()


def _scale_to(image: Image, matte: AlphaMatte, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    t = torch.as_tensor(image.pixels).permute(2, 0, 1).unsqueeze(0)
    a = torch.as_tensor(matte.alpha).unsqueeze(0).unsqueeze(0)
    ti = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    ta = F.interpolate(a, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return (ti.squeeze(0).permute(1, 2, 0).numpy(), ta.squeeze(0).squeeze(0).clamp(0, 1).numpy())


def compose_scene_baseline(fgs: list[tuple[Image, AlphaMatte]], bg: Image,
                           rng: np.random.Generator) -> tuple[Image, list[AlphaMatte]]:
    """Paste foregrounds sequentially at seeded positions/scales; later pastes
    occlude earlier instances, whose stored mattes are attenuated by
    (1 - later alpha) in the overlap."""
    canvas = bg.pixels.astype(np.float64).copy()
    bh, bw = canvas.shape[:2]
    stored: list[np.ndarray] = []

    for idx, (fg, alpha) in enumerate(fgs):
        scale = rng.uniform(0.5, 1.0)
        out_h = max(int(round(scale * bh)), 1)
        out_w = max(int(round(out_h * fg.width / fg.height)), 1)
        if out_h > bh or out_w > bw:
            raise ValueError(f"foreground {idx} is {out_w}x{out_h} after scaling, larger than "
                             f"background {bw}x{bh}")
        fg_px, fg_a = _scale_to(fg, alpha, out_h, out_w)

        top = int(rng.integers(0, bh - out_h + 1))
        left = int(rng.integers(0, bw - out_w + 1))
        pasted = np.zeros((bh, bw), dtype=np.float64)
        pasted[top:top + out_h, left:left + out_w] = fg_a

        region = canvas[top:top + out_h, left:left + out_w]
        canvas[top:top + out_h, left:left + out_w] = (
            fg_a[:, :, None] * fg_px + (1.0 - fg_a[:, :, None]) * region)

        for prev in stored:
            prev *= 1.0 - pasted
        stored.append(pasted)

    mattes = [AlphaMatte(np.clip(m, 0.0, 1.0).astype(np.float32), instance_id=i)
              for i, m in enumerate(stored)]
    return Image(np.clip(canvas, 0.0, 1.0).astype(np.float32)), mattes


def synth_feature_provider(image: Image, seed: int) -> FeatureBundle:
    """Deterministic stand-in features: a seeded random-projection pyramid of
    the image at three scales, plus seeded Gaussian attention blobs that each
    sum to one."""
    rng = np.random.default_rng(seed)
    h, w = image.height, image.width
    latents = []
    for stride in PROVIDER_SCALES:
        oh, ow = -(-h // stride), -(-w // stride)
        down = _resize_bilinear(image.pixels, oh, ow)
        proj = rng.normal(0.0, 1.0, size=(3, PROVIDER_CHANNELS))
        latents.append(np.tanh(down @ proj).astype(np.float32))

    oh, ow = latents[0].shape[:2]
    ys = np.arange(oh, dtype=np.float64)[:, None]
    xs = np.arange(ow, dtype=np.float64)[None, :]
    attn = []
    for _ in range(PROVIDER_ATTN_MAPS):
        cy, cx = rng.uniform(0, oh), rng.uniform(0, ow)
        sigma = rng.uniform(1.0, max(oh, ow) / 3.0)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma ** 2))
        attn.append((blob / blob.sum()).astype(np.float32))
    return FeatureBundle(latent_maps=latents, cross_attention_maps=attn)


class MatteInterpreter(nn.Module):
    """Query-based decoder over concatenated latent features: N learnable
    queries produce N alpha mattes plus human/other rows."""

    def __init__(self, in_channels: int, width: int = 64, queries: int = INTERPRETER_QUERIES,
                 stages: int = 3, heads: int = 4, stride: int = PROVIDER_SCALES[0]):
        super().__init__()
        self.stride = stride
        self.width = width
        self.in_proj = nn.Conv2d(in_channels, width, 1)
        self.pixel_decoder = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.GroupNorm(4, width), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.queries = nn.Parameter(torch.randn(queries, width) * 0.02)
        self.cross_attn = nn.ModuleList(
            nn.MultiheadAttention(width, heads, batch_first=True) for _ in range(stages))
        self.cross_norm = nn.ModuleList(nn.LayerNorm(width) for _ in range(stages))
        self.self_blocks = nn.ModuleList(AttentionBlock(width, heads) for _ in range(stages))
        self.matte_embed = Mlp(width, width, layers=3)
        self.class_head = nn.Linear(width, 2)

    def forward(self, features: torch.Tensor, out_size: tuple[int, int]) -> InterpreterOutput:
        """features: (h, w, C) concatenated bundle; out_size: target H x W."""
        x = self.in_proj(features.permute(2, 0, 1).unsqueeze(0))
        h, w = x.shape[2], x.shape[3]
        cells = x.squeeze(0).permute(1, 2, 0).reshape(h * w, self.width)
        keys = cells + sine_position_encoding(h, w, self.width, dtype=cells.dtype,
                                              device=cells.device)
        q = self.queries
        for attn, norm, block in zip(self.cross_attn, self.cross_norm, self.self_blocks):
            y, _ = attn(q.unsqueeze(0), keys.unsqueeze(0), cells.unsqueeze(0), need_weights=False)
            q = norm(q + y.squeeze(0))
            q = block(q)

        pix = self.pixel_decoder(x).squeeze(0)
        emb = self.matte_embed(q)
        logits_lr = torch.einsum("nd,dhw->nhw", emb, pix)
        logits = F.interpolate(logits_lr.unsqueeze(0), size=out_size, mode="bilinear",
                               align_corners=False).squeeze(0)
        label_logits = self.class_head(q)
        return InterpreterOutput(
            mattes=torch.sigmoid(logits),
            matte_logits=logits,
            labels=torch.softmax(label_logits, dim=-1),
            label_logits=label_logits,
        )


def interpret_matte(model: MatteInterpreter, bundle: FeatureBundle,
                    out_size: tuple[int, int]) -> InterpreterOutput:
    features = torch.as_tensor(bundle.concat()).to(next(model.parameters()).dtype)
    return model(features, out_size)


def match_interpreter_queries(out: InterpreterOutput, gt_mattes: list[AlphaMatte],
                              gt_labels: list[str]) -> list[tuple[int, int]]:
    """Min-cost one-to-one assignment of queries to ground-truth instances
    under the combined class + alpha cost."""
    n = out.mattes.shape[0]
    m = len(gt_mattes)
    if m > n:
        raise ValueError(f"{m} targets but only {n} queries")
    cost = np.zeros((n, m))
    with torch.no_grad():
        for j, (matte, label) in enumerate(zip(gt_mattes, gt_labels)):
            tgt = torch.as_tensor(matte.alpha, dtype=out.mattes.dtype)
            cls = torch.tensor([0 if label == HUMAN else 1])
            for i in range(n):
                ce = F.cross_entropy(out.label_logits[i:i + 1], cls)
                mae = (out.mattes[i] - tgt).abs().mean()
                cost[i, j] = float(CLASS_WEIGHT * ce + mae)
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(cols.tolist(), rows.tolist()))  # (gt index, query index)


def interpreter_loss(out: InterpreterOutput, gt_mattes: list[AlphaMatte],
                     gt_labels: list[str],
                     matches: list[tuple[int, int]] | None = None) -> torch.Tensor:
    """Matched-pair loss: 0.1 * class BCE + mean absolute alpha difference."""
    for matte in gt_mattes:
        if matte.alpha.min() < 0.0 or matte.alpha.max() > 1.0:
            raise ValueError("ground-truth alpha must lie in [0, 1]")
    if matches is None:
        matches = match_interpreter_queries(out, gt_mattes, gt_labels)
    terms = []
    for gt_idx, q_idx in matches:
        tgt = torch.as_tensor(gt_mattes[gt_idx].alpha, dtype=out.matte_logits.dtype,
                              device=out.matte_logits.device)
        cls = torch.tensor([0 if gt_labels[gt_idx] == HUMAN else 1],
                           device=out.matte_logits.device)
        ce = F.cross_entropy(out.label_logits[q_idx:q_idx + 1], cls)
        mae = (out.mattes[q_idx] - tgt).abs().mean()
        terms.append(CLASS_WEIGHT * ce + mae)
    return torch.stack(terms).mean()


# --- procedural desk-scale assets -------------------------------------------

def make_soft_foreground(rng: np.random.Generator, size: int) -> tuple[Image, AlphaMatte]:
    """A feather-edged elliptical blob with smooth interior translucency and
    thin sub-threshold strands.

    The interior gradient (alpha 0.55 .. 1.0) and the strands (alpha <= 0.45)
    show through in the composite, so the soft alpha is visually recoverable
    from the image while the binarized mask stays a clean solid region.
    """
    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ry = rng.uniform(0.18, 0.3) * size
    rx = rng.uniform(0.12, 0.25) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    dist = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    feather = rng.uniform(0.1, 0.25)
    core = np.clip((1.0 - dist) / feather + 1.0, 0.0, 1.0)

    fy, fx = rng.uniform(0.2, 0.8, size=2) * size  # translucency focus point
    grad = np.sqrt((ys - fy) ** 2 + (xs - fx) ** 2) / size
    interior = 0.55 + 0.35 * np.clip(1.0 - grad * rng.uniform(0.8, 1.6), 0.0, 1.0)
    alpha = core * interior

    for _ in range(rng.integers(2, 5)):  # strands stay below the 0.5 threshold
        ang = rng.uniform(0, 2 * np.pi)
        sx, sy = cx + rx * np.cos(ang), cy + ry * np.sin(ang)
        length = rng.uniform(0.1, 0.25) * size
        ex, ey = sx + length * np.cos(ang), sy + length * np.sin(ang)
        t = np.linspace(0, 1, 40)
        px, py = sx + t * (ex - sx), sy + t * (ey - sy)
        for x, y, w in zip(px, py, np.linspace(0.45, 0.1, 40)):
            d2 = (xs - x) ** 2 + (ys - y) ** 2
            strand = w * np.exp(-d2 / 2.0)
            alpha = np.where(core < 0.5, np.maximum(alpha, strand), alpha)

    color = rng.uniform(0.2, 1.0, size=3)
    texture = 0.8 + 0.2 * np.sin(xs / rng.uniform(2, 6)) * np.cos(ys / rng.uniform(2, 6))
    pixels = np.clip(color[None, None, :] * texture[:, :, None], 0.0, 1.0)
    return (Image(pixels.astype(np.float32)),
            AlphaMatte(np.clip(alpha, 0.0, 1.0).astype(np.float32)))


def make_background(rng: np.random.Generator, size: int) -> Image:
    """Smooth two-color gradient with mild noise."""
    ys = np.linspace(0, 1, size)[:, None, None]
    xs = np.linspace(0, 1, size)[None, :, None]
    c0 = rng.uniform(0.0, 0.6, size=3)[None, None, :]
    c1 = rng.uniform(0.3, 1.0, size=3)[None, None, :]
    mix = rng.uniform(0.3, 0.7)
    base = c0 + (c1 - c0) * (mix * ys + (1 - mix) * xs)
    noise = rng.normal(0.0, 0.02, size=(size, size, 1))
    return Image(np.clip(base + noise, 0.0, 1.0).astype(np.float32))


def _instance_text(idx: int, matte: AlphaMatte) -> str:
    ys, xs = np.nonzero(matte.alpha > 0.5)
    if len(ys) == 0:
        ys, xs = np.nonzero(matte.alpha > 0)
    cy = int(ys.mean()) if len(ys) else 0
    cx = int(xs.mean()) if len(xs) else 0
    h, w = matte.alpha.shape
    vert = "upper" if cy < h / 2 else "lower"
    horiz = "left" if cx < w / 2 else "right"
    return f"person {idx + 1} in the {vert} {horiz} area"


def make_composite_sample(rng: np.random.Generator, size: int = 64,
                          n_instances: int = 2) -> tuple[Image, list[InstanceRecord]]:
    """One synthetic multi-instance sample with text annotations."""
    fgs = [make_soft_foreground(rng, size) for _ in range(n_instances)]
    bg = make_background(rng, size)
    image, mattes = compose_scene_baseline(fgs, bg, rng)
    records = [InstanceRecord(matte=m, class_label=HUMAN, text_description=_instance_text(i, m))
               for i, m in enumerate(mattes)]
    return image, records


def overfit_suite(seed: int = 7, count: int = 4, size: int = 64,
                  n_instances: int = 2) -> list[tuple[Image, list[InstanceRecord]]]:
    """The fixed tiny training suite used by the overfit and regime tests."""
    rng = np.random.default_rng(seed)
    return [make_composite_sample(rng, size=size, n_instances=n_instances)
            for _ in range(count)]


def synthesize_dataset(out_dir, count: int, seed: int, size: int = 64,
                       instance_range: tuple[int, int] = (2, 6)) -> list[Path]:
    """Write ``count`` samples in the standard layout; returns sample dirs."""
    lo, hi = instance_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad instance range {instance_range}")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    dirs = []
    for i in range(count):
        n_inst = int(rng.integers(lo, hi + 1))
        image, records = make_composite_sample(rng, size=size, n_instances=n_inst)
        sample_dir = out_dir / f"sample_{i:05d}"
        save_sample(sample_dir, image, records)
        dirs.append(sample_dir)
    return dirs
