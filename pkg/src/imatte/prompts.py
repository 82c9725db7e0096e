"""User prompts: typed geometry, encoding into the shared visual-semantic
space, and the JSON wire format used by the service and UI.

Every prompt kind encodes to K x d vectors of the same width d. Visual
prompts (click/scribble/box) are sampled from the image feature map and
augmented with learnable kind and polarity embeddings; text prompts go
through a pluggable text encoder (default: hash embedding-bag).
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

KINDS = ("click", "scribble", "box", "text")
VISUAL_KINDS = ("click", "scribble", "box")
FOREGROUND = "fg"
BACKGROUND = "bg"
POLARITIES = (FOREGROUND, BACKGROUND)

SCRIBBLE_SAMPLES = 16
BOX_SAMPLES = 16
TEXT_VOCAB_SLOTS = 4096

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class PromptError(ValueError):
    """A prompt violates the geometry or bounds contract."""


@dataclass(frozen=True)
class Prompt:
    """One user input unit: click, scribble, box, or text.

    ``points`` are (x, y) image-pixel coordinates: one point for a click,
    >= 2 polyline vertices for a scribble, two normalized corners
    (x1 < x2, y1 < y2) for a box. Boxes are always foreground.
    """

    kind: str
    polarity: str = FOREGROUND
    points: tuple[tuple[float, float], ...] = ()
    text: str | None = None
    round: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PromptError(f"unknown prompt kind {self.kind!r}")
        if self.polarity not in POLARITIES:
            raise PromptError(f"unknown polarity {self.polarity!r}")
        if self.round < 0:
            raise PromptError("round index must be non-negative")
        if self.kind == "click" and len(self.points) != 1:
            raise PromptError("click needs exactly one point")
        if self.kind == "scribble" and len(self.points) < 2:
            raise PromptError("scribble needs at least two polyline vertices")
        if self.kind == "box":
            if len(self.points) != 2:
                raise PromptError("box needs exactly two corner points")
            (x1, y1), (x2, y2) = self.points
            if not (x1 < x2 and y1 < y2):
                raise PromptError("box corners must satisfy x1 < x2 and y1 < y2 (zero area rejected)")
            if self.polarity != FOREGROUND:
                raise PromptError("boxes carry foreground polarity only")
        if self.kind == "text":
            if not self.text or not self.text.strip():
                raise PromptError("text prompt needs a non-empty string")
        elif self.text is not None:
            raise PromptError(f"{self.kind} prompt must not carry text")

    def check_bounds(self, height: int, width: int) -> None:
        for x, y in self.points:
            if not (0.0 <= x <= width - 1 and 0.0 <= y <= height - 1):
                raise PromptError(f"point ({x}, {y}) outside image bounds {width}x{height}")


def click(x: float, y: float, polarity: str = FOREGROUND, round: int = 0) -> Prompt:
    return Prompt(kind="click", polarity=polarity, points=((float(x), float(y)),), round=round)


def scribble(points, polarity: str = FOREGROUND, round: int = 0) -> Prompt:
    pts = tuple((float(x), float(y)) for x, y in points)
    return Prompt(kind="scribble", polarity=polarity, points=pts, round=round)


def box(corner_a, corner_b, round: int = 0) -> Prompt:
    """Box from two arbitrary corners, normalized to (x1, y1), (x2, y2)."""
    x1, x2 = sorted((float(corner_a[0]), float(corner_b[0])))
    y1, y2 = sorted((float(corner_a[1]), float(corner_b[1])))
    return Prompt(kind="box", points=((x1, y1), (x2, y2)), round=round)


def text_prompt(content: str, round: int = 0) -> Prompt:
    return Prompt(kind="text", text=content, round=round)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Image features on a strided grid: H' x W' x C with H' = ceil(H/stride)."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"FeatureMap data must be H' x W' x C, got {tuple(self.data.shape)}")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    """K prompt vectors in the shared d-wide space, with per-vector tags.

    ``locations`` holds the (x, y) image-pixel position each vector was
    sampled at; text vectors carry NaN (no spatial location).
    """

    vectors: torch.Tensor
    kind_tags: tuple[str, ...]
    polarity_tags: tuple[str, ...]
    locations: np.ndarray

    def __post_init__(self):
        k = self.vectors.shape[0]
        if k < 1:
            raise ValueError("PromptEmbedding needs at least one vector")
        if not (len(self.kind_tags) == len(self.polarity_tags) == self.locations.shape[0] == k):
            raise ValueError("PromptEmbedding tag/location counts must match vector count")

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def concat_embeddings(parts: list[PromptEmbedding]) -> PromptEmbedding:
    return PromptEmbedding(
        vectors=torch.cat([p.vectors for p in parts], dim=0),
        kind_tags=tuple(t for p in parts for t in p.kind_tags),
        polarity_tags=tuple(t for p in parts for t in p.polarity_tags),
        locations=np.concatenate([p.locations for p in parts], axis=0),
    )


def bilinear_sample(data: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample an H x W x C grid at fractional (x, y) cell coordinates.

    Cell centers sit at integer coordinates; out-of-range coordinates clamp
    to the border cell.
    """
    h, w = data.shape[0], data.shape[1]
    xs = torch.clamp(xs, 0.0, float(w - 1))
    ys = torch.clamp(ys, 0.0, float(h - 1))
    x0 = torch.clamp(xs.floor().long(), 0, w - 1)
    y0 = torch.clamp(ys.floor().long(), 0, h - 1)
    x1 = torch.clamp(x0 + 1, 0, w - 1)
    y1 = torch.clamp(y0 + 1, 0, h - 1)
    fx = (xs - x0.to(xs.dtype)).unsqueeze(-1)
    fy = (ys - y0.to(ys.dtype)).unsqueeze(-1)
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def halton_points(n: int) -> np.ndarray:
    """First n points of the (2, 3)-base Halton sequence in [0, 1)^2."""
    out = np.empty((n, 2), dtype=np.float64)
    for dim, base in enumerate((2, 3)):
        for i in range(n):
            f, r, k = 1.0, 0.0, i + 1
            while k > 0:
                f /= base
                r += f * (k % base)
                k //= base
            out[i, dim] = r
    return out

_BOX_GRID = halton_points(BOX_SAMPLES)


def _polyline_arclengths(pts: np.ndarray) -> np.ndarray:
    deltas = np.diff(pts, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(deltas[:, 0], deltas[:, 1]))])


def _points_along(pts: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Interpolate positions at arc-length fractions along a polyline."""
    cum = _polyline_arclengths(pts)
    total = cum[-1]
    if total == 0.0:
        return np.repeat(pts[:1], len(fractions), axis=0)
    targets = fractions * total
    seg = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(pts) - 2)
    seg_len = cum[seg + 1] - cum[seg]
    t = np.where(seg_len > 0, (targets - cum[seg]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    return pts[seg] + t[:, None] * (pts[seg + 1] - pts[seg])


def rasterized_path_length(pts: np.ndarray) -> int:
    """Number of distinct integer pixels a polyline covers (>= 1)."""
    cum = _polyline_arclengths(pts)
    total = cum[-1]
    n_dense = max(int(math.ceil(total / 0.5)) + 1, 2)
    dense = _points_along(pts, np.linspace(0.0, 1.0, n_dense))
    cells = np.unique(np.round(dense).astype(np.int64), axis=0)
    return int(len(cells))


class HashTextEncoder(nn.Module):
    """Default text encoder: crc32 token hashing into a learnable table.

    Normalization: lowercase, tokens are maximal [a-z0-9] runs (so trailing
    whitespace and punctuation never change the encoding). Emits one vector
    per token plus a mean-pooled vector appended last.
    """

    def __init__(self, width: int, slots: int = TEXT_VOCAB_SLOTS):
        super().__init__()
        self.width = width
        self.slots = slots
        self.table = nn.Embedding(slots, width)

    @staticmethod
    def tokenize(content: str) -> list[str]:
        return _TOKEN_RE.findall(content.lower())

    def forward(self, content: str) -> torch.Tensor:
        tokens = self.tokenize(content)
        if not tokens:
            raise PromptError(f"text prompt has no tokens after normalization: {content!r}")
        idx = torch.tensor([zlib.crc32(t.encode()) % self.slots for t in tokens], dtype=torch.long,
                           device=self.table.weight.device)
        vectors = self.table(idx)
        pooled = vectors.mean(dim=0, keepdim=True)
        return torch.cat([vectors, pooled], dim=0)


class PromptEncoder(nn.Module):
    """Encodes prompts of every kind into the unified d-wide space."""

    def __init__(self, width: int, text_encoder: nn.Module | None = None,
                 scribble_samples: int = SCRIBBLE_SAMPLES, box_samples: int = BOX_SAMPLES):
        super().__init__()
        self.width = width
        self.scribble_samples = scribble_samples
        self.box_samples = box_samples
        self.kind_embed = nn.Embedding(len(VISUAL_KINDS), width)
        self.polarity_embed = nn.Embedding(len(POLARITIES), width)
        self.text_encoder = text_encoder if text_encoder is not None else HashTextEncoder(width)

    def _sample_points(self, prompt: Prompt, fmap: FeatureMap) -> np.ndarray:
        pts = np.asarray(prompt.points, dtype=np.float64)
        if prompt.kind == "click":
            return pts
        if prompt.kind == "scribble":
            n = min(self.scribble_samples, rasterized_path_length(pts))
            if n == 1:
                return pts[:1]
            return _points_along(pts, np.linspace(0.0, 1.0, n))
        # box: fixed low-discrepancy grid inside the rectangle
        (x1, y1), (x2, y2) = prompt.points
        grid = _BOX_GRID[: self.box_samples]
        out = np.empty_like(grid)
        out[:, 0] = x1 + grid[:, 0] * (x2 - x1)
        out[:, 1] = y1 + grid[:, 1] * (y2 - y1)
        return out

    def sample_visual_prompts(self, prompt: Prompt, fmap: FeatureMap,
                              image_size: tuple[int, int] | None = None) -> PromptEmbedding:
        """Sample feature vectors at a visual prompt's locations (Eq.-style
        visual sampler) and add kind + polarity embeddings."""
        if prompt.kind not in VISUAL_KINDS:
            raise PromptError(f"sample_visual_prompts got non-visual kind {prompt.kind!r}")
        if image_size is None:
            image_size = (fmap.height * fmap.stride, fmap.width * fmap.stride)
        prompt.check_bounds(*image_size)

        points = self._sample_points(prompt, fmap)
        stride = float(fmap.stride)
        xs = torch.tensor((points[:, 0] + 0.5) / stride - 0.5, dtype=fmap.data.dtype,
                          device=fmap.data.device)
        ys = torch.tensor((points[:, 1] + 0.5) / stride - 0.5, dtype=fmap.data.dtype,
                          device=fmap.data.device)
        sampled = bilinear_sample(fmap.data, xs, ys)
        kind_idx = VISUAL_KINDS.index(prompt.kind)
        pol_idx = POLARITIES.index(prompt.polarity)
        vectors = sampled + self.kind_embed.weight[kind_idx] + self.polarity_embed.weight[pol_idx]
        k = vectors.shape[0]
        return PromptEmbedding(
            vectors=vectors,
            kind_tags=(prompt.kind,) * k,
            polarity_tags=(prompt.polarity,) * k,
            locations=points.copy(),
        )

    def encode_text(self, prompt: Prompt) -> PromptEmbedding:
        if prompt.kind != "text":
            raise PromptError(f"encode_text got kind {prompt.kind!r}")
        vectors = self.text_encoder(prompt.text)
        k = vectors.shape[0]
        return PromptEmbedding(
            vectors=vectors,
            kind_tags=("text",) * k,
            polarity_tags=(FOREGROUND,) * k,
            locations=np.full((k, 2), np.nan),
        )

    def encode(self, prompts: list[Prompt], fmap: FeatureMap,
               image_size: tuple[int, int] | None = None) -> PromptEmbedding | None:
        """Encode a mixed prompt list; returns None for an empty list."""
        parts = []
        for p in prompts:
            if p.kind == "text":
                parts.append(self.encode_text(p))
            else:
                parts.append(self.sample_visual_prompts(p, fmap, image_size))
        if not parts:
            return None
        return concat_embeddings(parts)


# --- JSON wire format -------------------------------------------------------

def prompt_to_dict(p: Prompt) -> dict:
    out = {
        "kind": p.kind,
        "polarity": p.polarity,
        "points": [[x, y] for x, y in p.points],
        "round": p.round,
    }
    if p.kind == "text":
        out["text"] = p.text
    return out


def serialize_prompts(prompts: list[Prompt]) -> str:
    return json.dumps({"prompts": [prompt_to_dict(p) for p in prompts]})


def prompt_from_dict(obj: dict, path: str = "prompts[0]") -> Prompt:
    if not isinstance(obj, dict):
        raise PromptError(f"{path}: expected an object")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise PromptError(f"{path}.kind: unknown prompt kind {kind!r}")
    polarity = obj.get("polarity", FOREGROUND)
    if polarity not in POLARITIES:
        raise PromptError(f"{path}.polarity: expected 'fg' or 'bg', got {polarity!r}")
    raw_points = obj.get("points", [])
    if not isinstance(raw_points, list):
        raise PromptError(f"{path}.points: expected a list of [x, y] pairs")
    points = []
    for i, pt in enumerate(raw_points):
        if not (isinstance(pt, (list, tuple)) and len(pt) == 2):
            raise PromptError(f"{path}.points[{i}]: expected an [x, y] pair")
        points.append((float(pt[0]), float(pt[1])))
    round_idx = obj.get("round", 0)
    if not isinstance(round_idx, int) or round_idx < 0:
        raise PromptError(f"{path}.round: expected a non-negative integer")
    try:
        return Prompt(kind=kind, polarity=polarity, points=tuple(points),
                      text=obj.get("text") if kind == "text" else None, round=round_idx)
    except PromptError as exc:
        raise PromptError(f"{path}: {exc}") from exc


def parse_prompts(payload) -> list[Prompt]:
    """Parse the prompts JSON schema from text or an already-decoded dict."""
    if isinstance(payload, (str, bytes)):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise PromptError(f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "prompts" not in payload:
        raise PromptError("top level must be an object with a 'prompts' list")
    if not isinstance(payload["prompts"], list):
        raise PromptError("prompts: expected a list")
    return [prompt_from_dict(obj, f"prompts[{i}]") for i, obj in enumerate(payload["prompts"])]
