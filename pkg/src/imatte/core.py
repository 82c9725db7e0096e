"""Shared domain types, dataset sample IO, and alpha-compositing primitives.

All grids are float32 numpy arrays in [0, 1], channel-last, row-major [y, x].
Mattes are stored on disk as 8-bit grayscale PNG (16-bit when the sample's
meta.json sets ``matte_bit_depth: 16``).

Dataset sample layout::

    <sample>/image.png
    <sample>/matte_<k>.png      # k = 0-based instance index
    <sample>/meta.json          # {"instances": [{"id": int, "class": "human"|"other", "text": str}]}
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

HUMAN = "human"
OTHER = "other"
CLASS_LABELS = (HUMAN, OTHER)
MIN_SIDE = 8


class ShapeError(ValueError):
    """Spatial dimensions of paired grids do not match."""


class SampleLoadError(ValueError):
    """A dataset sample is missing files or has malformed metadata."""


def _check_unit_range(arr: np.ndarray, what: str) -> None:
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1], got range "
                         f"[{arr.min():.6g}, {arr.max():.6g}]")


def _as_unit_grid(arr, what: str, ndim: int) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float32)
    if out.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-dimensional, got shape {out.shape}")
    _check_unit_range(out, what)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """An sRGB image as an H x W x 3 float grid in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_unit_grid(self.pixels, "Image", 3))
        if self.pixels.shape[2] != 3:
            raise ValueError(f"Image needs 3 channels, got {self.pixels.shape[2]}")
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise ValueError(f"Image sides must be >= {MIN_SIDE}px, got {self.height}x{self.width}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class AlphaMatte:
    """Per-pixel soft foreground opacity for one instance."""

    alpha: np.ndarray
    instance_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha", _as_unit_grid(self.alpha, "AlphaMatte", 2))

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Soft localization mask for one instance, probabilities in [0, 1]."""

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _as_unit_grid(self.mask, "InstanceMask", 2))

    @property
    def binarized(self) -> np.ndarray:
        return self.mask >= 0.5

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True, eq=False)
class InstanceRecord:
    """Ground-truth matte plus class and optional text annotation."""

    matte: AlphaMatte
    class_label: str = HUMAN
    text_description: str | None = None

    def __post_init__(self):
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"class_label must be one of {CLASS_LABELS}, got {self.class_label!r}")


def _require_same_shape(a, b, what: str) -> None:
    if a != b:
        raise ShapeError(f"{what}: spatial dims differ, {a} vs {b}")


def composite(fg: Image, bg: Image, alpha: AlphaMatte) -> Image:
    """Blend foreground over background: out = alpha * fg + (1 - alpha) * bg."""
    _require_same_shape(fg.pixels.shape[:2], bg.pixels.shape[:2], "composite fg/bg")
    _require_same_shape(fg.pixels.shape[:2], alpha.shape, "composite fg/alpha")
    a = alpha.alpha[:, :, None]
    out = a * fg.pixels + (1.0 - a) * bg.pixels
    # blend of unit-range inputs; clip only float round-off overshoot
    return Image(np.clip(out, 0.0, 1.0))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    """Threshold a soft mask; the threshold itself counts as foreground (>=)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly in (0, 1), got {threshold}")
    grid = mask.mask if isinstance(mask, InstanceMask) else np.asarray(mask)
    return grid >= threshold


def _to_uint(alpha: np.ndarray, bit_depth: int) -> np.ndarray:
    if bit_depth == 8:
        return np.round(alpha * 255.0).astype(np.uint8)
    if bit_depth == 16:
        return np.round(alpha * 65535.0).astype(np.uint16)
    raise ValueError(f"matte_bit_depth must be 8 or 16, got {bit_depth}")


def save_matte_png(path: Path, matte: AlphaMatte, bit_depth: int = 8) -> None:
    data = _to_uint(matte.alpha, bit_depth)
    mode = "L" if bit_depth == 8 else "I;16"
    PILImage.fromarray(data, mode=mode).save(path)


def load_matte_png(path: Path, instance_id: int = 0) -> AlphaMatte:
    with PILImage.open(path) as img:
        arr = np.asarray(img)
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return AlphaMatte(arr.astype(np.float32) / scale, instance_id=instance_id)


def save_image_png(path: Path, image: Image) -> None:
    PILImage.fromarray(np.round(image.pixels * 255.0).astype(np.uint8), mode="RGB").save(path)


def load_image_png(path: Path) -> Image:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return Image(arr.astype(np.float32) / 255.0)


def encode_image_png(image: Image) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.round(image.pixels * 255.0).astype(np.uint8), mode="RGB").save(buf, "PNG")
    return buf.getvalue()


def encode_gray_png(grid: np.ndarray) -> bytes:
    """Encode a [0,1] grid (or uint8 grid) as 8-bit grayscale PNG bytes."""
    if grid.dtype != np.uint8:
        grid = np.round(np.asarray(grid, dtype=np.float64) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(grid, mode="L").save(buf, "PNG")
    return buf.getvalue()


def decode_image_png(data: bytes) -> Image:
    with PILImage.open(io.BytesIO(data)) as img:
        arr = np.asarray(img.convert("RGB"))
    return Image(arr.astype(np.float32) / 255.0)


def load_sample(path) -> tuple[Image, list[InstanceRecord]]:
    """Load one dataset sample directory into an image plus instance records."""
    root = Path(path)
    meta_path = root / "meta.json"
    image_path = root / "image.png"
    if not image_path.exists():
        raise SampleLoadError(f"missing image file: {image_path}")
    if not meta_path.exists():
        raise SampleLoadError(f"missing metadata file: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SampleLoadError(f"malformed metadata in {meta_path}: {exc}") from exc
    if "instances" not in meta or not isinstance(meta["instances"], list):
        raise SampleLoadError(f"metadata {meta_path} lacks an 'instances' list")
    bit_depth = int(meta.get("matte_bit_depth", 8))

    image = load_image_png(image_path)
    records = []
    for k, inst in enumerate(meta["instances"]):
        matte_path = root / f"matte_{k}.png"
        if not matte_path.exists():
            raise SampleLoadError(f"missing matte file: {matte_path}")
        matte = load_matte_png(matte_path, instance_id=int(inst.get("id", k)))
        if matte.shape != (image.height, image.width):
            raise SampleLoadError(f"matte {matte_path} dims {matte.shape} do not match image")
        records.append(InstanceRecord(
            matte=matte,
            class_label=inst.get("class", HUMAN),
            text_description=inst.get("text"),
        ))
    _ = bit_depth  # recorded in meta; loader infers depth from the PNG itself
    return image, records


def save_sample(path, image: Image, records: list[InstanceRecord], bit_depth: int = 8) -> None:
    """Write a sample directory in the layout load_sample expects."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    save_image_png(root / "image.png", image)
    instances = []
    for k, rec in enumerate(records):
        save_matte_png(root / f"matte_{k}.png", rec.matte, bit_depth=bit_depth)
        instances.append({
            "id": rec.matte.instance_id,
            "class": rec.class_label,
            "text": rec.text_description or "",
        })
    meta = {"instances": instances}
    if bit_depth != 8:
        meta["matte_bit_depth"] = bit_depth
    (root / "meta.json").write_text(json.dumps(meta, indent=2))


def list_sample_dirs(root) -> list[Path]:
    """Sample subdirectories of a dataset directory, sorted by name."""
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
