"""Pre-annotated images: stroked molecule boxes with index labels."""

from __future__ import annotations

import hashlib
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import font
from .model import BBox, RxnError

DEFAULT_PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (0, 128, 128),
    (240, 50, 230),
    (170, 110, 40),
)


class RenderError(RxnError):
    pass


@dataclass(frozen=True)
class VisualPromptStyle:
    stroke_width_px: int = 3
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE
    label_corner: str = "top-left"
    label_scale: float = 2.0
    padding_px: int = 2

    def __post_init__(self):
        object.__setattr__(self, "palette", tuple(tuple(int(c) for c in rgb) for rgb in self.palette))
        if self.stroke_width_px < 1:
            raise ValueError("stroke_width_px must be >= 1")
        if not self.palette:
            raise ValueError("palette must not be empty")
        if any(len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb) for rgb in self.palette):
            raise ValueError("palette entries must be RGB triples in 0..255")
        if not self.label_scale > 0:
            raise ValueError("label_scale must be positive")
        if self.label_corner not in ("top-left", "top-right"):
            raise ValueError(f"label_corner must be top-left or top-right, got {self.label_corner!r}")
        if self.padding_px < 0:
            raise ValueError("padding_px must be >= 0")

    @property
    def glyph_scale(self) -> int:
        return max(1, round(self.label_scale))

    @property
    def label_height(self) -> int:
        """Height in pixels of a label including its halo."""
        return font.GLYPH_H * self.glyph_scale + 2 * self.glyph_scale

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_file(cls, path) -> "VisualPromptStyle":
        data = json.loads(Path(path).read_text())
        if "palette" in data:
            data["palette"] = tuple(tuple(c) for c in data["palette"])
        return cls(**data)


def assign_indices(boxes: Sequence[BBox]) -> dict[int, BBox]:
    """Number boxes 1..N in reading order: row band first, then left to right.

    Row bands quantize the box center height by the median box height, so the
    result does not depend on the input order.
    """
    if not boxes:
        return {}
    unit = statistics.median(b.height for b in boxes)

    def key(b: BBox):
        cx, cy = b.center
        return (math.floor(cy / unit), cx, cy, b.x1, b.y1, b.x2, b.y2)

    return {i: b for i, b in enumerate(sorted(boxes, key=key), 1)}


def load_image(image) -> Image.Image:
    """Accept a PIL image, raw encoded bytes, or a filesystem path."""
    if isinstance(image, Image.Image):
        return image
    try:
        if isinstance(image, (bytes, bytearray)):
            img = Image.open(io.BytesIO(image))
        else:
            img = Image.open(Path(image))
        img.load()
        return img
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise RenderError(f"cannot decode image: {exc}") from exc


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def pixel_rect(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle (left, top, right, bottom) clamped to the image."""
    left = min(max(round(box.x1 * width), 0), width)
    right = min(max(round(box.x2 * width), 0), width)
    top = min(max(round(box.y1 * height), 0), height)
    bottom = min(max(round(box.y2 * height), 0), height)
    if right - left < 1 or bottom - top < 1:
        raise RenderError(f"box {box.to_list()} is smaller than one pixel on a {width}x{height} image")
    return left, top, right, bottom


def _label_origin(outer, label_w, label_h, style, width, height, stroke):
    left, top, right, bottom = outer
    x = left if style.label_corner == "top-left" else right - label_w
    y = top - label_h
    if y < 0:
        y = top + stroke
    x = min(max(x, 0), max(width - label_w, 0))
    y = min(max(y, 0), max(height - label_h, 0))
    return x, y


def render_visual_prompt(image, boxes: Sequence[BBox],
                         style: VisualPromptStyle = VisualPromptStyle()) -> tuple[bytes, dict[int, BBox]]:
    """Draw every box and its index onto ``image``; return PNG bytes and the index map."""
    img = load_image(image).convert("RGB")
    width, height = img.size
    index_map = assign_indices(list(boxes))
    arr = np.array(img)
    sw, pad = style.stroke_width_px, style.padding_px

    outers = {}
    for idx, box in index_map.items():
        left, top, right, bottom = pixel_rect(box, width, height)
        o = (left - pad - sw, top - pad - sw, right + pad + sw, bottom + pad + sw)
        color = style.palette[(idx - 1) % len(style.palette)]
        x0, y0, x1, y1 = (max(v, 0) for v in o)
        i0, i1, i2, i3 = (max(v, 0) for v in (o[0] + sw, o[1] + sw, o[2] - sw, o[3] - sw))
        # outer rectangle minus inner rectangle, as four strips
        arr[y0:i1, x0:x1] = color
        arr[i3:y1, x0:x1] = color
        arr[y0:y1, x0:i0] = color
        arr[y0:y1, i2:x1] = color
        outers[idx] = o

    s = style.glyph_scale
    for idx, o in outers.items():
        mask = font.text_mask(str(idx), s)
        label_h, label_w = mask.shape[0] + 2 * s, mask.shape[1] + 2 * s
        x, y = _label_origin(o, label_w, label_h, style, width, height, sw)
        region = arr[y:y + label_h, x:x + label_w]
        region[...] = 255
        glyphs = region[s:s + mask.shape[0], s:s + mask.shape[1]]
        glyphs[mask[:glyphs.shape[0], :glyphs.shape[1]]] = style.palette[(idx - 1) % len(style.palette)]

    return encode_png(Image.fromarray(arr, "RGB")), index_map
