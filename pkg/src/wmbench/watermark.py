"""Deterministic synthesis of watermarked document images.

One watermark condition is a WatermarkSpec: what is drawn (text, symbol,
or a solid rectangle), where (a single centered box, a top-left box, or
five scattered boxes), and how (color, opacity, rotation, total area as a
fraction of the image). All geometry is computed in float pixels; blending
uses round-half-up integer arithmetic so outputs are bit-reproducible.

Placement boxes always use a 4:1 aspect ratio and content rasters are
fitted to the box, so swapping content (e.g. rectangle for text) keeps
every box identical — the rectangle variant occludes exactly where the
text variant draws.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from . import __version__ as ENGINE_VERSION
from .corpus import DocumentImage, EvalDataset, VqaItem, save_manifest

BOX_ASPECT = 4.0          # width : height of every placement box
MARGIN_FRACTION = 0.02    # top-left inset, fraction of min image dimension
MIN_FONT_SIZE = 6.0       # smallest legible render; feasibility floor
MIN_AREA_RATIO = 0.10
MAX_AREA_RATIO = 0.80
PNG_COMPRESS_LEVEL = 6    # pinned so re-renders are byte-identical

_FONT_FILE = Path(__file__).parent / "fonts" / "DejaVuSans-Bold.ttf"
FONT_SHA256 = "d1c3ff99f1e1ce1827a33efd4dad81f40babda06bff9e43bd7591c86662a287b"

DEFAULT_TEXT = "MARK"
DEFAULT_SYMBOL = "###"


class PlacementError(ValueError):
    """Image cannot host the requested watermark geometry."""


class ScaleError(ValueError):
    """No glyph scale reaches the requested rendered area."""


class RenderError(RuntimeError):
    """One or more items failed during condition rendering."""

    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(failures.items()))
        super().__init__(f"{len(failures)} item(s) failed: {detail}")


def _load_font_bytes() -> bytes:
    data = _FONT_FILE.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != FONT_SHA256:
        raise RuntimeError(
            f"bundled font checksum mismatch: {digest} != {FONT_SHA256}"
        )
    return data


_font_bytes: bytes | None = None


def bundled_font(size: float) -> ImageFont.FreeTypeFont:
    """The pinned package font at the given size, checksum-verified once."""
    global _font_bytes
    if _font_bytes is None:
        _font_bytes = _load_font_bytes()
    return ImageFont.truetype(io.BytesIO(_font_bytes), size)


@dataclass(frozen=True)
class WatermarkContent:
    """What gets drawn: a text string, a symbol string, or a solid box."""

    kind: str  # "text" | "symbol" | "mask"
    string: str = ""

    def __post_init__(self):
        if self.kind not in ("text", "symbol", "mask"):
            raise ValueError(f"unknown content kind {self.kind!r}")
        if self.kind != "mask":
            if not self.string or not self.string.isprintable():
                raise ValueError(
                    f"{self.kind} content requires a nonempty printable string"
                )
        elif self.string:
            raise ValueError("mask content carries no string")

    @classmethod
    def text(cls, string: str = DEFAULT_TEXT) -> "WatermarkContent":
        return cls("text", string)

    @classmethod
    def symbol(cls, string: str = DEFAULT_SYMBOL) -> "WatermarkContent":
        return cls("symbol", string)

    @classmethod
    def mask(cls) -> "WatermarkContent":
        return cls("mask")

    @property
    def label(self) -> str:
        return self.kind

    def to_json(self) -> dict:
        return {"kind": self.kind, "string": self.string}

    @classmethod
    def from_json(cls, obj: dict) -> "WatermarkContent":
        return cls(obj["kind"], obj.get("string", ""))


POSITION_MODES = ("center", "top_left", "scattered")


@dataclass(frozen=True)
class WatermarkSpec:
    """Full parameterization of one perturbation condition."""

    content: WatermarkContent
    position: str = "center"
    color: tuple[int, int, int] = (0, 0, 0)
    opacity: float = 0.5
    angle: float = 0.0
    area_ratio: float = 0.25

    def __post_init__(self):
        if self.position not in POSITION_MODES:
            raise ValueError(f"unknown position mode {self.position!r}")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if not MIN_AREA_RATIO <= self.area_ratio <= MAX_AREA_RATIO:
            raise ValueError(
                f"area_ratio {self.area_ratio} outside "
                f"[{MIN_AREA_RATIO}, {MAX_AREA_RATIO}]"
            )
        if not 0.0 <= self.angle < 360.0:
            raise ValueError(f"angle {self.angle} outside [0, 360)")
        if len(self.color) != 3 or not all(
            isinstance(c, int) and 0 <= c <= 255 for c in self.color
        ):
            raise ValueError(f"color {self.color!r} is not an RGB byte triple")

    @property
    def condition_id(self) -> str:
        r, g, b = self.color
        return (
            f"{self.content.label}-{self.position}"
            f"-a{round(self.opacity * 100):02d}"
            f"-r{round(self.area_ratio * 100):02d}"
            f"-{r:02x}{g:02x}{b:02x}-d{self.angle:g}"
        )

    def to_json(self) -> dict:
        return {
            "content": self.content.to_json(),
            "position": self.position,
            "color": list(self.color),
            "opacity": self.opacity,
            "angle": self.angle,
            "area_ratio": self.area_ratio,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WatermarkSpec":
        return cls(
            content=WatermarkContent.from_json(obj["content"]),
            position=obj["position"],
            color=tuple(obj["color"]),
            opacity=obj["opacity"],
            angle=obj["angle"],
            area_ratio=obj["area_ratio"],
        )


@dataclass(frozen=True)
class PlacementBox:
    """A positioned rectangle (float pixels) with a rotation about its center."""

    x: float
    y: float
    w: float
    h: float
    angle: float = 0.0

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h


def measure_text(string: str, size: float) -> tuple[float, float]:
    """Tight bounding-box (width, height) of a string at the given font size."""
    font = bundled_font(size)
    left, top, right, bottom = font.getbbox(string)
    return float(right - left), float(bottom - top)


def min_glyph_box(content: WatermarkContent) -> tuple[float, float]:
    """Smallest legible rendered box for the content (1x1 for rectangles)."""
    if content.kind == "mask":
        return (1.0, 1.0)
    return measure_text(content.string, MIN_FONT_SIZE)


def solve_glyph_scale(
    content: WatermarkContent,
    target_area: float,
    tolerance: float = 0.02,
    max_iterations: int = 40,
) -> float:
    """Find the render scale whose bounding-box area matches target_area.

    For rectangle content the solution is closed-form (scale = box height
    at 4:1 aspect). For strings the scale is the font size, solved by
    bisection over render-and-measure to within ``tolerance`` relative
    error. Monotone: a larger target never yields a smaller scale.
    """
    if target_area <= 0:
        raise ScaleError(f"target area {target_area} must be positive")
    if content.kind == "mask":
        return math.sqrt(target_area / BOX_ASPECT)

    def area_at(size: float) -> float:
        w, h = measure_text(content.string, size)
        return w * h

    lo = MIN_FONT_SIZE
    if area_at(lo) > target_area * (1 + tolerance):
        raise ScaleError(
            f"target area {target_area:.1f} px^2 below minimum renderable "
            f"glyph area {area_at(lo):.1f} px^2"
        )
    hi = max(lo * 2, 16.0)
    while area_at(hi) < target_area and hi < 1e5:
        lo = hi
        hi *= 2.0
    for _ in range(max_iterations):
        mid = (lo + hi) / 2.0
        area = area_at(mid)
        if abs(area - target_area) / target_area <= tolerance:
            return mid
        if area < target_area:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def _fit_dims(
    area: float, max_w: float, max_h: float, aspect: float = BOX_ASPECT
) -> tuple[float, float]:
    """Box dims of the given area at the preferred aspect, clamped to limits."""
    w = math.sqrt(area * aspect)
    if w > max_w:
        w = max_w
    h = area / w
    if h > max_h:
        h = max_h
        w = area / h
    if w > max_w + 1e-9:
        raise PlacementError(
            f"area {area:.0f} px^2 cannot fit inside {max_w:.0f}x{max_h:.0f}"
        )
    return w, h


def _centered_box(
    cx: float, cy: float, w: float, h: float, angle: float
) -> PlacementBox:
    return PlacementBox(cx - w / 2.0, cy - h / 2.0, w, h, angle)


def compute_placement(
    width: int, height: int, spec: WatermarkSpec
) -> list[PlacementBox]:
    """Lay out placement boxes totalling area_ratio * width * height.

    center    -> one box centered on the image.
    top_left  -> one box inset from (0, 0) by 2% of the min dimension.
    scattered -> five equal-area boxes at the four quadrant centers and the
                 image center; the center box is flattened when needed so
                 no two boxes overlap.
    """
    if width < 16 or height < 16:
        raise PlacementError(
            f"image {width}x{height} below the 16x16 minimum"
        )
    total = spec.area_ratio * width * height
    angle = spec.angle

    if spec.position == "center":
        w, h = _fit_dims(total, width, height)
        boxes = [_centered_box(width / 2.0, height / 2.0, w, h, angle)]
    elif spec.position == "top_left":
        margin = MARGIN_FRACTION * min(width, height)
        w, h = _fit_dims(total, width - margin, height - margin)
        boxes = [PlacementBox(margin, margin, w, h, angle)]
    else:  # scattered
        per_box = total / 5.0
        cw, ch = _fit_dims(per_box, width / 2.0, height / 2.0)
        anchors = [
            (width / 4.0, height / 4.0),
            (3.0 * width / 4.0, height / 4.0),
            (width / 4.0, 3.0 * height / 4.0),
            (3.0 * width / 4.0, 3.0 * height / 4.0),
        ]
        boxes = [_centered_box(ax, ay, cw, ch, angle) for ax, ay in anchors]
        mw, mh = _fit_dims(per_box, width, height)
        overlaps_x = (mw + cw) / 2.0 > width / 4.0
        overlaps_y = (mh + ch) / 2.0 > height / 4.0
        if overlaps_x and overlaps_y:
            free_h = height / 2.0 - ch
            free_w = width / 2.0 - cw
            if free_h > 0 and per_box / free_h <= width:
                mh = free_h
                mw = per_box / mh
            elif free_w > 0 and per_box / free_w <= height:
                mw = free_w
                mh = per_box / mw
            else:
                raise PlacementError(
                    "scattered boxes cannot avoid overlap at "
                    f"area_ratio={spec.area_ratio} on {width}x{height}"
                )
        boxes.append(
            _centered_box(width / 2.0, height / 2.0, mw, mh, angle)
        )

    if spec.content.kind != "mask":
        min_w, min_h = min_glyph_box(spec.content)
        for box in boxes:
            if box.w < min_w or box.h < min_h:
                raise PlacementError(
                    f"box {box.w:.0f}x{box.h:.0f} too small for "
                    f"{spec.content.string!r} at the minimum legible size "
                    f"({min_w:.0f}x{min_h:.0f})"
                )
    return boxes


def _rect_coverage(
    height: int, width: int, box: PlacementBox
) -> np.ndarray:
    """Exact axis-aligned coverage of a float rectangle (separable overlap)."""
    x0, x1 = box.x, box.x + box.w
    y0, y1 = box.y, box.y + box.h
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)
    col_frac = np.clip(np.minimum(cols + 1.0, x1) - np.maximum(cols, x0), 0.0, 1.0)
    row_frac = np.clip(np.minimum(rows + 1.0, y1) - np.maximum(rows, y0), 0.0, 1.0)
    return np.outer(row_frac, col_frac)


def _text_tile(content: WatermarkContent, box: PlacementBox) -> Image.Image:
    """Render the content string and stretch it to exactly fill the box."""
    size = solve_glyph_scale(content, box.area)
    font = bundled_font(size)
    left, top, right, bottom = font.getbbox(content.string)
    tw, th = right - left, bottom - top
    pad = 4  # ink can spill past layout metrics; crop to actual ink below
    tile = Image.new("L", (max(tw, 1) + 2 * pad, max(th, 1) + 2 * pad), 0)
    draw = ImageDraw.Draw(tile)
    draw.text((pad - left, pad - top), content.string, fill=255, font=font)
    ink = tile.getbbox()
    if ink is None:
        raise ScaleError(f"content {content.string!r} rendered no ink")
    tile = tile.crop(ink)
    target = (max(round(box.w), 1), max(round(box.h), 1))
    if tile.size != target:
        tile = tile.resize(target, Image.Resampling.BILINEAR)
    return tile


def _paste_max(cov: np.ndarray, tile: np.ndarray, cx: float, cy: float) -> None:
    """Max-combine a coverage tile centered at (cx, cy) into the canvas."""
    th, tw = tile.shape
    x0 = round(cx - tw / 2.0)
    y0 = round(cy - th / 2.0)
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1 = min(x0 + tw, cov.shape[1])
    iy1 = min(y0 + th, cov.shape[0])
    if ix1 <= ix0 or iy1 <= iy0:
        return
    view = cov[iy0:iy1, ix0:ix1]
    patch = tile[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
    np.maximum(view, patch, out=view)


def render_coverage(
    width: int, height: int, spec: WatermarkSpec
) -> np.ndarray:
    """Per-pixel coverage c(p) in [0, 1] of the rendered watermark content."""
    boxes = compute_placement(width, height, spec)
    cov = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        if spec.content.kind == "mask":
            if box.angle == 0.0:
                cov = np.maximum(cov, _rect_coverage(height, width, box))
                continue
            tile = Image.new(
                "L", (max(round(box.w), 1), max(round(box.h), 1)), 255
            )
        else:
            tile = _text_tile(spec.content, box)
        if box.angle != 0.0:
            tile = tile.rotate(
                box.angle, resample=Image.Resampling.BILINEAR, expand=True
            )
        arr = np.asarray(tile, dtype=np.float64) / 255.0
        _paste_max(cov, arr, *box.center)
    return cov


def composite(image: DocumentImage, spec: WatermarkSpec) -> DocumentImage:
    """Blend the watermark over the image; a pure, deterministic function.

    Per channel, out = round_half_up(a*color + (1-a)*in) where
    a = opacity * coverage; pixels with zero coverage are bit-identical to
    the input.
    """
    cov = render_coverage(image.width, image.height, spec)
    a = spec.opacity * cov[:, :, None]
    color = np.asarray(spec.color, dtype=np.float64)
    src = image.pixels.astype(np.float64)
    out = np.floor(a * color + (1.0 - a) * src + 0.5)
    return DocumentImage(out.astype(np.uint8))


def coverage_pixel_count(
    width: int, height: int, spec: WatermarkSpec
) -> int:
    """Number of pixels with coverage above one half (area measurement)."""
    return int((render_coverage(width, height, spec) > 0.5).sum())


def encode_png(image: DocumentImage) -> bytes:
    """PNG bytes with pinned encoder settings (byte-stable across runs)."""
    buf = io.BytesIO()
    Image.fromarray(image.pixels).save(
        buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL
    )
    return buf.getvalue()


def encode_jpeg(image: DocumentImage, quality: int) -> bytes:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside 1..100")
    buf = io.BytesIO()
    Image.fromarray(image.pixels).save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def jpeg_defense(image: DocumentImage, quality: int) -> DocumentImage:
    """Re-encode through JPEG at the given quality and decode back.

    Dimensions are preserved; the lossy round trip blurs fine detail,
    which is the point of the defense.
    """
    data = encode_jpeg(image, quality)
    with Image.open(io.BytesIO(data)) as img:
        out = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return DocumentImage(out)


def condition_descriptor(spec: WatermarkSpec) -> dict:
    """Serializable record of a condition: spec plus engine provenance."""
    return {
        "condition_id": spec.condition_id,
        "spec": spec.to_json(),
        "engine_version": ENGINE_VERSION,
        "font_sha256": FONT_SHA256,
        "box_aspect": BOX_ASPECT,
        "scattered_anchors": "quadrant-centers+center",
    }


def render_condition(
    dataset: EvalDataset,
    spec: WatermarkSpec,
    out_dir: str | Path,
    workers: int = 4,
) -> EvalDataset:
    """Composite every dataset image under one condition and write PNGs.

    Output manifest order equals input order regardless of worker
    completion order. A condition.json descriptor is written alongside the
    images. Per-item failures are collected and raised together.
    """
    from .corpus import load_image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def render_one(item: VqaItem) -> str:
        image = load_image(dataset.resolve_image(item))
        marked = composite(image, spec)
        out_name = f"{item.id}.png"
        (out_dir / out_name).write_bytes(encode_png(marked))
        return out_name

    failures: dict[str, str] = {}
    new_items: list[VqaItem] = []
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        futures = [(item, pool.submit(render_one, item)) for item in dataset.items]
        for item, fut in futures:
            try:
                out_name = fut.result()
            except Exception as exc:  # noqa: BLE001 - reported per item
                failures[item.id] = str(exc)
                continue
            new_items.append(replace(item, image_path=out_name))
    if failures:
        raise RenderError(failures)

    with open(out_dir / "condition.json", "w", encoding="utf-8") as fh:
        json.dump(condition_descriptor(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    marked_dataset = EvalDataset(
        name=dataset.name, items=tuple(new_items), root=out_dir
    )
    save_manifest(marked_dataset, out_dir / "manifest.jsonl")
    return marked_dataset
