"""Render one synthetic document page under the main watermark conditions.

Walks the three placement modes, the three content types, and the opacity
levels, and writes every variant plus a before/after pair to
demos/output/gallery/. Run from the repository root:

    python demos/01_watermark_gallery.py
"""

from pathlib import Path

import numpy as np
from PIL import Image

from wmbench import DocumentImage, WatermarkContent, WatermarkSpec, composite
from wmbench.watermark import encode_png, jpeg_defense

OUT = Path(__file__).parent / "output" / "gallery"


def synthetic_page(width=800, height=600) -> DocumentImage:
    """A white page with dark text-like bars and a simple bar chart."""
    arr = np.full((height, width, 3), 255, np.uint8)
    for i, y in enumerate(range(40, 280, 34)):
        arr[y : y + 12, 48 : width - 60 - (i % 4) * 70] = 35
    base = height - 80
    for i, bar_height in enumerate((120, 200, 90, 160, 60)):
        x = 80 + i * 120
        arr[base - bar_height : base, x : x + 70] = (70, 90, 190)
    arr[base : base + 3, 60 : width - 60] = 20
    return DocumentImage(arr)


def save(image: DocumentImage, name: str) -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / f"{name}.png").write_bytes(encode_png(image))
    print(f"  wrote {name}.png")


def main() -> None:
    page = synthetic_page()
    save(page, "00_clean")

    print("placement modes (MARK text, alpha 0.5, 25% area):")
    for position in ("center", "scattered", "top_left"):
        spec = WatermarkSpec(content=WatermarkContent.text(), position=position)
        save(composite(page, spec), f"10_position_{position}")

    print("content types (scattered, alpha 0.5):")
    for content in (
        WatermarkContent.text(),
        WatermarkContent.symbol(),
        WatermarkContent.mask(),
    ):
        spec = WatermarkSpec(content=content, position="scattered")
        save(composite(page, spec), f"20_content_{content.kind}")

    print("opacity sweep (scattered MARK):")
    for alpha in (0.2, 0.5, 0.8):
        spec = WatermarkSpec(
            content=WatermarkContent.text(), position="scattered", opacity=alpha
        )
        save(composite(page, spec), f"30_opacity_{int(alpha * 100):02d}")

    print("rotation and color variants:")
    for angle in (45.0, 90.0):
        spec = WatermarkSpec(
            content=WatermarkContent.text(), position="center", angle=angle
        )
        save(composite(page, spec), f"40_angle_{int(angle)}")
    spec = WatermarkSpec(
        content=WatermarkContent.text(), position="scattered", color=(255, 0, 0)
    )
    save(composite(page, spec), "50_color_red")

    print("jpeg defense on a watermarked page (quality 30):")
    marked = composite(
        page, WatermarkSpec(content=WatermarkContent.text(), position="scattered")
    )
    save(jpeg_defense(marked, 30), "60_jpeg_defense_q30")

    # side-by-side strip: clean | center | scattered
    strip = np.hstack(
        [
            page.pixels,
            composite(
                page, WatermarkSpec(content=WatermarkContent.text(), position="center")
            ).pixels,
            composite(
                page,
                WatermarkSpec(content=WatermarkContent.text(), position="scattered"),
            ).pixels,
        ]
    )
    Image.fromarray(strip).save(OUT / "70_side_by_side.png")
    print("  wrote 70_side_by_side.png")


if __name__ == "__main__":
    main()
