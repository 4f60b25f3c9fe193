from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from wmbench.corpus import EvalDataset, VqaItem

DUMP_DIR = Path(__file__).parent / "data" / "dumps"


def make_item(
    item_id: str,
    image_path: str,
    category: str = "TextS",
    answer: set[str] | None = None,
    question: str = "What is shown?",
) -> VqaItem:
    if answer is None:
        answer = {"A", "C"} if category == "ChartM" else {"B"}
    return VqaItem(
        id=item_id,
        image_path=image_path,
        category=category,
        question=question,
        options={"A": "first", "B": "second", "C": "third", "D": "fourth"},
        answer=frozenset(answer),
    )


def write_doc_image(
    path: Path,
    width: int = 640,
    height: int = 480,
    dark_center: bool = False,
) -> None:
    """A synthetic white document page with a few dark text-like bars."""
    arr = np.full((height, width, 3), 255, np.uint8)
    for i, y in enumerate(range(30, height - 60, 60)):
        arr[y : y + 12, 24 : width - 24 - (i % 3) * 40] = 40
    if dark_center:
        cx, cy = width // 2, height // 2
        arr[cy - 25 : cy + 25, cx - 25 : cx + 25] = 60
    Image.fromarray(arr).save(path)


def build_corpus(
    root: Path,
    n: int = 6,
    category: str = "TextS",
    width: int = 640,
    height: int = 480,
    dark_center_ids: set[str] | None = None,
    prefix: str = "item",
) -> Path:
    """Create images plus a manifest under root; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    dark_center_ids = dark_center_ids or set()
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(n):
            item_id = f"{prefix}_{i:03d}"
            image_name = f"{item_id}.png"
            write_doc_image(
                root / image_name,
                width,
                height,
                dark_center=item_id in dark_center_ids,
            )
            item = make_item(item_id, image_name, category=category)
            fh.write(json.dumps(item.to_json()) + "\n")
    return manifest


@pytest.fixture
def small_corpus(tmp_path) -> Path:
    return build_corpus(tmp_path / "corpus", n=4)


@pytest.fixture
def white_image():
    from wmbench.corpus import DocumentImage

    return DocumentImage(np.full((64, 64, 3), 255, np.uint8))
