"""Full offline experiment against the luminance-sensitive mock model.

Builds a 24-item synthetic corpus, defines watch regions at the five
scattered anchors, runs clean + three placement conditions, and prints
the accuracy/PDR summary. The scattered condition lands on every watch
region, so it degrades the mock hardest — the same ordering the position
experiment is designed to expose. Run from the repository root:

    python demos/02_mock_evaluation.py
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from wmbench import ExperimentConfig, WatermarkContent, WatermarkSpec
from wmbench.corpus import VqaItem
from wmbench.harness import run

OUT = Path(__file__).parent / "output" / "mock_eval"

WIDTH, HEIGHT = 640, 480
REGIONS = [
    (145.0, 105.0, 30.0, 30.0),
    (465.0, 105.0, 30.0, 30.0),
    (145.0, 345.0, 30.0, 30.0),
    (465.0, 345.0, 30.0, 30.0),
    (305.0, 225.0, 30.0, 30.0),
]


def build_corpus(root: Path, n: int = 24) -> Path:
    """White pages; a third carry a dark block at the center watch region."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(n):
            arr = np.full((HEIGHT, WIDTH, 3), 255, np.uint8)
            for j, y in enumerate(range(24, HEIGHT - 48, 56)):
                arr[y : y + 10, 20 : WIDTH - 30 - (j % 3) * 50] = 45
            if i % 3:
                cx, cy = WIDTH // 2, HEIGHT // 2
                arr[cy - 25 : cy + 25, cx - 25 : cx + 25] = 60
            name = f"page_{i:03d}.png"
            Image.fromarray(arr).save(root / name)
            item = VqaItem(
                id=f"page_{i:03d}",
                image_path=name,
                category="TextS",
                question="Which statement does the page support?",
                options={"A": "first", "B": "second", "C": "third", "D": "fourth"},
                answer=frozenset({"B"}),
            )
            fh.write(json.dumps(item.to_json()) + "\n")
    return manifest


def main() -> None:
    manifest = build_corpus(OUT / "corpus")
    config = ExperimentConfig(
        datasets={"TextS": manifest},
        conditions=[
            WatermarkSpec(
                content=WatermarkContent.mask(), position=p, area_ratio=0.1
            )
            for p in ("center", "scattered", "top_left")
        ],
        out_dir=OUT / "artifacts",
        mock="flip_if_darkened",
        mock_regions=REGIONS,
        mock_threshold=50.0,
        seed=7,
    )
    artifacts = run(config)
    print(f"\nqueries issued: {artifacts.queries_issued}, "
          f"cache hits: {artifacts.cache_hits}")
    print((artifacts.out_dir / "summary.txt").read_text("utf-8"))
    print(f"artifacts in {artifacts.out_dir}")
    print("re-running is free — every reply is already cached:")
    again = run(config)
    print(f"  second pass issued {again.queries_issued} queries "
          f"({again.cache_hits} cache hits)")


if __name__ == "__main__":
    main()
