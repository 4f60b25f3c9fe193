"""Diagnostics over the committed tensor-dump fixtures.

Reads the .tdump files under tests/data/dumps/, renders the attention
variation heatmaps for the centered and scattered conditions, prints the
embedding cosine similarities per content type, and projects the
embeddings to 2-D. Run from the repository root:

    python demos/03_dump_diagnostics.py
"""

from pathlib import Path

import numpy as np

from wmbench.analysis import (
    attention_delta,
    cosine_similarity,
    embedding_summary,
    render_heatmap,
    render_scatter,
    tsne,
    write_coords_csv,
)
from wmbench.tdump import read_tdump

DUMPS = Path(__file__).parent.parent / "tests" / "data" / "dumps"
OUT = Path(__file__).parent / "output" / "diagnostics"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)

    clean_attn = read_tdump(DUMPS / "fx1__clean__attention__L2.tdump")
    print("attention variation (mean over heads and query positions):")
    for condition in (
        "text-center-a50-r25-000000-d0",
        "text-scattered-a50-r25-000000-d0",
    ):
        marked = read_tdump(DUMPS / f"fx1__{condition}__attention__L2.tdump")
        delta = attention_delta(clean_attn, marked)
        out = render_heatmap(delta, OUT / f"heatmap_{condition}.png")
        spread = (delta.grid > np.percentile(delta.grid, 90)).sum()
        print(
            f"  {condition}: grid {delta.grid.shape}, "
            f"{spread} cells above own p90 -> {out.name}"
        )

    print("\nembedding cosine similarity to the clean input:")
    clean_emb = embedding_summary(read_tdump(DUMPS / "fx1__clean__embedding__L2.tdump"))
    vectors = [clean_emb.vector]
    labels = ["clean"]
    for content in ("text", "symbol", "mask"):
        condition = f"{content}-scattered-a50-r25-000000-d0"
        summary = embedding_summary(
            read_tdump(DUMPS / f"fx1__{condition}__embedding__L2.tdump")
        )
        sim = cosine_similarity(clean_emb, summary)
        print(f"  {content:7s} {sim:.3f}")
        vectors.append(summary.vector)
        labels.append(content)

    # Jittered copies of each summary give t-SNE a small point cloud per
    # condition, mirroring a multi-item capture.
    rng = np.random.RandomState(0)
    cloud, cloud_labels = [], []
    for vec, label in zip(vectors, labels):
        for _ in range(8):
            cloud.append(vec + rng.normal(0, 0.02, vec.shape))
            cloud_labels.append(label)
    coords = tsne(np.asarray(cloud), perplexity=5.0, iterations=600, seed=0)
    render_scatter(
        coords, cloud_labels, OUT / "embedding_tsne.png",
        title="cross-modal embedding drift by content type",
    )
    write_coords_csv(coords, cloud_labels, OUT / "embedding_tsne.csv")
    print(f"\n2-D projection written to {OUT / 'embedding_tsne.png'}")


if __name__ == "__main__":
    main()
