"""Diagnostics over tensor dumps: attention deltas, embedding drift, t-SNE.

Given attention dumps captured for the same item with and without a
watermark, the per-position attention variation is |A' - A| averaged over
heads and query positions, optionally remapped onto the image patch grid.
Embedding drift is the cosine similarity of mean-pooled embeddings. The
2-D projection is an exact (quadratic-cost) t-SNE with perplexity matched
per point by bisection — point counts here are small, so no approximation
is warranted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.distance import pdist, squareform

from .tdump import TensorDump

EPS = 1e-12


class AnalysisInputError(ValueError):
    """Dumps or matrices unfit for the requested analysis."""


@dataclass
class AttentionDelta:
    """Nonnegative per-position attention variation on a 2-D grid."""

    grid: np.ndarray
    layer: int
    head_aggregation: str = "mean"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise AnalysisInputError("delta grid must be 2-D")


@dataclass
class EmbeddingSummary:
    """Mean-pooled embedding over non-padding sequence positions."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise AnalysisInputError("embedding summary must be 1-D")
        if not np.isfinite(self.vector).all():
            raise AnalysisInputError("embedding summary has non-finite values")


def attention_delta(a_clean: TensorDump, a_marked: TensorDump) -> AttentionDelta:
    """Per-key-position mean absolute attention change between two dumps.

    Both dumps must come from the same item and layer with equal shapes.
    Heads are averaged first, then the query axis, leaving one value per
    key position; when the metadata carries a patch grid the image-token
    slice is reshaped onto it, otherwise a 1 x seq grid is returned.
    """
    for dump in (a_clean, a_marked):
        if dump.kind != "attention":
            raise AnalysisInputError(f"dump {dump.name!r} is not attention")
    if a_clean.shape != a_marked.shape:
        raise AnalysisInputError(
            f"shape mismatch: {a_clean.shape} vs {a_marked.shape}"
        )
    for key in ("layer_index", "item_id"):
        if a_clean.meta.get(key) != a_marked.meta.get(key):
            raise AnalysisInputError(
                f"metadata mismatch on {key!r}: "
                f"{a_clean.meta.get(key)!r} vs {a_marked.meta.get(key)!r}"
            )
    diff = np.abs(
        a_marked.data.astype(np.float64) - a_clean.data.astype(np.float64)
    )
    per_position = diff.mean(axis=0).mean(axis=0)  # heads, then query axis

    meta = a_clean.meta
    grid_dims = meta.get("grid")
    if grid_dims:
        rows, cols = int(grid_dims[0]), int(grid_dims[1])
        start = int(meta.get("image_token_start", 0))
        end = start + rows * cols
        if end > per_position.size:
            raise AnalysisInputError(
                f"patch grid {rows}x{cols} at offset {start} exceeds "
                f"sequence length {per_position.size}"
            )
        grid = per_position[start:end].reshape(rows, cols)
    else:
        grid = per_position.reshape(1, -1)
    return AttentionDelta(
        grid=grid,
        layer=int(meta.get("layer_index", -1)),
        head_aggregation="mean",
    )


def embedding_summary(dump: TensorDump) -> EmbeddingSummary:
    """Mean-pool an embedding dump over its non-padding positions."""
    if dump.kind != "embedding":
        raise AnalysisInputError(f"dump {dump.name!r} is not an embedding")
    valid = int(dump.meta.get("valid_len", dump.shape[0]))
    if not 1 <= valid <= dump.shape[0]:
        raise AnalysisInputError(f"valid_len {valid} outside 1..{dump.shape[0]}")
    return EmbeddingSummary(dump.data[:valid].mean(axis=0))


def cosine_similarity(e1: EmbeddingSummary, e2: EmbeddingSummary) -> float:
    """Directional similarity in [-1, 1] of two embedding summaries."""
    v1, v2 = e1.vector, e2.vector
    if v1.shape != v2.shape:
        raise AnalysisInputError(
            f"dimension mismatch: {v1.shape} vs {v2.shape}"
        )
    n1, n2 = float(np.linalg.norm(v1)), float(np.linalg.norm(v2))
    if n1 == 0.0 or n2 == 0.0:
        raise AnalysisInputError("cosine similarity undefined for zero vector")
    return float(np.dot(v1, v2) / (n1 * n2))


def _conditional_probabilities(
    distances2: np.ndarray, perplexity: float, tol: float = 1e-4
) -> np.ndarray:
    """Row-stochastic affinities with per-point bandwidth found by bisection."""
    n = distances2.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        d = np.delete(distances2[i], i)
        beta_lo, beta_hi = 0.0, math.inf
        beta = 1.0
        for _ in range(200):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                entropy = 0.0
                p = np.zeros_like(d)
            else:
                p = w / total
                nz = p > 0
                entropy = float(-(p[nz] * np.log(p[nz])).sum())
            if abs(math.exp(entropy) - perplexity) <= tol:
                break
            if entropy > target:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi is math.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        row = np.insert(p, i, 0.0)
        P[i] = row
    return P


def _kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    n = Y.shape[0]
    dist2 = squareform(pdist(Y, "sqeuclidean"))
    W = 1.0 / (1.0 + dist2)
    np.fill_diagonal(W, 0.0)
    Q = np.maximum(W / W.sum(), EPS)
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne(
    points: np.ndarray,
    perplexity: float = 5.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 100.0,
    early_exaggeration: float = 12.0,
    callback=None,
) -> np.ndarray:
    """Exact t-SNE projection of an N x D matrix to N x 2 coordinates.

    Affinities use per-point bandwidths bisected to the target perplexity;
    the symmetrized joint distribution is exaggerated for the first
    quarter of the iterations. Gradient descent follows the standard
    momentum-plus-gains schedule and is deterministic for a fixed seed.
    ``callback(iteration, kl)`` — when given — receives the KL divergence
    against the unexaggerated affinities at every iteration.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise AnalysisInputError("points must be an N x D matrix")
    n = X.shape[0]
    if n < 4:
        raise AnalysisInputError(f"need at least 4 points, got {n}")
    if not perplexity < (n - 1) / 3:
        raise AnalysisInputError(
            f"perplexity {perplexity} must be below (N-1)/3 = {(n - 1) / 3:.2f}"
        )
    dist2 = squareform(pdist(X, "sqeuclidean"))
    if not dist2.any():
        raise AnalysisInputError("degenerate input: all points identical")

    cond = _conditional_probabilities(dist2, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, EPS)
    np.fill_diagonal(P, 0.0)

    rng = np.random.RandomState(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    exaggeration_end = iterations // 4

    for it in range(iterations):
        exaggerated = it < exaggeration_end
        P_eff = P * early_exaggeration if exaggerated else P

        d2 = squareform(pdist(Y, "sqeuclidean"))
        W = 1.0 / (1.0 + d2)
        np.fill_diagonal(W, 0.0)
        Q = np.maximum(W / W.sum(), EPS)
        PQW = (P_eff - Q) * W
        grad = 4.0 * (
            np.diag(PQW.sum(axis=1)) - PQW
        ).dot(Y)

        momentum = 0.5 if it < 250 else 0.8
        agree = np.sign(grad) == np.sign(velocity)
        gains = np.where(agree, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

        if callback is not None:
            callback(it, _kl_divergence(P, Y))
    return Y


VIRIDIS_LUT: np.ndarray | None = None


def _viridis() -> np.ndarray:
    global VIRIDIS_LUT
    if VIRIDIS_LUT is None:
        import matplotlib.cm as cm

        VIRIDIS_LUT = (
            np.asarray(cm.viridis(np.linspace(0.0, 1.0, 256)))[:, :3] * 255.0
        ).round().astype(np.uint8)
    return VIRIDIS_LUT


def render_heatmap(
    delta: AttentionDelta,
    out_path: str | Path,
    cell_size: int | None = None,
) -> Path:
    """Write a min-max-normalized heatmap PNG plus a sidecar scale JSON.

    Rendering goes through a fixed color lookup table and nearest-neighbor
    upscaling, so identical grids produce identical bytes.
    """
    grid = delta.grid
    if grid.size == 0:
        raise AnalysisInputError("empty delta grid")
    vmin, vmax = float(grid.min()), float(grid.max())
    span = vmax - vmin
    norm = (grid - vmin) / span if span > 0 else np.zeros_like(grid)
    indexed = (norm * 255.0).round().astype(np.uint8)
    rgb = _viridis()[indexed]
    if cell_size is None:
        cell_size = max(1, int(math.ceil(256 / max(grid.shape))))
    img = Image.fromarray(rgb).resize(
        (grid.shape[1] * cell_size, grid.shape[0] * cell_size),
        Image.Resampling.NEAREST,
    )
    out_path = Path(out_path)
    img.save(out_path, format="PNG", compress_level=6)
    sidecar = out_path.with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "vmin": vmin,
                "vmax": vmax,
                "colormap": "viridis",
                "grid_shape": list(grid.shape),
                "layer": delta.layer,
                "head_aggregation": delta.head_aggregation,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return out_path


def write_grid_csv(delta: AttentionDelta, path: str | Path) -> None:
    """Raw delta values, one grid row per CSV line, for regenerating figures."""
    np.savetxt(path, delta.grid, delimiter=",", fmt="%.8g")


def render_scatter(
    coords: np.ndarray,
    labels: list[str],
    out_path: str | Path,
    title: str = "",
) -> Path:
    """Scatter plot of 2-D projected embeddings, colored by label."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise AnalysisInputError("coords must be N x 2")
    if len(labels) != coords.shape[0]:
        raise AnalysisInputError("one label per point required")
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 5))
    for label in dict.fromkeys(labels):
        idx = [i for i, l in enumerate(labels) if l == label]
        ax.scatter(coords[idx, 0], coords[idx, 1], label=label, s=28)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_coords_csv(
    coords: np.ndarray, labels: list[str], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label,x,y\n")
        for label, (x, y) in zip(labels, np.asarray(coords)):
            fh.write(f"{label},{x:.8g},{y:.8g}\n")
