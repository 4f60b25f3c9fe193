import json

import numpy as np
import pytest

from wmbench.analysis import (
    AnalysisInputError,
    AttentionDelta,
    EmbeddingSummary,
    attention_delta,
    cosine_similarity,
    embedding_summary,
    render_heatmap,
    tsne,
    write_grid_csv,
)
from wmbench.tdump import TensorDump, read_tdump
from conftest import DUMP_DIR


def _softmax(logits):
    w = np.exp(logits - logits.max(-1, keepdims=True))
    return w / w.sum(-1, keepdims=True)


def _attention(rng, heads=3, seq=10, **meta):
    base = {"kind": "attention", "item_id": "i", "layer_index": 0}
    base.update(meta)
    return TensorDump(
        "a", _softmax(rng.normal(0, 1, (heads, seq, seq))).astype(np.float32), base
    )


class TestAttentionDelta:
    def test_identical_dumps_give_zero(self):
        rng = np.random.RandomState(0)
        dump = _attention(rng)
        delta = attention_delta(dump, dump)
        assert (delta.grid == 0).all()

    def test_hand_computed_2x2(self):
        a = TensorDump(
            "a",
            np.array([[[1.0, 0.0], [0.0, 1.0]]], np.float32),
            {"kind": "attention", "item_id": "i", "layer_index": 0},
        )
        b = TensorDump(
            "b",
            np.array([[[0.0, 1.0], [1.0, 0.0]]], np.float32),
            {"kind": "attention", "item_id": "i", "layer_index": 0},
        )
        delta = attention_delta(a, b)
        assert delta.grid.shape == (1, 2)
        assert delta.grid.ravel() == pytest.approx([1.0, 1.0])

    def test_symmetric_in_arguments(self):
        rng = np.random.RandomState(1)
        x, y = _attention(rng), _attention(rng)
        assert np.array_equal(
            attention_delta(x, y).grid, attention_delta(y, x).grid
        )

    def test_all_zero_only_for_identical(self):
        rng = np.random.RandomState(2)
        x, y = _attention(rng), _attention(rng)
        assert attention_delta(x, y).grid.max() > 0

    def test_shape_mismatch_rejected(self):
        rng = np.random.RandomState(3)
        with pytest.raises(AnalysisInputError, match="shape"):
            attention_delta(_attention(rng, seq=8), _attention(rng, seq=9))

    def test_metadata_mismatch_rejected(self):
        rng = np.random.RandomState(4)
        with pytest.raises(AnalysisInputError, match="layer_index"):
            attention_delta(
                _attention(rng, layer_index=0), _attention(rng, layer_index=1)
            )

    def test_grid_remap(self):
        rng = np.random.RandomState(5)
        a = _attention(rng, seq=7, grid=[2, 3], image_token_start=1)
        b = _attention(rng, seq=7, grid=[2, 3], image_token_start=1)
        delta = attention_delta(a, b)
        assert delta.grid.shape == (2, 3)

    def test_random_softmax_self_delta_zero_1000_trials(self):
        rng = np.random.RandomState(6)
        for _ in range(1000):
            heads = rng.randint(1, 4)
            seq = rng.randint(2, 12)
            dump = _attention(rng, heads=heads, seq=seq)
            assert (attention_delta(dump, dump).grid == 0).all()

    def test_fixture_scattered_wider_than_center(self):
        clean = read_tdump(DUMP_DIR / "fx1__clean__attention__L2.tdump")
        center = read_tdump(
            DUMP_DIR / "fx1__text-center-a50-r25-000000-d0__attention__L2.tdump"
        )
        scattered = read_tdump(
            DUMP_DIR / "fx1__text-scattered-a50-r25-000000-d0__attention__L2.tdump"
        )
        d_center = attention_delta(clean, center)
        d_scattered = attention_delta(clean, scattered)
        assert d_center.grid.shape == (12, 12)
        threshold = np.percentile(
            np.concatenate([d_center.grid.ravel(), d_scattered.grid.ravel()]), 90
        )
        n_center = int((d_center.grid > threshold).sum())
        n_scattered = int((d_scattered.grid > threshold).sum())
        assert n_scattered > n_center


class TestCosineSimilarity:
    def test_self_similarity_is_one(self):
        rng = np.random.RandomState(0)
        e = EmbeddingSummary(rng.normal(0, 1, 32))
        assert cosine_similarity(e, e) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_is_zero(self):
        e1 = EmbeddingSummary(np.array([1.0, 0.0]))
        e2 = EmbeddingSummary(np.array([0.0, 1.0]))
        assert cosine_similarity(e1, e2) == 0.0

    def test_scale_invariant(self):
        rng = np.random.RandomState(1)
        v = rng.normal(0, 1, 16)
        w = rng.normal(0, 1, 16)
        base = cosine_similarity(EmbeddingSummary(v), EmbeddingSummary(w))
        scaled = cosine_similarity(
            EmbeddingSummary(3.7 * v), EmbeddingSummary(0.002 * w)
        )
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.RandomState(2)
        e1 = EmbeddingSummary(rng.normal(0, 1, 8))
        e2 = EmbeddingSummary(rng.normal(0, 1, 8))
        assert cosine_similarity(e1, e2) == cosine_similarity(e2, e1)

    def test_zero_norm_rejected(self):
        with pytest.raises(AnalysisInputError):
            cosine_similarity(
                EmbeddingSummary(np.zeros(4)), EmbeddingSummary(np.ones(4))
            )

    def test_fixture_content_ordering(self):
        # Reference ordering from the dumps: text < symbol < mask similarity.
        clean = embedding_summary(
            read_tdump(DUMP_DIR / "fx1__clean__embedding__L2.tdump")
        )
        sims = {}
        for content in ("text", "symbol", "mask"):
            dump = read_tdump(
                DUMP_DIR
                / f"fx1__{content}-scattered-a50-r25-000000-d0__embedding__L2.tdump"
            )
            sims[content] = cosine_similarity(clean, embedding_summary(dump))
        assert sims["text"] < sims["symbol"] < sims["mask"]

    def test_alpha_zero_embeddings_match_clean(self):
        clean = embedding_summary(
            read_tdump(DUMP_DIR / "fx1__clean__embedding__L2.tdump")
        )
        a0 = embedding_summary(
            read_tdump(
                DUMP_DIR / "fx1__text-scattered-a00-r25-000000-d0__embedding__L2.tdump"
            )
        )
        assert np.abs(clean.vector - a0.vector).max() <= 1e-5


class TestEmbeddingSummary:
    def test_pooling_excludes_padding(self):
        data = np.ones((4, 3), np.float32)
        data[3] = 100.0  # padding row must not leak into the mean
        dump = TensorDump("e", data, {"kind": "embedding", "valid_len": 3})
        assert embedding_summary(dump).vector == pytest.approx([1.0, 1.0, 1.0])


def _two_clusters(n_per=30, dim=16, gap=6.0, seed=3):
    rng = np.random.RandomState(seed)
    a = rng.normal(0, 1, (n_per, dim))
    b = rng.normal(gap, 1, (n_per, dim))
    return np.vstack([a, b])


class TestTsne:
    def test_two_clusters_nearest_neighbors(self):
        X = _two_clusters()
        Y = tsne(X, perplexity=5.0, iterations=1000, seed=0)
        # independent check: brute-force nearest neighbor per point
        d2 = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nn = d2.argmin(axis=1)
        same = sum((i < 30) == (nn[i] < 30) for i in range(60))
        assert same / 60 >= 0.95

    def test_kl_never_ends_above_post_exaggeration(self):
        X = _two_clusters(seed=9)
        kls = []
        tsne(X, perplexity=5.0, iterations=400, seed=1, callback=lambda i, k: kls.append(k))
        assert kls[-1] <= kls[99]  # exaggeration ends at iterations // 4

    def test_deterministic_for_seed(self):
        X = _two_clusters(seed=5)
        a = tsne(X, perplexity=4.0, iterations=300, seed=42)
        b = tsne(X, perplexity=4.0, iterations=300, seed=42)
        assert np.array_equal(a, b)

    def test_duplicate_points_are_mutual_neighbors(self):
        rng = np.random.RandomState(0)
        base = rng.normal(0, 1, (8, 4))
        X = np.vstack([base, base[0]])  # point 8 duplicates point 0
        Y = tsne(X, perplexity=2.0, iterations=300, seed=0)
        d2 = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        assert d2[0].argmin() == 8
        assert d2[8].argmin() == 0

    def test_too_few_points_rejected(self):
        with pytest.raises(AnalysisInputError):
            tsne(np.zeros((3, 4)), perplexity=1.0)

    def test_perplexity_bound_enforced(self):
        X = _two_clusters(n_per=5)
        with pytest.raises(AnalysisInputError, match="perplexity"):
            tsne(X, perplexity=3.0)

    def test_degenerate_input_rejected(self):
        X = np.ones((10, 4))
        with pytest.raises(AnalysisInputError, match="degenerate"):
            tsne(X, perplexity=2.0)

    def test_perplexity_matched_by_bisection(self):
        from wmbench.analysis import _conditional_probabilities
        from scipy.spatial.distance import pdist, squareform

        X = _two_clusters(n_per=15, seed=7)
        d2 = squareform(pdist(X, "sqeuclidean"))
        P = _conditional_probabilities(d2, perplexity=5.0)
        for i in range(X.shape[0]):
            p = np.delete(P[i], i)
            p = p[p > 0]
            entropy = -(p * np.log(p)).sum()
            assert np.exp(entropy) == pytest.approx(5.0, abs=1e-4)


class TestRenderHeatmap:
    def test_all_zero_gives_uniform_image(self, tmp_path):
        delta = AttentionDelta(np.zeros((4, 4)), layer=0)
        out = render_heatmap(delta, tmp_path / "z.png")
        from PIL import Image

        arr = np.asarray(Image.open(out))
        assert len(np.unique(arr.reshape(-1, arr.shape[-1]), axis=0)) == 1

    def test_single_hot_cell(self, tmp_path):
        grid = np.zeros((5, 5))
        grid[2, 3] = 1.0
        delta = AttentionDelta(grid, layer=1)
        out = render_heatmap(delta, tmp_path / "h.png", cell_size=10)
        from PIL import Image

        arr = np.asarray(Image.open(out).convert("RGB"))
        hot = np.asarray(Image.open(out).convert("RGB"))[25, 35]
        # exactly one 10x10 block carries the maximal-value color
        matches = (arr == hot).all(axis=-1).sum()
        assert matches == 100

    def test_sidecar_scale_json(self, tmp_path):
        grid = np.array([[0.0, 0.5], [1.5, 0.25]])
        render_heatmap(AttentionDelta(grid, layer=2), tmp_path / "s.png")
        sidecar = json.loads((tmp_path / "s.json").read_text())
        assert sidecar["vmin"] == 0.0
        assert sidecar["vmax"] == 1.5
        assert sidecar["colormap"] == "viridis"

    def test_byte_stable_across_runs(self, tmp_path):
        rng = np.random.RandomState(0)
        grid = rng.rand(6, 6)
        a = render_heatmap(AttentionDelta(grid, layer=0), tmp_path / "a.png")
        b = render_heatmap(AttentionDelta(grid, layer=0), tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()

    def test_grid_csv_round_trip(self, tmp_path):
        grid = np.random.RandomState(1).rand(3, 4)
        write_grid_csv(AttentionDelta(grid, layer=0), tmp_path / "g.csv")
        again = np.loadtxt(tmp_path / "g.csv", delimiter=",")
        assert again == pytest.approx(grid, rel=1e-6)
