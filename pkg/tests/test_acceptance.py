"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Everything here is offline and deterministic; the tensor-dump
checks use the committed fixtures under tests/data/dumps/.
"""

import itertools
import math
import random
import time

import numpy as np
import pytest

from wmbench.analysis import (
    EmbeddingSummary,
    attention_delta,
    cosine_similarity,
    embedding_summary,
    tsne,
)
from wmbench.client import AlwaysCorrect, MockClient
from wmbench.corpus import DocumentImage, load_image, load_manifest
from wmbench.harness import ExperimentConfig, preset, run
from wmbench.metrics import accuracy, grade, pdr, EvalRecord
from wmbench.tdump import ROW_SUM_TOLERANCE, TensorDump, read_tdump, write_tdump
from wmbench.watermark import (
    WatermarkContent,
    WatermarkSpec,
    composite,
    compute_placement,
    coverage_pixel_count,
    encode_jpeg,
    jpeg_defense,
    render_coverage,
)
from conftest import DUMP_DIR, build_corpus, make_item

MASK = WatermarkContent.mask()
MARK = WatermarkContent.text()


def _report(line: str) -> None:
    print(f"[PASS] {line}")


class TestAcceptance:
    def test_compositing_exactness(self):
        started = time.monotonic()
        image = DocumentImage(np.full((64, 64, 3), 255, np.uint8))
        spec = WatermarkSpec(
            content=MASK, position="center", opacity=0.5, area_ratio=0.25
        )
        out = composite(image, spec)

        (box,) = compute_placement(64, 64, spec)
        x0, y0 = int(math.ceil(box.x)), int(math.ceil(box.y))
        x1, y1 = int(math.floor(box.x + box.w)), int(math.floor(box.y + box.h))
        assert (out.pixels[y0:y1, x0:x1] == 128).all()

        outside = np.ones((64, 64), bool)
        oy0, oy1 = int(math.floor(box.y)), int(math.ceil(box.y + box.h))
        ox0, ox1 = int(math.floor(box.x)), int(math.ceil(box.x + box.w))
        outside[oy0:oy1, ox0:ox1] = False
        assert np.array_equal(out.pixels[outside], image.pixels[outside])

        # independent per-pixel blend oracle over the full frame
        cov = render_coverage(64, 64, spec)
        for y, x in ((0, 0), (32, 32), (24, 10), (39, 63), (25, 0)):
            a = 0.5 * cov[y, x]
            expected = int(math.floor(a * 0 + (1 - a) * 255 + 0.5))
            assert (out.pixels[y, x] == expected).all()

        elapsed = time.monotonic() - started
        assert elapsed < 1.0
        _report(
            "compositing exactness: interior exactly (128,128,128), exterior "
            f"bit-identical, {elapsed:.3f}s"
        )

    @pytest.mark.parametrize("rho", [0.1, 0.3, 0.5, 0.8])
    def test_area_control(self, rho):
        for position in ("center", "scattered", "top_left"):
            mask_spec = WatermarkSpec(
                content=MASK, position=position, area_ratio=rho
            )
            count = coverage_pixel_count(1000, 800, mask_spec)
            assert count == pytest.approx(rho * 800_000, rel=0.05)

        text_spec = WatermarkSpec(
            content=MARK, position="scattered", area_ratio=rho
        )
        cov = render_coverage(1000, 800, text_spec)
        total = 0
        for b in compute_placement(1000, 800, text_spec):
            x0, y0 = int(max(b.x - 2, 0)), int(max(b.y - 2, 0))
            x1 = int(min(b.x + b.w + 2, 1000))
            y1 = int(min(b.y + b.h + 2, 800))
            ys, xs = np.nonzero(cov[y0:y1, x0:x1])
            total += (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        assert total == pytest.approx(rho * 800_000, rel=0.02)
        _report(
            f"area control rho={rho}: mask coverage within 5%, text bounding "
            "boxes within 2%"
        )

    def test_metric_identities(self):
        for a in (0.05, 0.3, 0.5, 1.0):
            assert pdr(a, a) == 0.0
            assert pdr(a, 0.0) == 100.0
        assert pdr(0.50, 0.32) == pytest.approx(36.0)

        records = [
            EvalRecord(f"i{k}", "clean", frozenset({"B"}), k % 3 != 0)
            for k in range(30)
        ]
        base = accuracy(records)
        for seed in range(20):
            shuffled = records[:]
            random.Random(seed).shuffle(shuffled)
            assert accuracy(shuffled) == base

        item = make_item("x", "img.png", category="ChartM", answer={"A", "C"})
        for r in range(5):
            for subset in itertools.combinations("ABCD", r):
                record = grade(item, " and ".join(subset), "clean")
                assert record.correct == (set(subset) == {"A", "C"})
        _report(
            "metric identities: pdr(a,a)=0, pdr(a,0)=100, pdr(0.50,0.32)=36.0, "
            "permutation-invariant accuracy, exhaustive ChartM grading"
        )

    def test_end_to_end_mock_run(self, tmp_path):
        started = time.monotonic()
        bright = {f"doc_{i:03d}" for i in range(10)}
        dark = {f"doc_{i:03d}" for i in range(10, 40)}
        manifest = build_corpus(
            tmp_path / "corpus", n=40, dark_center_ids=dark, prefix="doc"
        )
        regions = [
            (145.0, 105.0, 30.0, 30.0),
            (465.0, 105.0, 30.0, 30.0),
            (145.0, 345.0, 30.0, 30.0),
            (465.0, 345.0, 30.0, 30.0),
            (305.0, 225.0, 30.0, 30.0),
        ]
        conditions = [
            WatermarkSpec(content=MASK, position=p, area_ratio=0.1)
            for p in ("center", "scattered", "top_left")
        ]
        config = ExperimentConfig(
            datasets={"TextS": manifest},
            conditions=conditions,
            out_dir=tmp_path / "out",
            mock="flip_if_darkened",
            mock_regions=regions,
            mock_threshold=50.0,
        )
        artifacts = run(config)
        cells = artifacts.report.results["TextS"]
        by_position = {
            spec.position: cells[spec.condition_id].pdr for spec in conditions
        }
        assert by_position["scattered"] > by_position["center"]
        assert by_position["scattered"] > by_position["top_left"]
        elapsed = time.monotonic() - started
        assert elapsed < 30.0
        _report(
            "end-to-end mock run (40 items): scattered PDR "
            f"{by_position['scattered']:.0f} > center "
            f"{by_position['center']:.0f} and top-left "
            f"{by_position['top_left']:.0f}, {elapsed:.1f}s, no network"
        )

    def test_analysis_math(self):
        rng = np.random.RandomState(0)
        for _ in range(1000):
            heads = rng.randint(1, 4)
            seq = rng.randint(2, 10)
            logits = rng.normal(0, 1, (heads, seq, seq))
            w = np.exp(logits - logits.max(-1, keepdims=True))
            attn = (w / w.sum(-1, keepdims=True)).astype(np.float32)
            dump = TensorDump(
                "a", attn, {"kind": "attention", "item_id": "i", "layer_index": 0}
            )
            assert (attention_delta(dump, dump).grid == 0).all()

        v = rng.normal(0, 1, 24)
        w2 = rng.normal(0, 1, 24)
        e_v, e_w = EmbeddingSummary(v), EmbeddingSummary(w2)
        assert cosine_similarity(e_v, e_v) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(
            EmbeddingSummary(5.5 * v), EmbeddingSummary(0.01 * w2)
        ) == pytest.approx(cosine_similarity(e_v, e_w), abs=1e-12)

        cluster_rng = np.random.RandomState(3)
        X = np.vstack(
            [
                cluster_rng.normal(0, 1, (30, 16)),
                cluster_rng.normal(6, 1, (30, 16)),
            ]
        )
        kls: list[float] = []
        Y = tsne(
            X, perplexity=5.0, iterations=1000, seed=0,
            callback=lambda i, kl: kls.append(kl),
        )
        d2 = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nn = d2.argmin(axis=1)
        same = sum((i < 30) == (nn[i] < 30) for i in range(60))
        assert same / 60 >= 0.95
        assert kls[-1] <= kls[249]
        assert np.array_equal(Y, tsne(X, perplexity=5.0, iterations=1000, seed=0))
        _report(
            "analysis math: delta(x,x)=0 x1000, cosine identities at 1e-12, "
            f"t-SNE same-cluster NN {same}/60, final KL {kls[-1]:.3f} <= "
            f"post-exaggeration {kls[249]:.3f}, deterministic"
        )

    def test_jpeg_defense(self, tmp_path):
        manifest = build_corpus(tmp_path / "corpus", n=5)
        dataset = load_manifest(manifest)
        for item in dataset.items:
            image = load_image(dataset.resolve_image(item))
            marked = composite(
                image, WatermarkSpec(content=MARK, position="scattered")
            )
            defended = jpeg_defense(marked, 30)
            assert (defended.width, defended.height) == (
                marked.width,
                marked.height,
            )
            assert len(encode_jpeg(marked, 30)) < len(encode_jpeg(marked, 90))
        _report(
            "jpeg defense: quality=30 preserves dimensions and beats "
            "quality=90 on size for all 5 fixtures"
        )

    def test_resumability(self, tmp_path):
        manifest = build_corpus(tmp_path / "corpus", n=5)
        conditions = preset("positions")
        config = ExperimentConfig(
            datasets={"TextS": manifest},
            conditions=conditions,
            out_dir=tmp_path / "out",
            mock="always_correct",
            max_in_flight=1,
        )
        total = 5 * (len(conditions) + 1)

        class AbortAfter:
            def __init__(self, inner, limit):
                self.inner, self.limit = inner, limit
                self.model_name = inner.model_name

            def query_item(self, item, image, condition_id):
                if len(self.inner.calls) >= self.limit:
                    raise KeyboardInterrupt("simulated kill")
                return self.inner.query_item(item, image, condition_id)

        first = MockClient(AlwaysCorrect())
        with pytest.raises(KeyboardInterrupt):
            run(config, client=AbortAfter(first, total // 2))

        second = MockClient(AlwaysCorrect())
        artifacts = run(config, client=second)
        duplicates = set(first.calls) & set(second.calls)
        assert duplicates == set()
        assert artifacts.cache_hits == total // 2
        assert artifacts.queries_issued == total - total // 2
        _report(
            f"resumability: killed at {total // 2}/{total}, resumed with "
            "zero duplicate queries"
        )

    def test_fixture_dumps_readable_without_probe(self):
        files = sorted(DUMP_DIR.glob("*.tdump"))
        assert files, "committed fixture dumps missing"
        for path in files:
            dump = read_tdump(path)
            if dump.kind == "attention":
                row_sums = dump.data.sum(axis=-1, dtype=np.float64)
                assert np.abs(row_sums - 1.0).max() <= ROW_SUM_TOLERANCE

        clean = read_tdump(DUMP_DIR / "fx1__clean__embedding__L2.tdump")
        a0 = read_tdump(
            DUMP_DIR / "fx1__text-scattered-a00-r25-000000-d0__embedding__L2.tdump"
        )
        assert (
            np.abs(
                embedding_summary(clean).vector - embedding_summary(a0).vector
            ).max()
            <= 1e-5
        )
        _report(
            f"fixture dumps: {len(files)} files read by the analysis module "
            "alone; attention rows sum to 1 within 1e-4; zero-opacity "
            "embeddings match clean within 1e-5"
        )

    def test_fixture_dump_round_trip_bit_exact(self, tmp_path):
        for path in sorted(DUMP_DIR.glob("*.tdump")):
            dump = read_tdump(path)
            copy = tmp_path / path.name
            write_tdump(dump, copy)
            assert copy.read_bytes() == path.read_bytes()
        _report("fixture dumps: write-then-read reproduces files bit-exactly")
