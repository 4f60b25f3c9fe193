"""Loading, validation, and sampling of document-VQA evaluation corpora.

A corpus is a JSON-Lines manifest: one question record per line, each
pointing at a document image on disk. Four categories are supported,
matching the single-choice text/chart/table sets and the multiple-response
chart set. Datasets are immutable after load and safe to share across
worker threads.
"""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CATEGORIES = ("TextS", "ChartS", "ChartM", "TableS")
OPTION_LETTERS = ("A", "B", "C", "D")
MULTI_ANSWER_CATEGORIES = frozenset({"ChartM"})

# Identifier of the sampling PRNG, recorded in run reports for provenance.
SAMPLER_NAME = "python-random.Random.sample-v1"


class ManifestError(ValueError):
    """Malformed or invalid manifest content. Carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageLoadError(ValueError):
    """Unreadable, corrupt, or unsupported image file."""


@dataclass(frozen=True)
class VqaItem:
    """One question over one document image.

    ``options`` maps the four option letters A-D to option text; ``answer``
    is the set of correct letters (singleton except for ChartM).
    """

    id: str
    image_path: str
    category: str
    question: str
    options: dict[str, str]
    answer: frozenset[str]

    def validate(self) -> None:
        if not self.id:
            raise ManifestError("item id must be nonempty")
        if self.category not in CATEGORIES:
            raise ManifestError(
                f"item {self.id!r}: unknown category {self.category!r}"
            )
        if tuple(sorted(self.options)) != OPTION_LETTERS:
            raise ManifestError(
                f"item {self.id!r}: options must be exactly A, B, C, D "
                f"(got {sorted(self.options)})"
            )
        if not self.answer:
            raise ManifestError(f"item {self.id!r}: answer set is empty")
        if not self.answer <= set(OPTION_LETTERS):
            raise ManifestError(
                f"item {self.id!r}: answer letters {sorted(self.answer)} "
                "outside A-D"
            )
        multi = self.category in MULTI_ANSWER_CATEGORIES
        if multi and len(self.answer) < 2:
            raise ManifestError(
                f"item {self.id!r}: cardinality: {self.category} requires "
                "an answer set of size >= 2"
            )
        if not multi and len(self.answer) != 1:
            raise ManifestError(
                f"item {self.id!r}: cardinality: {self.category} requires "
                "exactly one answer"
            )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "category": self.category,
            "question": self.question,
            "options": dict(sorted(self.options.items())),
            "answer": sorted(self.answer),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VqaItem":
        try:
            item = cls(
                id=str(obj["id"]),
                image_path=str(obj["image_path"]),
                category=str(obj["category"]),
                question=str(obj["question"]),
                options={str(k): str(v) for k, v in obj["options"].items()},
                answer=frozenset(str(a) for a in obj["answer"]),
            )
        except KeyError as exc:
            raise ManifestError(f"missing field {exc.args[0]!r}") from exc
        item.validate()
        return item


@dataclass(frozen=True)
class EvalDataset:
    """An ordered, validated collection of VQA items rooted at a directory."""

    name: str
    items: tuple[VqaItem, ...]
    root: Path

    def __len__(self) -> int:
        return len(self.items)

    def resolve_image(self, item: VqaItem) -> Path:
        return self.root / Path(*item.image_path.split("/"))


@dataclass(frozen=True)
class DocumentImage:
    """An 8-bit RGB raster held as an (H, W, 3) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError("pixels must be an (H, W, 3) uint8 array")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def load_manifest(path: str | Path, name: str | None = None) -> EvalDataset:
    """Parse a JSON-Lines manifest and validate every item.

    Raises ManifestError with a line number for parse or validation
    failures, including duplicate ids and missing image files. Item order
    is preserved.
    """
    path = Path(path)
    root = path.parent
    items: list[VqaItem] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            try:
                item = VqaItem.from_json(obj)
            except ManifestError as exc:
                raise ManifestError(str(exc), lineno) from exc
            if item.id in seen:
                raise ManifestError(
                    f"duplicate id {item.id!r} (first seen on line "
                    f"{seen[item.id]})",
                    lineno,
                )
            seen[item.id] = lineno
            image_file = root / Path(*item.image_path.split("/"))
            if not image_file.is_file():
                raise ManifestError(
                    f"item {item.id!r}: image file not found: {image_file}",
                    lineno,
                )
            items.append(item)
    return EvalDataset(name=name or path.stem, items=tuple(items), root=root)


def save_manifest(dataset: EvalDataset, path: str | Path) -> None:
    """Write a dataset back out as JSON-Lines with "\\n" separators."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in dataset.items:
            fh.write(json.dumps(item.to_json(), sort_keys=True))
            fh.write("\n")


def load_image(path: str | Path) -> DocumentImage:
    """Decode a PNG or JPEG file to 8-bit RGB.

    Transparent pixels are flattened against white; grayscale images are
    replicated across channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "JPEG"):
                raise ImageLoadError(
                    f"{path}: unsupported format {img.format!r} "
                    "(PNG and JPEG only)"
                )
            img.load()
            if img.mode in ("RGBA", "LA", "PA") or (
                img.mode == "P" and "transparency" in img.info
            ):
                rgba = img.convert("RGBA")
                background = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
                img = Image.alpha_composite(background, rgba)
            rgb = img.convert("RGB")
    except UnidentifiedImageError as exc:
        raise ImageLoadError(f"{path}: not a recognizable image") from exc
    except OSError as exc:
        raise ImageLoadError(f"{path}: corrupt file: {exc}") from exc
    return DocumentImage(np.asarray(rgb, dtype=np.uint8))


def image_from_bytes(data: bytes) -> DocumentImage:
    """Decode an in-memory PNG/JPEG byte string (same rules as load_image)."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            rgb = img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"corrupt image buffer: {exc}") from exc
    return DocumentImage(np.asarray(rgb, dtype=np.uint8))


def sample(dataset: EvalDataset, n: int, seed: int) -> EvalDataset:
    """Take a deterministic, order-preserving, duplicate-free subset.

    The subset is a pure function of (dataset, n, seed); the PRNG used is
    recorded as SAMPLER_NAME.
    """
    if not 1 <= n <= len(dataset.items):
        raise ValueError(
            f"sample size {n} out of range 1..{len(dataset.items)}"
        )
    rng = random.Random(seed)
    picked = sorted(rng.sample(range(len(dataset.items)), n))
    return EvalDataset(
        name=dataset.name,
        items=tuple(dataset.items[i] for i in picked),
        root=dataset.root,
    )
