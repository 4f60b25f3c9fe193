"""Reader/writer for .tdump tensor files.

A dump is a fixed 256-byte JSON header (space-padded) followed by the
row-major little-endian float32 payload, so any language can read it
without a tensor library. Attention dumps are [heads, seq, seq] with
softmax-normalized rows; embedding dumps are [seq, hidden].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_BYTES = 256
ROW_SUM_TOLERANCE = 1e-4
KINDS = ("attention", "embedding")


class TensorDumpError(ValueError):
    """Malformed dump file or invariant violation."""


@dataclass
class TensorDump:
    """A named float32 tensor with capture metadata.

    ``meta`` carries model_name, item_id, condition_id, layer_index and
    kind; attention dumps may add a patch grid ("grid": [rows, cols]) and
    the sequence offset of the first image token ("image_token_start").
    """

    name: str
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "")

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise TensorDumpError(f"unknown dump kind {self.kind!r}")
        if not np.isfinite(self.data).all():
            raise TensorDumpError(f"dump {self.name!r} has non-finite values")
        if self.kind == "attention":
            if self.data.ndim != 3 or self.data.shape[1] != self.data.shape[2]:
                raise TensorDumpError(
                    f"attention dump must be [heads, seq, seq], "
                    f"got {self.shape}"
                )
            row_sums = self.data.sum(axis=-1, dtype=np.float64)
            worst = float(np.abs(row_sums - 1.0).max())
            if worst > ROW_SUM_TOLERANCE:
                raise TensorDumpError(
                    f"attention rows must sum to 1 "
                    f"(worst deviation {worst:.2e})"
                )
        else:
            if self.data.ndim != 2:
                raise TensorDumpError(
                    f"embedding dump must be [seq, hidden], got {self.shape}"
                )


def write_tdump(dump: TensorDump, path: str | Path) -> None:
    """Serialize with a 256-byte header; errors if the header cannot fit."""
    dump.validate()
    header_obj = {
        "name": dump.name,
        "shape": list(dump.shape),
        "dtype": "float32",
        "meta": dump.meta,
    }
    header = json.dumps(header_obj, separators=(",", ":")).encode("utf-8")
    if len(header) > HEADER_BYTES:
        raise TensorDumpError(
            f"header is {len(header)} bytes; limit {HEADER_BYTES} "
            "(shorten names or metadata)"
        )
    header = header.ljust(HEADER_BYTES, b" ")
    payload = dump.data.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tdump(path: str | Path, validate: bool = True) -> TensorDump:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise TensorDumpError(f"{path}: shorter than the {HEADER_BYTES}-byte header")
    try:
        header = json.loads(raw[:HEADER_BYTES].decode("utf-8").strip())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorDumpError(f"{path}: bad header: {exc}") from exc
    shape = tuple(int(s) for s in header["shape"])
    if header.get("dtype") != "float32":
        raise TensorDumpError(
            f"{path}: unsupported dtype {header.get('dtype')!r}"
        )
    expected = math.prod(shape) * 4
    payload = raw[HEADER_BYTES:]
    if len(payload) != expected:
        raise TensorDumpError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} "
            f"for shape {shape}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    dump = TensorDump(
        name=header["name"], data=data.copy(), meta=header.get("meta", {})
    )
    if validate:
        dump.validate()
    return dump


def dump_filename(
    item_id: str, condition_id: str, kind: str, layer: int
) -> str:
    return f"{item_id}__{condition_id}__{kind}__L{layer}.tdump"


def parse_dump_filename(name: str) -> tuple[str, str, str, int]:
    stem = name[: -len(".tdump")] if name.endswith(".tdump") else name
    parts = stem.split("__")
    if len(parts) != 4 or not parts[3].startswith("L"):
        raise TensorDumpError(
            f"{name!r} does not match <item>__<condition>__<kind>__L<layer>.tdump"
        )
    return parts[0], parts[1], parts[2], int(parts[3][1:])
