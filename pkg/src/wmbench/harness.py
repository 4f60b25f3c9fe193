"""Experiment orchestration: config, presets, the run loop, and reports.

A run takes every configured dataset through clean and watermarked
conditions, queries the model with bounded parallelism, grades replies,
and writes a self-describing artifact directory: config copy, condition
descriptors, a per-item reply log, the report JSON, and the two PDR
tables. Completed (item, condition) replies are cached in an append-only
log, so an interrupted run resumes without re-querying anything.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .client import (
    AlwaysCorrect,
    AlwaysWrong,
    FlipIfDarkened,
    HttpClient,
    MockClient,
    ModelEndpoint,
    ModelReply,
    PROMPT_TEMPLATE_VERSION,
    RateLimiter,
    TransportError,
)
from .corpus import SAMPLER_NAME, EvalDataset, load_image, load_manifest, sample
from .metrics import (
    CLEAN_CONDITION,
    EvalRecord,
    RunReport,
    aggregate,
    content_table,
    format_table,
    grade,
    position_table,
    unanswered_record,
    write_table_csv,
)
from .watermark import (
    WatermarkContent,
    WatermarkSpec,
    jpeg_defense,
    render_condition,
)

PRESET_NAMES = (
    "positions",
    "contents",
    "opacity",
    "rotation",
    "colors",
    "area-ratio",
    "jpeg-defense",
)

_CONTENT_FACTORIES = {
    "text": WatermarkContent.text,
    "symbol": WatermarkContent.symbol,
    "mask": WatermarkContent.mask,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; reported before any network call."""


@dataclass
class ExperimentConfig:
    """Everything one reproducible run needs."""

    datasets: dict[str, Path]
    conditions: list[WatermarkSpec]
    out_dir: Path
    endpoint: ModelEndpoint | None = None
    mock: str | None = None
    mock_regions: list[tuple[float, float, float, float]] = field(
        default_factory=list
    )
    mock_threshold: float = 30.0
    jpeg_quality: int | None = None
    seed: int = 0
    sample_n: int | None = None
    max_in_flight: int = 4
    max_per_second: float | None = None
    render_workers: int = 4


def preset(name: str) -> list[WatermarkSpec]:
    """The condition grid of one controlled single-axis experiment."""
    mark = WatermarkContent.text()
    if name == "positions":
        return [
            WatermarkSpec(content=mark, position=p)
            for p in ("center", "scattered", "top_left")
        ]
    if name == "contents":
        return [
            WatermarkSpec(content=factory(), position="scattered")
            for factory in (
                WatermarkContent.text,
                WatermarkContent.symbol,
                WatermarkContent.mask,
            )
        ]
    if name == "opacity":
        return [
            WatermarkSpec(content=mark, position="scattered", opacity=a)
            for a in (0.2, 0.5, 0.8)
        ]
    if name == "rotation":
        return [
            WatermarkSpec(content=mark, position="scattered", angle=a)
            for a in (0.0, 45.0, 90.0)
        ]
    if name == "colors":
        return [
            WatermarkSpec(content=mark, position="scattered", color=c)
            for c in ((0, 0, 0), (255, 0, 0), (0, 128, 0))
        ]
    if name == "area-ratio":
        return [
            WatermarkSpec(content=mark, position="scattered", area_ratio=r / 10)
            for r in range(1, 9)
        ]
    if name == "jpeg-defense":
        return [
            WatermarkSpec(content=mark, position=p)
            for p in ("center", "scattered", "top_left")
        ]
    raise ConfigError(
        f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}"
    )


def _parse_condition(obj: dict) -> WatermarkSpec:
    kwargs = {}
    content = obj.get("content", "text")
    if content not in _CONTENT_FACTORIES:
        raise ConfigError(f"unknown content {content!r}")
    string = obj.get("string")
    kwargs["content"] = (
        _CONTENT_FACTORIES[content](string)
        if string and content != "mask"
        else _CONTENT_FACTORIES[content]()
    )
    if "position" in obj:
        kwargs["position"] = obj["position"]
    if "color" in obj:
        kwargs["color"] = tuple(int(c) for c in obj["color"])
    for key_cfg, key_spec in (
        ("opacity", "opacity"),
        ("angle", "angle"),
        ("area_ratio", "area_ratio"),
    ):
        if key_cfg in obj:
            kwargs[key_spec] = float(obj[key_cfg])
    try:
        return WatermarkSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a TOML experiment file. Secrets come from the environment only."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    if "datasets" not in raw or not raw["datasets"]:
        raise ConfigError("config needs a [datasets] table")
    datasets = {
        name: (path.parent / p).resolve()
        for name, p in raw["datasets"].items()
    }

    conditions: list[WatermarkSpec] = []
    if "preset" in raw:
        conditions.extend(preset(raw["preset"]))
    for obj in raw.get("conditions", []):
        conditions.append(_parse_condition(obj))

    endpoint = None
    if "endpoint" in raw:
        ep = raw["endpoint"]
        try:
            endpoint = ModelEndpoint(
                base_url=ep["base_url"],
                model_name=ep["model_name"],
                api_key_env=ep.get("api_key_env", ""),
                timeout=float(ep.get("timeout", 60.0)),
                max_retries=int(ep.get("max_retries", 3)),
                max_in_flight=int(ep.get("max_in_flight", 4)),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad [endpoint]: {exc}") from exc

    run = raw.get("run", {})
    mock = raw.get("mock", {}).get("behavior") if "mock" in raw else None
    regions = [
        tuple(float(v) for v in r)
        for r in raw.get("mock", {}).get("regions", [])
    ]
    return ExperimentConfig(
        datasets=datasets,
        conditions=conditions,
        out_dir=(path.parent / run.get("out_dir", "run-out")).resolve(),
        endpoint=endpoint,
        mock=mock,
        mock_regions=regions,
        mock_threshold=float(raw.get("mock", {}).get("threshold", 30.0)),
        jpeg_quality=run.get("jpeg_quality"),
        seed=int(run.get("seed", 0)),
        sample_n=run.get("sample_n"),
        max_in_flight=int(run.get("max_in_flight", 4)),
        max_per_second=run.get("max_per_second"),
        render_workers=int(run.get("render_workers", 4)),
    )


def validate_config(config: ExperimentConfig) -> list[str]:
    """All problems found, empty when the config is runnable."""
    problems: list[str] = []
    if not config.datasets:
        problems.append("no datasets configured")
    for name, manifest in config.datasets.items():
        if not Path(manifest).is_file():
            problems.append(f"dataset {name!r}: manifest not found: {manifest}")
        else:
            try:
                load_manifest(manifest, name=name)
            except Exception as exc:  # noqa: BLE001 - surfaced to the user
                problems.append(f"dataset {name!r}: {exc}")
    if not config.conditions:
        problems.append("condition grid is empty")
    seen = set()
    for spec in config.conditions:
        if spec.condition_id in seen:
            problems.append(f"duplicate condition {spec.condition_id}")
        seen.add(spec.condition_id)
    if config.endpoint is None and config.mock is None:
        problems.append("configure either [endpoint] or [mock]")
    if config.mock is not None and config.mock not in (
        "always_correct",
        "always_wrong",
        "flip_if_darkened",
    ):
        problems.append(f"unknown mock behavior {config.mock!r}")
    if config.mock == "flip_if_darkened" and not config.mock_regions:
        problems.append("flip_if_darkened requires mock regions")
    if config.jpeg_quality is not None and not 1 <= config.jpeg_quality <= 100:
        problems.append(f"jpeg_quality {config.jpeg_quality} outside 1..100")
    return problems


def _make_client(config: ExperimentConfig, datasets: dict[str, EvalDataset]):
    if config.mock == "always_correct":
        return MockClient(AlwaysCorrect())
    if config.mock == "always_wrong":
        return MockClient(AlwaysWrong())
    if config.mock == "flip_if_darkened":
        behavior = None
        for ds in datasets.values():
            part = FlipIfDarkened.from_dataset(
                ds, list(config.mock_regions), config.mock_threshold
            )
            if behavior is None:
                behavior = part
            else:
                behavior.baselines.update(part.baselines)
        return MockClient(behavior)
    limiter = RateLimiter(config.max_per_second)
    return HttpClient(config.endpoint, rate_limiter=limiter)


def reply_cache_key(
    item_id: str, condition_id: str, descriptor: dict | None, model: str
) -> str:
    blob = json.dumps(
        {
            "item": item_id,
            "condition": condition_id,
            "descriptor": descriptor,
            "model": model,
            "template": PROMPT_TEMPLATE_VERSION,
        },
        sort_keys=True,
    ).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class ReplyLog:
    """Append-only JSONL of model replies; the resume and re-grade source."""

    def __init__(self, path: Path):
        self.path = path
        self._entries: dict[str, dict] = {}
        if path.is_file():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._entries[entry["key"]] = entry
        self._fh = open(path, "a", encoding="utf-8")

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> dict:
        return self._entries[key]

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, key: str, entry: dict) -> None:
        entry = {"key": key, **entry}
        self._entries[key] = entry
        self._fh.write(json.dumps(entry, sort_keys=True))
        self._fh.write("\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class RunArtifacts:
    report: RunReport
    out_dir: Path
    cache_hits: int
    queries_issued: int


def _query_task(client, item, image_path, condition_id, jpeg_quality):
    image = load_image(image_path)
    if jpeg_quality is not None:
        image = jpeg_defense(image, jpeg_quality)
    try:
        reply = client.query_item(item, image, condition_id)
        return {
            "item_id": item.id,
            "condition": condition_id,
            "raw_text": reply.raw_text,
            "latency": reply.latency,
            "attempts": reply.attempt_count,
            "unanswered": False,
        }
    except TransportError as exc:
        return {
            "item_id": item.id,
            "condition": condition_id,
            "raw_text": "",
            "latency": 0.0,
            "attempts": 0,
            "unanswered": True,
            "error": str(exc),
        }


def run(config: ExperimentConfig, client=None) -> RunArtifacts:
    """Execute a full experiment and write the artifact directory.

    Raises ConfigError before any rendering or network traffic when the
    config is invalid. Per-item transport failures degrade to unanswered
    records; authentication failures abort.
    """
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    datasets: dict[str, EvalDataset] = {}
    for name, manifest in config.datasets.items():
        ds = load_manifest(manifest, name=name)
        if config.sample_n is not None and config.sample_n < len(ds.items):
            ds = sample(ds, config.sample_n, config.seed)
        datasets[name] = ds

    if client is None:
        client = _make_client(config, datasets)

    # Render every watermark condition for every dataset.
    rendered: dict[tuple[str, str], EvalDataset] = {}
    descriptors: dict[str, dict | None] = {CLEAN_CONDITION: None}
    for spec in config.conditions:
        descriptors[spec.condition_id] = spec.to_json()
        for name, ds in datasets.items():
            cond_dir = out_dir / "conditions" / name / spec.condition_id
            rendered[(name, spec.condition_id)] = render_condition(
                ds, spec, cond_dir, workers=config.render_workers
            )
    for name, ds in datasets.items():
        rendered[(name, CLEAN_CONDITION)] = ds

    # Query with the reply cache: completed pairs are never re-queried.
    log = ReplyLog(out_dir / "replies.jsonl")
    tasks = []
    for (name, condition_id), ds in sorted(rendered.items()):
        for item in ds.items:
            key = reply_cache_key(
                item.id, condition_id, descriptors[condition_id], client.model_name
            )
            if key not in log:
                tasks.append((key, name, condition_id, ds, item))

    cache_hits = sum(len(ds.items) for ds in rendered.values()) - len(tasks)
    issued = 0
    try:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            futures = [
                (
                    key,
                    name,
                    pool.submit(
                        _query_task,
                        client,
                        item,
                        ds.resolve_image(item),
                        condition_id,
                        config.jpeg_quality,
                    ),
                )
                for key, name, condition_id, ds, item in tasks
            ]
            try:
                for key, name, fut in futures:
                    entry = fut.result()
                    entry["dataset"] = name
                    log.append(key, entry)
                    issued += 1
            except BaseException:
                # Keep queued work from running so a killed run resumes
                # exactly where the reply log ends.
                for _, _, pending in futures:
                    pending.cancel()
                raise
    finally:
        log.close()

    report = regrade(config, datasets, descriptors, client.model_name, out_dir)
    _write_outputs(report, out_dir, config, started)
    return RunArtifacts(
        report=report, out_dir=out_dir, cache_hits=cache_hits,
        queries_issued=issued,
    )


def regrade(
    config: ExperimentConfig,
    datasets: dict[str, EvalDataset],
    descriptors: dict[str, dict | None],
    model_name: str,
    out_dir: Path,
) -> RunReport:
    """Grade from the on-disk reply log alone; no queries are issued."""
    log = ReplyLog(out_dir / "replies.jsonl")
    log.close()
    records: dict[str, dict[str, list[EvalRecord]]] = {}
    for name, ds in datasets.items():
        by_condition: dict[str, list[EvalRecord]] = {}
        for condition_id in descriptors:
            recs: list[EvalRecord] = []
            for item in ds.items:
                key = reply_cache_key(
                    item.id, condition_id, descriptors[condition_id], model_name
                )
                if key not in log:
                    raise ConfigError(
                        f"reply log incomplete: missing {item.id} under "
                        f"{condition_id}; re-run to fill the cache"
                    )
                entry = log.get(key)
                if entry["unanswered"]:
                    recs.append(unanswered_record(item, condition_id))
                else:
                    recs.append(grade(item, entry["raw_text"], condition_id))
            by_condition[condition_id] = recs
        records[name] = by_condition

    conditions = {
        cid: WatermarkSpec.from_json(desc)
        for cid, desc in descriptors.items()
        if desc is not None
    }
    metadata = {
        "model": model_name,
        "seed": config.seed,
        "sampler": SAMPLER_NAME,
        "sample_n": config.sample_n,
        "prompt_template": PROMPT_TEMPLATE_VERSION,
        "engine_version": __version__,
        "jpeg_quality": config.jpeg_quality,
        "datasets": {
            name: {"items": len(ds.items), "manifest": str(config.datasets[name])}
            for name, ds in datasets.items()
        },
        "conditions": {
            cid: desc for cid, desc in sorted(descriptors.items())
        },
    }
    return aggregate(records, conditions, metadata)


def _write_outputs(
    report: RunReport, out_dir: Path, config: ExperimentConfig, started: float
) -> None:
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    # Resolved config copy; secrets stay in the environment (only the
    # variable name is recorded).
    config_copy = {
        "datasets": {n: str(p) for n, p in config.datasets.items()},
        "conditions": [spec.to_json() for spec in config.conditions],
        "endpoint": None
        if config.endpoint is None
        else {
            "base_url": config.endpoint.base_url,
            "model_name": config.endpoint.model_name,
            "api_key_env": config.endpoint.api_key_env,
            "timeout": config.endpoint.timeout,
            "max_retries": config.endpoint.max_retries,
            "max_in_flight": config.endpoint.max_in_flight,
        },
        "mock": config.mock,
        "mock_regions": [list(r) for r in config.mock_regions],
        "mock_threshold": config.mock_threshold,
        "jpeg_quality": config.jpeg_quality,
        "seed": config.seed,
        "sample_n": config.sample_n,
        "max_in_flight": config.max_in_flight,
    }
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_copy, fh, indent=2, sort_keys=True)
        fh.write("\n")

    pos = position_table([report])
    cont = content_table([report])
    write_table_csv(pos, out_dir / "pdr_by_position.csv")
    write_table_csv(cont, out_dir / "pdr_by_content.csv")

    summary = [
        f"model: {report.metadata.get('model')}",
        "",
        "PDR(%) by watermark position ('*' marks the per-dataset maximum)",
        format_table(pos),
        "",
        "PDR(%) by watermark content ('*' marks the per-dataset maximum)",
        format_table(cont),
        "",
    ]
    for name, conds in sorted(report.results.items()):
        for cond_id, cell in sorted(conds.items()):
            acc = "n/a" if cell.accuracy is None else f"{cell.accuracy:.3f}"
            drop = "n/a" if cell.pdr is None else f"{cell.pdr:.1f}"
            summary.append(
                f"{name:>10s} {cond_id:>40s} acc={acc} pdr={drop} "
                f"({cell.correct}/{cell.graded} correct, "
                f"{cell.unanswered} unanswered)"
            )
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n", "utf-8")

    # Timestamps live here so report.json stays byte-identical across runs.
    with open(out_dir / "run_meta.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "started_unix": started,
                "finished_unix": time.time(),
                "duration_s": time.time() - started,
            },
            fh,
            indent=2,
        )
        fh.write("\n")


def report_from_artifacts(artifact_dir: str | Path) -> RunReport:
    """Re-grade a finished or interrupted run directory from its reply log."""
    artifact_dir = Path(artifact_dir)
    report_path = artifact_dir / "report.json"
    if not report_path.is_file():
        raise ConfigError(
            f"{artifact_dir} has no report.json; run the experiment first"
        )
    with open(report_path, encoding="utf-8") as fh:
        previous = json.load(fh)
    meta = previous["metadata"]
    descriptors = dict(meta["conditions"])
    datasets = {
        name: load_manifest(info["manifest"], name=name)
        for name, info in meta["datasets"].items()
    }
    config = ExperimentConfig(
        datasets={n: Path(i["manifest"]) for n, i in meta["datasets"].items()},
        conditions=[
            WatermarkSpec.from_json(d)
            for d in descriptors.values()
            if d is not None
        ],
        out_dir=artifact_dir,
        mock="always_correct",
        seed=meta.get("seed", 0),
        sample_n=meta.get("sample_n"),
        jpeg_quality=meta.get("jpeg_quality"),
    )
    if config.sample_n is not None:
        datasets = {
            name: sample(ds, config.sample_n, config.seed)
            if config.sample_n < len(ds.items)
            else ds
            for name, ds in datasets.items()
        }
    report = regrade(
        config, datasets, descriptors, meta["model"], artifact_dir
    )
    _write_outputs(report, artifact_dir, config, time.time())
    return report
