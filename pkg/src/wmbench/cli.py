"""Command-line entry point.

Subcommands: validate, render, run, analyze, report.
Exit codes: 0 success, 1 validation error, 2 transport error,
3 analysis-input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisInputError,
    attention_delta,
    cosine_similarity,
    embedding_summary,
    render_heatmap,
    render_scatter,
    tsne,
    write_coords_csv,
    write_grid_csv,
)
from .client import AuthenticationError, TransportError
from .corpus import ManifestError, load_manifest
from .harness import (
    ConfigError,
    PRESET_NAMES,
    load_config,
    preset,
    report_from_artifacts,
    run,
    validate_config,
)
from .metrics import CLEAN_CONDITION
from .tdump import TensorDumpError, parse_dump_filename, read_tdump
from .watermark import (
    PlacementError,
    ScaleError,
    WatermarkContent,
    WatermarkSpec,
    render_condition,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRANSPORT = 2
EXIT_ANALYSIS = 3


def _cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    problems = validate_config(config)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_VALIDATION
    n_items = sum(
        len(load_manifest(m, name=n).items) for n, m in config.datasets.items()
    )
    print(
        f"ok: {len(config.datasets)} dataset(s), {n_items} item(s), "
        f"{len(config.conditions)} condition(s)"
    )
    return EXIT_OK


def _spec_from_args(args) -> WatermarkSpec:
    factories = {
        "text": WatermarkContent.text,
        "symbol": WatermarkContent.symbol,
        "mask": WatermarkContent.mask,
    }
    if args.content == "mask":
        content = WatermarkContent.mask()
    elif args.string:
        content = factories[args.content](args.string)
    else:
        content = factories[args.content]()
    return WatermarkSpec(
        content=content,
        position=args.position,
        color=tuple(args.color),
        opacity=args.alpha,
        angle=args.angle,
        area_ratio=args.rho,
    )


def _cmd_render(args) -> int:
    try:
        if args.condition:
            with open(args.condition, encoding="utf-8") as fh:
                obj = json.load(fh)
            spec = WatermarkSpec.from_json(obj.get("spec", obj))
        else:
            spec = _spec_from_args(args)
        dataset = load_manifest(args.manifest)
        out = render_condition(dataset, spec, args.out)
    except (ManifestError, PlacementError, ScaleError, ValueError, OSError) as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"rendered {len(out.items)} image(s) under {spec.condition_id} -> {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.preset:
            config.conditions = preset(args.preset) + [
                c for c in config.conditions
            ]
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        artifacts = run(config)
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (AuthenticationError, TransportError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    print(
        f"run complete: {artifacts.queries_issued} queries issued, "
        f"{artifacts.cache_hits} served from cache"
    )
    print((artifacts.out_dir / "summary.txt").read_text("utf-8"))
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        report = report_from_artifacts(args.artifact_dir)
    except (ConfigError, ManifestError, OSError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print((Path(args.artifact_dir) / "summary.txt").read_text("utf-8"))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    try:
        dump_dir = Path(args.dumps)
        files = sorted(dump_dir.glob("*.tdump"))
        if not files:
            raise AnalysisInputError(f"no .tdump files under {dump_dir}")
        out_dir.mkdir(parents=True, exist_ok=True)

        attention: dict[tuple[str, int], dict[str, Path]] = defaultdict(dict)
        embeddings: dict[str, dict[str, Path]] = defaultdict(dict)
        for f in files:
            item_id, condition_id, kind, layer = parse_dump_filename(f.name)
            if kind == "attention":
                attention[(item_id, layer)][condition_id] = f
            elif kind == "embedding":
                embeddings[item_id][condition_id] = f

        # Attention variation heatmaps: clean vs each condition.
        n_heat = 0
        for (item_id, layer), by_cond in sorted(attention.items()):
            if args.layer is not None and layer != args.layer:
                continue
            if CLEAN_CONDITION not in by_cond:
                continue
            clean = read_tdump(by_cond[CLEAN_CONDITION])
            for cond, f in sorted(by_cond.items()):
                if cond == CLEAN_CONDITION:
                    continue
                delta = attention_delta(clean, read_tdump(f))
                stem = f"attn_delta__{item_id}__{cond}__L{layer}"
                render_heatmap(delta, out_dir / f"{stem}.png")
                write_grid_csv(delta, out_dir / f"{stem}.csv")
                n_heat += 1

        # Embedding cosine similarity against clean, per item.
        cosine_rows = []
        for item_id, by_cond in sorted(embeddings.items()):
            if CLEAN_CONDITION not in by_cond:
                continue
            ref = embedding_summary(read_tdump(by_cond[CLEAN_CONDITION]))
            for cond, f in sorted(by_cond.items()):
                if cond == CLEAN_CONDITION:
                    continue
                sim = cosine_similarity(
                    ref, embedding_summary(read_tdump(f))
                )
                cosine_rows.append((item_id, cond, sim))
        if cosine_rows:
            with open(out_dir / "cosine_similarity.csv", "w", encoding="utf-8") as fh:
                fh.write("item,condition,cosine_similarity\n")
                for item_id, cond, sim in cosine_rows:
                    fh.write(f"{item_id},{cond},{sim:.6f}\n")

        # 2-D projection of every embedding summary, labeled by condition.
        vectors, labels = [], []
        for item_id, by_cond in sorted(embeddings.items()):
            for cond, f in sorted(by_cond.items()):
                vectors.append(embedding_summary(read_tdump(f)).vector)
                labels.append(cond)
        if len(vectors) >= 4:
            perplexity = min(args.perplexity, (len(vectors) - 1) / 3 - 1e-9)
            coords = tsne(
                np.vstack(vectors),
                perplexity=perplexity,
                iterations=args.iterations,
                seed=args.seed,
            )
            render_scatter(
                coords, labels, out_dir / "embedding_tsne.png",
                title="cross-modal embeddings (2-D projection)",
            )
            write_coords_csv(coords, labels, out_dir / "embedding_tsne.csv")
    except (TensorDumpError, AnalysisInputError, OSError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    print(
        f"analyzed {len(files)} dump(s): {n_heat} heatmap(s), "
        f"{len(cosine_rows)} cosine pair(s) -> {out_dir}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmbench",
        description="Measure watermark-induced accuracy drop of document VQA models.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config without running")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("render", help="watermark one dataset under one condition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--condition", help="condition.json to reuse")
    p.add_argument("--content", choices=["text", "symbol", "mask"], default="text")
    p.add_argument("--string", help="override the rendered text")
    p.add_argument(
        "--position", choices=["center", "top_left", "scattered"], default="center"
    )
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=0.25)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--color", type=int, nargs=3, default=[0, 0, 0])
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("run", help="execute a full experiment")
    p.add_argument("config")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("analyze", help="diagnostics from .tdump files")
    p.add_argument("--dumps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--perplexity", type=float, default=5.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="re-grade a run directory from its cache")
    p.add_argument("artifact_dir")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
