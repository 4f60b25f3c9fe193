#!/usr/bin/env node
/**
 * probe --model <id> --manifest <path> --condition <condition.json|clean>
 *       --out <dir> [--layers all|last|i,j,...]
 *
 * Captures attention and embedding dumps for every item in the manifest
 * under the named condition. Point --manifest at a clean corpus with
 * --condition clean, or at the manifest inside a rendered condition
 * directory together with its condition.json.
 */

import { realpathSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { parseArgs } from "node:util";

import { captureCorpus } from "./capture.js";
import { conditionIdFrom, loadManifest } from "./manifest.js";
import { loadBackend } from "./model.js";

function parseLayers(value: string, layerCount: number): number[] {
  if (value === "last") return [layerCount - 1];
  if (value === "all") return Array.from({ length: layerCount }, (_, i) => i);
  return value.split(",").map((part) => {
    const n = Number.parseInt(part, 10);
    if (Number.isNaN(n)) throw new Error(`bad layer index ${part}`);
    return n;
  });
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        model: { type: "string", default: "tiny-vlm" },
        manifest: { type: "string" },
        condition: { type: "string", default: "clean" },
        out: { type: "string" },
        layers: { type: "string", default: "last" },
      },
    });
  } catch (err) {
    console.error(String(err));
    return 1;
  }
  const { model, manifest, condition, out, layers } = parsed.values;
  if (!manifest || !out) {
    console.error(
      "usage: probe --model <id> --manifest <path> " +
        "--condition <condition.json|clean> --out <dir> [--layers all|last|i,j]",
    );
    return 1;
  }
  try {
    const backend = loadBackend(model!);
    const corpus = loadManifest(manifest);
    const conditionId = conditionIdFrom(condition!);
    const results = captureCorpus(backend, corpus, conditionId, out, {
      layers: parseLayers(layers!, backend.layerCount),
      log: (line) => console.log(line),
    });
    const total = results.reduce((acc, r) => acc + r.files.length, 0);
    console.log(
      `captured ${results.length} item(s) -> ${total} dump file(s) in ${out}`,
    );
    return 0;
  } catch (err) {
    console.error(`probe error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

function invokedDirectly(): boolean {
  if (!process.argv[1]) return false;
  try {
    return realpathSync(process.argv[1]) === fileURLToPath(import.meta.url);
  } catch {
    return false;
  }
}

if (invokedDirectly()) {
  process.exit(main(process.argv.slice(2)));
}
