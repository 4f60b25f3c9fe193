/**
 * Run a backend over a corpus and write one dump set per item: attention
 * for the selected layers plus the fused hidden states after the final
 * layer. File names follow <item>__<condition>__<kind>__L<layer>.tdump.
 */

import { mkdirSync } from "node:fs";
import { join } from "node:path";

import { decodeImage } from "./image.js";
import { Manifest, VqaItem, resolveImage } from "./manifest.js";
import { ModelBackend } from "./model.js";
import { DumpMeta, TensorDump, dumpFilename, writeDump } from "./tdump.js";

export interface CaptureOptions {
  /** Layer indices to dump attention for; default: final layer only. */
  layers?: number[];
  log?: (line: string) => void;
}

export interface CaptureResult {
  itemId: string;
  files: string[];
  seq: number;
}

function buildPrompt(item: VqaItem): string {
  const letters = ["A", "B", "C", "D"];
  const lines = [item.question.trim(), ""];
  for (const letter of letters) {
    if (item.options && letter in item.options) {
      lines.push(`${letter}. ${item.options[letter]}`);
    }
  }
  const plural = item.category === "ChartM" ? "letters" : "letter";
  lines.push("", `Answer with the option ${plural} only.`);
  return lines.join("\n");
}

export function captureItem(
  backend: ModelBackend,
  manifest: Manifest,
  item: VqaItem,
  conditionId: string,
  outDir: string,
  options: CaptureOptions = {},
): CaptureResult {
  const image = decodeImage(resolveImage(manifest, item));
  const forward = backend.forward(buildPrompt(item), image);
  const layerIndices = options.layers ?? [backend.layerCount - 1];

  const files: string[] = [];
  for (const layer of layerIndices) {
    if (layer < 0 || layer >= forward.layers.length) {
      throw new Error(
        `layer ${layer} out of range 0..${forward.layers.length - 1}`,
      );
    }
    const capture = forward.layers[layer];
    const meta: DumpMeta = {
      model_name: backend.name,
      item_id: item.id,
      condition_id: conditionId,
      layer_index: layer,
      kind: "attention",
      grid: forward.grid,
    };
    const dump: TensorDump = {
      name: `attn_L${layer}`,
      shape: [capture.heads, capture.seq, capture.seq],
      data: capture.attention,
      meta,
    };
    const file = join(
      outDir,
      dumpFilename(item.id, conditionId, "attention", layer),
    );
    writeDump(dump, file);
    files.push(file);
  }

  const finalLayer = backend.layerCount - 1;
  const embedding: TensorDump = {
    name: `emb_L${finalLayer}`,
    shape: [forward.seq, forward.hiddenSize],
    data: forward.hidden,
    meta: {
      model_name: backend.name,
      item_id: item.id,
      condition_id: conditionId,
      layer_index: finalLayer,
      kind: "embedding",
    },
  };
  const embFile = join(
    outDir,
    dumpFilename(item.id, conditionId, "embedding", finalLayer),
  );
  writeDump(embedding, embFile);
  files.push(embFile);

  options.log?.(
    `${item.id} under ${conditionId}: seq=${forward.seq}, ` +
      `grid=${forward.grid[0]}x${forward.grid[1]}, ${files.length} dump(s)`,
  );
  return { itemId: item.id, files, seq: forward.seq };
}

export function captureCorpus(
  backend: ModelBackend,
  manifest: Manifest,
  conditionId: string,
  outDir: string,
  options: CaptureOptions = {},
): CaptureResult[] {
  mkdirSync(outDir, { recursive: true });
  return manifest.items.map((item) =>
    captureItem(backend, manifest, item, conditionId, outDir, options),
  );
}
