/**
 * Reader for the harness's JSON-Lines corpus manifests (one VQA item per
 * line, image paths resolved against the manifest's directory) and for
 * condition.json descriptors written next to rendered images.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";

export interface VqaItem {
  id: string;
  image_path: string;
  category: string;
  question: string;
  options: Record<string, string>;
  answer: string[];
}

export interface Manifest {
  items: VqaItem[];
  root: string;
}

export class ManifestError extends Error {}

export function loadManifest(path: string): Manifest {
  const root = dirname(path);
  const items: VqaItem[] = [];
  const seen = new Set<string>();
  const lines = readFileSync(path, "utf-8").split("\n");
  lines.forEach((line, index) => {
    if (!line.trim()) return;
    let obj: VqaItem;
    try {
      obj = JSON.parse(line);
    } catch (err) {
      throw new ManifestError(`line ${index + 1}: invalid JSON: ${String(err)}`);
    }
    for (const field of ["id", "image_path", "category", "question"]) {
      if (!(field in obj)) {
        throw new ManifestError(`line ${index + 1}: missing field ${field}`);
      }
    }
    if (seen.has(obj.id)) {
      throw new ManifestError(`line ${index + 1}: duplicate id ${obj.id}`);
    }
    seen.add(obj.id);
    items.push(obj);
  });
  return { items, root };
}

export function resolveImage(manifest: Manifest, item: VqaItem): string {
  return join(manifest.root, ...item.image_path.split("/"));
}

/** The condition id, from a condition.json path or the literal "clean". */
export function conditionIdFrom(conditionArg: string): string {
  if (conditionArg === "clean") return "clean";
  const parsed = JSON.parse(readFileSync(conditionArg, "utf-8"));
  if (typeof parsed.condition_id !== "string") {
    throw new ManifestError(
      `${conditionArg}: descriptor has no condition_id field`,
    );
  }
  return parsed.condition_id;
}
