import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { PNG } from "pngjs";

import { Manifest, VqaItem } from "../src/manifest.js";

export function tempDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

/** A white page with dark bars, optionally darkened in the middle. */
export function writePage(
  path: string,
  width = 96,
  height = 64,
  darkCenter = false,
): void {
  const png = new PNG({ width, height });
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const i = (y * width + x) * 4;
      let value = 255;
      if (y % 20 < 5 && x > 8 && x < width - 8) value = 40;
      if (darkCenter) {
        const cx = width / 2;
        const cy = height / 2;
        if (Math.abs(x - cx) < 12 && Math.abs(y - cy) < 12) value = 60;
      }
      png.data[i] = value;
      png.data[i + 1] = value;
      png.data[i + 2] = value;
      png.data[i + 3] = 255;
    }
  }
  writeFileSync(path, PNG.sync.write(png));
}

export function makeItem(id: string, imagePath: string): VqaItem {
  return {
    id,
    image_path: imagePath,
    category: "TextS",
    question: "Which option does the page support?",
    options: { A: "first", B: "second", C: "third", D: "fourth" },
    answer: ["B"],
  };
}

/** Write n pages plus a manifest.jsonl into dir; returns the manifest. */
export function makeCorpus(dir: string, n = 2): Manifest {
  const items: VqaItem[] = [];
  const lines: string[] = [];
  for (let i = 0; i < n; i++) {
    const id = `pg${i}`;
    const name = `${id}.png`;
    writePage(join(dir, name));
    const item = makeItem(id, name);
    items.push(item);
    lines.push(JSON.stringify(item));
  }
  writeFileSync(join(dir, "manifest.jsonl"), lines.join("\n") + "\n");
  return { items, root: dir };
}
