/**
 * The .tdump tensor file format.
 *
 * Layout: a fixed 256-byte JSON header (space-padded) followed by the
 * row-major little-endian float32 payload. The header carries the tensor
 * name, shape, dtype and capture metadata, so any language can read a
 * dump without a tensor library. Attention dumps are [heads, seq, seq]
 * with softmax-normalized rows; embedding dumps are [seq, hidden].
 */

import { readFileSync, writeFileSync } from "node:fs";

export const HEADER_BYTES = 256;
export const ROW_SUM_TOLERANCE = 1e-4;

export type DumpKind = "attention" | "embedding";

export interface DumpMeta {
  model_name: string;
  item_id: string;
  condition_id: string;
  layer_index: number;
  kind: DumpKind;
  /** Image patch grid [rows, cols]; attention dumps only. */
  grid?: [number, number];
  /** Sequence offset of the first image token (defaults to 0). */
  image_token_start?: number;
  /** Non-padding prefix length; embedding dumps only. */
  valid_len?: number;
}

export interface TensorDump {
  name: string;
  shape: number[];
  data: Float32Array;
  meta: DumpMeta;
}

export class TensorDumpError extends Error {}

function product(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function validateDump(dump: TensorDump): void {
  if (dump.data.length !== product(dump.shape)) {
    throw new TensorDumpError(
      `data length ${dump.data.length} does not match shape [${dump.shape}]`,
    );
  }
  for (const v of dump.data) {
    if (!Number.isFinite(v)) {
      throw new TensorDumpError(`dump ${dump.name} has non-finite values`);
    }
  }
  if (dump.meta.kind === "attention") {
    const [heads, seq, seqK] = dump.shape;
    if (dump.shape.length !== 3 || seq !== seqK) {
      throw new TensorDumpError(
        `attention dump must be [heads, seq, seq], got [${dump.shape}]`,
      );
    }
    for (let h = 0; h < heads; h++) {
      for (let q = 0; q < seq; q++) {
        let sum = 0;
        const base = (h * seq + q) * seq;
        for (let k = 0; k < seq; k++) sum += dump.data[base + k];
        if (Math.abs(sum - 1.0) > ROW_SUM_TOLERANCE) {
          throw new TensorDumpError(
            `attention row (head ${h}, query ${q}) sums to ${sum}`,
          );
        }
      }
    }
  } else if (dump.meta.kind === "embedding") {
    if (dump.shape.length !== 2) {
      throw new TensorDumpError(
        `embedding dump must be [seq, hidden], got [${dump.shape}]`,
      );
    }
  } else {
    throw new TensorDumpError(`unknown dump kind ${String(dump.meta.kind)}`);
  }
}

/** Serialize; throws when the header cannot fit its 256-byte slot. */
export function encodeDump(dump: TensorDump): Buffer {
  validateDump(dump);
  const header = JSON.stringify({
    name: dump.name,
    shape: dump.shape,
    dtype: "float32",
    meta: dump.meta,
  });
  const headerBytes = Buffer.from(header, "utf-8");
  if (headerBytes.length > HEADER_BYTES) {
    throw new TensorDumpError(
      `header is ${headerBytes.length} bytes; limit ${HEADER_BYTES} ` +
        "(shorten item or condition ids)",
    );
  }
  const padded = Buffer.alloc(HEADER_BYTES, 0x20);
  headerBytes.copy(padded);
  // Normalize to little-endian regardless of host order.
  const payload = Buffer.alloc(dump.data.length * 4);
  for (let i = 0; i < dump.data.length; i++) {
    payload.writeFloatLE(dump.data[i], i * 4);
  }
  return Buffer.concat([padded, payload]);
}

export function writeDump(dump: TensorDump, path: string): void {
  writeFileSync(path, encodeDump(dump));
}

export function readDump(path: string): TensorDump {
  const raw = readFileSync(path);
  if (raw.length < HEADER_BYTES) {
    throw new TensorDumpError(`${path}: shorter than the header`);
  }
  let header: { name: string; shape: number[]; dtype: string; meta: DumpMeta };
  try {
    header = JSON.parse(raw.subarray(0, HEADER_BYTES).toString("utf-8").trim());
  } catch (err) {
    throw new TensorDumpError(`${path}: bad header: ${String(err)}`);
  }
  if (header.dtype !== "float32") {
    throw new TensorDumpError(`${path}: unsupported dtype ${header.dtype}`);
  }
  const expected = product(header.shape) * 4;
  const payload = raw.subarray(HEADER_BYTES);
  if (payload.length !== expected) {
    throw new TensorDumpError(
      `${path}: payload is ${payload.length} bytes, expected ${expected}`,
    );
  }
  const data = new Float32Array(product(header.shape));
  for (let i = 0; i < data.length; i++) {
    data[i] = payload.readFloatLE(i * 4);
  }
  const dump: TensorDump = {
    name: header.name,
    shape: header.shape,
    data,
    meta: header.meta,
  };
  validateDump(dump);
  return dump;
}

export function dumpFilename(
  itemId: string,
  conditionId: string,
  kind: DumpKind,
  layer: number,
): string {
  return `${itemId}__${conditionId}__${kind}__L${layer}.tdump`;
}
