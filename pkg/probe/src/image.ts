/** Decode PNG or JPEG files to 8-bit RGB, flattening alpha against white. */

import { readFileSync } from "node:fs";
import { PNG } from "pngjs";
import jpeg from "jpeg-js";

export interface RgbImage {
  width: number;
  height: number;
  /** Row-major RGB, 3 bytes per pixel. */
  pixels: Uint8Array;
}

export class ImageDecodeError extends Error {}

function flattenRgba(data: Uint8Array | Buffer, n: number): Uint8Array {
  const out = new Uint8Array(n * 3);
  for (let i = 0; i < n; i++) {
    const a = data[i * 4 + 3] / 255;
    for (let c = 0; c < 3; c++) {
      out[i * 3 + c] = Math.round(data[i * 4 + c] * a + 255 * (1 - a));
    }
  }
  return out;
}

export function decodeImage(path: string): RgbImage {
  const raw = readFileSync(path);
  if (raw.length >= 8 && raw.readUInt32BE(0) === 0x89504e47) {
    let png: PNG;
    try {
      png = PNG.sync.read(raw);
    } catch (err) {
      throw new ImageDecodeError(`${path}: corrupt PNG: ${String(err)}`);
    }
    return {
      width: png.width,
      height: png.height,
      pixels: flattenRgba(png.data, png.width * png.height),
    };
  }
  if (raw.length >= 2 && raw[0] === 0xff && raw[1] === 0xd8) {
    let decoded: { width: number; height: number; data: Uint8Array };
    try {
      decoded = jpeg.decode(raw, { useTArray: true });
    } catch (err) {
      throw new ImageDecodeError(`${path}: corrupt JPEG: ${String(err)}`);
    }
    return {
      width: decoded.width,
      height: decoded.height,
      pixels: flattenRgba(decoded.data, decoded.width * decoded.height),
    };
  }
  throw new ImageDecodeError(`${path}: not a PNG or JPEG file`);
}
