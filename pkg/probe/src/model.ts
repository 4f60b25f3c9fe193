/**
 * Local model backends with white-box capture.
 *
 * A backend runs one (question, image) pair and exposes every layer's
 * attention matrices plus the fused hidden states. The built-in
 * `TinyVlm` is a self-contained deterministic transformer encoder:
 * weights are derived from a seeded PRNG keyed on the model id, so the
 * same inputs always reproduce the same tensors bit for bit, on any
 * machine, with no downloads.
 *
 * Hooking a real model instead: implement `ModelBackend` over
 * `@huggingface/transformers` — run the processor on (text, image), call
 * the model with `output_attentions: true` and `output_hidden_states:
 * true`, then copy `attentions[layer]` (shape [heads, seq, seq] after
 * dropping the batch axis) into `LayerCapture.attention` and the final
 * hidden state into `ForwardCapture.hidden`. The patch grid comes from
 * the processor's image size over patch size.
 */

import { RgbImage } from "./image.js";
import { fnv1a, gaussians, mulberry32 } from "./prng.js";

export interface LayerCapture {
  /** Row-major [heads, seq, seq], rows softmax-normalized. */
  attention: Float32Array;
  heads: number;
  seq: number;
}

export interface ForwardCapture {
  layers: LayerCapture[];
  /** Final fused hidden states, row-major [seq, hidden]. */
  hidden: Float32Array;
  seq: number;
  hiddenSize: number;
  /** Image patch grid [rows, cols]; patches occupy sequence head. */
  grid: [number, number];
}

export interface ModelBackend {
  readonly name: string;
  readonly layerCount: number;
  forward(question: string, image: RgbImage): ForwardCapture;
}

const PATCH = 16;
const HIDDEN = 32;
const HEADS = 4;
const LAYERS = 2;
const MLP_HIDDEN = 64;
const MAX_TEXT_TOKENS = 24;
const PATCH_FEATURES = 6; // mean RGB, luma spread, relative row/col

interface LayerWeights {
  wq: Float64Array;
  wk: Float64Array;
  wv: Float64Array;
  wo: Float64Array;
  w1: Float64Array;
  w2: Float64Array;
}

function matmul(
  x: Float64Array,
  w: Float64Array,
  rows: number,
  inner: number,
  cols: number,
): Float64Array {
  const out = new Float64Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    for (let k = 0; k < inner; k++) {
      const xv = x[r * inner + k];
      if (xv === 0) continue;
      const wBase = k * cols;
      const oBase = r * cols;
      for (let c = 0; c < cols; c++) {
        out[oBase + c] += xv * w[wBase + c];
      }
    }
  }
  return out;
}

function layerNorm(x: Float64Array, rows: number, cols: number): Float64Array {
  const out = new Float64Array(x.length);
  for (let r = 0; r < rows; r++) {
    let mean = 0;
    for (let c = 0; c < cols; c++) mean += x[r * cols + c];
    mean /= cols;
    let variance = 0;
    for (let c = 0; c < cols; c++) {
      const d = x[r * cols + c] - mean;
      variance += d * d;
    }
    variance /= cols;
    const inv = 1 / Math.sqrt(variance + 1e-5);
    for (let c = 0; c < cols; c++) {
      out[r * cols + c] = (x[r * cols + c] - mean) * inv;
    }
  }
  return out;
}

/** The deterministic built-in backend. */
export class TinyVlm implements ModelBackend {
  readonly name: string;
  readonly layerCount = LAYERS;
  private readonly layers: LayerWeights[];
  private readonly patchProj: Float64Array;
  private readonly seed: number;

  constructor(modelId = "tiny-vlm") {
    this.name = modelId;
    this.seed = fnv1a(`weights:${modelId}`);
    const rng = mulberry32(this.seed);
    const scale = 1 / Math.sqrt(HIDDEN);
    this.patchProj = gaussians(rng, PATCH_FEATURES * HIDDEN, scale);
    this.layers = [];
    for (let l = 0; l < LAYERS; l++) {
      this.layers.push({
        wq: gaussians(rng, HIDDEN * HIDDEN, scale),
        wk: gaussians(rng, HIDDEN * HIDDEN, scale),
        wv: gaussians(rng, HIDDEN * HIDDEN, scale),
        wo: gaussians(rng, HIDDEN * HIDDEN, scale),
        w1: gaussians(rng, HIDDEN * MLP_HIDDEN, scale),
        w2: gaussians(rng, MLP_HIDDEN * HIDDEN, 1 / Math.sqrt(MLP_HIDDEN)),
      });
    }
  }

  /** Word tokens; each embeds through a PRNG keyed on (model, token). */
  private embedToken(word: string, out: Float64Array, offset: number): void {
    const rng = mulberry32(this.seed ^ fnv1a(`tok:${word.toLowerCase()}`));
    const values = gaussians(rng, HIDDEN);
    for (let c = 0; c < HIDDEN; c++) out[offset + c] = values[c];
  }

  /** Mean color, luma spread and relative position per image patch. */
  private patchFeatures(image: RgbImage): {
    features: Float64Array;
    grid: [number, number];
  } {
    const rows = Math.max(1, Math.floor(image.height / PATCH));
    const cols = Math.max(1, Math.floor(image.width / PATCH));
    const features = new Float64Array(rows * cols * PATCH_FEATURES);
    for (let gr = 0; gr < rows; gr++) {
      for (let gc = 0; gc < cols; gc++) {
        let sumR = 0;
        let sumG = 0;
        let sumB = 0;
        let sumLuma2 = 0;
        const n = PATCH * PATCH;
        for (let dy = 0; dy < PATCH; dy++) {
          const y = gr * PATCH + dy;
          for (let dx = 0; dx < PATCH; dx++) {
            const x = gc * PATCH + dx;
            const p = (y * image.width + x) * 3;
            const r = image.pixels[p];
            const g = image.pixels[p + 1];
            const b = image.pixels[p + 2];
            sumR += r;
            sumG += g;
            sumB += b;
            const luma = 0.299 * r + 0.587 * g + 0.114 * b;
            sumLuma2 += luma * luma;
          }
        }
        const meanR = sumR / n;
        const meanG = sumG / n;
        const meanB = sumB / n;
        const meanLuma = 0.299 * meanR + 0.587 * meanG + 0.114 * meanB;
        const spread = Math.sqrt(Math.max(sumLuma2 / n - meanLuma * meanLuma, 0));
        const base = (gr * cols + gc) * PATCH_FEATURES;
        features[base] = meanR / 255 - 0.5;
        features[base + 1] = meanG / 255 - 0.5;
        features[base + 2] = meanB / 255 - 0.5;
        features[base + 3] = spread / 128;
        features[base + 4] = rows > 1 ? gr / (rows - 1) - 0.5 : 0;
        features[base + 5] = cols > 1 ? gc / (cols - 1) - 0.5 : 0;
      }
    }
    return { features, grid: [rows, cols] };
  }

  forward(question: string, image: RgbImage): ForwardCapture {
    const { features, grid } = this.patchFeatures(image);
    const nPatches = grid[0] * grid[1];
    const words = question
      .split(/\s+/)
      .filter((w) => w.length > 0)
      .slice(0, MAX_TEXT_TOKENS);
    const seq = nPatches + words.length;

    // Image patches first, then text tokens: the fused input sequence.
    let x = new Float64Array(seq * HIDDEN);
    const projected = matmul(features, this.patchProj, nPatches, PATCH_FEATURES, HIDDEN);
    x.set(projected, 0);
    words.forEach((word, i) => {
      this.embedToken(word, x, (nPatches + i) * HIDDEN);
    });
    // Sinusoidal position signal keeps duplicate tokens distinguishable.
    for (let s = 0; s < seq; s++) {
      for (let c = 0; c < HIDDEN; c += 2) {
        const angle = s / Math.pow(10000, c / HIDDEN);
        x[s * HIDDEN + c] += 0.1 * Math.sin(angle);
        if (c + 1 < HIDDEN) x[s * HIDDEN + c + 1] += 0.1 * Math.cos(angle);
      }
    }

    const headDim = HIDDEN / HEADS;
    const captures: LayerCapture[] = [];
    for (const weights of this.layers) {
      const normed = layerNorm(x, seq, HIDDEN);
      const q = matmul(normed, weights.wq, seq, HIDDEN, HIDDEN);
      const k = matmul(normed, weights.wk, seq, HIDDEN, HIDDEN);
      const v = matmul(normed, weights.wv, seq, HIDDEN, HIDDEN);

      const attention = new Float32Array(HEADS * seq * seq);
      const context = new Float64Array(seq * HIDDEN);
      const invSqrt = 1 / Math.sqrt(headDim);
      for (let h = 0; h < HEADS; h++) {
        const hOff = h * headDim;
        for (let qi = 0; qi < seq; qi++) {
          const scores = new Float64Array(seq);
          let maxScore = -Infinity;
          for (let ki = 0; ki < seq; ki++) {
            let dot = 0;
            for (let d = 0; d < headDim; d++) {
              dot += q[qi * HIDDEN + hOff + d] * k[ki * HIDDEN + hOff + d];
            }
            scores[ki] = dot * invSqrt;
            if (scores[ki] > maxScore) maxScore = scores[ki];
          }
          let total = 0;
          for (let ki = 0; ki < seq; ki++) {
            scores[ki] = Math.exp(scores[ki] - maxScore);
            total += scores[ki];
          }
          const rowBase = (h * seq + qi) * seq;
          for (let ki = 0; ki < seq; ki++) {
            const p = scores[ki] / total;
            attention[rowBase + ki] = p;
            for (let d = 0; d < headDim; d++) {
              context[qi * HIDDEN + hOff + d] += p * v[ki * HIDDEN + hOff + d];
            }
          }
        }
      }
      captures.push({ attention, heads: HEADS, seq });

      const attended = matmul(context, weights.wo, seq, HIDDEN, HIDDEN);
      for (let i = 0; i < x.length; i++) x[i] += attended[i];

      const normed2 = layerNorm(x, seq, HIDDEN);
      const inner = matmul(normed2, weights.w1, seq, HIDDEN, MLP_HIDDEN);
      for (let i = 0; i < inner.length; i++) {
        inner[i] = inner[i] > 0 ? inner[i] : 0; // ReLU
      }
      const mlpOut = matmul(inner, weights.w2, seq, MLP_HIDDEN, HIDDEN);
      for (let i = 0; i < x.length; i++) x[i] += mlpOut[i];
    }

    const hidden = new Float32Array(x.length);
    for (let i = 0; i < x.length; i++) hidden[i] = x[i];
    return { layers: captures, hidden, seq, hiddenSize: HIDDEN, grid };
  }
}

export function loadBackend(modelId: string): ModelBackend {
  if (modelId === "tiny-vlm" || modelId.startsWith("tiny-vlm:")) {
    return new TinyVlm(modelId);
  }
  throw new Error(
    `unknown model ${modelId}; the built-in backend is "tiny-vlm" ` +
      "(see ModelBackend in model.ts for wiring a real model)",
  );
}
