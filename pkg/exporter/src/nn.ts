/** The few network operations a VGG-class feature extractor needs.
 * Convolution runs as im2col + matmul; accumulation is float64 with a
 * float32 round on store, which keeps runs bit-reproducible. */

import { Tensor, numel, tensorFrom, zeros } from "./tensor";

/** C[M,N] = A[M,K] @ B[K,N]. */
export function matmul(
  a: Float32Array, b: Float32Array, m: number, k: number, n: number,
): Float32Array {
  const acc = new Float64Array(m * n);
  for (let i = 0; i < m; i++) {
    const aRow = i * k;
    const cRow = i * n;
    for (let p = 0; p < k; p++) {
      const av = a[aRow + p];
      if (av === 0) continue;
      const bRow = p * n;
      for (let j = 0; j < n; j++) {
        acc[cRow + j] += av * b[bRow + j];
      }
    }
  }
  const out = new Float32Array(m * n);
  for (let i = 0; i < out.length; i++) out[i] = Math.fround(acc[i]);
  return out;
}

/** 3x3 same-padding convolution over an [H, W, C] input.
 * weights: [3*3*inC, outC] row-major (ky, kx, c) patch order; bias: [outC]. */
export function conv3x3(input: Tensor, weights: Float32Array, bias: Float32Array): Tensor {
  const [h, w, cIn] = input.shape;
  const cOut = bias.length;
  const patchLen = 9 * cIn;
  if (weights.length !== patchLen * cOut) {
    throw new Error(`conv weights have ${weights.length} values, expected ${patchLen * cOut}`);
  }
  const src = input.data;
  const patches = new Float32Array(h * w * patchLen);
  let row = 0;
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      let offset = row * patchLen;
      for (let ky = -1; ky <= 1; ky++) {
        const sy = y + ky;
        const inside = sy >= 0 && sy < h;
        for (let kx = -1; kx <= 1; kx++) {
          const sx = x + kx;
          if (inside && sx >= 0 && sx < w) {
            const base = (sy * w + sx) * cIn;
            patches.set(src.subarray(base, base + cIn), offset);
          }
          offset += cIn;
        }
      }
      row++;
    }
  }
  const out = matmul(patches, weights, h * w, patchLen, cOut);
  for (let i = 0; i < out.length; i++) {
    out[i] = Math.fround(out[i] + bias[i % cOut]);
  }
  return tensorFrom([h, w, cOut], out);
}

/** 2x2 max pooling with stride 2 (incomplete border rows/cols dropped). */
export function maxPool2(input: Tensor): Tensor {
  const [h, w, c] = input.shape;
  const oh = Math.floor(h / 2);
  const ow = Math.floor(w / 2);
  const out = zeros([oh, ow, c]);
  const src = input.data;
  for (let y = 0; y < oh; y++) {
    for (let x = 0; x < ow; x++) {
      const a = ((2 * y) * w + 2 * x) * c;
      const b = ((2 * y) * w + 2 * x + 1) * c;
      const d = ((2 * y + 1) * w + 2 * x) * c;
      const e = ((2 * y + 1) * w + 2 * x + 1) * c;
      const o = (y * ow + x) * c;
      for (let ch = 0; ch < c; ch++) {
        out.data[o + ch] = Math.max(src[a + ch], src[b + ch], src[d + ch], src[e + ch]);
      }
    }
  }
  return out;
}

export function relu(t: Tensor): Tensor {
  const out = new Float32Array(t.data.length);
  for (let i = 0; i < out.length; i++) out[i] = t.data[i] > 0 ? t.data[i] : 0;
  return tensorFrom(t.shape, out);
}

/** out[j] = sum_i input[i] * weights[i, j] + bias[j]. */
export function dense(input: Tensor, weights: Float32Array, bias: Float32Array): Tensor {
  const n = numel(input.shape);
  const units = bias.length;
  if (weights.length !== n * units) {
    throw new Error(`dense weights have ${weights.length} values, expected ${n * units}`);
  }
  const out = matmul(input.data, weights, 1, n, units);
  for (let j = 0; j < units; j++) out[j] = Math.fround(out[j] + bias[j]);
  return tensorFrom([units], out);
}

/** Row-major flatten of an [H, W, C] tensor (H, then W, then C order). */
export function flatten(t: Tensor): Tensor {
  return tensorFrom([numel(t.shape)], t.data);
}
