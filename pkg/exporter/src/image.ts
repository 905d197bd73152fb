/** Image loading and the canonical preprocessing for a VGG-class network:
 * bilinear resize of the short side, center crop, RGB mean subtraction. */

import * as fs from "fs";
import { PNG } from "pngjs";

import { Tensor, tensorFrom } from "./tensor";

export interface RgbImage {
  width: number;
  height: number;
  /** Interleaved RGB float32, length width * height * 3. */
  data: Float32Array;
}

export function decodePng(path: string): RgbImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const out = new Float32Array(png.width * png.height * 3);
  for (let i = 0, j = 0; i < png.data.length; i += 4, j += 3) {
    out[j] = png.data[i];
    out[j + 1] = png.data[i + 1];
    out[j + 2] = png.data[i + 2];
  }
  return { width: png.width, height: png.height, data: out };
}

export function bilinearResize(img: RgbImage, outW: number, outH: number): RgbImage {
  const out = new Float32Array(outW * outH * 3);
  const scaleX = img.width / outW;
  const scaleY = img.height / outH;
  for (let y = 0; y < outH; y++) {
    const sy = Math.min(Math.max((y + 0.5) * scaleY - 0.5, 0), img.height - 1);
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const fy = sy - y0;
    for (let x = 0; x < outW; x++) {
      const sx = Math.min(Math.max((x + 0.5) * scaleX - 0.5, 0), img.width - 1);
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const fx = sx - x0;
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[(y0 * img.width + x0) * 3 + c];
        const p01 = img.data[(y0 * img.width + x1) * 3 + c];
        const p10 = img.data[(y1 * img.width + x0) * 3 + c];
        const p11 = img.data[(y1 * img.width + x1) * 3 + c];
        const top = p00 + (p01 - p00) * fx;
        const bottom = p10 + (p11 - p10) * fx;
        out[(y * outW + x) * 3 + c] = Math.fround(top + (bottom - top) * fy);
      }
    }
  }
  return { width: outW, height: outH, data: out };
}

export function centerCrop(img: RgbImage, size: number): RgbImage {
  if (img.width < size || img.height < size) {
    throw new Error(`image ${img.width}x${img.height} is smaller than the ${size} crop`);
  }
  const x0 = Math.floor((img.width - size) / 2);
  const y0 = Math.floor((img.height - size) / 2);
  const out = new Float32Array(size * size * 3);
  for (let y = 0; y < size; y++) {
    const src = ((y0 + y) * img.width + x0) * 3;
    out.set(img.data.subarray(src, src + size * 3), y * size * 3);
  }
  return { width: size, height: size, data: out };
}

/** Resize the short side to ~(8/7 * inputSize), center-crop inputSize, and
 * subtract the per-channel means.  Returns an [S, S, 3] tensor. */
export function preprocess(
  img: RgbImage, inputSize: number, meanRgb: [number, number, number],
): Tensor {
  const short = Math.round((inputSize * 8) / 7);
  const scale = short / Math.min(img.width, img.height);
  const resized = bilinearResize(
    img,
    Math.max(inputSize, Math.round(img.width * scale)),
    Math.max(inputSize, Math.round(img.height * scale)),
  );
  const cropped = centerCrop(resized, inputSize);
  const out = new Float32Array(cropped.data.length);
  for (let i = 0; i < out.length; i += 3) {
    out[i] = Math.fround(cropped.data[i] - meanRgb[0]);
    out[i + 1] = Math.fround(cropped.data[i + 1] - meanRgb[1]);
    out[i + 2] = Math.fround(cropped.data[i + 2] - meanRgb[2]);
  }
  return tensorFrom([inputSize, inputSize, 3], out);
}
