/** Batch export: run every image in a directory through the network and
 * write one FNEA file per image plus a manifest fragment.  Unreadable
 * images are skipped with a warning and listed in an error report. */

import * as fs from "fs";
import * as path from "path";

import { writeFnea } from "./fnea";
import { decodePng, preprocess } from "./image";
import {
  ModelSpec,
  WeightMap,
  buildWeights,
  forwardCollect,
  getModel,
  loadWeightsFile,
} from "./model";

export interface ExportOptions {
  imagesDir: string;
  outDir: string;
  model?: string;
  seed?: number;
  weightsPath?: string;
  /** When set, manifest records carry this split (full records need one). */
  split?: string;
  /** JSON file mapping image_id to a list of captions. */
  captionsPath?: string;
  preActivationFc?: boolean;
  log?: (message: string) => void;
}

export interface ExportResult {
  written: string[];
  skipped: { file: string; reason: string }[];
  manifestPath: string;
  errorsPath?: string;
  pooledDimension: number;
}

function loadCaptions(captionsPath: string): Record<string, string[]> {
  const parsed = JSON.parse(fs.readFileSync(captionsPath, "utf8"));
  if (parsed === null || typeof parsed !== "object" || Array.isArray(parsed)) {
    throw new Error(`captions file ${captionsPath} must hold a JSON object`);
  }
  for (const [key, value] of Object.entries(parsed)) {
    if (!Array.isArray(value) || !value.every((v) => typeof v === "string")) {
      throw new Error(`captions for ${key} must be a list of strings`);
    }
  }
  return parsed as Record<string, string[]>;
}

export function listImages(imagesDir: string): string[] {
  return fs.readdirSync(imagesDir)
    .filter((name) => name.toLowerCase().endsWith(".png"))
    .sort();
}

export function exportDirectory(options: ExportOptions): ExportResult {
  const log = options.log ?? ((message: string) => process.stderr.write(message + "\n"));
  const spec: ModelSpec = getModel(options.model ?? "vgg16");
  const weights: WeightMap = options.weightsPath
    ? loadWeightsFile(options.weightsPath, spec)
    : buildWeights(spec, options.seed ?? 0);
  const captions = options.captionsPath ? loadCaptions(options.captionsPath) : undefined;

  const files = listImages(options.imagesDir);
  if (files.length === 0) {
    throw new Error(`no .png images found in ${options.imagesDir}`);
  }
  fs.mkdirSync(options.outDir, { recursive: true });

  const written: string[] = [];
  const skipped: { file: string; reason: string }[] = [];
  const manifestLines: string[] = [];
  let pooledDimension = 0;
  for (const file of files) {
    const imageId = path.parse(file).name;
    try {
      const image = decodePng(path.join(options.imagesDir, file));
      const input = preprocess(image, spec.inputSize, spec.meanRgb);
      const recorded = forwardCollect(spec, weights, input,
                                      { preActivationFc: options.preActivationFc });
      pooledDimension = recorded.reduce(
        (total, layer) => total + layer.tensor.shape[layer.tensor.shape.length - 1], 0);
      const outName = `${imageId}.fnea`;
      writeFnea(path.join(options.outDir, outName), imageId, recorded);
      written.push(outName);
      const record: Record<string, unknown> = {
        image_id: imageId,
        activation_path: outName,
      };
      if (options.split) record.split = options.split;
      if (captions) {
        if (captions[imageId]) record.captions = captions[imageId];
        else log(`warning: no captions for ${imageId}`);
      }
      manifestLines.push(JSON.stringify(record));
    } catch (error) {
      const reason = error instanceof Error ? error.message : String(error);
      log(`warning: skipping ${file}: ${reason}`);
      skipped.push({ file, reason });
    }
  }

  const manifestPath = path.join(options.outDir, "manifest-fragment.jsonl");
  fs.writeFileSync(manifestPath, manifestLines.map((line) => line + "\n").join(""));

  let errorsPath: string | undefined;
  if (skipped.length > 0) {
    errorsPath = path.join(options.outDir, "errors.json");
    fs.writeFileSync(errorsPath, JSON.stringify({ skipped }, null, 2) + "\n");
  }
  return { written, skipped, manifestPath, errorsPath, pooledDimension };
}
