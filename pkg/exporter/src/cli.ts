#!/usr/bin/env node
/** Command line: `export` dumps activations for a directory of images,
 * `enumerate` prints a model's recorded layers and pooled dimension.
 * Exit codes: 0 success, 2 bad arguments, 3 I/O failure. */

import { exportDirectory } from "./export";
import { enumerateLayers, getModel, pooledDimension } from "./model";

const USAGE = `usage:
  fnemm-export export --images <dir> --out <dir> [--model vgg16|vgg-test]
                      [--seed N] [--weights file.fnew] [--split train|val|test]
                      [--captions captions.json] [--pre-activation-fc]
  fnemm-export enumerate [--model vgg16]

export writes one .fnea activation file per image plus manifest-fragment.jsonl
(and errors.json when images were skipped).  Without --weights the network
uses seeded deterministic weights: the exported files exercise the format and
pipeline, not ImageNet semantics.`;

interface Flags {
  [key: string]: string | boolean;
}

function parseFlags(argv: string[]): Flags {
  const flags: Flags = {};
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith("--")) throw new Error(`unexpected argument ${arg}`);
    const name = arg.slice(2);
    if (name === "pre-activation-fc") {
      flags[name] = true;
    } else {
      const value = argv[++i];
      if (value === undefined) throw new Error(`flag ${arg} needs a value`);
      flags[name] = value;
    }
  }
  return flags;
}

function requireString(flags: Flags, name: string): string {
  const value = flags[name];
  if (typeof value !== "string") throw new Error(`--${name} is required`);
  return value;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "enumerate") {
      const flags = parseFlags(rest);
      const spec = getModel(typeof flags.model === "string" ? flags.model : "vgg16");
      for (const layer of enumerateLayers(spec)) {
        const shape = layer.kind === "conv"
          ? `${layer.spatial}x${layer.spatial}x${layer.width}`
          : `${layer.width}`;
        console.log(`${layer.name.padEnd(10)} ${layer.kind.padEnd(5)} ${shape}`);
      }
      console.log(`pooled dimension: ${pooledDimension(spec)}`);
      return 0;
    }
    if (command === "export") {
      const flags = parseFlags(rest);
      const seed = flags.seed === undefined ? 0 : Number(flags.seed);
      if (!Number.isInteger(seed)) throw new Error("--seed must be an integer");
      const result = exportDirectory({
        imagesDir: requireString(flags, "images"),
        outDir: requireString(flags, "out"),
        model: typeof flags.model === "string" ? flags.model : undefined,
        seed,
        weightsPath: typeof flags.weights === "string" ? flags.weights : undefined,
        split: typeof flags.split === "string" ? flags.split : undefined,
        captionsPath: typeof flags.captions === "string" ? flags.captions : undefined,
        preActivationFc: flags["pre-activation-fc"] === true,
      });
      console.log(`exported ${result.written.length} image(s), `
        + `pooled dimension ${result.pooledDimension}`);
      console.log(`wrote ${result.manifestPath}`);
      if (result.errorsPath) console.log(`skipped ${result.skipped.length}, see ${result.errorsPath}`);
      return 0;
    }
    process.stderr.write(USAGE + "\n");
    return command === undefined || command === "--help" || command === "help" ? 0 : 2;
  } catch (error) {
    const err = error as NodeJS.ErrnoException;
    process.stderr.write(`error: ${err.message}\n`);
    return err.code === "ENOENT" || err.code === "EACCES" || err.code === "EISDIR" ? 3 : 2;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
