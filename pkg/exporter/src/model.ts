/** VGG16-class architectures: layer tables, weight generation or loading,
 * and a forward pass that records every conv and fc activation (the final
 * classifier layer is not part of the feature stack). */

import * as fs from "fs";

import { conv3x3, dense, flatten, maxPool2, relu } from "./nn";
import { fillUniform, streamFor } from "./rng";
import { Tensor } from "./tensor";

export type LayerDef =
  | { type: "conv"; name: string; channels: number }
  | { type: "pool" }
  | { type: "fc"; name: string; units: number };

export interface ModelSpec {
  id: string;
  inputSize: number;
  /** Per-channel RGB means subtracted during preprocessing. */
  meanRgb: [number, number, number];
  layers: LayerDef[];
}

const VGG16_LAYERS: LayerDef[] = [
  { type: "conv", name: "conv1_1", channels: 64 },
  { type: "conv", name: "conv1_2", channels: 64 },
  { type: "pool" },
  { type: "conv", name: "conv2_1", channels: 128 },
  { type: "conv", name: "conv2_2", channels: 128 },
  { type: "pool" },
  { type: "conv", name: "conv3_1", channels: 256 },
  { type: "conv", name: "conv3_2", channels: 256 },
  { type: "conv", name: "conv3_3", channels: 256 },
  { type: "pool" },
  { type: "conv", name: "conv4_1", channels: 512 },
  { type: "conv", name: "conv4_2", channels: 512 },
  { type: "conv", name: "conv4_3", channels: 512 },
  { type: "pool" },
  { type: "conv", name: "conv5_1", channels: 512 },
  { type: "conv", name: "conv5_2", channels: 512 },
  { type: "conv", name: "conv5_3", channels: 512 },
  { type: "pool" },
  { type: "fc", name: "fc6", units: 4096 },
  { type: "fc", name: "fc7", units: 4096 },
];

const IMAGENET_MEAN: [number, number, number] = [123.68, 116.779, 103.939];

export const MODELS: Record<string, ModelSpec> = {
  vgg16: { id: "vgg16", inputSize: 224, meanRgb: IMAGENET_MEAN, layers: VGG16_LAYERS },
  // Same structural pattern at a fraction of the size; used for fast
  // pipeline tests where feature semantics do not matter.
  "vgg-test": {
    id: "vgg-test",
    inputSize: 32,
    meanRgb: IMAGENET_MEAN,
    layers: [
      { type: "conv", name: "conv1_1", channels: 4 },
      { type: "conv", name: "conv1_2", channels: 4 },
      { type: "pool" },
      { type: "conv", name: "conv2_1", channels: 8 },
      { type: "pool" },
      { type: "fc", name: "fc3", units: 16 },
      { type: "fc", name: "fc4", units: 16 },
    ],
  },
};

export function getModel(id: string): ModelSpec {
  const spec = MODELS[id];
  if (!spec) {
    throw new Error(`unknown model ${JSON.stringify(id)}; known: ${Object.keys(MODELS).join(", ")}`);
  }
  return spec;
}

export interface RecordedLayer {
  name: string;
  kind: "conv" | "fc";
  /** Spatial size at which the layer's activations are produced (conv only). */
  spatial?: number;
  /** Features the layer contributes after pooling: channels or units. */
  width: number;
  /** Input features feeding this layer's weights. */
  fanIn: number;
}

/** Walk the architecture and list every recorded layer with its shape. */
export function enumerateLayers(spec: ModelSpec): RecordedLayer[] {
  const out: RecordedLayer[] = [];
  let size = spec.inputSize;
  let channels = 3;
  let flat = 0;
  for (const layer of spec.layers) {
    if (layer.type === "conv") {
      out.push({ name: layer.name, kind: "conv", spatial: size,
                 width: layer.channels, fanIn: 9 * channels });
      channels = layer.channels;
      flat = size * size * channels;
    } else if (layer.type === "pool") {
      size = Math.floor(size / 2);
      flat = size * size * channels;
    } else {
      out.push({ name: layer.name, kind: "fc", width: layer.units, fanIn: flat });
      flat = layer.units;
    }
  }
  return out;
}

export function pooledDimension(spec: ModelSpec): number {
  return enumerateLayers(spec).reduce((total, layer) => total + layer.width, 0);
}

export interface LayerWeights {
  weights: Float32Array;   // conv: [9*inC, outC]; fc: [in, units]
  bias: Float32Array;
}

export type WeightMap = Map<string, LayerWeights>;

/** Seeded fan-scaled uniform weights; a stand-in when no pretrained weight
 * file is supplied.  Deterministic in (spec, seed). */
export function buildWeights(spec: ModelSpec, seed: number): WeightMap {
  const out: WeightMap = new Map();
  for (const layer of enumerateLayers(spec)) {
    const fanIn = layer.fanIn;
    const limit = Math.sqrt(6 / (fanIn + layer.width));
    const weights = new Float32Array(fanIn * layer.width);
    fillUniform(weights, streamFor(seed, `${spec.id}/${layer.name}`), limit);
    out.set(layer.name, { weights, bias: new Float32Array(layer.width) });
  }
  return out;
}

/** Weight file "FNEW": magic | version u32 | tensor count u32 | per tensor:
 * name (u32 len + UTF-8) | rows u32 | cols u32 | float32 weights row-major |
 * float32 bias[cols].  Little-endian throughout. */
export function loadWeightsFile(path: string, spec: ModelSpec): WeightMap {
  const buf = fs.readFileSync(path);
  let pos = 0;
  const need = (n: number) => {
    if (pos + n > buf.length) throw new Error(`weights file ${path} is truncated`);
    const start = pos;
    pos += n;
    return start;
  };
  if (buf.toString("latin1", need(4), 4) !== "FNEW") {
    throw new Error(`weights file ${path} has a bad magic`);
  }
  const version = buf.readUInt32LE(need(4));
  if (version !== 1) throw new Error(`weights file ${path} has unsupported version ${version}`);
  const count = buf.readUInt32LE(need(4));
  const out: WeightMap = new Map();
  for (let i = 0; i < count; i++) {
    const nameLen = buf.readUInt32LE(need(4));
    const name = buf.toString("utf8", need(nameLen), pos);
    const rows = buf.readUInt32LE(need(4));
    const cols = buf.readUInt32LE(need(4));
    const wStart = need(rows * cols * 4);
    const weights = new Float32Array(rows * cols);
    for (let j = 0; j < weights.length; j++) weights[j] = buf.readFloatLE(wStart + 4 * j);
    const bStart = need(cols * 4);
    const bias = new Float32Array(cols);
    for (let j = 0; j < cols; j++) bias[j] = buf.readFloatLE(bStart + 4 * j);
    out.set(name, { weights, bias });
  }
  for (const layer of enumerateLayers(spec)) {
    const entry = out.get(layer.name);
    if (!entry) throw new Error(`weights file ${path} is missing layer ${layer.name}`);
    if (entry.weights.length !== layer.fanIn * layer.width || entry.bias.length !== layer.width) {
      throw new Error(`weights file ${path}: layer ${layer.name} has the wrong shape`);
    }
  }
  return out;
}

export interface RecordedActivation {
  name: string;
  kind: "conv" | "fc";
  tensor: Tensor;
}

export interface ForwardOptions {
  /** Record fc activations before their ReLU instead of after. */
  preActivationFc?: boolean;
}

/** Run the network and capture each conv activation (post-ReLU, before any
 * pooling) and each fc activation (post-ReLU unless preActivationFc). */
export function forwardCollect(
  spec: ModelSpec,
  weights: WeightMap,
  image: Tensor,
  options: ForwardOptions = {},
): RecordedActivation[] {
  const [h, w, c] = image.shape;
  if (h !== spec.inputSize || w !== spec.inputSize || c !== 3) {
    throw new Error(
      `model ${spec.id} expects a ${spec.inputSize}x${spec.inputSize}x3 input, got ${image.shape}`);
  }
  const recorded: RecordedActivation[] = [];
  let current = image;
  let flattened = false;
  for (const layer of spec.layers) {
    if (layer.type === "conv") {
      const lw = weights.get(layer.name)!;
      current = relu(conv3x3(current, lw.weights, lw.bias));
      recorded.push({ name: layer.name, kind: "conv", tensor: current });
    } else if (layer.type === "pool") {
      current = maxPool2(current);
    } else {
      if (!flattened) {
        current = flatten(current);
        flattened = true;
      }
      const lw = weights.get(layer.name)!;
      const pre = dense(current, lw.weights, lw.bias);
      const post = relu(pre);
      recorded.push({ name: layer.name, kind: "fc",
                      tensor: options.preActivationFc ? pre : post });
      current = post;
    }
  }
  return recorded;
}
