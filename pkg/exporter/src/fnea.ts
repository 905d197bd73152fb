/** FNEA activation-file writer (and a reader used by the tests).
 *
 * Layout, little-endian: magic "FNEA" | version u32 | image_id (u32 len +
 * UTF-8) | layer_count u32 | per layer: name (u32 len + UTF-8) | kind u8
 * (0=conv, 1=fc) | conv: H u32, W u32, C u32 / fc: N u32 | float32 payload
 * row-major. */

import * as fs from "fs";

import { RecordedActivation } from "./model";
import { numel } from "./tensor";

const MAGIC = "FNEA";
const VERSION = 1;
const KIND_CODE = { conv: 0, fc: 1 } as const;

function packString(text: string): Buffer {
  const raw = Buffer.from(text, "utf8");
  const out = Buffer.alloc(4 + raw.length);
  out.writeUInt32LE(raw.length, 0);
  raw.copy(out, 4);
  return out;
}

function u32(value: number): Buffer {
  const out = Buffer.alloc(4);
  out.writeUInt32LE(value, 0);
  return out;
}

export function encodeFnea(imageId: string, layers: RecordedActivation[]): Buffer {
  if (layers.length === 0) {
    throw new Error("refusing to encode an activation set with no layers");
  }
  const parts: Buffer[] = [
    Buffer.from(MAGIC, "latin1"),
    u32(VERSION),
    packString(imageId),
    u32(layers.length),
  ];
  for (const layer of layers) {
    parts.push(packString(layer.name));
    parts.push(Buffer.from([KIND_CODE[layer.kind]]));
    const shape = layer.tensor.shape;
    if (layer.kind === "conv") {
      if (shape.length !== 3) throw new Error(`conv layer ${layer.name} must be 3-D`);
      parts.push(u32(shape[0]), u32(shape[1]), u32(shape[2]));
    } else {
      if (shape.length !== 1) throw new Error(`fc layer ${layer.name} must be 1-D`);
      parts.push(u32(shape[0]));
    }
    const data = layer.tensor.data;
    if (data.length !== numel(shape)) {
      throw new Error(`layer ${layer.name} payload does not match its shape`);
    }
    const payload = Buffer.alloc(data.length * 4);
    for (let i = 0; i < data.length; i++) payload.writeFloatLE(data[i], i * 4);
    parts.push(payload);
  }
  return Buffer.concat(parts);
}

export function writeFnea(path: string, imageId: string, layers: RecordedActivation[]): void {
  const tmp = `${path}.tmp`;
  fs.writeFileSync(tmp, encodeFnea(imageId, layers));
  fs.renameSync(tmp, path);
}

export interface ParsedLayer {
  name: string;
  kind: "conv" | "fc";
  shape: number[];
  data: Float32Array;
}

export interface ParsedFnea {
  imageId: string;
  layers: ParsedLayer[];
}

/** Strict parse of an FNEA file; throws on any malformed content. */
export function readFnea(path: string): ParsedFnea {
  const buf = fs.readFileSync(path);
  let pos = 0;
  const need = (n: number) => {
    if (pos + n > buf.length) throw new Error(`${path}: truncated at offset ${pos}`);
    const start = pos;
    pos += n;
    return start;
  };
  const readU32 = () => buf.readUInt32LE(need(4));
  const readString = () => {
    const len = readU32();
    return buf.toString("utf8", need(len), pos);
  };
  if (buf.toString("latin1", need(4), 4) !== MAGIC) throw new Error(`${path}: bad magic`);
  const version = readU32();
  if (version !== VERSION) throw new Error(`${path}: unsupported version ${version}`);
  const imageId = readString();
  const layerCount = readU32();
  if (layerCount === 0) throw new Error(`${path}: zero layers`);
  const layers: ParsedLayer[] = [];
  for (let i = 0; i < layerCount; i++) {
    const name = readString();
    const code = buf[need(1)];
    if (code !== 0 && code !== 1) throw new Error(`${path}: unknown kind code ${code}`);
    const kind = code === 0 ? "conv" : "fc";
    const shape = kind === "conv" ? [readU32(), readU32(), readU32()] : [readU32()];
    const count = numel(shape);
    const start = need(count * 4);
    const data = new Float32Array(count);
    for (let j = 0; j < count; j++) data[j] = buf.readFloatLE(start + 4 * j);
    layers.push({ name, kind, shape, data });
  }
  if (pos !== buf.length) throw new Error(`${path}: trailing bytes`);
  return { imageId, layers };
}
