/** Dense row-major float32 tensors. Conv activations are [H, W, C]; fully
 * connected activations are [N]. */

export interface Tensor {
  shape: number[];
  data: Float32Array;
}

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function zeros(shape: number[]): Tensor {
  return { shape: [...shape], data: new Float32Array(numel(shape)) };
}

export function tensorFrom(shape: number[], data: Float32Array): Tensor {
  if (data.length !== numel(shape)) {
    throw new Error(`data length ${data.length} does not match shape [${shape}]`);
  }
  return { shape: [...shape], data };
}
