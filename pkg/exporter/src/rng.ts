/** Deterministic weight generation. Each tensor gets its own stream keyed by
 * (seed, tensor name), so adding or reordering layers never shifts the
 * values of the others. */

export function fnv1a32(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

/** splitmix32: tiny, well-mixed, and stable across platforms. */
export function splitmix32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x9e3779b9) >>> 0;
    let z = state;
    z = Math.imul(z ^ (z >>> 16), 0x21f0aaad);
    z = Math.imul(z ^ (z >>> 15), 0x735a2d97);
    z = z ^ (z >>> 15);
    return (z >>> 0) / 4294967296;
  };
}

export function streamFor(seed: number, name: string): () => number {
  return splitmix32((seed ^ fnv1a32(name)) >>> 0);
}

/** Fill with uniform(-limit, limit) values, rounded to float32. */
export function fillUniform(out: Float32Array, next: () => number, limit: number): void {
  for (let i = 0; i < out.length; i++) {
    out[i] = Math.fround((2 * next() - 1) * limit);
  }
}
