/**
 * SSFR per-frame binary container, bit-exact with the engine's reader.
 *
 * Layout (little-endian, row-major):
 *   magic "SSFR" (4 bytes) | version u32
 *   t, H, W, patch_size, d3, d2, n_s  (7 × u32)
 *   dtype codes (7 × u8), payload order: K, P, X, F3d, F2d, A, L
 *   payloads: K f64[9], P f64[16], X f32[H*W*3], F3d f32[h*w*d3],
 *             F2d f32[h*w*d2], A f32[n_s*h*w], L u16[H*W]
 */
import * as fs from "node:fs";
import * as path from "node:path";

export const MAGIC = "SSFR";
export const VERSION = 1;

/** dtype codes as stored in the header: 1 = f32, 2 = f64, 3 = u16 */
const DTYPE_CODES = [2, 2, 1, 1, 1, 1, 3] as const;
export const HEADER_SIZE = 4 + 4 + 7 * 4 + 7;

export interface FrameRecord {
  t: number;
  H: number;
  W: number;
  patchSize: number;
  /** 3×3 intrinsics, row-major */
  K: Float64Array;
  /** 4×4 camera-to-world, row-major, bottom row (0,0,0,1) */
  P: Float64Array;
  /** H×W×3 world pointmap */
  X: Float32Array;
  /** h×w×d3 geometric features */
  F3d: Float32Array;
  d3: number;
  /** h×w×d2 semantic features */
  F2d: Float32Array;
  d2: number;
  /** nS×(h·w) state attention, rows sum to 1 */
  A: Float32Array;
  nS: number;
  /** H×W instance labels, 0 = background, contiguous 1..n */
  L: Uint16Array;
}

export class ContainerError extends Error {}

export function gridDims(rec: Pick<FrameRecord, "H" | "W" | "patchSize">): [number, number] {
  if (rec.patchSize <= 0 || rec.H % rec.patchSize !== 0 || rec.W % rec.patchSize !== 0) {
    throw new ContainerError(`patch size ${rec.patchSize} must divide ${rec.H}x${rec.W}`);
  }
  return [rec.H / rec.patchSize, rec.W / rec.patchSize];
}

function expectLength(name: string, got: number, want: number): void {
  if (got !== want) {
    throw new ContainerError(`${name}: expected ${want} elements, got ${got}`);
  }
}

export function encodeFrame(rec: FrameRecord): Buffer {
  const [h, w] = gridDims(rec);
  expectLength("K", rec.K.length, 9);
  expectLength("P", rec.P.length, 16);
  expectLength("X", rec.X.length, rec.H * rec.W * 3);
  expectLength("F3d", rec.F3d.length, h * w * rec.d3);
  expectLength("F2d", rec.F2d.length, h * w * rec.d2);
  expectLength("A", rec.A.length, rec.nS * h * w);
  expectLength("L", rec.L.length, rec.H * rec.W);

  const payloadBytes =
    rec.K.byteLength + rec.P.byteLength + rec.X.byteLength +
    rec.F3d.byteLength + rec.F2d.byteLength + rec.A.byteLength + rec.L.byteLength;
  const buf = Buffer.alloc(HEADER_SIZE + payloadBytes);
  const view = new DataView(buf.buffer, buf.byteOffset);

  buf.write(MAGIC, 0, "ascii");
  view.setUint32(4, VERSION, true);
  const ints = [rec.t, rec.H, rec.W, rec.patchSize, rec.d3, rec.d2, rec.nS];
  ints.forEach((v, i) => view.setUint32(8 + 4 * i, v >>> 0, true));
  DTYPE_CODES.forEach((c, i) => view.setUint8(36 + i, c));

  let off = HEADER_SIZE;
  for (const v of rec.K) { view.setFloat64(off, v, true); off += 8; }
  for (const v of rec.P) { view.setFloat64(off, v, true); off += 8; }
  for (const arr of [rec.X, rec.F3d, rec.F2d, rec.A]) {
    for (let i = 0; i < arr.length; i++) { view.setFloat32(off, arr[i], true); off += 4; }
  }
  for (let i = 0; i < rec.L.length; i++) { view.setUint16(off, rec.L[i], true); off += 2; }
  return buf;
}

export function decodeFrame(buf: Buffer): FrameRecord {
  if (buf.length < HEADER_SIZE) throw new ContainerError("truncated header");
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  if (buf.toString("ascii", 0, 4) !== MAGIC) throw new ContainerError("bad magic");
  if (view.getUint32(4, true) !== VERSION) throw new ContainerError("unsupported version");
  const [t, H, W, patchSize, d3, d2, nS] =
    Array.from({ length: 7 }, (_, i) => view.getUint32(8 + 4 * i, true));
  for (let i = 0; i < 7; i++) {
    if (view.getUint8(36 + i) !== DTYPE_CODES[i]) {
      throw new ContainerError(`unexpected dtype code at slot ${i}`);
    }
  }
  const [h, w] = gridDims({ H, W, patchSize });
  const expected = HEADER_SIZE + 9 * 8 + 16 * 8 +
    (H * W * 3 + h * w * d3 + h * w * d2 + nS * h * w) * 4 + H * W * 2;
  if (buf.length < expected) throw new ContainerError("truncated payload");

  let off = HEADER_SIZE;
  const f64 = (n: number) => {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) { out[i] = view.getFloat64(off, true); off += 8; }
    return out;
  };
  const f32 = (n: number) => {
    const out = new Float32Array(n);
    for (let i = 0; i < n; i++) { out[i] = view.getFloat32(off, true); off += 4; }
    return out;
  };
  const u16 = (n: number) => {
    const out = new Uint16Array(n);
    for (let i = 0; i < n; i++) { out[i] = view.getUint16(off, true); off += 2; }
    return out;
  };
  const rec: FrameRecord = {
    t, H, W, patchSize, d3, d2, nS,
    K: f64(9), P: f64(16), X: f32(H * W * 3),
    F3d: f32(h * w * d3), F2d: f32(h * w * d2),
    A: f32(nS * h * w), L: u16(H * W),
  };
  if (off !== buf.length) throw new ContainerError(`${buf.length - off} trailing bytes`);
  return rec;
}

/** Sanity checks mirroring the engine-side validator; throws on violation. */
export function validateFrame(rec: FrameRecord): void {
  const [h, w] = gridDims(rec);
  if (rec.t < 0) throw new ContainerError("negative frame index");
  // rotation block orthonormal with det +1, bottom row (0,0,0,1)
  const R = [0, 1, 2].map((r) => [0, 1, 2].map((c) => rec.P[4 * r + c]));
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      const dot = R[0][i] * R[0][j] + R[1][i] * R[1][j] + R[2][i] * R[2][j];
      if (Math.abs(dot - (i === j ? 1 : 0)) > 1e-4) {
        throw new ContainerError("pose rotation not orthonormal");
      }
    }
  }
  const det =
    R[0][0] * (R[1][1] * R[2][2] - R[1][2] * R[2][1]) -
    R[0][1] * (R[1][0] * R[2][2] - R[1][2] * R[2][0]) +
    R[0][2] * (R[1][0] * R[2][1] - R[1][1] * R[2][0]);
  if (Math.abs(det - 1) > 1e-4) throw new ContainerError("pose determinant != +1");
  const bottom = [rec.P[12], rec.P[13], rec.P[14], rec.P[15]];
  if (bottom.some((v, i) => Math.abs(v - (i === 3 ? 1 : 0)) > 1e-6)) {
    throw new ContainerError("pose bottom row must be (0,0,0,1)");
  }
  for (const [name, arr] of [["K", rec.K], ["P", rec.P], ["X", rec.X],
                             ["F3d", rec.F3d], ["F2d", rec.F2d], ["A", rec.A]] as const) {
    for (let i = 0; i < arr.length; i++) {
      if (!Number.isFinite(arr[i])) throw new ContainerError(`${name}: non-finite value`);
    }
  }
  for (let k = 0; k < rec.nS; k++) {
    let s = 0;
    for (let p = 0; p < h * w; p++) {
      const v = rec.A[k * h * w + p];
      if (v < 0) throw new ContainerError("negative attention weight");
      s += v;
    }
    if (Math.abs(s - 1) > 1e-4) throw new ContainerError(`attention row ${k} sums to ${s}`);
  }
  let maxLabel = 0;
  for (let i = 0; i < rec.L.length; i++) maxLabel = Math.max(maxLabel, rec.L[i]);
  const present = new Set<number>(rec.L);
  for (let lab = 0; lab <= maxLabel; lab++) {
    if (!present.has(lab)) throw new ContainerError(`labels not contiguous: ${lab} missing`);
  }
}

export function writeFrame(rec: FrameRecord, filePath: string): void {
  fs.writeFileSync(filePath, encodeFrame(rec));
}

export function writeManifest(seqDir: string, relPaths: string[]): void {
  fs.writeFileSync(path.join(seqDir, "manifest.txt"), relPaths.map((p) => p + "\n").join(""));
}
