/**
 * Assemble SSFR frame records from backend outputs: resample feature
 * maps to the common patch grid, select an attention layer, average
 * heads, renormalize rows, and build a contiguous instance label map
 * from scored masks.
 */
import * as fs from "node:fs";
import * as path from "node:path";

import { AttentionLayer, BackendFrame, FeatureGrid, InstanceMask, ModelBackend } from "./backend.js";
import { ContainerError, FrameRecord, validateFrame, writeFrame, writeManifest } from "./container.js";

export interface ExportConfig {
  outDir: string;
  patchSize: number;
  /** which reconstruction-decoder layer's state attention to export */
  attentionLayer: number;
}

/** Mean-pool a native feature grid onto the target patch grid. */
export function resampleFeatures(g: FeatureGrid, h: number, w: number): Float32Array {
  const out = new Float32Array(h * w * g.d);
  const counts = new Float32Array(h * w);
  for (let i = 0; i < g.h; i++) {
    const ti = Math.min(h - 1, Math.floor((i * h) / g.h));
    for (let j = 0; j < g.w; j++) {
      const tj = Math.min(w - 1, Math.floor((j * w) / g.w));
      const cell = ti * w + tj;
      counts[cell] += 1;
      for (let c = 0; c < g.d; c++) {
        out[cell * g.d + c] += g.data[(i * g.w + j) * g.d + c];
      }
    }
  }
  for (let cell = 0; cell < h * w; cell++) {
    if (counts[cell] === 0) {
      throw new ContainerError(`feature grid ${g.h}x${g.w} leaves patch cell ${cell} empty`);
    }
    for (let c = 0; c < g.d; c++) out[cell * g.d + c] /= counts[cell];
  }
  return out;
}

/**
 * Head-mean the chosen layer's attention, sum-pool its mass onto the
 * patch grid (mass is additive, unlike features), and renormalize each
 * row to exactly unit sum.
 */
export function exportAttention(layer: AttentionLayer, h: number, w: number): Float32Array {
  const { nState, heads } = layer;
  const out = new Float32Array(nState * h * w);
  const src = layer.h * layer.w;
  for (let k = 0; k < nState; k++) {
    for (let i = 0; i < layer.h; i++) {
      const ti = Math.min(h - 1, Math.floor((i * h) / layer.h));
      for (let j = 0; j < layer.w; j++) {
        const tj = Math.min(w - 1, Math.floor((j * w) / layer.w));
        let v = 0;
        for (let hd = 0; hd < heads; hd++) {
          v += layer.data[(hd * nState + k) * src + i * layer.w + j];
        }
        out[k * h * w + ti * w + tj] += v / heads;
      }
    }
    let sum = 0;
    for (let p = 0; p < h * w; p++) {
      const v = out[k * h * w + p];
      if (v < 0) throw new ContainerError(`negative attention mass in state row ${k}`);
      sum += v;
    }
    if (sum <= 0) throw new ContainerError(`state row ${k} carries no attention mass`);
    for (let p = 0; p < h * w; p++) out[k * h * w + p] /= sum;
  }
  return out;
}

/**
 * Paint scored masks into a single label map; overlapping pixels go to
 * the higher-confidence mask; labels are then compacted to 1..n in
 * descending-confidence order, dropping masks that lost every pixel.
 */
export function buildLabelMap(masks: InstanceMask[], H: number, W: number): Uint16Array {
  const L = new Uint16Array(H * W);
  const order = masks
    .map((m, idx) => ({ m, idx }))
    .sort((a, b) => a.m.score - b.m.score || b.idx - a.idx);
  // ascending score: higher-confidence masks paint last and win overlaps
  for (const { m, idx } of order) {
    if (m.data.length !== H * W) {
      throw new ContainerError(`mask ${idx}: expected ${H * W} pixels, got ${m.data.length}`);
    }
    const provisional = idx + 1;
    for (let p = 0; p < H * W; p++) {
      if (m.data[p]) L[p] = provisional;
    }
  }
  const byConfidence = [...order].reverse();
  const remap = new Map<number, number>();
  const surviving = new Set<number>(L);
  let next = 1;
  for (const { idx } of byConfidence) {
    if (surviving.has(idx + 1)) remap.set(idx + 1, next++);
  }
  for (let p = 0; p < H * W; p++) {
    if (L[p]) L[p] = remap.get(L[p])!;
  }
  return L;
}

export function assembleFrame(frame: BackendFrame, t: number, cfg: ExportConfig): FrameRecord {
  const { width: W, height: H } = frame;
  if (H % cfg.patchSize !== 0 || W % cfg.patchSize !== 0) {
    throw new ContainerError(`patch size ${cfg.patchSize} must divide ${H}x${W}`);
  }
  const h = H / cfg.patchSize;
  const w = W / cfg.patchSize;
  const layer = frame.stateAttention[cfg.attentionLayer];
  if (!layer) {
    throw new ContainerError(
      `attention layer ${cfg.attentionLayer} not available (${frame.stateAttention.length} layers)`);
  }
  const rec: FrameRecord = {
    t, H, W, patchSize: cfg.patchSize,
    K: frame.intrinsics, P: frame.pose, X: frame.pointmap,
    F3d: resampleFeatures(frame.features3d, h, w), d3: frame.features3d.d,
    F2d: resampleFeatures(frame.features2d, h, w), d2: frame.features2d.d,
    A: exportAttention(layer, h, w), nS: layer.nState,
    L: buildLabelMap(frame.masks, H, W),
  };
  validateFrame(rec);
  return rec;
}

export function exportSequence(backend: ModelBackend, cfg: ExportConfig): string[] {
  fs.mkdirSync(cfg.outDir, { recursive: true });
  const rels: string[] = [];
  for (let t = 0; t < backend.frameCount(); t++) {
    const rec = assembleFrame(backend.nextFrame(t), t, cfg);
    const rel = `frame_${String(t).padStart(5, "0")}.ssfr`;
    writeFrame(rec, path.join(cfg.outDir, rel));
    rels.push(rel);
  }
  writeManifest(cfg.outDir, rels);
  return rels;
}
