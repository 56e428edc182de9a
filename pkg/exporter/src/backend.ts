/**
 * Model backend interface: what an upstream inference stack must supply
 * per frame so the exporter can assemble an SSFR record.
 *
 * A real deployment implements this over tfjs/onnxruntime sessions (a
 * recurrent reconstruction model for pose/pointmap/geometric features/
 * state attention, a segmenter for masks, a 2D feature extractor); the
 * bundled procedural backend produces identically shaped outputs for
 * offline testing.
 */

export interface FeatureGrid {
  /** native grid rows */
  h: number;
  /** native grid cols */
  w: number;
  /** channels */
  d: number;
  /** h×w×d row-major */
  data: Float32Array;
}

export interface AttentionLayer {
  /** recurrent state tokens */
  nState: number;
  /** attention heads */
  heads: number;
  /** native attention grid rows */
  h: number;
  /** native attention grid cols */
  w: number;
  /** heads×nState×(h·w), each row non-negative, roughly sum-1 */
  data: Float32Array;
}

export interface InstanceMask {
  /** segmenter confidence; overlaps resolve toward the higher score */
  score: number;
  /** H×W, nonzero = inside */
  data: Uint8Array;
}

export interface BackendFrame {
  width: number;
  height: number;
  /** 3×3 row-major intrinsics */
  intrinsics: Float64Array;
  /** 4×4 row-major camera-to-world pose */
  pose: Float64Array;
  /** H×W×3 world pointmap */
  pointmap: Float32Array;
  features3d: FeatureGrid;
  features2d: FeatureGrid;
  /** one entry per reconstruction-decoder layer */
  stateAttention: AttentionLayer[];
  masks: InstanceMask[];
}

export interface ModelBackend {
  readonly name: string;
  frameCount(): number;
  /** Sequential access: the reconstruction model is recurrent. */
  nextFrame(t: number): BackendFrame;
}
