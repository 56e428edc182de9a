/**
 * Procedural test backend: a deterministic camera sweep over two
 * rectangular objects on a depth plane, emitting foundation-shaped
 * outputs (pose, pointmap, native-grid features, multi-head state
 * attention, scored masks). Stands in for real checkpoints so the
 * export path and the downstream engine can be exercised offline.
 */
import { AttentionLayer, BackendFrame, FeatureGrid, InstanceMask, ModelBackend } from "./backend.js";

export interface ProceduralOptions {
  frames: number;
  seed: number;
  width?: number;
  height?: number;
}

/** mulberry32: small deterministic PRNG */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

interface WorldRect {
  x0: number; x1: number; y0: number; y1: number; z: number;
}

const OBJECTS: WorldRect[] = [
  { x0: 0.2, x1: 0.8, y0: -0.6, y1: 0.0, z: 2.0 },
  { x0: -0.7, x1: -0.1, y0: 0.2, y1: 0.7, z: 2.0 },
];
const BACKGROUND_Z = 4.0;
const N_STATE = 6;
const HEADS = 2;
const LAYERS = 2;
const D3 = 6;
const D2 = 4;
const NATIVE_GRID = 16;   // finer than the target patch grid on purpose
const CAMERA_STEP = 0.08; // world units of +x travel per frame

function signature(rng: () => number, d: number): Float32Array {
  const v = new Float32Array(d);
  for (let i = 0; i < d; i++) v[i] = rng() * 2 - 1;
  return v;
}

export class ProceduralBackend implements ModelBackend {
  readonly name = "procedural";
  private readonly opts: Required<ProceduralOptions>;
  private readonly sig3: Float32Array[];
  private readonly sig2: Float32Array[];
  private readonly noiseSeed: number;

  constructor(opts: ProceduralOptions) {
    this.opts = { width: 64, height: 64, ...opts };
    const rng = mulberry32(opts.seed * 2654435761 + 1);
    // index 0 = background signature, then one per object
    this.sig3 = [0, ...OBJECTS.keys()].map(() => signature(rng, D3));
    this.sig2 = [0, ...OBJECTS.keys()].map(() => signature(rng, D2));
    this.noiseSeed = Math.floor(rng() * 2 ** 31);
  }

  frameCount(): number {
    return this.opts.frames;
  }

  nextFrame(t: number): BackendFrame {
    const { width: W, height: H } = this.opts;
    const fx = W, fy = H, cx = W / 2, cy = H / 2;
    const ex = CAMERA_STEP * t;
    const rng = mulberry32((this.noiseSeed ^ (t * 0x9e3779b9)) >>> 0);

    const intrinsics = Float64Array.from([fx, 0, cx, 0, fy, cy, 0, 0, 1]);
    const pose = Float64Array.from([
      1, 0, 0, ex,
      0, 1, 0, 0,
      0, 0, 1, 0,
      0, 0, 0, 1,
    ]);

    // per-pixel owner (0 = background) and world pointmap
    const owner = new Uint8Array(H * W);
    const pointmap = new Float32Array(H * W * 3);
    for (let v = 0; v < H; v++) {
      for (let u = 0; u < W; u++) {
        const p = v * W + u;
        let z = BACKGROUND_Z;
        for (let o = 0; o < OBJECTS.length; o++) {
          const r = OBJECTS[o];
          const wx = ((u + 0.5 - cx) / fx) * r.z + ex;
          const wy = ((v + 0.5 - cy) / fy) * r.z;
          if (wx >= r.x0 && wx <= r.x1 && wy >= r.y0 && wy <= r.y1) {
            owner[p] = o + 1;
            z = r.z;
            break;
          }
        }
        pointmap[3 * p] = ((u + 0.5 - cx) / fx) * z + ex;
        pointmap[3 * p + 1] = ((v + 0.5 - cy) / fy) * z;
        pointmap[3 * p + 2] = z;
      }
    }

    const masks: InstanceMask[] = OBJECTS.map((_, o) => {
      const data = new Uint8Array(H * W);
      for (let p = 0; p < H * W; p++) data[p] = owner[p] === o + 1 ? 1 : 0;
      return { score: 0.9 - 0.1 * o, data };
    });

    const nativeOwner = (i: number, j: number): number => {
      const pv = Math.floor(((i + 0.5) * H) / NATIVE_GRID);
      const pu = Math.floor(((j + 0.5) * W) / NATIVE_GRID);
      return owner[pv * W + pu];
    };
    const grid = (sigs: Float32Array[], d: number): FeatureGrid => {
      const data = new Float32Array(NATIVE_GRID * NATIVE_GRID * d);
      for (let i = 0; i < NATIVE_GRID; i++) {
        for (let j = 0; j < NATIVE_GRID; j++) {
          const sig = sigs[nativeOwner(i, j)];
          for (let c = 0; c < d; c++) {
            data[(i * NATIVE_GRID + j) * d + c] = sig[c] + (rng() * 2 - 1) * 0.02;
          }
        }
      }
      return { h: NATIVE_GRID, w: NATIVE_GRID, d, data };
    };

    // two decoder layers of multi-head state attention on an 8x8 grid;
    // state pairs (0,1), (2,3) concentrate on the two objects, (4,5)
    // on the background
    const ag = 8;
    const stateAttention: AttentionLayer[] = [];
    for (let layer = 0; layer < LAYERS; layer++) {
      const data = new Float32Array(HEADS * N_STATE * ag * ag);
      for (let hd = 0; hd < HEADS; hd++) {
        for (let k = 0; k < N_STATE; k++) {
          const target = Math.floor(k / 2); // 0, 1 = objects; 2 = background
          for (let i = 0; i < ag; i++) {
            for (let j = 0; j < ag; j++) {
              const pv = Math.floor(((i + 0.5) * H) / ag);
              const pu = Math.floor(((j + 0.5) * W) / ag);
              const own = owner[pv * W + pu];
              const onTarget = target < OBJECTS.length ? own === target + 1 : own === 0;
              let mass = 0.05 + rng() * 0.01 + (onTarget ? 1.0 : 0);
              mass *= layer === 0 ? 1 : 0.7 + 0.6 * rng(); // layers differ
              data[(hd * N_STATE + k) * ag * ag + i * ag + j] = mass;
            }
          }
        }
      }
      stateAttention.push({ nState: N_STATE, heads: HEADS, h: ag, w: ag, data });
    }

    return {
      width: W, height: H, intrinsics, pose, pointmap,
      features3d: grid(this.sig3, D3),
      features2d: grid(this.sig2, D2),
      stateAttention, masks,
    };
  }
}
