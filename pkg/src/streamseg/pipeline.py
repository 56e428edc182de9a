"""Online loop: read frame -> patchify -> lift -> rasterize memory ->
retrieve context -> refine -> fuse -> update memory.

Frames are processed strictly in temporal order; the fusion stage
(everything after the frame read) is wall-clock timed per frame.
"""
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import evalap, fusion, qim
from .errors import StreamSegError
from .frame_stream import patchify_masks, read_frame, read_manifest
from .prototype import masked_mean_pool
from .refiner import build_model, load_weights


@dataclass
class RunConfig:
    seq: str = ""
    weights: str = None
    intra_threshold: float = fusion.INTRA_THRESHOLD
    cross_prune: float = fusion.CROSS_PRUNE
    d: int = 64
    n_layers: int = 3
    voxel: float = fusion.VOXEL_SIZE
    assoc: str = "refined"        # refined | raw
    use_sdt: bool = True
    use_qim: bool = True
    seed: int = 0
    max_bank: int = None
    depth_cull_tau: float = None  # optional z-tolerance cull, off by default
    latency_csv: str = None
    events_jsonl: str = None
    dump_memory: str = None


@dataclass
class RunResult:
    scene: fusion.SceneState
    memory: qim.QueryIndexMemory
    per_frame: list = field(default_factory=list)   # (X, L, {label -> instance id})
    predictions: list = field(default_factory=list)
    pred_voxels: dict = field(default_factory=dict)
    latencies_ms: list = field(default_factory=list)
    model: object = None

    @property
    def latency_summary(self):
        arr = np.asarray(self.latencies_ms)
        if arr.size == 0:
            return {"p50": 0.0, "p95": 0.0}
        return {"p50": float(np.percentile(arr, 50)), "p95": float(np.percentile(arr, 95))}


def _stage(t, name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StreamSegError):
                raise StreamSegError(f"frame {t}, stage {name}: {exc}") from exc
            if isinstance(exc, StreamSegError) and not getattr(exc, "_located", False):
                exc._located = True
                exc.args = (f"frame {t}, stage {name}: {exc.args[0] if exc.args else ''}",)
            return False
    return _Ctx()


def process_frame(frame, model, memory, scene, config):
    """One online step. Returns ({local label -> final instance id},
    fusion wall-clock seconds)."""
    t0 = time.perf_counter()
    with _stage(frame.t, "patchify"):
        pm = patchify_masks(frame)
    labels = pm.labels
    if not labels:
        return {}, time.perf_counter() - t0

    feats_np = np.concatenate([frame.F2d, frame.F3d], axis=-1).reshape(-1, frame.F2d.shape[-1] + frame.F3d.shape[-1])
    mask_list = [pm.masks[lab].reshape(-1) for lab in labels]

    with _stage(frame.t, "retrieve"):
        ctx = None
        if config.use_qim and config.assoc == "refined":
            raster = qim.rasterize(
                memory, frame.P, frame.K, (frame.h, frame.w), frame.patch_size,
                depth_cull=None if config.depth_cull_tau is None else (_camera_depth(frame), config.depth_cull_tau))
            _, ctx_vecs = qim.retrieve_ctx(raster, memory)
            ctx = ctx_vecs if len(ctx_vecs) else None

    with _stage(frame.t, "lift"):
        if config.assoc == "raw":
            queries = np.stack([masked_mean_pool(feats_np, m) for m in mask_list])
        else:
            with torch.no_grad():
                feats_t = torch.as_tensor(feats_np, dtype=torch.float32)
                mask_t = torch.from_numpy(np.stack(mask_list))
                ctx_t = torch.as_tensor(np.asarray(ctx, dtype=np.float32)) if ctx is not None else None
                queries = model(model.lift(feats_t, mask_t), feats_t, mask_t, ctx_t).numpy().astype(np.float64)

    with _stage(frame.t, "state_token"):
        sdts = [fusion.state_token(frame.A, m) for m in mask_list]

    with _stage(frame.t, "keys"):
        pts, cells = qim.sample_keys(frame)
        grid = qim.key_label_grid(frame.L, frame.patch_size).reshape(-1)
        key_pts, key_idx = {}, {}
        for lab in labels:
            sel = grid[cells] == lab
            key_pts[lab] = fusion.dedup_points(pts[sel], config.voxel)
            key_idx[lab] = np.flatnonzero(sel)
            if not key_pts[lab]:
                # every key window was non-finite: fall back to the
                # mask's own pixel points
                pix = frame.X[frame.L == lab]
                pix = pix[np.isfinite(pix).all(axis=1)]
                key_pts[lab] = fusion.dedup_points(pix, config.voxel)

    with _stage(frame.t, "intra_merge"):
        groups = fusion.intra_merge(queries, threshold=config.intra_threshold)
        observations = [
            fusion.merge_observations(
                g, queries, sdts,
                [key_pts[lab] for lab in labels], [set() for _ in labels],
                labels, [pm.pixel_counts[lab] for lab in labels], voxel=config.voxel)
            for g in groups
        ]
        observations = [o for o in observations if o.key_points]

    with _stage(frame.t, "memory_update"):
        label_to_qid = {}
        for obs in observations:
            obs.bank_qid = memory.append_query(obs.query, frame_t=frame.t, local_id=obs.local_labels[0])
            for lab in obs.local_labels:
                label_to_qid[lab] = obs.bank_qid
        for i, (p, c) in enumerate(zip(pts, cells)):
            lab = int(grid[c])
            ids = {label_to_qid[lab]} if lab in label_to_qid else set()
            kid = memory.add_key(p, frame.t, ids)
            for obs in observations:
                if lab in obs.local_labels:
                    obs.key_ids.add(kid)

    with _stage(frame.t, "match"):
        terms = 3 if config.use_sdt else 2
        prune = config.cross_prune * terms / 3.0
        E = fusion.score_matrix(scene.instances, observations, prune=prune, use_sdt=config.use_sdt)
        assignment = fusion.bipartite_match(E)
        ids = fusion.apply_update(scene, assignment, observations, frame.t, memory=memory)

    label_map = {}
    for obs, inst_id in zip(observations, ids):
        for lab in obs.local_labels:
            label_map[lab] = inst_id
    return label_map, time.perf_counter() - t0


def _camera_depth(frame):
    R, eye = frame.P[:3, :3], frame.P[:3, 3]
    return ((frame.X.reshape(-1, 3) - eye) @ R[:, 2]).reshape(frame.H, frame.W)


def make_model_for(config, d2, d3):
    if config.weights:
        return load_weights(config.weights)
    return build_model(d=config.d, d2=d2, d3=d3, n_layers=config.n_layers, seed=config.seed)


def run_sequence(config):
    paths = read_manifest(config.seq)
    scene = fusion.SceneState(voxel=config.voxel)
    memory = qim.QueryIndexMemory(max_bank=config.max_bank)
    result = RunResult(scene=scene, memory=memory)
    model = None
    for path in paths:  # strictly temporal; never touches later files
        frame = read_frame(path)
        if model is None and config.assoc == "refined":
            model = make_model_for(config, frame.F2d.shape[-1], frame.F3d.shape[-1])
            result.model = model
        label_map, secs = process_frame(frame, model, memory, scene, config)
        result.per_frame.append((frame.X, frame.L, label_map))
        result.latencies_ms.append(secs * 1000.0)
    result.predictions, result.pred_voxels = evalap.aggregate(result.per_frame, scene, config.voxel)
    if config.latency_csv:
        _write_latency_csv(config.latency_csv, result)
    if config.events_jsonl:
        with open(config.events_jsonl, "w") as f:
            for ev in scene.events:
                f.write(json.dumps(ev) + "\n")
    if config.dump_memory:
        memory.dump_csv(config.dump_memory)
    return result


def _write_latency_csv(path, result):
    summary = result.latency_summary
    with open(path, "w") as f:
        f.write("frame,fusion_ms\n")
        for i, ms in enumerate(result.latencies_ms):
            f.write(f"{i},{ms:.3f}\n")
        f.write(f"p50,{summary['p50']:.3f}\n")
        f.write(f"p95,{summary['p95']:.3f}\n")


def export_predictions_csv(result, path):
    """One row per instance: id, n_obs, point count, then the voxel keys
    it owns."""
    with open(path, "w") as f:
        f.write("instance_id,n_obs,point_count,voxels\n")
        for pred in result.predictions:
            inst = result.scene.instances[pred.instance_id]
            vox = ";".join(f"{a}:{b}:{c}" for a, b, c in sorted(pred.points))
            f.write(f"{pred.instance_id},{inst.n_obs},{inst.point_count},{vox}\n")


def export_ply(result, path):
    """Point cloud with a per-point color per instance, for offline
    inspection."""
    rng = np.random.default_rng(0)
    colors = {p.instance_id: rng.integers(40, 255, size=3) for p in result.predictions}
    pts, cols = [], []
    for X, L, label_map in result.per_frame:
        for lab, inst in label_map.items():
            sel = L == lab
            p = X[sel]
            ok = np.isfinite(p).all(axis=1)
            pts.append(p[ok])
            cols.append(np.tile(colors[inst], (int(ok.sum()), 1)))
    allp = np.concatenate(pts) if pts else np.zeros((0, 3))
    allc = np.concatenate(cols) if cols else np.zeros((0, 3), dtype=int)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(allp)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for p, c in zip(allp, allc):
            f.write(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {c[0]} {c[1]} {c[2]}\n")


def evaluate_result(result, seq_dir, voxel=None):
    """AP metrics of a run against the sequence's ground-truth file."""
    import os
    voxel = voxel or result.scene.voxel
    gt = np.load(os.path.join(seq_dir, "gt_instances.npy"))
    per_frame_gt = [(X, gt[i]) for i, (X, _, _) in enumerate(result.per_frame)]
    gt_sets = evalap.gt_voxel_sets(per_frame_gt, voxel)
    return evalap.average_precision(result.predictions, gt_sets)
