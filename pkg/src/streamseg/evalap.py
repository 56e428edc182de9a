"""Point-cloud aggregation and class-agnostic average precision.

Every frame's pixels are unprojected via the pointmap, inherit the final
fused instance id of the mask that produced them, and are voxelized with
per-voxel majority vote. AP follows the standard instance-segmentation
protocol: confidence-ordered greedy matching against ground truth,
all-point precision-recall interpolation.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError

AP_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))


@dataclass
class InstancePrediction:
    instance_id: int
    points: set                      # voxel keys
    confidence: tuple                # (n_obs, point count)


def _voxel_keys(points, voxel):
    return [tuple(v) for v in np.floor(np.asarray(points) / voxel).astype(np.int64)]


def vote_voxels(points, labels, voxel):
    """voxel key -> majority label (ties toward the lower label)."""
    votes = {}
    for key, lab in zip(_voxel_keys(points, voxel), labels):
        votes.setdefault(key, {}).setdefault(int(lab), 0)
        votes[key][int(lab)] += 1
    out = {}
    for key, counter in votes.items():
        best = max(counter.items(), key=lambda kv: (kv[1], -kv[0]))
        out[key] = best[0]
    return out


def aggregate(per_frame, scene, voxel):
    """Build voxelized instance predictions from processed frames.

    per_frame: list of (pointmap (H, W, 3), label map (H, W), {local
    label -> final instance id}); labels without a mapping (dropped
    masks, background) are skipped.
    """
    pts_all, ids_all = [], []
    for X, L, label_map in per_frame:
        flatL = L.reshape(-1)
        flatX = X.reshape(-1, 3)
        for lab, inst in label_map.items():
            sel = flatL == lab
            pts = flatX[sel]
            finite = np.isfinite(pts).all(axis=1)
            pts_all.append(pts[finite])
            ids_all.append(np.full(int(finite.sum()), inst, dtype=np.int64))
    if not pts_all:
        return [], {}
    points = np.concatenate(pts_all)
    ids = np.concatenate(ids_all)
    winner = vote_voxels(points, ids, voxel)
    per_inst = {}
    for key, inst in winner.items():
        per_inst.setdefault(inst, set()).add(key)
    preds = []
    for inst_id in sorted(per_inst):
        conf = scene.instances[inst_id].confidence if scene is not None else (1, len(per_inst[inst_id]))
        preds.append(InstancePrediction(instance_id=inst_id, points=per_inst[inst_id], confidence=conf))
    return preds, winner


def gt_voxel_sets(per_frame_gt, voxel):
    """Same voxelization for ground truth: list of (pointmap, gt label
    map) -> {gt id -> voxel set}, background (0) excluded."""
    pts_all, ids_all = [], []
    for X, G in per_frame_gt:
        flatG = G.reshape(-1).astype(np.int64)
        flatX = X.reshape(-1, 3)
        sel = (flatG > 0) & np.isfinite(flatX).all(axis=1)
        pts_all.append(flatX[sel])
        ids_all.append(flatG[sel])
    points = np.concatenate(pts_all)
    ids = np.concatenate(ids_all)
    winner = vote_voxels(points, ids, voxel)
    out = {}
    for key, gid in winner.items():
        if gid > 0:
            out.setdefault(gid, set()).add(key)
    return out


def _point_iou(a, b):
    inter = len(a & b)
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def _ap_single(preds, gt, threshold):
    """Greedy confidence-ordered matching, one-to-one against GT;
    all-point interpolated area under the precision-recall curve."""
    order = sorted(range(len(preds)), key=lambda i: preds[i].confidence, reverse=True)
    matched = set()
    tp = np.zeros(len(order))
    for rank, idx in enumerate(order):
        best_gid, best_iou = None, threshold
        for gid, gset in gt.items():
            if gid in matched:
                continue
            iou = _point_iou(preds[idx].points, gset)
            if iou >= best_iou:
                best_gid, best_iou = gid, iou
        if best_gid is not None:
            matched.add(best_gid)
            tp[rank] = 1
    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(order)) + 1)
    recall = cum_tp / len(gt)
    # monotone precision envelope, then sum rectangle areas
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(order)):
        if tp[k]:
            ap += (recall[k] - prev_r) * env[k]
            prev_r = recall[k]
    return float(ap)


def average_precision(preds, gt, thresholds=AP_THRESHOLDS):
    """Returns (AP over `thresholds`, AP50, AP25)."""
    if not gt:
        raise PreconditionError("empty ground truth")
    ap_mean = float(np.mean([_ap_single(preds, gt, th) for th in thresholds]))
    ap50 = _ap_single(preds, gt, 0.50)
    ap25 = _ap_single(preds, gt, 0.25)
    return ap_mean, ap50, ap25
