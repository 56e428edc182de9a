"""Lifting 2D instance masks into initial 3D prototype queries.

Masked average pooling over the concatenated [semantic, geometric]
feature map, followed by a learned affine projection.
"""
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError


@dataclass
class Query:
    v: np.ndarray            # (d,)
    instance_local_id: int = -1
    frame_t: int = -1


def concat_features(frame):
    """(h, w, d2+d3) concatenation with F2d channels first."""
    return np.concatenate([frame.F2d, frame.F3d], axis=-1)


def masked_mean_pool(feats, mask):
    """Mean of feats over masked patches. feats: (h,w,c) or (N,c); mask
    boolean of matching leading shape."""
    feats = np.asarray(feats)
    mask = np.asarray(mask, dtype=bool)
    if feats.ndim == 3:
        feats = feats.reshape(-1, feats.shape[-1])
        mask = mask.reshape(-1)
    if not mask.any():
        raise PreconditionError("empty mask in pooling")
    return feats[mask].mean(axis=0)


def lift_prototype(feats, mask, eta_weight, eta_bias, instance_local_id=-1, frame_t=-1):
    """Pool then project: eta(mean of feats over mask)."""
    pooled = masked_mean_pool(feats, mask)
    v = eta_weight @ pooled + eta_bias
    return Query(v=v, instance_local_id=instance_local_id, frame_t=frame_t)
