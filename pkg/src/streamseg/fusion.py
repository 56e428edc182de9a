"""Inference-time online mask fusion.

Per-instance attention summaries ("state tokens"), intra-frame merging
of over-segmented masks by query similarity, cross-frame bipartite
matching on query cosine + state-token cosine + 3D box IoU, and
running-mean instance updates.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import PreconditionError

INTRA_THRESHOLD = 0.8     # intra-frame merge, cosine
CROSS_PRUNE = 1.8         # cross-frame score pruning
VOXEL_SIZE = 0.05

_BIG = 1e9


def state_token(A, mask):
    """Total attention mass each state token allocates to the masked
    patches: s[k] = sum over masked patches of A[k, patch]."""
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if A.shape[1] != m.size:
        raise PreconditionError(f"attention has {A.shape[1]} patches, mask has {m.size}")
    return A[:, m].sum(axis=1)


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b) / (na * nb)


def bbox_iou(b1, b2):
    """Axis-aligned 3D IoU; boxes are (min, max) corner pairs."""
    lo = np.maximum(b1[0], b2[0])
    hi = np.minimum(b1[1], b2[1])
    inter = np.prod(np.maximum(hi - lo, 0.0))
    v1 = np.prod(np.maximum(b1[1] - b1[0], 0.0))
    v2 = np.prod(np.maximum(b2[1] - b2[0], 0.0))
    denom = v1 + v2 - inter
    return float(inter / denom) if denom > 0 else 0.0


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def intra_merge(queries, threshold=INTRA_THRESHOLD):
    """Connected components of the pairwise query-cosine graph with
    edges above threshold. Returns the partition as lists of indices."""
    if not 0 < threshold <= 1:
        raise PreconditionError("intra threshold must be in (0, 1]")
    n = len(queries)
    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            if cosine(queries[i], queries[j]) > threshold:
                uf.union(i, j)
    groups = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    return [groups[r] for r in sorted(groups)]


@dataclass
class MaskObservation:
    """One fused (post intra-merge) current-frame mask."""
    query: np.ndarray
    sdt: np.ndarray
    key_points: dict            # voxel tuple -> (3,) representative point
    key_ids: set = field(default_factory=set)
    local_labels: list = field(default_factory=list)
    point_count: int = 0
    bank_qid: int = -1

    @property
    def bbox(self):
        return points_bbox(self.key_points)


def voxel_of(p, v):
    return tuple(np.floor(np.asarray(p) / v).astype(np.int64))


def dedup_points(points, v):
    """voxel tuple -> first point seen in that voxel."""
    out = {}
    for p in points:
        out.setdefault(voxel_of(p, v), np.asarray(p, dtype=np.float64))
    return out


def points_bbox(key_points):
    if not key_points:
        raise PreconditionError("bbox of empty key set")
    pts = np.stack(list(key_points.values()))
    return pts.min(axis=0), pts.max(axis=0)


def merge_observations(members, queries, sdts, key_point_sets, key_id_sets,
                       labels, point_counts, voxel=VOXEL_SIZE):
    """Fuse one intra-frame group: mean query, summed state token (masked
    sums over disjoint masks compose additively), unioned keys."""
    q = np.mean([queries[i] for i in members], axis=0)
    s = np.sum([sdts[i] for i in members], axis=0)
    pts = {}
    ids = set()
    for i in members:
        for vox, p in key_point_sets[i].items():
            pts.setdefault(vox, p)
        ids |= key_id_sets[i]
    return MaskObservation(
        query=q, sdt=s, key_points=pts, key_ids=ids,
        local_labels=[labels[i] for i in members],
        point_count=sum(point_counts[i] for i in members),
    )


@dataclass
class InstanceRecord:
    instance_id: int
    query: np.ndarray
    sdt: np.ndarray
    key_points: dict
    key_ids: set
    n_obs: int = 1
    point_count: int = 0
    canonical_qid: int = -1
    first_t: int = -1
    last_t: int = -1

    @property
    def bbox(self):
        return points_bbox(self.key_points)

    @property
    def confidence(self):
        return (self.n_obs, self.point_count)


def score_matrix(existing, new, prune=CROSS_PRUNE, use_sdt=True):
    """Rows = existing instances, cols = new masks. Entry = query cosine
    + state-token cosine + box IoU; entries below `prune` become -inf."""
    E = np.full((len(existing), len(new)), -np.inf)
    for i, inst in enumerate(existing):
        bi = inst.bbox
        for j, obs in enumerate(new):
            s = cosine(inst.query, obs.query) + bbox_iou(bi, obs.bbox)
            if use_sdt:
                s += cosine(inst.sdt, obs.sdt)
            if s >= prune:
                E[i, j] = s
    return E


def bipartite_match(E):
    """Minimum-cost assignment on -E over the non-pruned graph.

    Returns {new index -> existing index}; new masks absent from the map
    register as new instances. Never assigns through a -inf entry.
    """
    n_exist, n_new = E.shape
    if n_exist == 0 or n_new == 0 or not np.isfinite(E).any():
        return {}
    cost = np.where(np.isfinite(E), -E, _BIG)
    rows, cols = linear_sum_assignment(cost)
    return {int(j): int(i) for i, j in zip(rows, cols) if np.isfinite(E[i, j])}


@dataclass
class SceneState:
    voxel: float = VOXEL_SIZE
    instances: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def by_id(self, instance_id):
        return self.instances[instance_id]


def apply_update(scene, assignment, new_obs, frame_t, memory=None):
    """Fold matched observations into their instances (running mean) and
    register the rest as new. Returns per-observation final instance ids."""
    out = []
    for j, obs in enumerate(new_obs):
        if j in assignment:
            inst = scene.instances[assignment[j]]
            n = inst.n_obs
            inst.query = (inst.query * n + obs.query) / (n + 1)
            inst.sdt = (inst.sdt * n + obs.sdt) / (n + 1)
            for vox, p in obs.key_points.items():
                inst.key_points.setdefault(vox, p)
            inst.key_ids |= obs.key_ids
            inst.n_obs = n + 1
            inst.point_count += obs.point_count
            inst.last_t = frame_t
            if memory is not None and obs.bank_qid >= 0:
                memory.retarget(obs.bank_qid, inst.canonical_qid)
                memory.update_query(inst.canonical_qid, inst.query)
            scene.events.append({"event": "match", "t": frame_t,
                                 "instance": inst.instance_id, "new_mask": j})
            out.append(inst.instance_id)
        else:
            inst = InstanceRecord(
                instance_id=len(scene.instances),
                query=obs.query.copy(), sdt=obs.sdt.copy(),
                key_points=dict(obs.key_points), key_ids=set(obs.key_ids),
                n_obs=1, point_count=obs.point_count,
                canonical_qid=obs.bank_qid, first_t=frame_t, last_t=frame_t,
            )
            scene.instances.append(inst)
            scene.events.append({"event": "new", "t": frame_t,
                                 "instance": inst.instance_id, "new_mask": j})
            out.append(inst.instance_id)
    return out
