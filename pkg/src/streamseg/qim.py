"""3D query index memory.

A global append-only query bank plus a sparse binary association between
3D spatial keys (pooled pointmap windows) and queries. Stored keys are
projected through the current camera pose and rasterized onto the patch
grid to retrieve visible historical queries and build a contextual
feature map.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalConsistencyError, PreconditionError
from .frame_stream import patch_label_grid

Z_MIN = 1e-4


@dataclass
class SpatialKey:
    key_id: int
    p: np.ndarray       # (3,) world point
    frame_t: int


@dataclass
class RasterIndexMap:
    h: int
    w: int
    cells: dict = field(default_factory=dict)   # flat cell -> set of query ids

    @property
    def m_ind(self):
        m = np.zeros(self.h * self.w, dtype=bool)
        for c, ids in self.cells.items():
            if ids:
                m[c] = True
        return m.reshape(self.h, self.w)


class QueryIndexMemory:
    """Single-writer memory state; queries append-only by id."""

    def __init__(self, max_bank=None):
        self.bank = []        # query_id -> (d,) vector
        self.bank_meta = []   # query_id -> (frame_t, local instance label)
        self.keys = []        # key_id -> SpatialKey
        self.key_rows = []    # key_id -> set of query ids
        self.col_index = {}   # query_id -> set of key ids citing it
        self.max_bank = max_bank

    @property
    def n_q_total(self):
        return len(self.bank)

    @property
    def n_k_total(self):
        return len(self.keys)

    def append_query(self, v, frame_t=-1, local_id=-1):
        if self.max_bank is not None and len(self.bank) >= self.max_bank:
            raise InternalConsistencyError(
                f"query bank exceeded --max-bank={self.max_bank}; refusing to evict")
        qid = len(self.bank)
        self.bank.append(np.asarray(v, dtype=np.float64).copy())
        self.bank_meta.append((frame_t, local_id))
        self.col_index.setdefault(qid, set())
        return qid

    def update_query(self, qid, v):
        """Refresh a canonical query vector in place (fusion running mean).
        Ids stay append-only; only the payload moves."""
        self.bank[qid] = np.asarray(v, dtype=np.float64).copy()

    def add_key(self, p, frame_t, query_ids):
        kid = len(self.keys)
        self.keys.append(SpatialKey(key_id=kid, p=np.asarray(p, dtype=np.float64), frame_t=frame_t))
        ids = set(int(q) for q in query_ids)
        self.key_rows.append(ids)
        for q in ids:
            self.col_index.setdefault(q, set()).add(kid)
        return kid

    def retarget(self, old_qid, new_qid):
        """Rewrite every association citing old_qid to cite new_qid."""
        if old_qid == new_qid:
            return
        for kid in self.col_index.pop(old_qid, set()):
            row = self.key_rows[kid]
            row.discard(old_qid)
            row.add(new_qid)
            self.col_index.setdefault(new_qid, set()).add(kid)
        self.col_index.setdefault(old_qid, set())

    def dump_csv(self, path):
        """Sparse triplets (key_id, query_id) plus key coordinates."""
        with open(path, "w") as f:
            f.write("key_id,query_id,x,y,z\n")
            for k in self.keys:
                for q in sorted(self.key_rows[k.key_id]):
                    f.write(f"{k.key_id},{q},{k.p[0]},{k.p[1]},{k.p[2]}\n")


def sample_keys(frame, pool=None):
    """One key per pool x pool pixel window: the mean of the window's
    pointmap coordinates. Windows containing any non-finite point are
    excluded. Returns (points (M, 3), flat key-grid cell indices (M,))."""
    pool = pool or frame.patch_size
    if frame.H % pool or frame.W % pool:
        raise PreconditionError(f"pool {pool} must divide H, W")
    h, w = frame.H // pool, frame.W // pool
    win = frame.X.reshape(h, pool, w, pool, 3).transpose(0, 2, 1, 3, 4).reshape(h * w, pool * pool, 3)
    finite = np.isfinite(win).all(axis=(1, 2))
    pts = win.mean(axis=1, dtype=np.float64)
    cells = np.arange(h * w)
    return pts[finite], cells[finite]


def associate(cells, label_grid, label_to_qid):
    """Rows of the index matrix for freshly sampled keys: key i cites the
    query whose label owns its grid cell, or nothing for background."""
    flat = np.asarray(label_grid).reshape(-1)
    rows = []
    for c in cells:
        lab = int(flat[c])
        rows.append({label_to_qid[lab]} if lab in label_to_qid else set())
    return rows


def key_label_grid(L, pool):
    """Label map downsampled to the key grid with the same plurality rule
    used for patch masks."""
    return patch_label_grid(L, pool)


def rasterize(memory, pose, K, grid_hw, patch_size, z_min=Z_MIN, depth_cull=None):
    """Project all stored keys into the current camera; mark each key's
    associated query ids on the patch cell it lands in.

    depth_cull, optional (depth_map (H, W) of camera z, tau): drop keys
    whose camera depth exceeds the observed depth at their pixel by more
    than tau.
    """
    h, w = grid_hw
    raster = RasterIndexMap(h=h, w=w)
    if not memory.keys:
        return raster
    R = pose[:3, :3]
    if abs(np.linalg.det(R)) < 1e-12:
        raise PreconditionError("non-invertible pose")
    pts = np.stack([k.p for k in memory.keys])
    pc = (pts - pose[:3, 3]) @ R         # world -> camera (R orthonormal)
    z = pc[:, 2]
    ok = z > z_min
    u = np.full(len(pts), -1.0)
    v = np.full(len(pts), -1.0)
    u[ok] = K[0, 0] * pc[ok, 0] / z[ok] + K[0, 2]
    v[ok] = K[1, 1] * pc[ok, 1] / z[ok] + K[1, 2]
    W, H = w * patch_size, h * patch_size
    ok &= (u >= 0) & (u < W) & (v >= 0) & (v < H)
    if depth_cull is not None:
        depth_map, tau = depth_cull
        ui = np.clip(u.astype(int), 0, W - 1)
        vi = np.clip(v.astype(int), 0, H - 1)
        ok &= ~(z > depth_map[vi, ui] + tau)
    for kid in np.flatnonzero(ok):
        ids = memory.key_rows[kid]
        if not ids:
            continue
        cell = int(v[kid]) // patch_size * w + int(u[kid]) // patch_size
        raster.cells.setdefault(cell, set()).update(ids)
    return raster


def retrieve_ctx(raster, memory):
    """Deduplicated union of query ids visible in the raster map, in
    ascending id order. Returns (ids, vectors (m, d))."""
    ids = sorted(set().union(*raster.cells.values())) if raster.cells else []
    for q in ids:
        if q >= memory.n_q_total:
            raise InternalConsistencyError(f"dangling query id {q}")
    if not ids:
        return [], np.zeros((0, 0))
    return ids, np.stack([memory.bank[q] for q in ids])


def ctx_feature_map(raster, memory, d):
    """Per-cell mean of cited historical queries; zeros off support.
    Returns (F_ctx (h*w, d), flat support mask)."""
    n = raster.h * raster.w
    F_ctx = np.zeros((n, d))
    m_ind = np.zeros(n, dtype=bool)
    for cell, ids in raster.cells.items():
        if not ids:
            continue
        for q in ids:
            if q >= memory.n_q_total:
                raise InternalConsistencyError(f"dangling query id {q}")
        F_ctx[cell] = np.mean([memory.bank[q] for q in sorted(ids)], axis=0)
        m_ind[cell] = True
    return F_ctx, m_ind
