"""Per-frame record container: binary IO, validation, patch-level masks.

One file per frame, little-endian, row-major, fixed header followed by
contiguous payloads. A plain-text manifest lists frame files in temporal
order.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"SSFR"
VERSION = 1

# dtype codes kept in the header so compression/precision changes do not
# need a format-version break
_DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<u2"}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}

# (field, dtype) in payload order
_PAYLOAD_SPEC = [
    ("K", "<f8"),
    ("P", "<f8"),
    ("X", "<f4"),
    ("F3d", "<f4"),
    ("F2d", "<f4"),
    ("A", "<f4"),
    ("L", "<u2"),
]

_HEADER_FMT = "<4sI" + "I" * 7 + "B" * len(_PAYLOAD_SPEC)


@dataclass
class FrameRecord:
    t: int
    H: int
    W: int
    patch_size: int
    K: np.ndarray          # 3x3 intrinsics
    P: np.ndarray          # 4x4 camera-to-world
    X: np.ndarray          # HxWx3 world pointmap
    F3d: np.ndarray        # hxwxd3 geometric features
    F2d: np.ndarray        # hxwxd2 semantic features
    A: np.ndarray          # n_s x (h*w) state attention
    L: np.ndarray          # HxW uint16 instance labels, 0 = background

    @property
    def h(self):
        return self.H // self.patch_size

    @property
    def w(self):
        return self.W // self.patch_size

    @property
    def n_q(self):
        return int(self.L.max())


@dataclass
class PatchMaskSet:
    """Per-instance binary masks at patch resolution plus pixel counts."""
    masks: dict = field(default_factory=dict)         # label -> (h,w) bool
    pixel_counts: dict = field(default_factory=dict)  # label -> int (full res)
    dropped: list = field(default_factory=list)       # labels with no patches

    @property
    def labels(self):
        return sorted(self.masks)


def validate_frame(rec, renormalize=True):
    """Check all FrameRecord invariants; raises ValidationError.

    Attention rows within [0.99, 1.01] of unit sum are renormalized in
    place (exporter float noise); outside that band is an error. Rows
    already within 1e-5 are left untouched so round-trips stay bit-exact.
    """
    if rec.t < 0:
        raise ValidationError("t", "frame index must be non-negative")
    ps = rec.patch_size
    if ps <= 0 or rec.H % ps != 0 or rec.W % ps != 0:
        raise ValidationError("patch_size", f"must divide H={rec.H}, W={rec.W}")
    h, w = rec.h, rec.w
    if rec.K.shape != (3, 3):
        raise ValidationError("K", f"expected 3x3, got {rec.K.shape}")
    if rec.P.shape != (4, 4):
        raise ValidationError("P", f"expected 4x4, got {rec.P.shape}")
    R = rec.P[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-4):
        raise ValidationError("P", "rotation block not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-4:
        raise ValidationError("P", "rotation determinant != +1")
    if not np.allclose(rec.P[3], [0, 0, 0, 1], atol=1e-6):
        raise ValidationError("P", "bottom row must be (0,0,0,1)")
    if rec.X.shape != (rec.H, rec.W, 3):
        raise ValidationError("X", f"expected {(rec.H, rec.W, 3)}, got {rec.X.shape}")
    if rec.F3d.shape[:2] != (h, w):
        raise ValidationError("F3d", f"expected grid {(h, w)}, got {rec.F3d.shape[:2]}")
    if rec.F2d.shape[:2] != (h, w):
        raise ValidationError("F2d", f"expected grid {(h, w)}, got {rec.F2d.shape[:2]}")
    if rec.A.ndim != 2 or rec.A.shape[1] != h * w:
        raise ValidationError("A", f"expected (n_s, {h * w}), got {rec.A.shape}")
    if np.any(rec.A < 0):
        raise ValidationError("A", "negative attention weight")
    sums = rec.A.sum(axis=1)
    if np.any(sums < 0.99) or np.any(sums > 1.01):
        raise ValidationError("A", f"row sums outside [0.99, 1.01]: {sums}")
    if renormalize:
        off = np.abs(sums - 1.0) > 1e-5
        if np.any(off):
            rec.A[off] /= sums[off, None]
    if rec.L.shape != (rec.H, rec.W):
        raise ValidationError("L", f"expected {(rec.H, rec.W)}, got {rec.L.shape}")
    present = np.unique(rec.L)
    n_q = int(present.max()) if present.size else 0
    if not np.array_equal(present, np.arange(n_q + 1)):
        raise ValidationError("L", f"labels not contiguous 0..{n_q}: {present}")
    for name in ("K", "P", "X", "F3d", "F2d", "A"):
        if not np.all(np.isfinite(getattr(rec, name))):
            raise ValidationError(name, "non-finite values")
    return rec


def write_frame(rec, path):
    codes = [_CODE_OF[dt] for _, dt in _PAYLOAD_SPEC]
    header = struct.pack(
        _HEADER_FMT, MAGIC, VERSION,
        rec.t, rec.H, rec.W, rec.patch_size,
        rec.F3d.shape[2], rec.F2d.shape[2], rec.A.shape[0],
        *codes,
    )
    with open(path, "wb") as f:
        f.write(header)
        for name, dt in _PAYLOAD_SPEC:
            f.write(np.ascontiguousarray(getattr(rec, name), dtype=dt).tobytes())


def read_frame(path):
    """Read, validate, and return a FrameRecord."""
    with open(path, "rb") as f:
        raw = f.read()
    hdr_size = struct.calcsize(_HEADER_FMT)
    if len(raw) < hdr_size:
        raise FormatError(f"{path}: truncated header")
    fields = struct.unpack_from(_HEADER_FMT, raw)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    t, H, W, ps, d3, d2, n_s = fields[2:9]
    codes = fields[9:]
    if ps == 0 or H % ps or W % ps:
        raise ValidationError("patch_size", f"must divide H={H}, W={W}")
    h, w = H // ps, W // ps
    shapes = {
        "K": (3, 3), "P": (4, 4), "X": (H, W, 3),
        "F3d": (h, w, d3), "F2d": (h, w, d2), "A": (n_s, h * w), "L": (H, W),
    }
    off = hdr_size
    arrays = {}
    for (name, _), code in zip(_PAYLOAD_SPEC, codes):
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dt = np.dtype(_DTYPE_CODES[code])
        count = int(np.prod(shapes[name]))
        nbytes = count * dt.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shapes[name]).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    rec = FrameRecord(t=t, H=H, W=W, patch_size=ps, **arrays)
    return validate_frame(rec)


def read_manifest(seq_dir):
    """Relative frame paths, one per line, in temporal order."""
    import os
    mpath = os.path.join(seq_dir, "manifest.txt")
    if not os.path.isfile(mpath):
        raise FormatError(f"missing manifest: {mpath}")
    with open(mpath) as f:
        rels = [ln.strip() for ln in f if ln.strip()]
    return [os.path.join(seq_dir, r) for r in rels]


def write_manifest(seq_dir, rel_paths):
    import os
    with open(os.path.join(seq_dir, "manifest.txt"), "w") as f:
        for r in rel_paths:
            f.write(r + "\n")


def patch_label_grid(L, pool):
    """Downsample a label map by plurality vote per pool x pool window.

    Ties break toward the lowest label (background 0 wins ties against
    any instance).
    """
    H, W = L.shape
    h, w = H // pool, W // pool
    cells = L.reshape(h, pool, w, pool).transpose(0, 2, 1, 3).reshape(h * w, pool * pool)
    n = int(L.max()) + 1
    counts = np.zeros((h * w, n), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(h * w), pool * pool), cells.ravel()), 1)
    return counts.argmax(axis=1).reshape(h, w).astype(np.int64)


def patchify_masks(frame, log=None):
    """Assign each patch to its plurality instance; drop instances that
    lose every patch."""
    grid = patch_label_grid(frame.L, frame.patch_size)
    out = PatchMaskSet()
    labels, counts = np.unique(frame.L, return_counts=True)
    pix = dict(zip(labels.tolist(), counts.tolist()))
    for lab in range(1, frame.n_q + 1):
        m = grid == lab
        if not m.any():
            out.dropped.append(lab)
            if log is not None:
                log(f"frame {frame.t}: instance {lab} lost all patches, dropped")
            continue
        out.masks[lab] = m
        out.pixel_counts[lab] = pix.get(lab, 0)
    return out
