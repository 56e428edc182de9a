"""Query-refinement decoder.

Each of the configured decoder layers runs, in order: masked
cross-attention to frame features, cross-attention to contextual memory
queries, self-attention over queries, feed-forward; all pre-norm with
residual connections. With no context the contextual sub-layer is an
identity residual.
"""
import json
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, PreconditionError, ValidationError

WEIGHTS_MAGIC = b"SSWT"
WEIGHTS_VERSION = 1


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention with optional additive
    bias on the logits."""

    def __init__(self, d, kv_dim):
        super().__init__()
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(kv_dim, d)
        self.v_proj = nn.Linear(kv_dim, d)
        self.out_proj = nn.Linear(d, d)
        self.scale = d ** -0.5

    def forward(self, q, kv, bias=None):
        logits = (self.q_proj(q) @ self.k_proj(kv).T) * self.scale
        if bias is not None:
            logits = logits + bias
        attn = torch.softmax(logits, dim=-1)
        return self.out_proj(attn @ self.v_proj(kv))


class FeedForward(nn.Module):
    def __init__(self, d, mult=4):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d, feat_dim, ffn_mult=4):
        super().__init__()
        self.norm_mask = nn.LayerNorm(d)
        self.mask_attn = CrossAttention(d, feat_dim)
        self.norm_ctx = nn.LayerNorm(d)
        self.ctx_attn = CrossAttention(d, d)
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = CrossAttention(d, d)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult)

    def forward(self, q, feats, mask_bias, ctx):
        q = q + self.mask_attn(self.norm_mask(q), feats, mask_bias)
        if ctx is not None and len(ctx):
            q = q + self.apply_ctx(q, ctx)
        nq = self.norm_self(q)
        q = q + self.self_attn(nq, nq)
        q = q + self.ffn(self.norm_ffn(q))
        return q

    def apply_ctx(self, q, ctx):
        return self.ctx_attn(self.norm_ctx(q), ctx)


class RefinementModel(nn.Module):
    """eta (prototype projection), psi (feature projection MLP), and the
    decoder stack."""

    def __init__(self, d=64, d2=16, d3=16, n_layers=3, ffn_mult=4, psi_hidden=None):
        super().__init__()
        self.d, self.d2, self.d3 = d, d2, d3
        feat_dim = d2 + d3
        self.eta = nn.Linear(feat_dim, d)
        psi_hidden = psi_hidden or 2 * d
        self.psi = nn.Sequential(nn.Linear(feat_dim, psi_hidden), nn.ReLU(), nn.Linear(psi_hidden, d))
        self.layers = nn.ModuleList(DecoderLayer(d, feat_dim, ffn_mult) for _ in range(n_layers))

    @property
    def config(self):
        return {
            "d": self.d, "d2": self.d2, "d3": self.d3,
            "n_layers": len(self.layers), "ffn_mult": self.layers[0].ffn.fc1.out_features // self.d if self.layers else 4,
            "psi_hidden": self.psi[0].out_features,
        }

    def lift(self, feats, mask_mat):
        """feats (N, d2+d3), mask_mat (n_q, N) bool -> (n_q, d) initial
        prototypes via masked mean pooling and eta."""
        counts = mask_mat.sum(dim=1, keepdim=True)
        pooled = (mask_mat.to(feats.dtype) @ feats) / counts.to(feats.dtype)
        return self.eta(pooled)

    def forward(self, q, feats, mask_mat, ctx=None):
        """q (n_q, d), feats (N, d2+d3), mask_mat (n_q, N) bool."""
        bias = torch.where(mask_mat, torch.zeros((), dtype=q.dtype), torch.full((), float("-inf"), dtype=q.dtype))
        for layer in self.layers:
            q = layer(q, feats, bias, ctx)
        return q


def seeded_init(model, seed):
    """Deterministic uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for
    every linear layer; layer norms reset to identity."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Linear):
                bound = mod.in_features ** -0.5
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        # residual branches start as no-ops so every pathway only grows
        # where the objective demands it; this keeps the historical-
        # context branch from dominating the query stream early on
        for mod in model.modules():
            if isinstance(mod, CrossAttention):
                mod.out_proj.weight.zero_()
                mod.out_proj.bias.zero_()
            elif isinstance(mod, FeedForward):
                mod.fc2.weight.zero_()
                mod.fc2.bias.zero_()
    return model


def build_model(d=64, d2=16, d3=16, n_layers=3, seed=0, **kw):
    return seeded_init(RefinementModel(d=d, d2=d2, d3=d3, n_layers=n_layers, **kw), seed)


def save_weights(model, path):
    """Versioned binary: magic, version, JSON config, named parameter
    blocks (name, shape, float32 payload)."""
    meta = json.dumps(model.config).encode()
    sd = model.state_dict()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(sd)))
        for name, tensor in sd.items():
            nb = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f4")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    config = json.loads(raw[off:off + meta_len])
    off += meta_len
    (n_blocks,) = struct.unpack_from("<I", raw, off)
    off += 4
    model = RefinementModel(**config)
    sd = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        sd[name] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(sd)
    except RuntimeError as e:
        raise ValidationError("weights", str(e))
    return model


def refine_frame(queries, feats, masks, model, ctx=None):
    """Functional wrapper: numpy in, numpy out, full decoder stack.

    queries (n_q, d); feats (N, d2+d3) or (h, w, d2+d3); masks list of
    boolean patch masks, one per query.
    """
    feats = np.asarray(feats, dtype=np.float32)
    if feats.ndim == 3:
        feats = feats.reshape(-1, feats.shape[-1])
    mask_mat = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in masks])
    if mask_mat.shape[0] != len(queries):
        raise PreconditionError("one query per mask required")
    if not mask_mat.any(axis=1).all():
        raise PreconditionError("query with empty patch mask")
    with torch.no_grad():
        q = torch.as_tensor(np.asarray(queries, dtype=np.float32))
        c = None if ctx is None or len(ctx) == 0 else torch.as_tensor(np.asarray(ctx, dtype=np.float32))
        out = model(q, torch.from_numpy(feats), torch.from_numpy(mask_mat), c)
    return out.numpy()


def inject_context(queries, ctx, model, layer=0):
    """Apply only the contextual cross-attention sub-layer of one decoder
    layer; empty ctx is an identity residual."""
    q = np.asarray(queries, dtype=np.float32)
    if ctx is None or len(ctx) == 0:
        return q.copy()
    with torch.no_grad():
        qt = torch.from_numpy(q)
        ct = torch.as_tensor(np.asarray(ctx, dtype=np.float32))
        out = qt + model.layers[layer].apply_ctx(qt, ct)
    return out.numpy()
