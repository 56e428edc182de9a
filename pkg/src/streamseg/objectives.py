"""Self-supervision objectives and the toy trainer.

Three losses: per-frame mask recovery (query vs projected features,
BCE), Gram-structure distillation against the raw semantic and geometric
feature maps, and the cross-frame variant computed against the
contextual feature map on rasterized-memory support.
"""
import csv
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import qim
from .errors import PreconditionError, StreamSegError
from .frame_stream import patchify_masks
from .refiner import build_model

# paper defaults: lambda_seg, lambda_xseg, lambda_dist
DEFAULT_LAMBDAS = (1.0, 0.5, 0.1)


@dataclass
class LossReport:
    l_seg: float
    l_dist: float
    l_xseg: float
    lam_seg: float = DEFAULT_LAMBDAS[0]
    lam_xseg: float = DEFAULT_LAMBDAS[1]
    lam_dist: float = DEFAULT_LAMBDAS[2]

    @property
    def l_total(self):
        return self.lam_seg * self.l_seg + self.lam_dist * self.l_dist + self.lam_xseg * self.l_xseg


@dataclass
class GramMatrix:
    G: np.ndarray
    zero_rows: np.ndarray   # flags rows with zero norm


def seg_loss(feats, queries, mask_mat, psi):
    """Mean BCE between per-patch logits <psi(F), q> and each query's
    binary patch mask. All-torch; feats (N, din), queries (n_q, d),
    mask_mat (n_q, N) bool."""
    if queries.shape[0] < 1:
        raise PreconditionError("seg_loss needs at least one query")
    proj = psi(feats)
    logits = queries @ proj.T
    return F.binary_cross_entropy_with_logits(logits, mask_mat.to(logits.dtype))


def gram_matrix(feats):
    """Cosine Gram matrix, differentiable. Zero-norm rows give zero
    rows/columns (diagonal included)."""
    norms = feats.norm(dim=1, keepdim=True)
    nf = feats / torch.where(norms > 0, norms, torch.ones_like(norms))
    return nf @ nf.T


def gram(feats, psi=None):
    """Numpy-facing Gram computation; optionally projects with psi first."""
    t = torch.as_tensor(np.asarray(feats, dtype=np.float64))
    if t.ndim == 3:
        t = t.reshape(-1, t.shape[-1])
    if psi is not None:
        with torch.no_grad():
            t = psi(t.to(next(psi.parameters()).dtype)).double()
    zero = t.norm(dim=1) == 0
    return GramMatrix(G=gram_matrix(t).numpy(), zero_rows=zero.numpy())


def dist_loss(feats, f2d, f3d, psi):
    """Squared Frobenius distance between the Gram of psi-projected
    concatenated features and the Grams of the raw foundation features."""
    G = gram_matrix(psi(feats))
    G2 = gram_matrix(f2d)
    G3 = gram_matrix(f3d)
    return ((G - G2) ** 2).sum() + ((G - G3) ** 2).sum()


def xseg_loss(f_ctx, queries, mask_mat, m_ind):
    """seg-style BCE restricted to patches with rasterized history.
    Returns 0 on empty support."""
    sup = torch.as_tensor(np.asarray(m_ind, dtype=bool)).reshape(-1)
    if not sup.any():
        return torch.zeros((), dtype=queries.dtype)
    logits = (queries @ f_ctx.T)[:, sup]
    return F.binary_cross_entropy_with_logits(logits, mask_mat[:, sup].to(logits.dtype))


def _rel_err(a, b):
    scale = max(abs(a), abs(b))
    if scale < 1e-8:
        return 0.0
    return abs(a - b) / scale


def finite_diff_check(loss_fn, params, eps=1e-4):
    """Central finite differences vs autograd for every element of
    `params`. Returns the max relative error."""
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise StreamSegError("non-finite loss in gradient check")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                worst = max(worst, _rel_err(gflat[i].item(), fd))
    return worst


def _toy_instance(d=8, n_patches=16, n_queries=3, seed=0):
    """Random small problem used by the gradient-check harness."""
    gen = torch.Generator().manual_seed(seed)
    model = build_model(d=d, d2=4, d3=4, n_layers=1, seed=seed).double()
    feats = torch.randn(n_patches, 8, generator=gen, dtype=torch.float64)
    f2d, f3d = feats[:, :4], feats[:, 4:]
    mask = torch.zeros(n_queries, n_patches, dtype=torch.bool)
    order = torch.randperm(n_patches, generator=gen)
    for qi in range(n_queries):
        mask[qi, order[qi::n_queries]] = True
    f_ctx = torch.randn(n_patches, d, generator=gen, dtype=torch.float64)
    m_ind = torch.rand(n_patches, generator=gen) < 0.5
    return model, feats, f2d, f3d, mask, f_ctx, m_ind


def grad_check(loss_name, param_sel, eps=1e-4, seed=0, d=8, n_patches=16):
    """Finite-difference check of one loss w.r.t. one parameter group.

    loss_name: seg | dist | xseg | quad; param_sel: psi | eta | decoder0.
    Gradients flow through the lift + refinement path for seg and xseg.
    """
    model, feats, f2d, f3d, mask, f_ctx, m_ind = _toy_instance(d=d, n_patches=n_patches, seed=seed)

    def queries():
        return model(model.lift(feats, mask), feats, mask)

    if loss_name == "seg":
        loss_fn = lambda: seg_loss(feats, queries(), mask, model.psi)
    elif loss_name == "dist":
        loss_fn = lambda: dist_loss(feats, f2d, f3d, model.psi)
    elif loss_name == "xseg":
        loss_fn = lambda: xseg_loss(f_ctx.double(), queries(), mask, m_ind)
    elif loss_name == "quad":
        # exact-for-quadratic probe of the harness itself: ||W x||^2
        x = feats[0]
        loss_fn = lambda: (model.psi[0](x) ** 2).sum()
    else:
        raise PreconditionError(f"unknown loss {loss_name!r}")

    if param_sel == "psi":
        params = list(model.psi.parameters())
    elif param_sel == "eta":
        params = list(model.eta.parameters())
    elif param_sel == "decoder0":
        params = list(model.layers[0].parameters())
    else:
        raise PreconditionError(f"unknown parameter selection {param_sel!r}")
    return finite_diff_check(loss_fn, params, eps=eps)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 3e-3
    optimizer: str = "adamw"    # adamw | sgd
    seed: int = 0
    d: int = 32
    n_layers: int = 1
    lam_seg: float = DEFAULT_LAMBDAS[0]
    lam_xseg: float = DEFAULT_LAMBDAS[1]
    lam_dist: float = DEFAULT_LAMBDAS[2]
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    use_memory: bool = True     # False: no historical context, no cross-frame loss
    loss_csv: str = None


def frame_losses(model, frame, memory, lambdas=None, update_memory=True):
    """Per-frame weighted training loss; optionally appends this frame's
    refined queries and keys to the memory (detached). Passing
    memory=None trains without historical context or the cross-frame
    term."""
    lam_seg, lam_xseg, lam_dist = lambdas or DEFAULT_LAMBDAS
    pm = patchify_masks(frame)
    labels = pm.labels
    if not labels:
        return None, {}
    feats_np = np.concatenate([frame.F2d, frame.F3d], axis=-1).reshape(-1, frame.F2d.shape[-1] + frame.F3d.shape[-1])
    feats = torch.as_tensor(feats_np, dtype=torch.float32)
    mask_mat = torch.from_numpy(np.stack([pm.masks[l].reshape(-1) for l in labels]))
    d2 = frame.F2d.shape[-1]
    f2d, f3d = feats[:, :d2], feats[:, d2:]

    if memory is not None:
        raster = qim.rasterize(memory, frame.P, frame.K, (frame.h, frame.w), frame.patch_size)
        _, ctx = qim.retrieve_ctx(raster, memory)
        ctx_t = torch.as_tensor(ctx, dtype=torch.float32) if len(ctx) else None
        f_ctx_np, m_ind = qim.ctx_feature_map(raster, memory, model.d)
    else:
        ctx_t, f_ctx_np, m_ind = None, np.zeros((0, model.d)), np.zeros(0, dtype=bool)

    q = model(model.lift(feats, mask_mat), feats, mask_mat, ctx_t)
    l_seg = seg_loss(feats, q, mask_mat, model.psi)
    l_dist = dist_loss(feats, f2d, f3d, model.psi)
    l_xseg = xseg_loss(torch.as_tensor(f_ctx_np, dtype=torch.float32), q, mask_mat, m_ind)
    total = lam_seg * l_seg + lam_dist * l_dist + lam_xseg * l_xseg

    if update_memory and memory is not None:
        q_det = q.detach().numpy()
        label_to_qid = {}
        for row, lab in enumerate(labels):
            label_to_qid[lab] = memory.append_query(q_det[row], frame_t=frame.t, local_id=lab)
        pts, cells = qim.sample_keys(frame)
        grid = qim.key_label_grid(frame.L, frame.patch_size)
        rows = qim.associate(cells, grid, label_to_qid)
        for p, ids in zip(pts, rows):
            memory.add_key(p, frame.t, ids)
    return total, {"l_seg": l_seg.item(), "l_dist": l_dist.item(), "l_xseg": l_xseg.item()}


def toy_train(frames, config):
    """Plain gradient descent on the weighted objective over a short
    sequence. Returns (model, loss curve rows)."""
    if len(frames) > 16:
        raise PreconditionError("toy trainer is limited to 16 frames")
    if config.d > 32:
        raise PreconditionError("toy trainer is limited to d <= 32")
    d2 = frames[0].F2d.shape[-1]
    d3 = frames[0].F3d.shape[-1]
    model = build_model(d=config.d, d2=d2, d3=d3, n_layers=config.n_layers, seed=config.seed)
    lambdas = (config.lam_seg, config.lam_xseg, config.lam_dist)
    opt = sched = None
    if config.optimizer == "adamw" and config.lr > 0:
        # heavy decay keeps the residual branches from drifting into
        # large frame-dependent transforms that destabilize the queries
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                weight_decay=config.weight_decay)
        # anneal to zero so the final weights settle instead of bouncing
        # around the optimum
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    elif config.optimizer not in ("adamw", "sgd"):
        raise PreconditionError(f"unknown optimizer {config.optimizer!r}")
    curve = []
    for epoch in range(config.epochs):
        memory = qim.QueryIndexMemory() if config.use_memory else None
        sums = {"l_seg": 0.0, "l_dist": 0.0, "l_xseg": 0.0}
        n = 0
        for frame in frames:
            total, parts = frame_losses(model, frame, memory, lambdas)
            if total is None:
                continue
            if not torch.isfinite(total):
                raise StreamSegError(f"training diverged at epoch {epoch}")
            if config.lr > 0:
                model.zero_grad()
                total.backward()
                # the Gram term's gradient scale grows with the squared
                # patch count; clip so updates stay stable
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                if opt is not None:
                    opt.step()
                else:
                    with torch.no_grad():
                        for p in model.parameters():
                            if p.grad is not None:
                                p -= config.lr * p.grad
            for k, v in parts.items():
                sums[k] += v
            n += 1
        if sched is not None:
            sched.step()
        row = {k: v / max(n, 1) for k, v in sums.items()}
        report = LossReport(row["l_seg"], row["l_dist"], row["l_xseg"],
                            lam_seg=lambdas[0], lam_xseg=lambdas[1], lam_dist=lambdas[2])
        row["epoch"] = epoch
        row["l_total"] = report.l_total
        curve.append(row)
    if config.loss_csv:
        with open(config.loss_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "l_seg", "l_dist", "l_xseg", "l_total"])
            writer.writeheader()
            writer.writerows(curve)
    return model, curve
