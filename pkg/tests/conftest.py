"""Shared fixtures and builders for the test suite."""
import time

import numpy as np
import pytest

from streamseg.frame_stream import FrameRecord, validate_frame


def random_rotation(rng):
    """Uniform-ish proper rotation via QR with positive-diagonal fix."""
    M = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(M)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def make_pose(rng=None):
    P = np.eye(4)
    if rng is not None:
        P[:3, :3] = random_rotation(rng)
        P[:3, 3] = rng.normal(scale=2.0, size=3)
    return P


def make_frame(t=0, H=32, W=32, patch_size=16, d2=4, d3=4, n_s=3,
               n_instances=2, seed=0, pose=None, L=None, X=None, A=None):
    """Small valid FrameRecord with random finite payloads."""
    rng = np.random.default_rng(seed)
    h, w = H // patch_size, W // patch_size
    K = np.array([[40.0, 0, W / 2], [0, 40.0, H / 2], [0, 0, 1]])
    P = make_pose() if pose is None else pose
    if X is None:
        X = rng.normal(size=(H, W, 3)).astype(np.float32)
    if L is None:
        # contiguous labels 0..n_instances laid out as horizontal bands
        L = np.zeros((H, W), dtype=np.uint16)
        band = H // (n_instances + 1)
        for lab in range(1, n_instances + 1):
            L[lab * band:(lab + 1) * band] = lab
    F3d = rng.normal(size=(h, w, d3)).astype(np.float32)
    F2d = rng.normal(size=(h, w, d2)).astype(np.float32)
    if A is None:
        A = rng.uniform(0.1, 1.0, size=(n_s, h * w))
        A = (A / A.sum(axis=1, keepdims=True)).astype(np.float32)
    rec = FrameRecord(t=t, H=H, W=W, patch_size=patch_size, K=K, P=P,
                      X=X, F3d=F3d, F2d=F2d, A=A.astype(np.float32),
                      L=np.asarray(L, dtype=np.uint16))
    return validate_frame(rec)


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    """Tiny 3-object, 6-frame synthetic sequence shared by fast tests."""
    from streamseg import synthworld
    out = tmp_path_factory.mktemp("small_scene")
    spec = synthworld.random_scene(3, n_objects=3, frames=6, trajectory="orbit",
                                  feature_sigma=0.05, fragment_k=2,
                                  H=64, W=64, patch_size=8)
    synthworld.generate(spec, str(out))
    return str(out)


@pytest.fixture(scope="session")
def acceptance_artifacts(tmp_path_factory):
    """Standard end-to-end scene plus a toy-trained model; shared by the
    end-to-end and training acceptance checks. Records wall-clock of each
    phase so criteria can assert their budgets."""
    from streamseg import objectives, synthworld
    from streamseg.frame_stream import read_frame, read_manifest
    from streamseg.refiner import save_weights

    out = tmp_path_factory.mktemp("acceptance_scene")
    t0 = time.perf_counter()
    spec = synthworld.acceptance_scene(seed=7)
    synthworld.generate(spec, str(out))
    t_gen = time.perf_counter() - t0

    frames = [read_frame(p) for p in read_manifest(str(out))]
    t0 = time.perf_counter()
    model, curve = objectives.toy_train(frames, objectives.TrainConfig())
    t_train = time.perf_counter() - t0
    weights = str(out / "toy.sswt") if hasattr(out, "__truediv__") else out + "/toy.sswt"
    save_weights(model, weights)
    return {
        "scene_dir": str(out),
        "weights": weights,
        "curve": curve,
        "t_gen": t_gen,
        "t_train": t_train,
    }
