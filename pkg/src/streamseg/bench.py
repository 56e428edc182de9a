"""Fusion-latency benchmark: the standard acceptance scene with the
memory and scene state pre-grown to stress matching and rasterization."""
import tempfile

import numpy as np

from . import fusion, pipeline, qim, synthworld
from .frame_stream import read_frame, read_manifest


def grow_state(memory, scene, rng, d=64, n_s=8, min_queries=500, min_instances=50):
    """Seed the bank/scene with plausible historical content."""
    while len(scene.instances) < min_instances or memory.n_q_total < min_queries:
        q = rng.normal(size=d)
        qid = memory.append_query(q, frame_t=-1, local_id=-1)
        center = rng.uniform(-3, 3, size=3)
        pts = center + rng.normal(scale=0.2, size=(12, 3))
        key_points = fusion.dedup_points(pts, scene.voxel)
        kids = {memory.add_key(p, -1, {qid}) for p in pts}
        if len(scene.instances) < min_instances:
            scene.instances.append(fusion.InstanceRecord(
                instance_id=len(scene.instances), query=q,
                sdt=np.abs(rng.normal(size=n_s)), key_points=key_points,
                key_ids=kids, n_obs=1, point_count=100, canonical_qid=qid))


def run_bench(seed=7, min_queries=500, min_instances=50):
    spec = synthworld.acceptance_scene(seed)
    with tempfile.TemporaryDirectory() as tmp:
        synthworld.generate(spec, tmp)
        config = pipeline.RunConfig(seq=tmp, d=64, seed=seed)
        scene = fusion.SceneState(voxel=config.voxel)
        memory = qim.QueryIndexMemory()
        rng = np.random.default_rng(seed)
        grow_state(memory, scene, rng, d=config.d, n_s=spec.n_s,
                   min_queries=min_queries, min_instances=min_instances)
        model = None
        latencies = []
        for path in read_manifest(tmp):
            frame = read_frame(path)
            if model is None:
                model = pipeline.make_model_for(config, frame.F2d.shape[-1], frame.F3d.shape[-1])
            _, secs = pipeline.process_frame(frame, model, memory, scene, config)
            latencies.append(secs * 1000.0)
    arr = np.asarray(latencies)
    return {
        "bank": memory.n_q_total, "instances": len(scene.instances),
        "p50": float(np.percentile(arr, 50)), "p95": float(np.percentile(arr, 95)),
        "latencies_ms": latencies,
    }
