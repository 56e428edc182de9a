"""Spatial query memory: key sampling, association, rasterization,
context retrieval, and the contextual feature map."""
import numpy as np
import pytest

from streamseg import qim
from streamseg.errors import InternalConsistencyError, PreconditionError

from conftest import make_frame, make_pose, random_rotation


def memory_with(queries, keys):
    """Build a memory from (vector) queries and (point, cited ids) keys."""
    mem = qim.QueryIndexMemory()
    for v in queries:
        mem.append_query(v)
    for p, ids in keys:
        mem.add_key(p, 0, ids)
    return mem


class TestSampleKeys:
    def test_constant_pointmap(self):
        rec = make_frame(H=32, W=32, patch_size=16)
        rec.X = np.full((32, 32, 3), 1.5, dtype=np.float32)
        pts, cells = qim.sample_keys(rec)
        assert len(pts) == rec.h * rec.w
        assert np.allclose(pts, 1.5)
        assert np.array_equal(cells, np.arange(rec.h * rec.w))

    def test_window_mean(self):
        rec = make_frame(H=2, W=2, patch_size=2, n_instances=1,
                         L=np.zeros((2, 2), dtype=np.uint16))
        rec.X = np.array([[[0, 0, 0], [2, 0, 0]],
                          [[0, 2, 0], [2, 2, 0]]], dtype=np.float32)
        pts, cells = qim.sample_keys(rec, pool=2)
        assert np.allclose(pts, [[1, 1, 0]])
        assert list(cells) == [0]

    def test_non_finite_window_excluded(self):
        rec = make_frame(H=32, W=32, patch_size=16)
        X = rec.X.copy()
        X[0, 0, 0] = np.inf
        rec.X = X
        pts, cells = qim.sample_keys(rec)
        assert 0 not in cells
        assert len(pts) == rec.h * rec.w - 1

    def test_matches_window_mean_oracle(self):
        rec = make_frame(H=32, W=32, patch_size=16, seed=3)
        pts, cells = qim.sample_keys(rec, pool=8)
        h, w = 4, 4
        for p, c in zip(pts, cells):
            i, j = divmod(int(c), w)
            want = rec.X[i * 8:(i + 1) * 8, j * 8:(j + 1) * 8].reshape(-1, 3).mean(axis=0)
            assert np.allclose(p, want, rtol=1e-6, atol=1e-6)

    def test_pool_must_divide(self):
        rec = make_frame(H=32, W=32, patch_size=16)
        with pytest.raises(PreconditionError):
            qim.sample_keys(rec, pool=5)


class TestAssociate:
    def test_background_cell_gives_empty_row(self):
        rows = qim.associate([0], np.zeros((2, 2), dtype=int), {1: 7})
        assert rows == [set()]

    def test_labeled_cell_cites_single_query(self):
        grid = np.array([[0, 2], [0, 0]])
        rows = qim.associate([1], grid, {2: 9})
        assert rows == [{9}]

    def test_matches_per_cell_lookup_oracle(self):
        rng = np.random.default_rng(5)
        grid = rng.integers(0, 4, size=(4, 4))
        mapping = {1: 10, 2: 20, 3: 30}
        cells = list(range(16))
        rows = qim.associate(cells, grid, mapping)
        flat = grid.reshape(-1)
        for c, row in zip(cells, rows):
            lab = int(flat[c])
            assert row == ({mapping[lab]} if lab in mapping else set())
        assert all(len(r) <= 1 for r in rows)


class TestBank:
    def test_append_only_dense_ids(self):
        mem = qim.QueryIndexMemory()
        ids = [mem.append_query(np.ones(4) * i) for i in range(5)]
        assert ids == [0, 1, 2, 3, 4]
        assert np.allclose(mem.bank[3], 3.0)

    def test_capacity_cap_refuses_eviction(self):
        mem = qim.QueryIndexMemory(max_bank=2)
        mem.append_query(np.ones(2))
        mem.append_query(np.ones(2))
        with pytest.raises(InternalConsistencyError):
            mem.append_query(np.ones(2))

    def test_retarget_rewrites_associations(self):
        mem = memory_with([np.zeros(2), np.ones(2)],
                          [(np.zeros(3), {0}), (np.ones(3), {0})])
        mem.retarget(0, 1)
        assert mem.key_rows[0] == {1} and mem.key_rows[1] == {1}
        assert mem.col_index[1] == {0, 1}
        assert mem.col_index[0] == set()


class TestRasterize:
    def _centered_K(self, f=50.0, W=64, H=64):
        return np.array([[f, 0, W / 2], [0, f, H / 2], [0, 0, 1.0]])

    def test_forward_key_lands_in_center_patch(self):
        mem = memory_with([np.ones(4)], [(np.array([0, 0, 2.0]), {0})])
        raster = qim.rasterize(mem, np.eye(4), self._centered_K(), (4, 4), 16)
        # principal point (32, 32) -> patch row 2, col 2 of the 4x4 grid
        assert raster.cells == {2 * 4 + 2: {0}}

    def test_key_behind_camera_dropped(self):
        mem = memory_with([np.ones(4)], [(np.array([0, 0, -2.0]), {0})])
        raster = qim.rasterize(mem, np.eye(4), self._centered_K(), (4, 4), 16)
        assert raster.cells == {}

    def test_out_of_frustum_dropped(self):
        mem = memory_with([np.ones(4)], [(np.array([50.0, 0, 2.0]), {0})])
        raster = qim.rasterize(mem, np.eye(4), self._centered_K(), (4, 4), 16)
        assert raster.cells == {}

    def test_non_invertible_pose_rejected(self):
        mem = memory_with([np.ones(4)], [(np.zeros(3), {0})])
        pose = np.zeros((4, 4))
        with pytest.raises(PreconditionError):
            qim.rasterize(mem, pose, self._centered_K(), (4, 4), 16)

    def test_matches_per_key_projection_oracle(self):
        rng = np.random.default_rng(8)
        pose = make_pose(rng)
        K = self._centered_K()
        queries = [rng.normal(size=4) for _ in range(5)]
        keys = [(rng.normal(scale=3.0, size=3), {rng.integers(0, 5)})
                for _ in range(20)]
        mem = memory_with(queries, keys)
        raster = qim.rasterize(mem, pose, K, (4, 4), 16)
        # independent oracle: explicit inverse pose, one key at a time
        want = {}
        Pinv = np.linalg.inv(pose)
        for p, ids in keys:
            pc = Pinv[:3, :3] @ p + Pinv[:3, 3]
            if pc[2] <= qim.Z_MIN:
                continue
            u = K[0, 0] * pc[0] / pc[2] + K[0, 2]
            v = K[1, 1] * pc[1] / pc[2] + K[1, 2]
            if not (0 <= u < 64 and 0 <= v < 64):
                continue
            cell = int(v) // 16 * 4 + int(u) // 16
            want.setdefault(cell, set()).update(ids)
        assert raster.cells == want

    def test_self_consistency_planar_scene(self):
        # keys sampled from a camera-facing plane re-rasterize onto their
        # own source patch (within one patch)
        H = W = 64
        ps = 16
        K = self._centered_K(f=55.0, W=W, H=H)
        jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
        z = 2.0
        X = np.stack([(jj - K[0, 2]) / K[0, 0] * z,
                      (ii - K[1, 2]) / K[1, 1] * z,
                      np.full_like(jj, z)], axis=-1).astype(np.float32)
        rec = make_frame(H=H, W=W, patch_size=ps, X=X,
                         L=np.zeros((H, W), dtype=np.uint16), n_instances=0)
        rec.K = K
        pts, cells = qim.sample_keys(rec)
        w = W // ps
        for p, src in zip(pts, cells):
            mem = memory_with([np.ones(4)], [(p, {0})])
            raster = qim.rasterize(mem, np.eye(4), K, (H // ps, W // ps), ps)
            assert len(raster.cells) == 1
            hit = next(iter(raster.cells))
            si, sj = divmod(int(src), w)
            hi, hj = divmod(int(hit), w)
            assert abs(si - hi) <= 1 and abs(sj - hj) <= 1


class TestRetrieve:
    def test_empty_raster_empty_ctx(self):
        mem = memory_with([np.ones(3)], [])
        ids, vecs = qim.retrieve_ctx(qim.RasterIndexMap(h=2, w=2), mem)
        assert ids == [] and vecs.shape[0] == 0

    def test_dedup_and_ascending_order(self):
        vecs = [np.full(3, i, dtype=float) for i in range(4)]
        mem = memory_with(vecs, [])
        raster = qim.RasterIndexMap(h=2, w=2, cells={0: {3}, 1: {1, 3}})
        ids, out = qim.retrieve_ctx(raster, mem)
        assert ids == [1, 3]
        assert np.allclose(out, [vecs[1], vecs[3]])

    def test_matches_union_oracle(self):
        rng = np.random.default_rng(9)
        vecs = [rng.normal(size=3) for _ in range(6)]
        mem = memory_with(vecs, [])
        cells = {c: set(rng.choice(6, size=rng.integers(1, 4), replace=False).tolist())
                 for c in rng.choice(16, size=5, replace=False)}
        raster = qim.RasterIndexMap(h=4, w=4, cells=cells)
        ids, out = qim.retrieve_ctx(raster, mem)
        want = sorted(set().union(*cells.values()))
        assert ids == want
        assert len(ids) == len(set(ids))

    def test_dangling_id_detected(self):
        mem = memory_with([np.ones(3)], [])
        raster = qim.RasterIndexMap(h=1, w=1, cells={0: {5}})
        with pytest.raises(InternalConsistencyError):
            qim.retrieve_ctx(raster, mem)


class TestCtxFeatureMap:
    def test_single_query_copied(self):
        v = np.array([1.0, 2.0, 3.0])
        mem = memory_with([v], [])
        raster = qim.RasterIndexMap(h=2, w=2, cells={3: {0}})
        F, m_ind = qim.ctx_feature_map(raster, mem, 3)
        assert np.allclose(F[3], v)
        assert list(m_ind) == [False, False, False, True]

    def test_two_queries_averaged(self):
        u, v = np.array([2.0, 0.0]), np.array([0.0, 4.0])
        mem = memory_with([u, v], [])
        raster = qim.RasterIndexMap(h=1, w=2, cells={1: {0, 1}})
        F, m_ind = qim.ctx_feature_map(raster, mem, 2)
        assert np.allclose(F[1], (u + v) / 2)
        assert np.allclose(F[0], 0)

    def test_matches_per_cell_mean_oracle(self):
        rng = np.random.default_rng(10)
        vecs = [rng.normal(size=4) for _ in range(5)]
        mem = memory_with(vecs, [])
        cells = {0: {1, 2}, 3: {0}, 7: {2, 3, 4}}
        raster = qim.RasterIndexMap(h=2, w=4, cells=cells)
        F, m_ind = qim.ctx_feature_map(raster, mem, 4)
        for c in range(8):
            if c in cells:
                assert np.allclose(F[c], np.mean([vecs[q] for q in cells[c]], axis=0))
                assert m_ind[c]
            else:
                assert np.allclose(F[c], 0) and not m_ind[c]

    def test_support_mask_matches_raster_indicator(self):
        raster = qim.RasterIndexMap(h=2, w=2, cells={0: {0}, 2: {0}})
        mem = memory_with([np.ones(2)], [])
        _, m_ind = qim.ctx_feature_map(raster, mem, 2)
        assert np.array_equal(m_ind, raster.m_ind.reshape(-1))
