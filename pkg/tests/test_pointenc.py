import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import finite_diff_check
from moniground import tensor as T
from moniground.pointenc import (
    CandidateSet,
    EncoderConfig,
    PointEncoder,
    SALayerSpec,
    assemble_features,
    ball_group,
    fps_distance,
    fps_feature,
    modality_feature_dim,
)


def brute_force_fps(points, k, metric):
    """Exhaustive greedy max-min selection with lowest-index tie-break."""
    n = len(points)
    chosen = [0]
    while len(chosen) < k:
        best_i, best_d = None, -1.0
        for i in range(n):
            d = min(metric(i, c) for c in chosen)
            if d > best_d + 1e-12:
                best_i, best_d = i, d
        chosen.append(best_i)
    return np.array(chosen)


class TestFPSDistance:
    def test_k_equals_n_is_permutation(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(9, 3))
        idx = fps_distance(pts, 9)
        assert sorted(idx) == list(range(9))

    def test_padding_with_zero(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        np.testing.assert_array_equal(fps_distance(pts, 5), [0, 1, 0, 0, 0])

    def test_collinear_example(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [9.0, 0, 0]])
        np.testing.assert_array_equal(sorted(fps_distance(pts, 2)), [0, 3])

    @given(st.integers(0, 5_000), st.integers(2, 10))
    @settings(max_examples=50, deadline=None)
    def test_matches_brute_force_small(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, 3))
        k = int(rng.integers(1, n + 1))
        metric = lambda i, j: float(np.linalg.norm(pts[i] - pts[j]))
        np.testing.assert_array_equal(fps_distance(pts, k), brute_force_fps(pts, k, metric))

    def test_rigid_transform_invariance(self):
        from moniground.geom3d import SE3Pose, se3_apply

        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 3))
        moved = se3_apply(SE3Pose.from_yaw(0.9, (4.0, -2.0, 1.0)), pts)
        np.testing.assert_array_equal(fps_distance(pts, 12), fps_distance(moved, 12))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fps_distance(np.zeros((0, 3)), 1)


class TestFPSFeature:
    def test_equal_features_reduces_to_distance_fps(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(30, 3))
        feats = np.ones((30, 8))
        np.testing.assert_array_equal(fps_feature(pts, feats, 10, 1.0), fps_distance(pts, 10))

    def test_equal_positions_selects_by_features(self):
        rng = np.random.default_rng(6)
        pts = np.zeros((20, 3))
        feats = rng.normal(size=(20, 6))
        metric = lambda i, j: float(np.linalg.norm(feats[i] - feats[j]))
        np.testing.assert_array_equal(
            fps_feature(pts, feats, 8, 1.0), brute_force_fps(pts, 8, metric)
        )

    @given(st.integers(0, 5_000))
    @settings(max_examples=50, deadline=None)
    def test_matches_brute_force_small(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        pts = rng.normal(size=(n, 3))
        feats = rng.normal(size=(n, 4))
        lam = float(rng.uniform(0.1, 3.0))
        metric = lambda i, j: float(
            np.linalg.norm(feats[i] - feats[j]) + lam * np.linalg.norm(pts[i] - pts[j])
        )
        np.testing.assert_array_equal(
            fps_feature(pts, feats, 3 if n >= 3 else n, lam),
            brute_force_fps(pts, 3 if n >= 3 else n, metric),
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fps_feature(np.zeros((4, 3)), np.zeros((3, 2)), 2)


class TestBallGroup:
    def test_huge_radius_includes_everything(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(6, 3))
        groups = ball_group(pts[:2], pts, 100.0, 6)
        for row in groups:
            assert sorted(row) == list(range(6))

    def test_isolated_center_uses_nearest(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [50.0, 0, 0]])
        groups = ball_group(np.array([[49.0, 0.0, 0.0]]), pts, 0.5, 4)
        np.testing.assert_array_equal(groups, [[2, 2, 2, 2]])

    def test_partial_fill_repeats_first(self):
        pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [9.0, 0, 0]])
        groups = ball_group(np.array([[0.0, 0.0, 0.0]]), pts, 0.5, 4)
        np.testing.assert_array_equal(groups, [[0, 1, 0, 0]])

    @given(st.integers(0, 5_000))
    @settings(max_examples=50, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-5, 5, size=(40, 3))
        centers = rng.uniform(-5, 5, size=(8, 3))
        radius, cap = float(rng.uniform(0.5, 6.0)), int(rng.integers(1, 6))
        groups = ball_group(centers, pts, radius, cap)
        for ci, center in enumerate(centers):
            within = [i for i in range(40) if np.linalg.norm(pts[i] - center) <= radius]
            if within:
                expected = (within[:cap] + [within[0]] * cap)[:cap]
            else:
                nearest = int(np.argmin([np.linalg.norm(p - center) for p in pts]))
                expected = [nearest] * cap
            np.testing.assert_array_equal(groups[ci], expected)


def tiny_encoder(rng, in_dim=2):
    cfg = EncoderConfig(
        sa_layers=(
            SALayerSpec(("distance",), 8, 2.0, 4, (6, 8)),
            SALayerSpec(("distance", "feature"), 6, 4.0, 4, (8, 10)),
        ),
        m_candidates=4,
        feature_dim=12,
        cg_radius=4.0,
        cg_cap=4,
        shift_hidden=6,
    )
    return PointEncoder(cfg, in_dim, rng=rng)


class TestSetAbstraction:
    def test_single_point_single_neighbor_identity_pool(self):
        rng = np.random.default_rng(8)
        spec = SALayerSpec(("distance",), 1, 1.0, 1, (5,))
        enc = PointEncoder(EncoderConfig(sa_layers=(spec,), m_candidates=1, feature_dim=4,
                                         cg_radius=1.0, cg_cap=1, shift_hidden=3), 2, rng=rng)
        pos = np.zeros((1, 3))
        feats = T.constant(np.array([[0.3, -0.7]]))
        centers, out = enc._sa_forward(0, spec, pos, feats, None)
        assert out.shape == (1, 5)
        raw = T.relu(
            T.add(T.matmul(T.constant([[0.0, 0.0, 0.0, 0.3, -0.7]]), enc.params["enc.sa0.w0"]),
                  enc.params["enc.sa0.b0"])
        )
        np.testing.assert_allclose(out.data, raw.data, atol=1e-12)

    def test_neighbor_permutation_invariance(self):
        rng = np.random.default_rng(9)
        enc = tiny_encoder(rng)
        spec = enc.config.sa_layers[0]
        pts = rng.uniform(-1, 1, size=(10, 3))
        feats_np = rng.normal(size=(10, 2))
        centers, out = enc._sa_forward(0, spec, pts, T.constant(feats_np), None)
        perm = rng.permutation(10)
        inv = np.empty(10, dtype=int)
        inv[perm] = np.arange(10)
        # permute input points; cached plan keeps the same centers via remapped groups
        groups = ball_group(centers, pts, spec.radius, spec.cap)
        from moniground.pointenc import LayerPlan

        plan = LayerPlan([inv[fps_distance(pts, 8)]], inv[groups])
        centers2, out2 = enc._sa_forward(0, spec, pts[perm], T.constant(feats_np[perm]), plan)
        np.testing.assert_allclose(out2.data, out.data, atol=1e-12)

    def test_gradients_through_two_stacked_layers(self):
        rng = np.random.default_rng(10)
        enc = tiny_encoder(rng)
        pts = rng.uniform(-2, 2, size=(14, 3))
        feats_np = rng.normal(size=(14, 2))
        weights = {k: v for k, v in enc.params.items() if k.startswith("enc.sa")}

        def loss():
            pos, feats = pts, T.constant(feats_np)
            for li, layer in enumerate(enc.config.sa_layers):
                pos, feats = enc._sa_forward(li, layer, pos, feats, None)
            return T.mean(feats)

        finite_diff_check(loss, weights.values(), max_coords=6, rng=rng)


class TestCandidateGeneration:
    def test_zero_shift_mlp_keeps_seeds(self):
        rng = np.random.default_rng(11)
        enc = tiny_encoder(rng)
        enc.params["enc.shift.w1"].data[:] = 0.0
        enc.params["enc.shift.b1"].data[:] = 0.0
        pts = rng.uniform(-2, 2, size=(20, 3))
        out = enc.forward(pts, T.constant(rng.normal(size=(20, 2))))
        np.testing.assert_array_equal(out.positions.data, out.seeds)
        np.testing.assert_array_equal(out.shifts.data, 0.0)

    @pytest.mark.parametrize("n_points", [1, 3, 4, 17, 60])
    def test_candidate_count_always_m(self, n_points):
        rng = np.random.default_rng(12)
        enc = tiny_encoder(rng)
        pts = rng.uniform(-2, 2, size=(n_points, 3))
        out = enc.forward(pts, T.constant(rng.normal(size=(n_points, 2))))
        m = enc.config.m_candidates
        assert out.positions.shape == (m, 3)
        assert out.features.shape == (m, enc.config.feature_dim)
        assert out.shifts.shape == (m, 3)
        assert len(out.seeds) == m

    def test_shift_gradients_flow(self):
        rng = np.random.default_rng(13)
        enc = tiny_encoder(rng)
        pts = rng.uniform(-2, 2, size=(16, 3))
        feats_np = rng.normal(size=(16, 2))
        shift_params = [enc.params[k] for k in enc.params if k.startswith("enc.shift")]

        def loss():
            out = enc.forward(pts, T.constant(feats_np))
            return T.mean(out.features)

        finite_diff_check(loss, shift_params, max_coords=6, rng=rng)

    def test_deterministic_forward(self):
        rng = np.random.default_rng(14)
        enc = tiny_encoder(rng)
        pts = rng.uniform(-2, 2, size=(25, 3))
        feats_np = rng.normal(size=(25, 2))
        a = enc.forward(pts, T.constant(feats_np))
        b = enc.forward(pts, T.constant(feats_np))
        np.testing.assert_array_equal(a.features.data, b.features.data)
        np.testing.assert_array_equal(a.positions.data, b.positions.data)

    def test_plan_matches_unplanned_forward(self):
        rng = np.random.default_rng(15)
        enc = tiny_encoder(rng)
        pts = rng.uniform(-2, 2, size=(30, 3))
        feats_np = rng.normal(size=(30, 2))
        plan = enc.precompute_plan(pts)
        a = enc.forward(pts, T.constant(feats_np))
        b = enc.forward(pts, T.constant(feats_np), plan)
        np.testing.assert_array_equal(a.features.data, b.features.data)


class TestModalities:
    def test_dims(self):
        assert modality_feature_dim("xyz") == 1
        assert modality_feature_dim("xyz+rgb") == 3
        assert modality_feature_dim("xyz+intensity") == 1
        assert modality_feature_dim("xyz+rgb+intensity") == 4

    def test_assemble(self):
        rgb = np.full((5, 3), 0.5)
        inten = np.full(5, 0.25)
        assert assemble_features(rgb, inten, "xyz").shape == (5, 1)
        np.testing.assert_array_equal(assemble_features(rgb, inten, "xyz")[:, 0], 1.0)
        assert assemble_features(rgb, inten, "xyz+rgb+intensity").shape == (5, 4)
        with pytest.raises(ValueError):
            assemble_features(rgb, inten, "rgb")
