"""Representation building checked against the synthetic renderer's ground
truth: focal ratios, Beta statistics, sparse placement (similarity-Procrustes
against the true canonical keypoints), and dense-cloud surface distance."""

import numpy as np
import pytest

from semcorr import reprbuild, synthgen, tensorio
from semcorr.errors import EmptyMerge, InsufficientKeypoints
from semcorr.geometry import quad_features, similarity_procrustes
from semcorr.reprbuild import (
    DEFAULT_BUILD_CONFIG,
    build_dense,
    build_representation,
    build_sparse,
    covisibility,
    estimate_focals,
    fit_geom_stats,
    merge_clouds,
    quad_log_likelihood,
    sample_quadruples,
)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    man = synthgen.make_benchmark(
        "airplane", n_train=10, n_test_pairs=2, seed=3, noise=0.0, out_dir=out
    )
    samples = tensorio.load_samples(man, out, "train")
    cls = synthgen.CLASS_FACTORIES["airplane"](0)
    return man, out, samples, cls


@pytest.fixture(scope="module")
def built(bench):
    man, out, samples, cls = bench
    vis = covisibility(samples, cls.n_keypoints)
    quads = sample_quadruples(vis, 2000, 0)
    f_init = [max(s.image_size) for s in samples]
    focals, energy, trace = estimate_focals(samples, quads, f_init, 400, 0.03)
    stats = fit_geom_stats(samples, focals, quads, 0)
    sparse = build_sparse(stats, samples, None, 0, focals)
    return vis, quads, focals, energy, trace, stats, sparse


class TestQuadrupleSampling:
    def test_shape_and_covisibility(self, bench, built):
        _, _, samples, cls = bench
        vis, quads = built[0], built[1]
        assert quads.shape[1] == 4
        # every edge of every sampled quadruple is co-visible in >= 2 images
        for a, b in [(0, 1), (2, 3)]:
            both = vis[:, quads[:, a]] & vis[:, quads[:, b]]
            assert (both.sum(axis=0) >= 2).all()

    def test_deterministic(self, built):
        vis, quads = built[0], built[1]
        again = sample_quadruples(vis, 2000, 0)
        assert np.array_equal(quads, again)
        # with a cap below the candidate count the seed must matter
        a = sample_quadruples(vis, 100, 0)
        b = sample_quadruples(vis, 100, 1)
        assert len(a) == len(b) == 100
        assert not np.array_equal(a, b)


class TestFocalEstimation:
    def test_ratios_recovered(self, bench, built):
        man, out, samples, _ = bench
        focals = built[2]
        gt = np.array([synthgen.load_gt(e, out)["focal"] for e in man["train"]])
        r_est = np.asarray(focals) / focals[0]
        r_gt = gt / gt[0]
        assert np.max(np.abs(r_est - r_gt) / r_gt) < 0.05

    def test_energy_trace_non_increasing_envelope(self, built):
        trace = np.asarray(built[4])
        # best-so-far envelope of the trace must never go up
        env = np.minimum.accumulate(trace)
        assert np.all(np.diff(env) <= 1e-12)
        assert env[-1] < env[0]

    def test_too_few_images(self, bench):
        _, _, samples, _ = bench
        with pytest.raises(InsufficientKeypoints):
            estimate_focals(samples[:1], np.zeros((1, 4), int))


class TestGeomStats:
    def test_beta_means_match_true_shape(self, bench, built):
        """With noise-free depth the per-quadruple features are nearly
        constant across views, so the fitted Beta means must sit on the
        features of the true canonical shape."""
        _, _, _, cls = bench
        stats = built[5]
        A, R = quad_features(cls.keypoints, stats.quadruples)
        mu_a = stats.angle_ab[:, 0] / stats.angle_ab.sum(axis=1)
        mu_r = stats.ratio_ab[:, 0] / stats.ratio_ab.sum(axis=1)
        assert np.mean(np.abs(A / np.pi - mu_a)) < 0.01
        assert np.mean(np.abs(R - mu_r)) < 0.01

    def test_quadruples_kept_only_when_valid_enough(self, bench, built):
        _, _, samples, cls = bench
        vis, stats = built[0], built[5]
        q = stats.quadruples
        counts = (
            vis[:, q[:, 0]] & vis[:, q[:, 1]] & vis[:, q[:, 2]] & vis[:, q[:, 3]]
        ).sum(axis=0)
        assert (counts >= 3).all()


class TestSparsePlacement:
    def test_gauge(self, built):
        sparse = built[6]
        P = sparse.positions
        order = np.argsort(-sparse.vis_count, kind="stable")
        assert np.allclose(P[order[0]], 0.0, atol=1e-12)
        assert np.allclose(P[order[1]], [1, 0, 0], atol=1e-12)
        assert abs(P[order[2], 2]) < 1e-12 and P[order[2], 1] >= 0

    def test_recovers_true_shape(self, bench, built):
        _, _, _, cls = bench
        P = built[6].positions
        s, r, t = similarity_procrustes(cls.keypoints, P)
        resid = np.linalg.norm((s * cls.keypoints @ r.T + t) - P, axis=1)
        radius = np.linalg.norm(P - P.mean(axis=0), axis=1).max()
        assert resid.max() / radius < 0.02
        # handedness must match the training images, not the mirror image
        assert np.linalg.det(r) > 0

    def test_edge_lengths_within_5_percent(self, bench, built):
        _, _, _, cls = bench
        P = built[6].positions
        G = cls.keypoints
        iu = np.triu_indices(len(G), k=1)
        d_est = np.linalg.norm(P[iu[0]] - P[iu[1]], axis=1)
        d_gt = np.linalg.norm(G[iu[0]] - G[iu[1]], axis=1)
        scale = np.median(d_est / d_gt)
        assert np.max(np.abs(d_est - scale * d_gt) / (scale * d_gt)) < 0.05

    def test_likelihood_at_truth_not_better(self, bench, built):
        """The optimizer should find a configuration at least as likely as the
        ground-truth shape (which is a near-optimum of the fitted stats)."""
        _, _, _, cls = bench
        stats, sparse = built[5], built[6]
        assert quad_log_likelihood(stats, sparse.positions) >= quad_log_likelihood(
            stats, cls.keypoints
        ) - 1.0

    def test_features_unit_norm_and_match_prototypes(self, bench, built):
        _, _, _, cls = bench
        sparse = built[6]
        norms = np.linalg.norm(sparse.features, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)
        # the feature grid is coarser than the image, so a keypoint's cell can
        # mix in body-part prototypes; still, each keypoint must be closest to
        # its own prototype by a clear margin
        sims = sparse.features @ cls.prototypes[: cls.n_keypoints].T
        assert (np.argmax(sims, axis=1) == np.arange(cls.n_keypoints)).all()
        assert (np.diag(sims) > 0.5).all()

    def test_placement_trace_non_decreasing(self, built):
        for t in built[6].placement_trace:
            arr = np.asarray(t)
            assert np.all(np.diff(arr) >= -1e-12)

    def test_deterministic(self, bench, built):
        _, _, samples, _ = bench
        _, _, focals, _, _, stats, sparse = built
        again = build_sparse(stats, samples, None, 0, focals)
        assert np.array_equal(sparse.positions, again.positions)
        assert np.array_equal(sparse.features, again.features)

    def test_equilateral_triangle(self, tmp_path):
        # 3 keypoints is below the focal-estimation minimum, so build the
        # sparse cloud directly with the true focals
        man = synthgen.make_benchmark(
            "triangle", n_train=8, n_test_pairs=1, seed=5, noise=0.0,
            out_dir=tmp_path,
        )
        samples = tensorio.load_samples(man, tmp_path, "train")
        focals = [synthgen.load_gt(e, tmp_path)["focal"] for e in man["train"]]
        vis = covisibility(samples, 3)
        quads = sample_quadruples(vis, 2000, 0)
        stats = fit_geom_stats(samples, focals, quads, 0)
        sparse = build_sparse(stats, samples, None, 0, focals)
        P = sparse.positions
        sides = np.linalg.norm(P - np.roll(P, 1, axis=0), axis=1)
        assert np.max(np.abs(sides / sides.mean() - 1.0)) < 0.01


class TestDenseCloud:
    def test_merged_points_lie_on_surface(self, bench, built):
        man, out, samples, cls = bench
        _, _, focals, _, _, stats, sparse = built
        pts, feats = merge_clouds(sparse, samples, focals, DEFAULT_BUILD_CONFIG)
        assert len(pts) == len(feats)
        # bring the true surface into the canonical frame and measure there
        s, r, t = similarity_procrustes(cls.keypoints, sparse.positions)
        surf = cls.surface_samples(200_000, np.random.default_rng(0))
        surf_canon = s * surf @ r.T + t
        from scipy.spatial import cKDTree

        d, _ = cKDTree(surf_canon).query(pts)
        assert np.percentile(d, 95) <= 0.05

    def test_dense_build_on_surface(self, bench, built):
        man, out, samples, cls = bench
        _, _, focals, _, _, stats, sparse = built
        dense = build_dense(sparse, stats, samples, focals, None, 0)
        decoded = dense.decode(sparse.positions)
        s, r, t = similarity_procrustes(cls.keypoints, sparse.positions)
        surf = cls.surface_samples(200_000, np.random.default_rng(0))
        surf_canon = s * surf @ r.T + t
        from scipy.spatial import cKDTree

        d, _ = cKDTree(surf_canon).query(decoded)
        assert (d <= 0.05).mean() >= 0.95
        assert np.allclose(np.linalg.norm(dense.features, axis=1), 1.0, atol=1e-9)
        assert (dense.population >= 1).all()

    def test_empty_merge(self, bench, built):
        _, _, samples, _ = bench
        _, _, focals, _, _, stats, sparse = built
        cfg = {**DEFAULT_BUILD_CONFIG, "density_min": 10 ** 9}
        with pytest.raises(EmptyMerge):
            build_dense(sparse, stats, samples, focals, cfg, 0)


class TestTopLevel:
    def test_full_build_roundtrip(self, bench, tmp_path):
        man, out, samples, cls = bench
        rep = build_representation(man, out, seed=0)
        assert rep.category == man.get("category", "unknown")
        tensorio.save_container(rep, tmp_path / "rep")
        back = tensorio.load_container(tmp_path / "rep")
        # tensor payloads are float32, so exact equality holds after the cast
        assert np.array_equal(
            back.sparse.positions, rep.sparse.positions.astype(np.float32)
        )
        assert np.array_equal(
            back.dense.features, rep.dense.features.astype(np.float32)
        )
        assert np.array_equal(back.geom_stats.quadruples, rep.geom_stats.quadruples)
        assert np.array_equal(
            back.dense.anchor_w, rep.dense.anchor_w.astype(np.float32)
        )

    def test_full_build_deterministic(self, bench):
        man, out, _, _ = bench
        a = build_representation(man, out, seed=0)
        b = build_representation(man, out, seed=0)
        assert np.array_equal(a.sparse.positions, b.sparse.positions)
        assert np.array_equal(a.dense.features, b.dense.features)
        assert np.array_equal(a.dense.anchor_idx, b.dense.anchor_idx)
