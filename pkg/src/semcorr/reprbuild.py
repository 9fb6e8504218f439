"""Builds the 3D object-class representation: per-image focal estimation,
Beta statistics over edge angle/ratio features, the gauge-fixed sparse
canonical cloud, and the barycentric dense cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMerge, InsufficientKeypoints, PlacementFailed, TooFewSamples
from .geometry import (
    Camera,
    back_project,
    barycentric_decode,
    barycentric_encode,
    convex_hull_contains,
    quad_features,
    quad_features_grad,
    scatter_quad_grad,
    similarity_procrustes,
)
from .optim import AdamW
from .stats import (
    SIGMA_FLOOR,
    beta_log_pdf_arrays,
    beta_log_pdf_grad,
    certainty,
    feature_variance_objective,
    fit_beta,
)

DEFAULT_BUILD_CONFIG = {
    "max_quadruples": 2000,
    "f_init_scale": 1.0,       # initial focal as multiple of max(w, h)
    "focal_steps": 400,
    "focal_lr": 0.03,
    "placement_restarts": 8,
    "placement_steps": 300,
    "placement_lr": 0.03,
    "k_clusters": 512,
    "density_min_frac": 0.25,  # density_min = frac * merged_points / k
    "m_neighbors": 16,
    "stride": 4,
    "hull_margin": 0.05,
}


@dataclass
class GeomFeatureStats:
    quadruples: np.ndarray  # (M, 4) int
    angle_ab: np.ndarray    # (M, 2) Beta (alpha, beta) for A/pi
    ratio_ab: np.ndarray    # (M, 2) Beta (alpha, beta) for R
    sampling_seed: int


@dataclass
class SparseCloud:
    positions: np.ndarray   # (L, 3) canonical, gauge-fixed
    features: np.ndarray    # (L, d) unit-norm
    a_mu: np.ndarray        # (L,)
    a_sigma: np.ndarray     # (L,)
    vis_count: np.ndarray   # (L,) int
    front_dir: np.ndarray   # (3,) canonical object->camera direction (or 0)
    placement_trace: list = field(default_factory=list, repr=False)


@dataclass
class DenseCloud:
    anchor_idx: np.ndarray   # (N, 4) int into sparse keypoints
    anchor_w: np.ndarray     # (N, 4)
    affine_flag: np.ndarray  # (N,) bool
    features: np.ndarray     # (N, d) unit-norm
    a_mu: np.ndarray         # (N,)
    a_sigma: np.ndarray      # (N,)
    population: np.ndarray   # (N,) int

    def decode(self, keypoints):
        return barycentric_decode(keypoints, self.anchor_idx, self.anchor_w)


@dataclass
class RepresentationContainer:
    category: str
    sparse: SparseCloud
    dense: DenseCloud
    geom_stats: GeomFeatureStats
    build_config: dict


# --- quadruple sampling ---------------------------------------------------------

def covisibility(samples, n_keypoints):
    """(n_images, L) visibility matrix."""
    vis = np.zeros((len(samples), n_keypoints), dtype=bool)
    for s_idx, s in enumerate(samples):
        for kp in s.keypoints:
            vis[s_idx, kp.index] = kp.visible
    return vis


def sample_quadruples(vis, max_quadruples=2000, seed=0):
    """Draw quadruples (i, j, k, l) without replacement from pairs of distinct
    edges over keypoint pairs co-visible in >= 2 images; deterministic."""
    n_img, n_kp = vis.shape
    co = vis.astype(int).T @ vis.astype(int)
    ii, jj = np.triu_indices(n_kp, 1)
    keep = co[ii, jj] >= 2
    edges = np.stack([ii[keep], jj[keep]], axis=1)
    n_e = len(edges)
    if n_e < 2:
        raise InsufficientKeypoints("fewer than two co-visible keypoint edges")
    e1, e2 = np.triu_indices(n_e, 1)
    total = len(e1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    if total > max_quadruples:
        pick = np.sort(rng.choice(total, size=max_quadruples, replace=False))
    else:
        pick = np.arange(total)
    return np.concatenate([edges[e1[pick]], edges[e2[pick]]], axis=1)


# --- focal estimation -----------------------------------------------------------

def _keypoint_world(sample, focal):
    """(L, 2+1)->(L, 3) back-projected visible keypoints; NaN rows invisible."""
    cam = Camera.for_image(focal, sample.image_size)
    uv = sample.keypoint_array()
    out = np.full((uv.shape[0], 3), np.nan)
    vis = ~np.isnan(uv[:, 0])
    if vis.any():
        d = sample.depth_at(uv[vis, 0], uv[vis, 1])
        out[vis] = back_project(cam, uv[vis, 0], uv[vis, 1], d)
    return out


def _focal_energy(samples, quads, logf, uv_list, d_list, vis):
    """Variance objective and gradient with respect to per-image log-focals."""
    n_img = len(samples)
    m = len(quads)
    angles = np.zeros((n_img, m))
    ratios = np.zeros((n_img, m))
    valid = np.zeros((n_img, m), dtype=bool)
    quad_vis = np.stack([
        vis[:, quads[:, 0]] & vis[:, quads[:, 1]]
        & vis[:, quads[:, 2]] & vis[:, quads[:, 3]]
    ])[0]

    per_image = []
    for s_idx, sample in enumerate(samples):
        cam = Camera.for_image(float(np.exp(logf[s_idx])), sample.image_size)
        uv = uv_list[s_idx]
        pts = np.full((vis.shape[1], 3), 0.0)
        vmask = vis[s_idx]
        pts[vmask] = back_project(cam, uv[vmask, 0], uv[vmask, 1], d_list[s_idx])
        A, R, gA1, gA2, gR1, gR2 = quad_features_grad(pts, quads)
        angles[s_idx] = A
        ratios[s_idx] = R
        valid[s_idx] = quad_vis[s_idx]
        per_image.append((pts, gA1, gA2, gR1, gR2))

    counts = valid.sum(axis=0)
    keep = counts >= 2
    energy = feature_variance_objective(angles, ratios, valid)

    # dVar/dx = 2 (x - mean) / n per valid image, for x in {R, A/pi}
    grad_logf = np.zeros(n_img)
    for feats, scale, g1_i, g2_i in ((ratios, 1.0, 3, 4), (angles, 1.0 / np.pi, 1, 2)):
        x = feats * scale
        xm = np.where(valid, x, 0.0)
        mean = np.where(keep, xm.sum(axis=0) / np.maximum(counts, 1), 0.0)
        coef = np.where(valid & keep, 2.0 * (x - mean) / np.maximum(counts, 1), 0.0)
        for s_idx in range(n_img):
            pts, gA1, gA2, gR1, gR2 = per_image[s_idx]
            g1 = (gR1, gR2) if feats is ratios else (gA1, gA2)
            gp = np.zeros_like(pts)
            w = (coef[s_idx] * scale)[:, None]
            scatter_quad_grad(gp, quads, w * g1[0], w * g1[1])
            # d(point)/d(log f) = (-x, -y, 0)
            grad_logf[s_idx] += -np.sum(gp[:, 0] * pts[:, 0] + gp[:, 1] * pts[:, 1])
    return energy, grad_logf


def estimate_focals(samples, quadruples, f_init=None, steps=400, lr=0.03):
    """Per-image focal lengths minimizing the feature-variance objective via
    Adam over log-focal variables; returns the best (lowest-energy) iterate."""
    if len(samples) < 2:
        raise InsufficientKeypoints("need >= 2 images")
    n_kp = 1 + max(kp.index for s in samples for kp in s.keypoints)
    vis = covisibility(samples, n_kp)
    for s_idx, s in enumerate(samples):
        if vis[s_idx].sum() < 4:
            raise InsufficientKeypoints(
                f"{s.image_id}: {int(vis[s_idx].sum())} visible keypoints, need >= 4"
            )
    quads = np.asarray(quadruples, dtype=int)
    uv_list = [s.keypoint_array() for s in samples]
    d_list = [
        s.depth_at(uv[vis[i], 0], uv[vis[i], 1])
        for i, (s, uv) in enumerate(zip(samples, uv_list))
    ]
    if f_init is None:
        f_init = [max(s.image_size) for s in samples]
    logf = np.log(np.broadcast_to(np.asarray(f_init, dtype=float), len(samples)).copy())

    opt = AdamW(lr=lr)
    best = logf.copy()
    best_e, _ = _focal_energy(samples, quads, logf, uv_list, d_list, vis)
    trace = [best_e]
    for _ in range(steps):
        e, g = _focal_energy(samples, quads, logf, uv_list, d_list, vis)
        if e < best_e:
            best_e, best = e, logf.copy()
        trace.append(min(best_e, e))
        logf = opt.step(logf, g)
    e, _ = _focal_energy(samples, quads, logf, uv_list, d_list, vis)
    if e < best_e:
        best_e, best = e, logf.copy()
    return np.exp(best), best_e, trace


# --- geometric statistics -------------------------------------------------------

def fit_geom_stats(samples, focals, quadruples, seed=0) -> GeomFeatureStats:
    """Back-project visible keypoints per image, evaluate (A/pi, R) per sampled
    quadruple on valid images, and fit Beta parameters per quadruple.
    Quadruples valid in fewer than 3 images are dropped."""
    quads = np.asarray(quadruples, dtype=int)
    n_kp = 1 + max(kp.index for s in samples for kp in s.keypoints)
    vis = covisibility(samples, n_kp)
    angle_rows = []
    ratio_rows = []
    valid_rows = []
    for s_idx, sample in enumerate(samples):
        pts = _keypoint_world(sample, focals[s_idx])
        filled = np.nan_to_num(pts)
        A, R = quad_features(filled, quads)
        qv = (
            vis[s_idx, quads[:, 0]] & vis[s_idx, quads[:, 1]]
            & vis[s_idx, quads[:, 2]] & vis[s_idx, quads[:, 3]]
        )
        angle_rows.append(A)
        ratio_rows.append(R)
        valid_rows.append(qv)
    angles = np.stack(angle_rows)
    ratios = np.stack(ratio_rows)
    valid = np.stack(valid_rows)

    kept = []
    angle_ab = []
    ratio_ab = []
    for m in range(quads.shape[0]):
        v = valid[:, m]
        if v.sum() < 3:
            continue
        try:
            pa = fit_beta(angles[v, m] / np.pi)
            pr = fit_beta(ratios[v, m])
        except TooFewSamples:
            continue
        kept.append(quads[m])
        angle_ab.append([pa.alpha, pa.beta])
        ratio_ab.append([pr.alpha, pr.beta])
    if not kept:
        raise TooFewSamples("no quadruple valid in >= 3 images")
    return GeomFeatureStats(
        quadruples=np.asarray(kept, dtype=int),
        angle_ab=np.asarray(angle_ab, dtype=float),
        ratio_ab=np.asarray(ratio_ab, dtype=float),
        sampling_seed=int(seed),
    )


def quad_log_likelihood(stats: GeomFeatureStats, positions, subset=None):
    """Summed Beta log-likelihood of angle/ratio features at given positions.

    subset: optional bool mask over quadruples to include."""
    quads = stats.quadruples
    aab, rab = stats.angle_ab, stats.ratio_ab
    if subset is not None:
        quads, aab, rab = quads[subset], aab[subset], rab[subset]
    if len(quads) == 0:
        return 0.0
    A, R = quad_features(positions, quads)
    la = beta_log_pdf_arrays(aab[:, 0], aab[:, 1], A / np.pi)
    lr = beta_log_pdf_arrays(rab[:, 0], rab[:, 1], R)
    return float(np.sum(la + lr))


def _candidate_energy(stats, positions, quads_mask, cand):
    """Log-likelihood restricted to quadruples touching the candidate point,
    plus its gradient with respect to the candidate position."""
    quads = stats.quadruples[quads_mask]
    aab = stats.angle_ab[quads_mask]
    rab = stats.ratio_ab[quads_mask]
    A, R, gA1, gA2, gR1, gR2 = quad_features_grad(positions, quads)
    xa = A / np.pi
    la = beta_log_pdf_arrays(aab[:, 0], aab[:, 1], xa)
    lr = beta_log_pdf_arrays(rab[:, 0], rab[:, 1], R)
    energy = float(np.sum(la + lr))
    ga = beta_log_pdf_grad(aab[:, 0], aab[:, 1], xa) / np.pi
    gr = beta_log_pdf_grad(rab[:, 0], rab[:, 1], R)
    grad = np.zeros_like(positions)
    scatter_quad_grad(grad, quads, ga[:, None] * gA1, ga[:, None] * gA2)
    scatter_quad_grad(grad, quads, gr[:, None] * gR1, gr[:, None] * gR2)
    return energy, grad[cand]


def _place_keypoint(stats, positions, placed, cand, restarts, steps, lr, rng,
                    planar=False):
    """Multi-start gradient ascent for one keypoint; returns (position, trace)."""
    in_set = np.isin(stats.quadruples, np.array(sorted(placed) + [cand]))
    involves = np.any(stats.quadruples == cand, axis=1)
    mask = np.all(in_set, axis=1) & involves
    centroid = positions[sorted(placed)].mean(axis=0)

    best_e = -np.inf
    best_p = None
    best_trace = None
    for r in range(restarts):
        d = rng.normal(size=3)
        d /= max(np.linalg.norm(d), 1e-12)
        p = centroid + d * rng.uniform(0, 1) ** (1 / 3)  # uniform in unit ball
        if planar:
            p[2] = 0.0
        if not mask.any():
            return p, [0.0]
        opt = AdamW(lr=lr)
        pos = positions.copy()
        accepted = []
        run_best_e, run_best_p = -np.inf, p.copy()
        for _ in range(steps):
            pos[cand] = p
            e, g = _candidate_energy(stats, pos, mask, cand)
            if np.isfinite(e) and e > run_best_e:
                run_best_e, run_best_p = e, p.copy()
            accepted.append(run_best_e)
            if planar:
                g[2] = 0.0
            p = opt.step(p, -g)  # ascent
        if run_best_e > best_e:
            best_e, best_p, best_trace = run_best_e, run_best_p, accepted
    if best_p is None or not np.isfinite(best_e):
        raise PlacementFailed(f"keypoint {cand}: all restarts non-finite")
    return best_p, best_trace


def _fix_chirality(samples, positions, vis, focals):
    """The angle/ratio features cannot distinguish mirror images, so the
    placement's handedness is arbitrary.  Vote over training images: if the
    z-flipped cloud fits the back-projected keypoints better (similarity
    Procrustes residual), flip.  The z-flip preserves the gauge (the first
    three points lie in z = 0)."""
    flipped = positions * np.array([1.0, 1.0, -1.0])
    votes = 0
    total = 0
    for s_idx, sample in enumerate(samples):
        v = vis[s_idx]
        if v.sum() < 4:
            continue
        world = _keypoint_world(sample, focals[s_idx])[v]

        def residual(pos):
            s, r, t = similarity_procrustes(pos, world)
            return float(np.sum((s * pos @ r.T + t - world) ** 2))

        total += 1
        if residual(flipped[v]) < residual(positions[v]):
            votes += 1
    return flipped if total and votes * 2 > total else positions


def build_sparse(stats: GeomFeatureStats, samples, config=None, seed=0,
                 focals=None) -> SparseCloud:
    """Gauge-fixed canonical keypoint cloud via iterative most-likely placement,
    plus per-keypoint semantic features and certainty statistics."""
    cfg = {**DEFAULT_BUILD_CONFIG, **(config or {})}
    n_kp = 1 + max(kp.index for s in samples for kp in s.keypoints)
    vis = covisibility(samples, n_kp)
    counts = vis.sum(axis=0)
    order = sorted(range(n_kp), key=lambda i: (-counts[i], i))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 211]))

    positions = np.zeros((n_kp, 3))
    placed = set()
    trace = []
    for rank, idx in enumerate(order):
        if rank == 0:
            positions[idx] = 0.0
        elif rank == 1:
            positions[idx] = (1.0, 0.0, 0.0)
        else:
            planar = rank == 2
            p, t = _place_keypoint(
                stats, positions, placed, idx,
                cfg["placement_restarts"], cfg["placement_steps"],
                cfg["placement_lr"], rng, planar=planar,
            )
            if planar:
                p[1] = abs(p[1])  # gauge: third point in the y > 0 half-plane
                p[2] = 0.0
            positions[idx] = p
            trace.append(t)
        placed.add(idx)

    if focals is None:
        focals = [max(s.image_size) for s in samples]
    positions = _fix_chirality(samples, positions, vis, focals)

    # semantic features: normalized mean of per-image patch features
    d = samples[0].features.shape[-1]
    features = np.zeros((n_kp, d))
    a_mu = np.ones(n_kp)
    a_sigma = np.full(n_kp, SIGMA_FLOOR)
    members = {i: [] for i in range(n_kp)}
    for sample in samples:
        for kp in sample.keypoints:
            if kp.visible:
                members[kp.index].append(sample.feature_at(kp.u, kp.v))
    for i in range(n_kp):
        if not members[i]:
            continue
        mean = np.mean(members[i], axis=0)
        mean = mean / max(np.linalg.norm(mean), 1e-12)
        features[i] = mean
        if len(members[i]) >= 2:
            c = certainty(mean, np.asarray(members[i]))
            a_mu[i], a_sigma[i] = c.a_mu, c.a_sigma

    front = _front_direction(samples, positions, vis, focals)
    return SparseCloud(
        positions=positions,
        features=features,
        a_mu=a_mu,
        a_sigma=a_sigma,
        vis_count=counts.astype(int),
        front_dir=front,
        placement_trace=trace,
    )


def _front_direction(samples, positions, vis, focals=None):
    """Average object->camera direction mapped into the canonical frame."""
    dirs = []
    for s_idx, sample in enumerate(samples):
        v = vis[s_idx]
        if v.sum() < 4:
            continue
        focal = focals[s_idx] if focals is not None else max(sample.image_size)
        world = _keypoint_world(sample, focal)
        try:
            s, r, t = similarity_procrustes(positions[v], world[v])
        except np.linalg.LinAlgError:
            continue
        cam_in_canon = -r.T @ t / max(s, 1e-12)
        d = cam_in_canon - positions[v].mean(axis=0)
        n = np.linalg.norm(d)
        if n > 1e-9:
            dirs.append(d / n)
    if not dirs:
        return np.zeros(3)
    mean = np.mean(dirs, axis=0)
    n = np.linalg.norm(mean)
    return mean / n if n > 1e-6 else np.zeros(3)


# --- dense cloud ----------------------------------------------------------------

def _kmeans_pp(points, k, rng, iters=50):
    """Seeded k-means++ + Lloyd; returns (centers, labels)."""
    n = len(points)
    centers = np.empty((k, 3))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers[c] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    labels = np.full(n, -1, dtype=int)
    for _ in range(iters):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = dist.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            sel = labels == c
            if sel.any():
                centers[c] = points[sel].mean(axis=0)
    return centers, labels


def merge_clouds(sparse: SparseCloud, samples, focals, config=None):
    """Back-project depth rasters, align per image via barycentric transfer to
    the canonical keypoints, filter by the dilated keypoint hull, and merge.

    Returns (points (P, 3), features (P, d))."""
    cfg = {**DEFAULT_BUILD_CONFIG, **(config or {})}
    stride = int(cfg["stride"])
    n_kp = sparse.positions.shape[0]
    vis = covisibility(samples, n_kp)

    all_pts = []
    all_feats = []
    for s_idx, sample in enumerate(samples):
        v = vis[s_idx]
        if v.sum() < 4:
            continue
        w, h = sample.image_size
        cam = Camera.for_image(focals[s_idx], sample.image_size)
        us, vs = np.meshgrid(np.arange(0, w, stride, dtype=float),
                             np.arange(0, h, stride, dtype=float))
        us, vs = us.ravel(), vs.ravel()
        if sample.mask is not None:
            hm, wm = sample.mask.shape
            from .tensorio import coord_to_grid
            keep = sample.mask[coord_to_grid(vs, hm, h), coord_to_grid(us, wm, w)] > 0.5
            us, vs = us[keep], vs[keep]
        if len(us) == 0:
            continue
        depth = sample.depth_at(us, vs)
        pts = back_project(cam, us, vs, depth)
        kp_world = _keypoint_world(sample, focals[s_idx])
        idx, wts, _ = barycentric_encode(kp_world[v], pts)
        aligned = barycentric_decode(sparse.positions[v], idx, wts)
        inside = convex_hull_contains(sparse.positions, aligned, cfg["hull_margin"])
        if not inside.any():
            continue
        feats = sample.feature_at(us[inside], vs[inside])
        all_pts.append(aligned[inside])
        all_feats.append(feats)
    if not all_pts:
        raise EmptyMerge("all back-projected points fell outside the keypoint hull")
    return np.concatenate(all_pts), np.concatenate(all_feats)


def build_dense(sparse: SparseCloud, stats, samples, focals, config=None,
                seed=0) -> DenseCloud:
    """k-means the merged aligned cloud, keep populous clusters, attach
    neighbor-averaged features/certainty, and re-encode centers barycentrically
    with respect to the canonical keypoints."""
    cfg = {**DEFAULT_BUILD_CONFIG, **(config or {})}
    points, feats = merge_clouds(sparse, samples, focals, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 307]))

    k = min(int(cfg["k_clusters"]), len(points))
    centers, labels = _kmeans_pp(points, k, rng)
    pops = np.bincount(labels, minlength=k)
    density_min = cfg.get("density_min")
    if density_min is None:
        density_min = cfg["density_min_frac"] * len(points) / k
    kept = np.nonzero(pops >= max(density_min, 1))[0]
    if len(kept) == 0:
        raise EmptyMerge(
            f"no cluster reached the density threshold {density_min:.1f}"
        )

    tree = cKDTree(points)
    m = min(int(cfg["m_neighbors"]), len(points))
    d = feats.shape[1]
    out_feats = np.zeros((len(kept), d))
    a_mu = np.ones(len(kept))
    a_sigma = np.full(len(kept), SIGMA_FLOOR)
    for row, c in enumerate(kept):
        _, nb = tree.query(centers[c], k=m)
        nb = np.atleast_1d(nb)
        mean = feats[nb].mean(axis=0)
        mean = mean / max(np.linalg.norm(mean), 1e-12)
        out_feats[row] = mean
        if len(nb) >= 2:
            cert = certainty(mean, feats[nb])
            a_mu[row], a_sigma[row] = cert.a_mu, cert.a_sigma

    idx, wts, aff = barycentric_encode(sparse.positions, centers[kept])
    return DenseCloud(
        anchor_idx=idx,
        anchor_w=wts,
        affine_flag=aff,
        features=out_feats,
        a_mu=a_mu,
        a_sigma=a_sigma,
        population=pops[kept].astype(int),
    )


# --- top level -------------------------------------------------------------------

def build_representation(manifest, root, config=None, seed=0) -> RepresentationContainer:
    """Full build: quadruple sampling, focal estimation, Beta stats, sparse
    cloud, dense cloud."""
    from .tensorio import load_samples

    cfg = {**DEFAULT_BUILD_CONFIG, **(config or {})}
    samples = load_samples(manifest, root, "train")
    n_kp = 1 + max(kp.index for s in samples for kp in s.keypoints)
    vis = covisibility(samples, n_kp)
    quads = sample_quadruples(vis, cfg["max_quadruples"], seed)
    f_init = [cfg["f_init_scale"] * max(s.image_size) for s in samples]
    focals, _, _ = estimate_focals(
        samples, quads, f_init, cfg["focal_steps"], cfg["focal_lr"]
    )
    stats = fit_geom_stats(samples, focals, quads, seed)
    sparse = build_sparse(stats, samples, cfg, seed, focals)
    dense = build_dense(sparse, stats, samples, focals, cfg, seed)
    return RepresentationContainer(
        category=manifest.get("category", "unknown"),
        sparse=sparse,
        dense=dense,
        geom_stats=stats,
        build_config={k: cfg[k] for k in sorted(cfg)},
    )
