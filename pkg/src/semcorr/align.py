"""Image alignment: gradient descent on keypoint coordinates and focal length.

The optimization variables are theta = [x_1..L, y_1..L, zeta_1..L, phi] with
z_i = softplus(zeta_i) and f = exp(phi), so depths and focal stay positive.
All energy terms supply hand-derived analytic gradients; the dense cloud is an
affine function of the keypoints (barycentric weights), so its gradients
scatter back onto the keypoints.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import AllRestartsDiverged, NoSamples, ShapeMismatch
from .geometry import (
    Camera,
    quad_features_grad,
    random_rotation,
    scatter_quad_grad,
    similarity_procrustes,
)
from .optim import AdamW, Schedule
from .stats import beta_log_pdf_arrays, beta_log_pdf_grad, gauss_kernel

SIGMA_FLOOR = 1e-3
Z_EPS = 1e-9


# --- parametrization ---------------------------------------------------------------

def softplus(x):
    # overflow-safe: log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ShapeMismatch("softplus inverse needs positive input")
    # inverse of log(1+e^x); expm1 keeps precision for small y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class AlignmentState:
    """Decoded optimization state: keypoint positions and focal length."""

    keypoints: np.ndarray  # (L, 3), z > 0
    focal: float
    step: int = 0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        if np.any(self.keypoints[:, 2] <= 0):
            raise ShapeMismatch("keypoint z must be positive")
        if self.focal <= 0:
            raise ShapeMismatch("focal must be positive")

    def to_theta(self):
        k = self.keypoints
        return np.concatenate(
            [k[:, 0], k[:, 1], softplus_inv(k[:, 2]), [np.log(self.focal)]]
        )

    @classmethod
    def from_theta(cls, theta, step=0) -> "AlignmentState":
        L = (len(theta) - 1) // 3
        k = np.stack(
            [theta[:L], theta[L : 2 * L], softplus(theta[2 * L : 3 * L])], axis=1
        )
        return cls(keypoints=k, focal=float(np.exp(theta[-1])), step=step)


@dataclass(frozen=True)
class AlignConfig:
    """Alignment hyper-parameters; schedules are functions of the step t."""

    lr: float
    n_steps: int
    sigma_dense: Schedule
    sigma_sparse: Schedule
    sigma_inference: float
    w_dense: float
    w_sparse: Schedule
    w_geom: float
    w_background: Schedule
    w_depth: float
    d_target: float
    focal_grid: tuple
    n_rotations: int
    pixel_samples: int
    resample_every: int
    attention_temp: float
    background_samples: int
    init_radius: float
    zorder_pairs: int
    zorder_weight: float
    flatness_threshold: float

    @classmethod
    def from_dict(cls, d) -> "AlignConfig":
        sched = {"sigma_dense", "sigma_sparse", "w_sparse", "w_background"}
        kw = {}
        for f_ in cls.__dataclass_fields__:
            v = d[f_]
            if f_ in sched:
                v = Schedule.from_dict(v)
            elif f_ == "focal_grid":
                v = tuple(float(x) for x in v)
            kw[f_] = v
        return cls(**kw)


def load_default_config():
    with resources.files("semcorr").joinpath("default_config.json").open() as fh:
        return json.load(fh)


def resolve_config(category=None, overrides=None, config_file=None) -> AlignConfig:
    """default table -> per-category row -> explicit overrides."""
    table = load_default_config() if config_file is None else config_file
    merged = dict(table["default"])
    cat = (category or "").lower()
    merged.update(table.get("categories", {}).get(cat, {}))
    merged.update(overrides or {})
    return AlignConfig.from_dict(merged)


# --- likelihoods --------------------------------------------------------------------

def bilinear_grid(grid, u, v, image_size):
    """Sample a (G, G, ...) grid at image coordinates, bilinearly between grid
    cell centers, clamped at the border.  Cell center for index i sits at
    image coordinate (i + 0.5) * img / G - 0.5."""
    g = np.asarray(grid, dtype=float)
    gh, gw = g.shape[:2]
    w, h = image_size
    gx = (np.asarray(u, dtype=float) + 0.5) * gw / w - 0.5
    gy = (np.asarray(v, dtype=float) + 0.5) * gh / h - 0.5
    gx = np.clip(gx, 0.0, gw - 1.0)
    gy = np.clip(gy, 0.0, gh - 1.0)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = (gx - x0)[..., None] if g.ndim > 2 else gx - x0
    fy = (gy - y0)[..., None] if g.ndim > 2 else gy - y0
    top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
    bot = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sem_likelihood(image_features, point_features, cert_mu, cert_sigma, x, y, i,
                   image_size):
    """Semantic likelihood of point i at image pixel (x, y): max-normalized
    Gaussian of the up-scaled cosine similarity around the point's certainty
    statistics."""
    sims = np.asarray(image_features, dtype=float) @ np.asarray(
        point_features[i], dtype=float
    )
    a = bilinear_grid(sims, x, y, image_size)
    return float(gauss_kernel(a, cert_mu[i], max(cert_sigma[i], SIGMA_FLOOR)))


def spatial_likelihood(state: AlignmentState, camera: Camera, points, x, y, i,
                       sigma, image_size):
    """Spatial likelihood of 3D point i at pixel (x, y): kernel of the
    projection distance normalized by the image diagonal.  Points behind the
    camera contribute zero."""
    p = np.asarray(points, dtype=float)[i]
    if p[2] <= Z_EPS:
        return 0.0
    u = camera.cx + camera.focal * p[0] / p[2]
    v = camera.cy + camera.focal * p[1] / p[2]
    w, h = image_size
    diag = float(np.hypot(w, h))
    d = np.hypot(u - x, v - y) / diag
    return float(gauss_kernel(d, 0.0, max(sigma, SIGMA_FLOOR)))


# --- energy context ------------------------------------------------------------------

class ImageContext:
    """Per-image precomputation shared by all restarts: similarity grids,
    attention distribution, background pixels, Beta stats."""

    def __init__(self, rep, sample, config: AlignConfig, seed=0):
        self.sample = sample
        self.config = config
        w, h = sample.image_size
        self.image_size = (w, h)
        self.cx, self.cy = (w - 1) / 2.0, (h - 1) / 2.0
        self.diag = float(np.hypot(w, h))

        self.sparse_pos = np.asarray(rep.sparse.positions, dtype=float)
        self.anchor_idx = np.asarray(rep.dense.anchor_idx, dtype=int)
        self.anchor_w = np.asarray(rep.dense.anchor_w, dtype=float)
        self.front_dir = np.asarray(rep.sparse.front_dir, dtype=float)
        self.L = len(self.sparse_pos)
        self.N = len(self.anchor_idx)

        feats = np.asarray(sample.features, dtype=float)  # (G, G, d)
        self.sim_dense = feats @ np.asarray(rep.dense.features, dtype=float).T
        self.sim_sparse = feats @ np.asarray(rep.sparse.features, dtype=float).T
        self.mu_dense = np.asarray(rep.dense.a_mu, dtype=float)
        self.sg_dense = np.maximum(rep.dense.a_sigma, SIGMA_FLOOR)
        self.mu_sparse = np.asarray(rep.sparse.a_mu, dtype=float)
        self.sg_sparse = np.maximum(rep.sparse.a_sigma, SIGMA_FLOOR)

        # attention over pixels: softmax of the up-scaled max similarity
        maxsim = self.sim_dense.max(axis=2)
        ui, vi = np.meshgrid(np.arange(w), np.arange(h))
        up = bilinear_grid(maxsim, ui.ravel(), vi.ravel(), self.image_size)
        z = (up - up.max()) / config.attention_temp
        e = np.exp(z)
        self.attention = e / e.sum()
        self.pixel_xy = np.stack([ui.ravel(), vi.ravel()], axis=1).astype(float)

        # background pixels: complement of the object mask, fixed subsample
        self.bg_xy = np.zeros((0, 2))
        if sample.mask is not None:
            mh, mw = sample.mask.shape
            mui, mvi = np.meshgrid(np.arange(mw), np.arange(mh))
            bg = sample.mask.ravel() < 0.5
            coords = np.stack(
                [mui.ravel()[bg] * w / mw, mvi.ravel()[bg] * h / mh], axis=1
            )
            if len(coords) > config.background_samples:
                r = np.random.default_rng(np.random.SeedSequence([seed, 431]))
                pick = r.choice(len(coords), config.background_samples, replace=False)
                coords = coords[np.sort(pick)]
            self.bg_xy = coords

        stats = rep.geom_stats
        self.quads = np.asarray(stats.quadruples, dtype=int)
        self.angle_ab = np.asarray(stats.angle_ab, dtype=float)
        self.ratio_ab = np.asarray(stats.ratio_ab, dtype=float)

    def sample_pixels(self, rng, n):
        """Attention-weighted pixel sample plus the fixed semantic likelihood
        tables at those pixels (they do not depend on the state)."""
        if n <= 0:
            raise NoSamples("pixel sample count must be positive")
        idx = rng.choice(len(self.attention), size=n, p=self.attention)
        xy = self.pixel_xy[idx]
        sem_d = self.sem_at(xy, dense=True)
        sem_s = self.sem_at(xy, dense=False)
        return xy, sem_d, sem_s

    def sem_at(self, xy, dense=True):
        sims = self.sim_dense if dense else self.sim_sparse
        mu = self.mu_dense if dense else self.mu_sparse
        sg = self.sg_dense if dense else self.sg_sparse
        a = bilinear_grid(sims, xy[:, 0], xy[:, 1], self.image_size)  # (S, N)
        return gauss_kernel(a, mu[None, :], sg[None, :])


# --- energy terms --------------------------------------------------------------------

def _gauss_exp(arg):
    """In-place exp with the exponent floored at -60: the kernel tail below
    exp(-60) carries no signal, and letting it underflow into subnormals
    costs orders of magnitude in throughput."""
    np.maximum(arg, -60.0, out=arg)
    return np.exp(arg, out=arg)


def _project(pos, f, cx, cy):
    """Projection plus validity mask; invalid (z <= 0) rows give u=v=0."""
    z = pos[:, 2]
    ok = z > Z_EPS
    zs = np.where(ok, z, 1.0)
    u = cx + f * pos[:, 0] / zs
    v = cy + f * pos[:, 1] / zs
    return np.where(ok, u, 0.0), np.where(ok, v, 0.0), ok


def _recon_term(u, v, ok, p_sem, xy, sigma_px):
    """-mean_s max_i p_spatial * p_sem plus d/du, d/dv per point.

    The per-sample argmax is held fixed for the gradient (subgradient of the
    max)."""
    S = len(xy)
    dx = u[None, :] - xy[:, 0:1]
    dy = v[None, :] - xy[:, 1:2]
    d2 = dx * dx
    d2 += dy * dy
    d2 *= -0.5 / (sigma_px * sigma_px)
    val = _gauss_exp(d2)
    val *= p_sem
    if not ok.all():
        val[:, ~ok] = 0.0
    win = np.argmax(val, axis=1)
    rows = np.arange(S)
    best = val[rows, win]
    loss = -best.mean() if S else 0.0

    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    coef = best / (S * sigma_px * sigma_px)  # d(-best/S)/du = coef * dx
    np.add.at(gu, win, coef * dx[rows, win])
    np.add.at(gv, win, coef * dy[rows, win])
    return loss, gu, gv, best


def _background_term(u, v, ok, bg_xy, sigma_px):
    """(1/N) sum_i mean_bg p_spatial, with d/du, d/dv per dense point."""
    n = len(u)
    if len(bg_xy) == 0 or n == 0:
        return 0.0, np.zeros_like(u), np.zeros_like(v)
    dx = u[None, :] - bg_xy[:, 0:1]
    dy = v[None, :] - bg_xy[:, 1:2]
    d2 = dx * dx
    d2 += dy * dy
    d2 *= -0.5 / (sigma_px * sigma_px)
    p = _gauss_exp(d2)
    if not ok.all():
        p[:, ~ok] = 0.0
    scale = 1.0 / (n * len(bg_xy))
    loss = p.sum() * scale
    c = -scale / (sigma_px * sigma_px)  # d p/du = -p dx/s^2
    gu = c * np.einsum("bn,bn->n", p, dx)
    gv = c * np.einsum("bn,bn->n", p, dy)
    return float(loss), gu, gv


def geom_loss(positions, quads, angle_ab, ratio_ab, want_grad=False):
    """-mean over quadruples of the angle/ratio Beta log-densities."""
    if len(quads) == 0:
        return (0.0, np.zeros_like(positions)) if want_grad else 0.0
    A, R, gA1, gA2, gR1, gR2 = quad_features_grad(positions, quads)
    xa = A / np.pi
    la = beta_log_pdf_arrays(angle_ab[:, 0], angle_ab[:, 1], xa)
    lr = beta_log_pdf_arrays(ratio_ab[:, 0], ratio_ab[:, 1], R)
    m = len(quads)
    loss = -float(np.sum(la + lr)) / m
    if not want_grad:
        return loss
    ga = -beta_log_pdf_grad(angle_ab[:, 0], angle_ab[:, 1], xa) / (np.pi * m)
    gr = -beta_log_pdf_grad(ratio_ab[:, 0], ratio_ab[:, 1], R) / m
    grad = np.zeros_like(positions)
    scatter_quad_grad(grad, quads, ga[:, None] * gA1, ga[:, None] * gA2)
    scatter_quad_grad(grad, quads, gr[:, None] * gR1, gr[:, None] * gR2)
    return loss, grad


def depth_loss(positions, d_target, want_grad=False):
    """Squared deviation of the mean keypoint depth from the target."""
    mu = positions[:, 2].mean()
    loss = (d_target - mu) ** 2
    if not want_grad:
        return float(loss)
    grad = np.zeros_like(positions)
    grad[:, 2] = 2.0 * (mu - d_target) / len(positions)
    return float(loss), grad


def align_energy(theta, ctx: ImageContext, t, xy, sem_d, sem_s):
    """Total alignment energy at step t with its gradient w.r.t. theta.

    xy / sem_d / sem_s are the current attention pixel sample and its fixed
    semantic likelihood tables (resampled outside, every resample_every
    steps)."""
    cfg = ctx.config
    L = ctx.L
    x, y, zeta, phi = theta[:L], theta[L : 2 * L], theta[2 * L : 3 * L], theta[-1]
    kz = softplus(zeta)
    K = np.stack([x, y, kz], axis=1)
    f = float(np.exp(phi))

    s_dense = max(cfg.sigma_dense(t), SIGMA_FLOOR) * ctx.diag
    s_sparse = max(cfg.sigma_sparse(t), SIGMA_FLOOR) * ctx.diag
    w_sparse = cfg.w_sparse(t)
    w_bg = cfg.w_background(t)

    D = np.einsum("nk,nkd->nd", ctx.anchor_w, K[ctx.anchor_idx])
    uD, vD, okD = _project(D, f, ctx.cx, ctx.cy)
    uK, vK, okK = _project(K, f, ctx.cx, ctx.cy)

    l_dense, guD, gvD, best = _recon_term(uD, vD, okD, sem_d, xy, s_dense)
    l_sparse, guK, gvK, _ = _recon_term(uK, vK, okK, sem_s, xy, s_sparse)
    l_bg, buD, bvD = _background_term(uD, vD, okD, ctx.bg_xy, s_dense)
    l_geom, g_geom = geom_loss(K, ctx.quads, ctx.angle_ab, ctx.ratio_ab, True)
    l_depth, g_depth = depth_loss(K, cfg.d_target, True)

    total = (
        cfg.w_dense * l_dense
        + w_sparse * l_sparse
        + cfg.w_geom * l_geom
        + w_bg * l_bg
        + cfg.w_depth * l_depth
    )

    # pixel-space gradients per point, then chain through the projection
    guD = cfg.w_dense * guD + w_bg * buD
    gvD = cfg.w_dense * gvD + w_bg * bvD
    gK = cfg.w_geom * g_geom + cfg.w_depth * g_depth
    g_phi = 0.0

    for pos, uu, vv, okm, gu, gv, to_kp in (
        (D, uD, vD, okD, guD, gvD, True),
        (K, uK, vK, okK, w_sparse * guK, w_sparse * gvK, False),
    ):
        z = np.where(okm, pos[:, 2], 1.0)
        gX = np.where(okm, gu * f / z, 0.0)
        gY = np.where(okm, gv * f / z, 0.0)
        gZ = np.where(okm, -(gu * (uu - ctx.cx) + gv * (vv - ctx.cy)) / z, 0.0)
        g_phi += float(np.sum(gu * (uu - ctx.cx) + gv * (vv - ctx.cy)))
        gp = np.stack([gX, gY, gZ], axis=1)
        if to_kp:
            np.add.at(gK, ctx.anchor_idx.ravel(),
                      (ctx.anchor_w[..., None] * gp[:, None, :]).reshape(-1, 3))
        else:
            gK += gp

    grad = np.concatenate(
        [gK[:, 0], gK[:, 1], gK[:, 2] * sigmoid(zeta), [g_phi]]
    )
    return float(total), grad, best


# --- post-processing checks ----------------------------------------------------------

def is_flat(canonical_positions, threshold):
    """PCA flatness: smallest covariance eigenvalue below threshold x largest."""
    c = np.asarray(canonical_positions, dtype=float)
    c = c - c.mean(axis=0)
    w = np.linalg.eigvalsh(c.T @ c / len(c))
    return bool(w[0] < threshold * w[-1])


def faces_camera(canonical_positions, front_dir, state_keypoints):
    """Map the stored canonical front direction into the aligned frame and
    test it against the object-to-camera direction (camera at the origin)."""
    if np.linalg.norm(front_dir) < 1e-9:
        return True
    _, r, _ = similarity_procrustes(canonical_positions, state_keypoints)
    f = r @ np.asarray(front_dir, dtype=float)
    to_cam = -np.asarray(state_keypoints, dtype=float).mean(axis=0)
    return bool(np.dot(f, to_cam) > 0)


def zorder_penalty(ctx: ImageContext, state: AlignmentState, rng, n_pairs,
                   weight):
    """Fraction of sampled dense-point pairs whose model depth ordering
    contradicts the image depth estimate at their projected pixels, times
    weight.  Used for solution selection only."""
    D = np.einsum("nk,nkd->nd", ctx.anchor_w, state.keypoints[ctx.anchor_idx])
    u, v, ok = _project(D, state.focal, ctx.cx, ctx.cy)
    w, h = ctx.image_size
    inb = ok & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    idx = np.nonzero(inb)[0]
    if len(idx) < 2:
        return weight  # nothing visible: maximally suspicious
    a = rng.choice(idx, size=n_pairs)
    b = rng.choice(idx, size=n_pairs)
    keep = a != b
    a, b = a[keep], b[keep]
    dz_model = D[a, 2] - D[b, 2]
    d_img = ctx.sample.depth_at(u[a], v[a]) - ctx.sample.depth_at(u[b], v[b])
    informative = (np.abs(dz_model) > 1e-6) & (np.abs(d_img) > 1e-6)
    if not informative.any():
        return 0.0
    mismatch = np.sign(dz_model[informative]) != np.sign(d_img[informative])
    return weight * float(mismatch.mean())


# --- driver ---------------------------------------------------------------------------

@dataclass
class AlignResult:
    """Best aligned state plus per-restart diagnostics."""

    category: str
    image_id: str
    image_size: tuple
    keypoints: np.ndarray  # (L, 3) final positions
    focal: float
    loss: float
    penalized_loss: float
    restart: int
    diagnostics: list = field(default_factory=list)

    @property
    def state(self) -> AlignmentState:
        return AlignmentState(self.keypoints.copy(), self.focal)

    def to_json(self):
        return {
            "category": self.category,
            "image_id": self.image_id,
            "image_size": list(self.image_size),
            "keypoints": np.asarray(self.keypoints, dtype=float).tolist(),
            "focal": float(self.focal),
            "loss": float(self.loss),
            "penalized_loss": float(self.penalized_loss),
            "restart": int(self.restart),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, d) -> "AlignResult":
        return cls(
            category=d["category"],
            image_id=d["image_id"],
            image_size=tuple(d["image_size"]),
            keypoints=np.asarray(d["keypoints"], dtype=float),
            focal=float(d["focal"]),
            loss=float(d["loss"]),
            penalized_loss=float(d["penalized_loss"]),
            restart=int(d["restart"]),
            diagnostics=list(d.get("diagnostics", [])),
        )


def _init_theta(ctx: ImageContext, rotation, focal_mult, cfg: AlignConfig):
    c = ctx.sparse_pos - ctx.sparse_pos.mean(axis=0)
    radius = max(np.linalg.norm(c, axis=1).max(), 1e-9)
    k0 = (c @ rotation.T) * (cfg.init_radius / radius)
    k0[:, 2] += cfg.d_target
    f0 = focal_mult * max(ctx.image_size)
    return AlignmentState(k0, f0).to_theta()


def _run_restart(ctx: ImageContext, theta, cfg: AlignConfig, rng):
    opt = AdamW(lr=cfg.lr)
    xy, sem_d, sem_s = ctx.sample_pixels(rng, cfg.pixel_samples)
    e0, _, _ = align_energy(theta, ctx, cfg.n_steps, xy, sem_d, sem_s)
    for t in range(cfg.n_steps):
        if t and t % cfg.resample_every == 0:
            xy, sem_d, sem_s = ctx.sample_pixels(rng, cfg.pixel_samples)
        _, grad, _ = align_energy(theta, ctx, t, xy, sem_d, sem_s)
        theta = opt.step(theta, grad)
    e1, _, best = align_energy(theta, ctx, cfg.n_steps, xy, sem_d, sem_s)
    return theta, e0, e1, float(best.mean())


def align_image(rep, sample, config=None, seed=0, category=None) -> AlignResult:
    """Multi-start alignment of a representation to one image.

    Restarts = focal grid x random rotations; the best final loss wins after
    the facing check (flat objects only) and the z-order penalty."""
    cfg = config if isinstance(config, AlignConfig) else resolve_config(
        category or getattr(rep, "category", None), config
    )
    ctx = ImageContext(rep, sample, cfg, seed)
    flat = is_flat(ctx.sparse_pos, cfg.flatness_threshold)

    # one shared, larger pixel sample for ranking: per-restart minibatch losses
    # are too noisy to compare restarts against each other fairly
    rank_rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    rank_xy, rank_sd, rank_ss = ctx.sample_pixels(
        rank_rng, max(cfg.pixel_samples, 1024))

    results = []
    restart = 0
    for focal_mult in cfg.focal_grid:
        for r in range(cfg.n_rotations):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 17, restart]))
            rotation = random_rotation(rng)
            theta = _init_theta(ctx, rotation, focal_mult, cfg)
            theta, e0, e1, mean_lik = _run_restart(ctx, theta, cfg, rng)
            e_rank, _, rank_best = align_energy(
                theta, ctx, cfg.n_steps, rank_xy, rank_sd, rank_ss)
            mean_lik = float(rank_best.mean())
            state = AlignmentState.from_theta(theta, step=cfg.n_steps)
            zp = zorder_penalty(
                ctx, state,
                np.random.default_rng(np.random.SeedSequence([seed, 23, restart])),
                cfg.zorder_pairs, cfg.zorder_weight,
            )
            facing = (not flat) or faces_camera(
                ctx.sparse_pos, ctx.front_dir, state.keypoints
            )
            results.append({
                "restart": restart,
                "focal_mult": float(focal_mult),
                "rotation_index": r,
                "loss_init": float(e0),
                "loss": float(e_rank),
                "minibatch_loss": float(e1),
                "zorder_penalty": float(zp),
                "penalized_loss": float(e_rank + zp),
                "discarded_by_normal": bool(not facing),
                "mean_likelihood": float(mean_lik),
                "low_likelihood": bool(mean_lik < 0.1),
                "state": state,
            })
            restart += 1

    usable = [r for r in results
              if np.isfinite(r["loss"]) and not r["discarded_by_normal"]]
    if not usable:
        usable = [r for r in results if np.isfinite(r["loss"])]
    if not usable:
        raise AllRestartsDiverged(
            f"{sample.image_id}: no restart produced a finite loss"
        )
    best = min(usable, key=lambda r: r["penalized_loss"])

    diags = [{k: v for k, v in r.items() if k != "state"} for r in results]
    return AlignResult(
        category=category or getattr(rep, "category", "unknown"),
        image_id=sample.image_id,
        image_size=sample.image_size,
        keypoints=best["state"].keypoints,
        focal=best["state"].focal,
        loss=best["loss"],
        penalized_loss=best["penalized_loss"],
        restart=best["restart"],
        diagnostics=diags,
    )
