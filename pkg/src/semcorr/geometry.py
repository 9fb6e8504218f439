"""Camera model, back-projection, edge angle/ratio features, convex hulls,
and barycentric parametrization of points with respect to anchor keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .errors import DegenerateEdge, NonPositiveDepth, TooFewPoints

EDGE_EPS = 1e-9
ACOS_CLAMP = 1.0 - 1e-7  # keeps angle gradients finite near collinearity


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with shared x/y focal length, principal point at the
    image center (integer coordinates are pixel centers)."""

    focal: float
    cx: float
    cy: float

    @classmethod
    def for_image(cls, focal, image_size) -> "Camera":
        w, h = image_size
        return cls(float(focal), (w - 1) / 2.0, (h - 1) / 2.0)


def back_project(camera: Camera, u, v, depth):
    """Lift image coordinates + depth to 3D; inverse of project()."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be > 0")
    x = (u - camera.cx) * d / camera.focal
    y = (v - camera.cy) * d / camera.focal
    return np.stack([x, y, d], axis=-1)


def project(camera: Camera, points):
    """Project 3D points (..., 3) to pixel coordinates (..., 2)."""
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point behind camera")
    u = camera.cx + camera.focal * pts[..., 0] / z
    v = camera.cy + camera.focal * pts[..., 1] / z
    return np.stack([u, v], axis=-1)


def angle_ratio(points, quad):
    """Angle A in [0, pi] between edges e_ij, e_kl and length ratio
    R = |e_ij| / (|e_ij| + |e_kl|) for one keypoint quadruple."""
    i, j, k, l = quad
    pts = np.asarray(points, dtype=float)
    e1 = pts[j] - pts[i]
    e2 = pts[l] - pts[k]
    n1 = np.linalg.norm(e1)
    n2 = np.linalg.norm(e2)
    if n1 < EDGE_EPS or n2 < EDGE_EPS:
        raise DegenerateEdge(f"edge norm below {EDGE_EPS} for quad {tuple(quad)}")
    c = np.clip(np.dot(e1, e2) / (n1 * n2), -1.0, 1.0)
    return float(np.arccos(c)), float(n1 / (n1 + n2))


def quad_features(points, quads):
    """Vectorized (A, R) for many quadruples.

    points: (L, 3); quads: (M, 4) int.  Returns A (M,), R (M,).  Degenerate
    edges are clamped to EDGE_EPS rather than raised (batch context).
    """
    pts = np.asarray(points, dtype=float)
    q = np.asarray(quads, dtype=int)
    e1 = pts[q[:, 1]] - pts[q[:, 0]]
    e2 = pts[q[:, 3]] - pts[q[:, 2]]
    n1 = np.maximum(np.linalg.norm(e1, axis=1), EDGE_EPS)
    n2 = np.maximum(np.linalg.norm(e2, axis=1), EDGE_EPS)
    c = np.clip(np.einsum("ij,ij->i", e1, e2) / (n1 * n2), -ACOS_CLAMP, ACOS_CLAMP)
    return np.arccos(c), n1 / (n1 + n2)


def quad_features_grad(points, quads):
    """(A, R) plus gradients with respect to the two edge vectors.

    Returns A, R, dA_de1, dA_de2, dR_de1, dR_de2 with shapes (M,) / (M, 3).
    Per-point gradients follow from dX/dP[j] += dX_de1, dX/dP[i] -= dX_de1,
    dX/dP[l] += dX_de2, dX/dP[k] -= dX_de2 (see scatter_quad_grad).
    """
    pts = np.asarray(points, dtype=float)
    q = np.asarray(quads, dtype=int)
    e1 = pts[q[:, 1]] - pts[q[:, 0]]
    e2 = pts[q[:, 3]] - pts[q[:, 2]]
    n1 = np.maximum(np.linalg.norm(e1, axis=1), EDGE_EPS)
    n2 = np.maximum(np.linalg.norm(e2, axis=1), EDGE_EPS)
    dot = np.einsum("ij,ij->i", e1, e2)
    c = np.clip(dot / (n1 * n2), -ACOS_CLAMP, ACOS_CLAMP)
    A = np.arccos(c)
    R = n1 / (n1 + n2)

    dA_dc = -1.0 / np.sqrt(1.0 - c * c)
    inv = 1.0 / (n1 * n2)
    dc_de1 = e2 * inv[:, None] - e1 * (c / (n1 * n1))[:, None]
    dc_de2 = e1 * inv[:, None] - e2 * (c / (n2 * n2))[:, None]
    dA_de1 = dA_dc[:, None] * dc_de1
    dA_de2 = dA_dc[:, None] * dc_de2

    s2 = (n1 + n2) ** 2
    dR_de1 = (n2 / s2 / n1)[:, None] * e1
    dR_de2 = -(n1 / s2 / n2)[:, None] * e2
    return A, R, dA_de1, dA_de2, dR_de1, dR_de2


def scatter_quad_grad(grad_points, quads, w1, w2):
    """Accumulate per-quadruple edge gradients into per-point gradients.

    grad_points: (L, 3) accumulator; w1/w2: (M, 3) gradients with respect to
    e1 = P[j]-P[i] and e2 = P[l]-P[k].
    """
    q = np.asarray(quads, dtype=int)
    np.add.at(grad_points, q[:, 1], w1)
    np.add.at(grad_points, q[:, 0], -w1)
    np.add.at(grad_points, q[:, 3], w2)
    np.add.at(grad_points, q[:, 2], -w2)


def similarity_procrustes(src, dst):
    """Least-squares similarity transform (s, R, t) with dst ~ s * src @ R.T + t.

    Rotation only (no reflection); needs >= 3 non-collinear point pairs.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    cov = b.T @ a
    u, svals, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, 1.0, d])
    rot = u @ corr @ vt
    var_a = np.einsum("ij,ij->", a, a)
    scale = float((svals * np.diag(corr)).sum() / max(var_a, EDGE_EPS))
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


# --- convex hull --------------------------------------------------------------

def _dilate(points, margin):
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    return centroid + (pts - centroid) * (1.0 + margin)


def hull_facets(points, margin=0.0):
    """Half-space representation (normals, offsets) of the dilated hull.

    Coplanar point sets fall back to an epsilon-thickened planar hull.
    Facet equations satisfy n.x + d <= 0 for interior points.
    """
    pts = _dilate(points, margin)
    if pts.shape[0] < 4:
        raise TooFewPoints(f"need >= 4 hull points, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    _, svals, vecs = np.linalg.svd(centered, full_matrices=True)
    scale = max(svals[0], EDGE_EPS)
    if svals[-1] < 1e-9 * scale:
        # thicken along the degenerate direction
        thickness = 1e-6 * scale
        normal = vecs[-1]
        pts = np.concatenate([pts + thickness * normal, pts - thickness * normal])
    hull = ConvexHull(pts)
    return hull.equations[:, :3], hull.equations[:, 3]


def convex_hull_contains(hull_points, queries, margin=0.05, tol=1e-9):
    """True where query points lie inside the hull dilated about its centroid
    by (1 + margin).  queries: (3,) or (N, 3)."""
    normals, offsets = hull_facets(hull_points, margin)
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    inside = np.all(q @ normals.T + offsets <= tol, axis=1)
    return inside if np.asarray(queries).ndim == 2 else bool(inside[0])


# --- barycentric parametrization ------------------------------------------------

def barycentric_encode(anchors, points, k_anchors=4):
    """Express points as affine combinations of their k nearest anchors.

    Solves the 4-anchor affine system sum(w_a * anchor_a) = p, sum(w_a) = 1.
    Near-singular systems (degenerate tetrahedra) fall back to normalized
    inverse-squared-distance weights; the flag marks the affine case.

    Returns (idx (N, k), weights (N, k), affine_flag (N,)).
    """
    anchors = np.asarray(anchors, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if anchors.shape[0] < k_anchors:
        raise TooFewPoints(f"need >= {k_anchors} anchors, got {anchors.shape[0]}")
    tree = cKDTree(anchors)
    _, idx = tree.query(pts, k=k_anchors)
    idx = np.atleast_2d(idx)

    n = pts.shape[0]
    weights = np.empty((n, k_anchors))
    affine = np.zeros(n, dtype=bool)
    scale = max(np.linalg.norm(anchors - anchors.mean(axis=0), axis=1).max(), EDGE_EPS)

    sel = anchors[idx]  # (N, k, 3)
    for m in range(n):
        a = sel[m]
        # rows: 3 coordinate equations + affine constraint
        mat = np.vstack([a.T, np.ones(k_anchors)])
        rhs = np.append(pts[m], 1.0)
        if k_anchors == 4:
            vol = abs(np.linalg.det(mat))
            ok = vol > 1e-9 * scale**3
        else:
            ok = np.linalg.matrix_rank(mat) == 4
        if ok:
            if k_anchors == 4:
                weights[m] = np.linalg.solve(mat, rhs)
            else:
                weights[m] = np.linalg.lstsq(mat, rhs, rcond=None)[0]
            affine[m] = True
        else:
            d2 = np.sum((a - pts[m]) ** 2, axis=1)
            w = 1.0 / np.maximum(d2, EDGE_EPS**2)
            weights[m] = w / w.sum()
    return idx, weights, affine


def barycentric_decode(anchors, idx, weights):
    """Affine combination of anchors; linear in anchors, so differentiable
    alignment flows through it by weight-scattering."""
    anchors = np.asarray(anchors, dtype=float)
    return np.einsum("nk,nkd->nd", np.asarray(weights, dtype=float), anchors[idx])


def random_rotation(rng) -> np.ndarray:
    """Uniform SO(3) sample via a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
