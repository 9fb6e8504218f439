"""Procedural synthetic object classes with exact analytic depth, part-coded
patch features, masks, keypoints, and ground-truth dense correspondences.

Surfaces are unions of ellipsoidal parts.  Each keypoint carries a small
sphere so the rendered depth at its pixel is its own surface; larger body
parts give the dense cloud something to cluster.  Rendered depth is exact
ray-surface intersection depth, so downstream tolerances measure algorithm
error, not data error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio
from .errors import ObjectBehindCamera
from .geometry import random_rotation, Camera
from .tensorio import AnnotatedSample, Keypoint, write_tensor

KEYPOINT_RADIUS = 0.2
BACKGROUND_DEPTH_FACTOR = 2.5


@dataclass(frozen=True)
class Part:
    """Ellipsoid in canonical coordinates; proto indexes the class prototype
    table; keypoint marks the annotation this part carries (or None)."""

    center: np.ndarray
    radii: np.ndarray
    rot: np.ndarray
    proto: int
    keypoint: Optional[int] = None


@dataclass(frozen=True)
class Pose:
    """Similarity transform canonical -> world: p_w = scale * rot @ p_c + trans."""

    scale: float
    rot: np.ndarray
    trans: np.ndarray

    def apply(self, pts):
        return self.scale * np.asarray(pts) @ self.rot.T + self.trans

    def invert(self, pts):
        return (np.asarray(pts) - self.trans) @ self.rot / self.scale


@dataclass
class SynthClass:
    name: str
    keypoints: np.ndarray  # (L, 3) canonical
    parts: list  # of Part
    prototypes: np.ndarray  # (n_protos, d) orthonormal rows; last row = background
    pos_basis: np.ndarray = None  # (3, d) orthonormal, disjoint from prototypes
    pos_amp: float = 0.6  # strength of the within-part positional feature drift
    view_mode: str = "so3"  # "so3" or "hemisphere" (front-facing views only)
    jitter_frac: float = 0.0

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def diameter(self) -> float:
        d = self.keypoints[:, None, :] - self.keypoints[None, :, :]
        return float(np.linalg.norm(d, axis=-1).max())

    def surface_feature(self, pts_c, proto_idx):
        """Unit-norm feature at canonical surface points: the part prototype
        plus a smooth positional drift, mimicking backbone features that vary
        gradually across an object instead of being piecewise constant."""
        base = self.prototypes[np.asarray(proto_idx)].astype(float)
        if self.pos_basis is not None and self.pos_amp:
            half = 0.5 * self.diameter
            base = base + self.pos_amp * (np.asarray(pts_c) / half) @ self.pos_basis
        return base / np.linalg.norm(base, axis=-1, keepdims=True)

    def surface_samples(self, n_per_part=2000, seed=0):
        """Dense point samples on the canonical surface (oracle for distance
        checks): uniform directions mapped to each ellipsoid, kept only where
        they are on the union boundary (not inside another part)."""
        rng = np.random.default_rng(seed)
        pts = []
        for part in self.parts:
            d = rng.normal(size=(n_per_part, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            p = part.center + (d * part.radii) @ part.rot.T
            pts.append(p)
        pts = np.concatenate(pts)
        keep = np.ones(len(pts), dtype=bool)
        for part in self.parts:
            local = (pts - part.center) @ part.rot / part.radii
            keep &= np.linalg.norm(local, axis=1) >= 1.0 - 1e-9
        return pts[keep]


def _orthonormal_prototypes(n, dim, rng):
    """(n, dim) orthonormal prototype rows plus a disjoint (3, dim) positional
    basis drawn from the remaining orthogonal complement."""
    mat = rng.normal(size=(dim, dim))
    q, _ = np.linalg.qr(mat)
    if n + 3 > dim:
        raise ValueError(f"need feature_dim >= {n + 3}, got {dim}")
    return q[:n].copy(), q[n:n + 3].copy()


def _sphere(center, proto, keypoint, radius=KEYPOINT_RADIUS):
    return Part(
        center=np.asarray(center, dtype=float),
        radii=np.full(3, radius),
        rot=np.eye(3),
        proto=proto,
        keypoint=keypoint,
    )


def _ellipsoid(center, radii, proto):
    return Part(
        center=np.asarray(center, dtype=float),
        radii=np.asarray(radii, dtype=float),
        rot=np.eye(3),
        proto=proto,
        keypoint=None,
    )


def airplane_class(seed=0, feature_dim=16, symmetric_features=False) -> SynthClass:
    """Airplane-like class: 8 keypoints on fuselage, wings, and tail."""
    kps = np.array(
        [
            [1.6, 0.0, 0.0],     # nose
            [-1.9, 0.0, 0.1],    # tail
            [0.1, -1.4, 0.0],    # left wing tip
            [0.1, 1.4, 0.0],     # right wing tip
            [-1.45, -0.55, 0.1], # left stabilizer tip
            [-1.45, 0.55, 0.1],  # right stabilizer tip
            [-1.5, 0.0, 0.68],   # fin top
            [1.0, 0.0, 0.42],    # cockpit top
        ]
    )
    rng = np.random.default_rng(seed)
    protos, pos_basis = _orthonormal_prototypes(13, feature_dim, rng)
    proto_idx = list(range(8))
    if symmetric_features:
        # mirror-identical semantics on left/right parts
        proto_idx[3] = proto_idx[2]
        proto_idx[5] = proto_idx[4]
    parts = [_sphere(kps[i], proto_idx[i], i) for i in range(8)]
    parts += [
        _ellipsoid([0.0, 0.0, 0.05], [1.6, 0.45, 0.45], 8),   # fuselage
        _ellipsoid([0.1, 0.0, 0.0], [0.6, 1.4, 0.22], 9),     # wings
        _ellipsoid([-1.45, 0.0, 0.1], [0.35, 0.55, 0.16], 10),# stabilizers
        _ellipsoid([-1.5, 0.0, 0.35], [0.2, 0.12, 0.3], 11),  # fin
    ]
    name = "airplane-sym" if symmetric_features else "airplane"
    return SynthClass(name=name, keypoints=kps, parts=parts, prototypes=protos,
                      pos_basis=pos_basis)


def planar_class(seed=0, feature_dim=16) -> SynthClass:
    """Flat screen-like class (5 keypoints); exercises the normal check."""
    kps = np.array(
        [
            [-1.2, -0.9, 0.0],
            [1.2, -0.9, 0.0],
            [1.2, 0.9, 0.0],
            [-1.2, 0.9, 0.0],
            [0.0, 0.0, 0.06],
        ]
    )
    rng = np.random.default_rng(seed)
    protos, pos_basis = _orthonormal_prototypes(7, feature_dim, rng)
    parts = [_sphere(kps[i], i, i) for i in range(5)]
    parts.append(_ellipsoid([0.0, 0.0, 0.0], [1.3, 1.0, 0.05], 5))
    return SynthClass(
        name="screen", keypoints=kps, parts=parts, prototypes=protos,
        pos_basis=pos_basis, view_mode="hemisphere",
    )


def triangle_class(seed=0, feature_dim=8, side=1.5) -> SynthClass:
    """Equilateral planar triangle, 3 keypoints; minimal build test case."""
    r = side / np.sqrt(3.0)
    ang = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
    kps = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(3)], axis=1)
    rng = np.random.default_rng(seed)
    protos, pos_basis = _orthonormal_prototypes(5, feature_dim, rng)
    parts = [_sphere(kps[i], i, i) for i in range(3)]
    parts.append(_ellipsoid([0.0, 0.0, 0.0], [0.9, 0.9, 0.05], 3))
    return SynthClass(
        name="triangle", keypoints=kps, parts=parts, prototypes=protos,
        pos_basis=pos_basis, view_mode="hemisphere",
    )


CLASS_FACTORIES = {
    "airplane": airplane_class,
    "airplane-sym": lambda seed=0: airplane_class(seed, symmetric_features=True),
    "screen": planar_class,
    "triangle": triangle_class,
}


_FLIP_X = np.diag([1.0, -1.0, -1.0])  # 180 deg about x; proper rotation


def sample_pose(cls: SynthClass, rng, depth=7.8, scale_range=(0.75, 0.95),
                lateral_frac=0.03) -> Pose:
    rot = random_rotation(rng)
    if cls.view_mode == "hemisphere" and (rot @ np.array([0.0, 0.0, 1.0]))[2] > 0:
        rot = rot @ _FLIP_X  # keep the canonical +z face toward the camera
    scale = float(rng.uniform(*scale_range))
    trans = np.array(
        [
            rng.uniform(-lateral_frac, lateral_frac) * depth,
            rng.uniform(-lateral_frac, lateral_frac) * depth,
            depth * float(rng.uniform(0.9, 1.1)),
        ]
    )
    return Pose(scale=scale, rot=rot, trans=trans)


def _ray_dirs(camera: Camera, us, vs):
    return np.stack(
        [
            (us - camera.cx) / camera.focal,
            (vs - camera.cy) / camera.focal,
            np.ones_like(us, dtype=float),
        ],
        axis=-1,
    )


def _intersect(parts_world, dirs):
    """Nearest intersection parameter t (depth, since dir_z = 1) and part id
    per ray; +inf / -1 where nothing is hit."""
    n = dirs.shape[0]
    t_min = np.full(n, np.inf)
    part_id = np.full(n, -1, dtype=int)
    for pid, (center, radii, rot) in enumerate(parts_world):
        dl = (dirs @ rot) / radii
        ol = (-center @ rot) / radii
        a = np.einsum("ij,ij->i", dl, dl)
        b = dl @ ol
        c = float(ol @ ol) - 1.0
        disc = b * b - a * c
        hit = disc >= 0
        t = np.full(n, np.inf)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / a
        t[hit & (t_near > 1e-9)] = t_near[hit & (t_near > 1e-9)]
        closer = t < t_min
        t_min[closer] = t[closer]
        part_id[closer] = pid
    return t_min, part_id


def render_instance(cls: SynthClass, pose: Pose, camera: Camera, image_size,
                    grid_size=32, noise=0.0, rng=None, image_id="synth"):
    """Render one instance; returns (AnnotatedSample, ground-truth dict).

    Ground truth holds the pose, focal, exact world keypoints, the jittered
    canonical keypoints, and per-pixel canonical surface coordinates.
    """
    rng = rng or np.random.default_rng(0)
    w, h = image_size

    kps_c = cls.keypoints.copy()
    offsets = np.zeros_like(kps_c)
    if cls.jitter_frac > 0:
        bound = cls.jitter_frac * cls.diameter
        offsets = rng.uniform(-bound, bound, size=kps_c.shape)
        kps_c = kps_c + offsets

    parts_world = []
    for part in cls.parts:
        center = part.center.copy()
        if part.keypoint is not None:
            center = center + offsets[part.keypoint]
        parts_world.append(
            (
                pose.apply(center),
                part.radii * pose.scale,
                pose.rot @ part.rot,
            )
        )
    min_z = min(c[2] - r.max() for c, r, _ in parts_world)
    if min_z <= 0:
        raise ObjectBehindCamera(f"nearest surface z = {min_z:.3f}")

    # depth + mask at image resolution
    ui, vi = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = _ray_dirs(camera, ui.ravel(), vi.ravel())
    t_img, pid_img = _intersect(parts_world, dirs)
    covered = np.isfinite(t_img)
    bg_depth = float(pose.trans[2] * BACKGROUND_DEPTH_FACTOR)
    depth = np.where(covered, t_img, bg_depth).reshape(h, w)
    mask = covered.reshape(h, w).astype(float)

    # features at grid resolution
    gu = tensorio.grid_to_coord(np.arange(grid_size), grid_size, w)
    gv = tensorio.grid_to_coord(np.arange(grid_size), grid_size, h)
    gui, gvi = np.meshgrid(gu, gv)
    gdirs = _ray_dirs(camera, gui.ravel(), gvi.ravel())
    t_grid, pid_grid = _intersect(parts_world, gdirs)
    proto_of_part = np.array([p.proto for p in cls.parts])
    bg_proto = cls.prototypes.shape[0] - 1
    hit = pid_grid >= 0
    proto_idx = np.where(hit, proto_of_part[np.maximum(pid_grid, 0)], bg_proto)
    feats = cls.prototypes[proto_idx].astype(float)
    if np.any(hit):
        surf_c = pose.invert(gdirs[hit] * t_grid[hit, None])
        feats[hit] = cls.surface_feature(surf_c, proto_idx[hit])
    if noise > 0:
        feats = feats + noise * rng.normal(size=feats.shape)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    features = feats.reshape(grid_size, grid_size, -1)

    # keypoints: projected exactly; visible iff in bounds and the keypoint's
    # own sphere is the front surface along its ray
    kps_w = pose.apply(kps_c)
    proj_u = camera.cx + camera.focal * kps_w[:, 0] / kps_w[:, 2]
    proj_v = camera.cy + camera.focal * kps_w[:, 1] / kps_w[:, 2]
    kp_dirs = _ray_dirs(camera, proj_u, proj_v)
    t_front, pid_front = _intersect(parts_world, kp_dirs)
    part_of_kp = {p.keypoint: i for i, p in enumerate(cls.parts) if p.keypoint is not None}
    keypoints = []
    for i in range(cls.n_keypoints):
        in_bounds = 0 <= proj_u[i] < w and 0 <= proj_v[i] < h
        vis = bool(in_bounds and pid_front[i] == part_of_kp[i])
        keypoints.append(Keypoint(i, float(proj_u[i]), float(proj_v[i]), vis))

    ys, xs = np.nonzero(mask)
    if len(xs):
        bbox = (float(xs.min()), float(ys.min()),
                float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))
    else:
        bbox = (0.0, 0.0, 0.0, 0.0)

    sample = AnnotatedSample(
        image_id=image_id,
        image_size=(w, h),
        keypoints=keypoints,
        depth=depth,
        features=features,
        mask=mask,
        bbox=bbox,
    ).validate()

    world_pts = dirs * t_img[:, None]
    canon = np.zeros_like(world_pts)
    canon[covered] = pose.invert(world_pts[covered])
    gt = {
        "pose_scale": pose.scale,
        "pose_rot": pose.rot,
        "pose_trans": pose.trans,
        "focal": camera.focal,
        "keypoints_world": kps_w,
        "keypoints_canonical": kps_c,
        "canonical_surface": canon.reshape(h, w, 3),
        "coverage": covered.reshape(h, w),
    }
    return sample, gt


def _rel(path, root):
    return str(Path(path).relative_to(root))


def _write_entry(sample: AnnotatedSample, gt, root, subdir):
    root = Path(root)
    d = root / subdir
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "depth.bin", sample.depth)
    write_tensor(d / "features.bin", sample.features)
    write_tensor(d / "mask.bin", sample.mask)
    write_tensor(d / "kp_world.bin", gt["keypoints_world"])
    write_tensor(d / "kp_canonical.bin", gt["keypoints_canonical"])
    write_tensor(d / "canon_surface.bin", gt["canonical_surface"])
    write_tensor(d / "coverage.bin", gt["coverage"].astype(np.float32))
    entry = {
        "image_id": sample.image_id,
        "image_size": list(sample.image_size),
        "keypoints": [[kp.index, kp.u, kp.v, kp.visible] for kp in sample.keypoints],
        "depth": _rel(d / "depth.bin", root),
        "features": _rel(d / "features.bin", root),
        "mask": _rel(d / "mask.bin", root),
        "bbox": list(sample.bbox),
        "gt": {
            "pose_scale": gt["pose_scale"],
            "pose_rot": [list(map(float, r)) for r in gt["pose_rot"]],
            "pose_trans": list(map(float, gt["pose_trans"])),
            "focal": gt["focal"],
            "keypoints_world": _rel(d / "kp_world.bin", root),
            "keypoints_canonical": _rel(d / "kp_canonical.bin", root),
            "canonical_surface": _rel(d / "canon_surface.bin", root),
            "coverage": _rel(d / "coverage.bin", root),
        },
    }
    return entry


def make_benchmark(category="airplane", n_train=20, n_test_pairs=50, seed=0,
                   noise=0.0, out_dir=None, image_size=(128, 128), grid_size=32,
                   base_focal=None, focal_ratios=(1.0, 2.0, 0.5, 1.25),
                   n_test=None, class_seed=0):
    """Deterministic synthetic dataset: train images with known focals cycling
    focal_ratios, test images at the base focal, plus sampled test pairs.

    Writes tensor files and a manifest under out_dir; returns the manifest.
    """
    out_dir = Path(out_dir)
    cls = CLASS_FACTORIES[category](seed=class_seed)
    w, h = image_size
    # moderately long lens: photographic crops are weak-perspective, and the
    # alignment's focal estimate is only observable through foreshortening
    base_focal = base_focal or 2.5 * max(w, h)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    min_visible = min(cls.n_keypoints, 4)

    def render_annotated(camera, depth, image_id, max_tries=100):
        # resample until enough keypoints are visible (dataset curation:
        # focal estimation needs >= 4 annotated keypoints per image)
        for _ in range(max_tries):
            pose = sample_pose(cls, rng, depth=depth)
            sample, gt = render_instance(
                cls, pose, camera, image_size, grid_size, noise, rng,
                image_id=image_id,
            )
            if sum(kp.visible for kp in sample.keypoints) >= min_visible:
                return sample, gt
        raise RuntimeError(f"no pose with {min_visible} visible keypoints "
                           f"after {max_tries} tries")

    train = []
    for i in range(n_train):
        ratio = focal_ratios[i % len(focal_ratios)]
        camera = Camera.for_image(base_focal * ratio, image_size)
        # depth tracks focal so framing stays comparable across ratios;
        # clamped so short-focal instances stay fully in front of the camera
        sample, gt = render_annotated(
            camera, max(7.8 * ratio, 4.5), f"train_{i:03d}")
        train.append(_write_entry(sample, gt, out_dir, f"train_{i:03d}"))

    if n_test is None:
        n_test = max(6, min(20, n_test_pairs))
    test = []
    for i in range(n_test):
        camera = Camera.for_image(base_focal, image_size)
        sample, gt = render_annotated(camera, 7.8, f"test_{i:03d}")
        test.append(_write_entry(sample, gt, out_dir, f"test_{i:03d}"))

    pairs = []
    if n_test >= 2:
        pair_rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
        seen = set()
        while len(pairs) < n_test_pairs:
            i, j = pair_rng.integers(0, n_test, size=2)
            if i == j:
                continue
            key = (int(i), int(j))
            if key in seen and len(seen) < n_test * (n_test - 1):
                continue
            seen.add(key)
            pairs.append([int(i), int(j)])

    manifest = {
        "category": category,
        "seed": seed,
        "noise": noise,
        "image_size": list(image_size),
        "grid_size": grid_size,
        "base_focal": base_focal,
        "train": train,
        "test": test,
        "test_pairs": pairs,
    }
    tensorio.save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_gt(entry, root):
    """Ground-truth record for a manifest entry written by make_benchmark."""
    root = Path(root)
    g = entry["gt"]
    return {
        "pose": Pose(
            scale=float(g["pose_scale"]),
            rot=np.asarray(g["pose_rot"], dtype=float),
            trans=np.asarray(g["pose_trans"], dtype=float),
        ),
        "focal": float(g["focal"]),
        "keypoints_world": tensorio.read_tensor(root / g["keypoints_world"]).astype(float),
        "keypoints_canonical": tensorio.read_tensor(root / g["keypoints_canonical"]).astype(float),
        "canonical_surface": tensorio.read_tensor(root / g["canonical_surface"]).astype(float),
        "coverage": tensorio.read_tensor(root / g["coverage"]).astype(bool),
    }
