"""On-disk formats: binary tensor files, annotation manifests, representation
containers, and small helpers to map image coordinates to grid indices.

Tensor file layout (little-endian):
    magic    4 bytes  b"SAT1"
    dtype    u8       0 = float32 (only defined code)
    rank     u32      1..4
    dims     rank * u32
    payload  prod(dims) * 4 bytes, row-major float32

Manifests are JSON; bulk numerics are tensor files referenced by relative
path.  A representation container is a directory holding ``meta.json`` plus
tensor files.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    InvariantViolation,
    MissingFile,
    Truncated,
)

MAGIC = b"SAT1"
_DTYPE_F32 = 0
_MAX_RANK = 4


def write_tensor(path, array) -> None:
    """Write a float32 tensor file (row-major, little-endian)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > _MAX_RANK:
        raise DimMismatch(f"rank {arr.ndim} outside [1, {_MAX_RANK}]")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", _DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; raises BadMagic/DimMismatch/Truncated/MissingFile."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9:
        raise Truncated(f"{path}: header truncated")
    dtype_code, rank = struct.unpack_from("<BI", raw, 4)
    if dtype_code != _DTYPE_F32:
        raise DimMismatch(f"{path}: unknown dtype code {dtype_code}")
    if rank < 1 or rank > _MAX_RANK:
        raise DimMismatch(f"{path}: rank {rank} outside [1, {_MAX_RANK}]")
    header_end = 9 + 4 * rank
    if len(raw) < header_end:
        raise Truncated(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    count = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < 4 * count:
        raise Truncated(f"{path}: payload {len(payload)} bytes, need {4 * count}")
    if len(payload) > 4 * count:
        raise DimMismatch(f"{path}: payload longer than declared dims")
    return np.frombuffer(payload, dtype="<f4", count=count).reshape(dims).copy()


def coord_to_grid(coord, grid_size, img_size):
    """Nearest-pixel mapping from image coordinates to grid indices.

    Uses floor((coord + 0.5) * grid/img), clamped to [0, grid-1].  Integer
    image coordinates are pixel centers.
    """
    idx = np.floor((np.asarray(coord, dtype=float) + 0.5) * grid_size / img_size)
    return np.clip(idx.astype(int), 0, grid_size - 1)


def grid_to_coord(idx, grid_size, img_size):
    """Image coordinate of a grid cell center (inverse of coord_to_grid)."""
    return (np.asarray(idx, dtype=float) + 0.5) * img_size / grid_size - 0.5


@dataclass(frozen=True)
class Keypoint:
    index: int
    u: float
    v: float
    visible: bool


@dataclass
class AnnotatedSample:
    """One image's annotations plus precomputed depth / feature tensors."""

    image_id: str
    image_size: tuple  # (width, height) px
    keypoints: list  # of Keypoint
    depth: np.ndarray  # (hd, wd) relative depth, > 0
    features: np.ndarray  # (hf, wf, d) unit-norm patch features
    mask: Optional[np.ndarray] = None  # (hm, wm) binary
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)  # (x, y, w, h) px

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    def visible_indices(self) -> list:
        return [kp.index for kp in self.keypoints if kp.visible]

    def keypoint_array(self):
        """(L, 2) array of (u, v); NaN for invisible keypoints."""
        n = 1 + max(kp.index for kp in self.keypoints)
        arr = np.full((n, 2), np.nan)
        for kp in self.keypoints:
            if kp.visible:
                arr[kp.index] = (kp.u, kp.v)
        return arr

    def depth_at(self, u, v):
        """Depth raster value nearest to image coordinate (u, v)."""
        hd, wd = self.depth.shape
        w, h = self.image_size
        gi = coord_to_grid(u, wd, w)
        gj = coord_to_grid(v, hd, h)
        return self.depth[gj, gi]

    def feature_at(self, u, v):
        """Patch feature nearest to image coordinate (u, v)."""
        hf, wf = self.features.shape[:2]
        w, h = self.image_size
        gi = coord_to_grid(u, wf, w)
        gj = coord_to_grid(v, hf, h)
        return self.features[gj, gi]

    def validate(self) -> "AnnotatedSample":
        w, h = self.image_size
        for kp in self.keypoints:
            if kp.visible and not (0 <= kp.u < w and 0 <= kp.v < h):
                raise InvariantViolation(
                    f"{self.image_id}: keypoint {kp.index} at ({kp.u}, {kp.v}) "
                    f"outside {w}x{h} image"
                )
        if np.any(self.depth <= 0):
            raise InvariantViolation(f"{self.image_id}: non-positive depth values")
        norms = np.linalg.norm(self.features, axis=-1)
        if np.any(norms < 1e-12):
            raise InvariantViolation(f"{self.image_id}: zero-norm feature vector")
        if np.any(np.abs(norms - 1.0) > 1e-4):
            warnings.warn(f"{self.image_id}: renormalizing non-unit feature vectors")
            self.features = self.features / norms[..., None]
        return self


def _entry_path(root, rel):
    p = Path(root) / rel
    if not p.is_file():
        raise MissingFile(str(p))
    return p


def load_sample(entry: dict, root) -> AnnotatedSample:
    """Load one manifest entry into a validated AnnotatedSample."""
    root = Path(root)
    depth = read_tensor(_entry_path(root, entry["depth"]))
    features = read_tensor(_entry_path(root, entry["features"]))
    mask = None
    if entry.get("mask"):
        mask = read_tensor(_entry_path(root, entry["mask"]))
    kps = [
        Keypoint(int(k[0]), float(k[1]), float(k[2]), bool(k[3]))
        for k in entry["keypoints"]
    ]
    sample = AnnotatedSample(
        image_id=entry["image_id"],
        image_size=tuple(entry["image_size"]),
        keypoints=kps,
        depth=depth.astype(float),
        features=features.astype(float),
        mask=mask,
        bbox=tuple(entry.get("bbox", (0.0, 0.0, 0.0, 0.0))),
    )
    return sample.validate()


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path) as fh:
        return json.load(fh)


def save_manifest(manifest: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_samples(manifest: dict, root, split="train"):
    return [load_sample(e, root) for e in manifest[split]]


# --- representation container -------------------------------------------------

def save_container(container, out_dir) -> None:
    """Write a RepresentationContainer as meta.json + tensor files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sparse, dense, stats = container.sparse, container.dense, container.geom_stats

    tensors = {
        "sparse_positions": sparse.positions,
        "sparse_features": sparse.features,
        "sparse_a_mu": sparse.a_mu,
        "sparse_a_sigma": sparse.a_sigma,
        "sparse_vis_count": sparse.vis_count.astype(np.float32),
        "stats_angle_ab": stats.angle_ab,
        "stats_ratio_ab": stats.ratio_ab,
        "dense_anchor_idx": dense.anchor_idx.astype(np.float32),
        "dense_anchor_w": dense.anchor_w,
        "dense_affine_flag": dense.affine_flag.astype(np.float32),
        "dense_features": dense.features,
        "dense_a_mu": dense.a_mu,
        "dense_a_sigma": dense.a_sigma,
        "dense_population": dense.population.astype(np.float32),
    }
    for name, arr in tensors.items():
        write_tensor(out / f"{name}.bin", arr)

    meta = {
        "category": container.category,
        "build_config": container.build_config,
        "n_keypoints": int(sparse.positions.shape[0]),
        "n_dense": int(dense.features.shape[0]),
        "quadruples": [[int(x) for x in q] for q in stats.quadruples],
        "sampling_seed": int(stats.sampling_seed),
        "front_dir": [float(x) for x in sparse.front_dir],
        "tensors": sorted(tensors.keys()),
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_container(in_dir):
    """Read a representation container directory back into memory."""
    from .reprbuild import DenseCloud, GeomFeatureStats, RepresentationContainer, SparseCloud

    root = Path(in_dir)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise MissingFile(str(meta_path))
    with open(meta_path) as fh:
        meta = json.load(fh)
    t = {name: read_tensor(root / f"{name}.bin") for name in meta["tensors"]}

    sparse = SparseCloud(
        positions=t["sparse_positions"].astype(float),
        features=t["sparse_features"].astype(float),
        a_mu=t["sparse_a_mu"].astype(float),
        a_sigma=t["sparse_a_sigma"].astype(float),
        vis_count=t["sparse_vis_count"].astype(int),
        front_dir=np.asarray(meta["front_dir"], dtype=float),
    )
    dense = DenseCloud(
        anchor_idx=t["dense_anchor_idx"].astype(int),
        anchor_w=t["dense_anchor_w"].astype(float),
        affine_flag=t["dense_affine_flag"].astype(bool),
        features=t["dense_features"].astype(float),
        a_mu=t["dense_a_mu"].astype(float),
        a_sigma=t["dense_a_sigma"].astype(float),
        population=t["dense_population"].astype(int),
    )
    stats = GeomFeatureStats(
        quadruples=np.asarray(meta["quadruples"], dtype=int).reshape(-1, 4),
        angle_ab=t["stats_angle_ab"].astype(float),
        ratio_ab=t["stats_ratio_ab"].astype(float),
        sampling_seed=int(meta["sampling_seed"]),
    )
    return RepresentationContainer(
        category=meta["category"],
        sparse=sparse,
        dense=dense,
        geom_stats=stats,
        build_config=meta["build_config"],
    )
