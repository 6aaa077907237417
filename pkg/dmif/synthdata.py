"""Procedural training data: parametric solids, renders and labeled query points.

Every solid is described by a ShapeSpec and evaluated through an exact signed
distance function (negative inside). A point is occupied iff its SDF is
strictly negative; points on the surface count as outside.
"""

import hashlib
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import DimensionError, SamplingError
from .models import (
    SHAPE_BOUND, BoxParams, CameraSpec, CapsuleParams, DataConfig, ManifestEntry,
    Pose, PrimitiveKind, ShapeSpec, SphereParams, Split, TorusParams, UnionParams,
)
from . import storage

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]

# Fixed world-space light; the renderer adds an ambient floor so unlit sides stay visible.
LIGHT_DIRECTION = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])
AMBIENT = 0.35
BACKGROUND = 1.0
SAMPLE_BOUND = 0.55


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class Primitive(ABC):
    """Signed distance and random parameters for one primitive kind, in the local frame"""

    kind: PrimitiveKind

    @abstractmethod
    def local_sdf(self, params, p: np.ndarray) -> np.ndarray:
        """SDF of points p[N,3] expressed in the primitive's own frame"""
        pass

    @abstractmethod
    def random_params(self, rng: np.random.Generator, scale: float = 1.0):
        """Draw parameters whose bounding radius is at most `scale` times the kind's maximum"""
        pass


class SpherePrimitive(Primitive):
    kind = PrimitiveKind.SPHERE

    def local_sdf(self, params: SphereParams, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p, axis=-1) - params.radius

    def random_params(self, rng, scale=1.0) -> SphereParams:
        return SphereParams(radius=scale * rng.uniform(0.15, 0.35))


class BoxPrimitive(Primitive):
    kind = PrimitiveKind.BOX

    def local_sdf(self, params: BoxParams, p: np.ndarray) -> np.ndarray:
        q = np.abs(p) - np.asarray(params.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def random_params(self, rng, scale=1.0) -> BoxParams:
        return BoxParams(half_extents=tuple(float(v) for v in scale * rng.uniform(0.08, 0.25, size=3)))


class TorusPrimitive(Primitive):
    """Ring in the local xz-plane around the y axis"""

    kind = PrimitiveKind.TORUS

    def local_sdf(self, params: TorusParams, p: np.ndarray) -> np.ndarray:
        ring = np.hypot(p[..., 0], p[..., 2]) - params.major_radius
        return np.hypot(ring, p[..., 1]) - params.minor_radius

    def random_params(self, rng, scale=1.0) -> TorusParams:
        major = rng.uniform(0.18, 0.3)
        minor = rng.uniform(0.05, min(0.12, 0.5 * major))
        return TorusParams(major_radius=scale * major, minor_radius=scale * minor)


class CapsulePrimitive(Primitive):
    """Segment from (0,-h,0) to (0,h,0) swept by a ball"""

    kind = PrimitiveKind.CAPSULE

    def local_sdf(self, params: CapsuleParams, p: np.ndarray) -> np.ndarray:
        offset = p.copy()
        offset[..., 1] -= np.clip(p[..., 1], -params.half_length, params.half_length)
        return np.linalg.norm(offset, axis=-1) - params.radius

    def random_params(self, rng, scale=1.0) -> CapsuleParams:
        return CapsuleParams(radius=scale * rng.uniform(0.07, 0.15), half_length=scale * rng.uniform(0.08, 0.22))


class UnionPrimitive(Primitive):
    kind = PrimitiveKind.UNION

    def __init__(self, factory: "ShapeFactory"):
        self.factory = factory

    def local_sdf(self, params: UnionParams, p: np.ndarray) -> np.ndarray:
        return np.minimum.reduce([self.factory.sdf(child, p) for child in params.children])

    def random_params(self, rng, scale=1.0) -> UnionParams:
        kinds = [k for k in PrimitiveKind if k != PrimitiveKind.UNION]
        children = [
            self.factory.random_shape(kinds[rng.integers(len(kinds))], rng, scale=0.7 * scale)
            for _ in range(2)
        ]
        return UnionParams(children=children)


class ShapeFactory:
    """Dispatches SDF evaluation and random generation to the primitive for each kind"""

    def __init__(self):
        self.primitives: Dict[PrimitiveKind, Primitive] = {
            PrimitiveKind.SPHERE: SpherePrimitive(),
            PrimitiveKind.BOX: BoxPrimitive(),
            PrimitiveKind.TORUS: TorusPrimitive(),
            PrimitiveKind.CAPSULE: CapsulePrimitive(),
            PrimitiveKind.UNION: UnionPrimitive(self),
        }

    def get_primitive(self, kind: PrimitiveKind) -> Primitive:
        primitive = self.primitives.get(PrimitiveKind(kind))
        if primitive is None:
            raise ValueError(f"Unsupported primitive kind: {kind}")
        return primitive

    def sdf(self, spec: ShapeSpec, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        rotation = spec.pose.matrix()
        # world -> local: R^T (p - t), written for row vectors
        local = (points - np.asarray(spec.pose.translation)) @ rotation
        return self.get_primitive(spec.kind).local_sdf(spec.params, local)

    def random_shape(self, kind: PrimitiveKind, rng: np.random.Generator, scale: float = 1.0) -> ShapeSpec:
        kind = PrimitiveKind(kind)
        params = self.get_primitive(kind).random_params(rng, scale)
        if kind == PrimitiveKind.UNION:
            # children carry their own poses
            pose = Pose()
        else:
            slack = max(SHAPE_BOUND - params.bounding_radius(), 0.0) * 0.999
            pose = Pose(
                rotation=tuple(float(a) for a in rng.uniform(0.0, 360.0, size=3)),
                translation=tuple(float(t) for t in rng.uniform(-slack, slack, size=3)),
            )
        color = tuple(float(c) for c in rng.uniform(0.35, 0.9, size=3))
        return ShapeSpec(kind=kind, params=params, pose=pose, color=color)


shape_factory = ShapeFactory()


def sdf(spec: ShapeSpec, p: np.ndarray) -> Union[float, np.ndarray]:
    """Signed distance at a point [3] (returns float) or points [N,3]"""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise DimensionError(f"points must have 3 coordinates, got shape {p.shape}")
    values = shape_factory.sdf(spec, p.reshape(-1, 3))
    return float(values[0]) if p.ndim == 1 else values.reshape(p.shape[:-1])


def sdf_normal(spec: ShapeSpec, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Unit SDF gradient by central differences; degenerate points get +z"""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    grad = np.empty_like(p)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[:, axis] = (shape_factory.sdf(spec, p + step) - shape_factory.sdf(spec, p - step)) / (2 * h)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    degenerate = norm[:, 0] < 1e-12
    grad[degenerate] = (0.0, 0.0, 1.0)
    norm[degenerate] = 1.0
    return grad / norm


def random_shape(kind: PrimitiveKind, rng: SeedLike = None) -> ShapeSpec:
    return shape_factory.random_shape(kind, _rng(rng))


def random_camera(rng: SeedLike = None) -> CameraSpec:
    rng = _rng(rng)
    return CameraSpec(azimuth=float(rng.uniform(0.0, 360.0)), elevation=float(rng.uniform(10.0, 40.0)))


# Rendering

def camera_frame(camera: CameraSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(eye direction, forward, right, up) for a camera looking at the origin"""
    az, el = np.radians(camera.azimuth), np.radians(camera.elevation)
    eye = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    forward = -eye
    right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, forward, right, up


def render(spec: ShapeSpec, camera: CameraSpec, height: int, width: int,
           max_steps: int = 128, hit_eps: float = 1e-4) -> np.ndarray:
    """Orthographic sphere-traced Lambert render, [3,H,W] in [0,1] on a white background"""
    if height < 1 or width < 1:
        raise DimensionError(f"image size must be positive, got {height}x{width}")
    eye, forward, right, up = camera_frame(camera)
    u = ((np.arange(width) + 0.5) / width - 0.5) * camera.extent
    v = (0.5 - (np.arange(height) + 0.5) / height) * camera.extent
    vv, uu = np.meshgrid(v, u, indexing="ij")
    origins = eye * camera.distance + uu.reshape(-1, 1) * right + vv.reshape(-1, 1) * up

    t = np.zeros(len(origins))
    hit = np.zeros(len(origins), dtype=bool)
    active = np.ones(len(origins), dtype=bool)
    t_max = camera.distance + np.sqrt(3.0) * 0.5
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        dist = shape_factory.sdf(spec, origins[idx] + t[idx, None] * forward)
        converged = dist < hit_eps
        hit[idx[converged]] = True
        t[idx] += np.where(converged, 0.0, dist)
        active[idx[converged]] = False
        active[idx[t[idx] > t_max]] = False

    image = np.full((len(origins), 3), BACKGROUND)
    if hit.any():
        points = origins[hit] + t[hit, None] * forward
        normals = sdf_normal(spec, points)
        lambert = np.clip(normals @ LIGHT_DIRECTION, 0.0, 1.0)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        image[hit] = shade[:, None] * np.asarray(spec.color)
    return np.clip(image, 0.0, 1.0).reshape(height, width, 3).transpose(2, 0, 1)


# Point sampling

def surface_points(spec: ShapeSpec, n: int, rng: SeedLike = None,
                   iterations: int = 8, tolerance: float = 1e-6) -> np.ndarray:
    """n points on the zero level set, found by projecting random points along the SDF gradient"""
    rng = _rng(rng)
    found: List[np.ndarray] = []
    total = 0
    for _ in range(64):
        if total >= n:
            break
        batch = rng.uniform(-SHAPE_BOUND, SHAPE_BOUND, size=(max(2 * (n - total), 16), 3))
        for _ in range(iterations):
            batch = batch - shape_factory.sdf(spec, batch)[:, None] * sdf_normal(spec, batch)
        keep = np.abs(shape_factory.sdf(spec, batch)) < tolerance
        found.append(batch[keep])
        total += int(keep.sum())
    if total < n:
        raise SamplingError(f"Could not project {n} points onto the {spec.kind.value} surface")
    return np.concatenate(found)[:n]


def sample_points(spec: ShapeSpec, k: int, rng: SeedLike = None, near_surface_fraction: float = 0.5,
                  jitter: float = 0.02) -> Tuple[np.ndarray, np.ndarray]:
    """k query points (uniform first, then near-surface) as float32 and their uint8 occupancy labels"""
    if k < 1:
        raise ValueError(f"need at least one point, got {k}")
    rng = _rng(rng)
    n_near = int(round(k * near_surface_fraction))
    uniform = rng.uniform(-0.5, 0.5, size=(k - n_near, 3))
    parts = [uniform]
    if n_near:
        surface = surface_points(spec, n_near, rng)
        offsets = rng.normal(0.0, jitter, size=(n_near, 1)) if jitter > 0 else np.zeros((n_near, 1))
        parts.append(surface + offsets * sdf_normal(spec, surface))
    points = np.clip(np.concatenate(parts), -SAMPLE_BOUND, SAMPLE_BOUND).astype(np.float32)
    # label the stored float32 coordinates so that relabeling a file reproduces it exactly
    labels = (shape_factory.sdf(spec, points.astype(np.float64)) < 0).astype(np.uint8)
    return points, labels


class ShapeOracle:
    """Occupancy predictor backed by the exact SDF.

    Occupancy ramps linearly from 1 to 0 across `ramp_width` around the surface,
    so p > 0.5 exactly where sdf < 0 and marching cubes interpolates cleanly.
    """

    def __init__(self, spec: ShapeSpec, resolution: int = 64):
        self.spec = spec
        self.ramp_width = 4.0 / resolution

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        return np.clip(0.5 - shape_factory.sdf(self.spec, points) / self.ramp_width, 0.0, 1.0)

    def predict_occupancy(self, image: Optional[np.ndarray], points: np.ndarray,
                          chunk_size: Optional[int] = None) -> np.ndarray:
        return self.occupancy(np.asarray(points, dtype=np.float64))


# Dataset building

def split_for(shape_ids: List[str], seed: int, train_fraction: float) -> Dict[str, Split]:
    """Deterministic train/test assignment: ids ordered by a seeded hash, leading share is train"""
    ranked = sorted(shape_ids, key=lambda sid: hashlib.sha1(f"{seed}:{sid}".encode()).hexdigest())
    n_train = int(round(train_fraction * len(ranked)))
    return {sid: (Split.TRAIN if i < n_train else Split.TEST) for i, sid in enumerate(ranked)}


def _write_sample(root: Path, config: DataConfig, shape_id: str, kind: PrimitiveKind,
                  kind_index: int, index: int, split: Split) -> ManifestEntry:
    rng = np.random.default_rng([config.seed, kind_index, index])
    spec = shape_factory.random_shape(kind, rng)
    camera = random_camera(rng)
    image = render(spec, camera, config.image_size, config.image_size)
    points, labels = sample_points(spec, config.points_per_shape, rng,
                                   config.near_surface_fraction, config.surface_jitter)
    image_rel = f"images/{shape_id}.png"
    points_rel = f"points/{shape_id}.dmpt"
    storage.write_image(root / image_rel, image)
    storage.write_points(root / points_rel, points, labels)
    return ManifestEntry(shape_id=shape_id, kind=kind, split=split, image=image_rel, points=points_rel,
                         pose=spec.pose, shape=spec, camera=camera)


def build_dataset(config: DataConfig, out_dir: Union[str, Path], threads: int = 1,
                  force: bool = False) -> Path:
    """Render and sample every shape, then write the manifest; returns the manifest path"""
    root = Path(out_dir)
    manifest_path = storage.ensure_writable(root / storage.MANIFEST_NAME, force)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "points").mkdir(parents=True, exist_ok=True)

    jobs = []
    for kind_index, kind in enumerate(PrimitiveKind):
        for i in range(config.counts.get(kind, 0)):
            jobs.append((f"{kind.value}-{i:05d}", kind, kind_index, i))
    splits = split_for([job[0] for job in jobs], config.seed, config.train_fraction)

    logger.info("Building dataset", extra={"fields": {"shapes": len(jobs), "out": str(root), "threads": threads}})
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_write_sample, root, config, sid, kind, ki, i, splits[sid])
                   for sid, kind, ki, i in jobs]
        entries = [future.result() for future in futures]

    entries.sort(key=lambda e: e.shape_id)
    storage.write_manifest(manifest_path, entries)
    n_train = sum(1 for e in entries if e.split == Split.TRAIN)
    logger.info("Dataset written", extra={"fields": {"train": n_train, "test": len(entries) - n_train}})
    return manifest_path
