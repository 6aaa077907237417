"""Occupancy grids, isosurface extraction and triangle-mesh utilities.

Grid voxel centers sit at -0.5 + (i + 0.5) / R on each axis. Extracted meshes
are oriented outward, i.e. toward lower occupancy.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Tuple, Union

import numpy as np
import trimesh
from skimage import measure

from .errors import DimensionError, EmptyMeshError

logger = logging.getLogger(__name__)

MAX_RESOLUTION = 256
MIN_RESOLUTION = 8
MERGE_DECIMALS = 9      # vertices closer than 1e-9 collapse
MIN_FACE_AREA = 1e-12


class OccupancyPredictor(Protocol):
    def predict_occupancy(self, image, points: np.ndarray, chunk_size: Optional[int] = None) -> np.ndarray:
        ...


@dataclass
class OccupancyGrid:
    values: np.ndarray  # [R,R,R], axis order x, y, z

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return 1.0 / self.resolution

    @property
    def origin(self) -> float:
        """World coordinate of the first voxel center on every axis"""
        return -0.5 + 0.5 * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [V,3] float64
    faces: np.ndarray     # [F,3] int64
    normals: np.ndarray   # [V,3] unit

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals; length is twice the face area"""
        v0, v1, v2 = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(v1 - v0, v2 - v0)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cross = self.face_cross()
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, vertex_normals=self.normals, process=False)


def grid_points(resolution: int) -> np.ndarray:
    """Voxel centers [R^3,3] in x-major order matching OccupancyGrid.values.reshape(-1)"""
    axis = -0.5 + (np.arange(resolution) + 0.5) / resolution
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def evaluate_grid(model: OccupancyPredictor, image, resolution: int = 64,
                  chunk_size: Optional[int] = 65536) -> OccupancyGrid:
    if not MIN_RESOLUTION <= resolution <= MAX_RESOLUTION:
        raise DimensionError(f"grid resolution must be within [{MIN_RESOLUTION}, {MAX_RESOLUTION}], got {resolution}")
    values = model.predict_occupancy(image, grid_points(resolution), chunk_size)
    return OccupancyGrid(np.asarray(values, dtype=np.float64).reshape(resolution, resolution, resolution))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; vertices with no incident area get +z"""
    normals = np.zeros_like(vertices, dtype=np.float64)
    if len(faces):
        v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
        cross = np.cross(v1 - v0, v2 - v0)
        for i in range(3):
            np.add.at(normals, faces[:, i], cross)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    flat = norm[:, 0] == 0
    normals[flat] = (0.0, 0.0, 1.0)
    norm[flat] = 1.0
    return normals / norm


def cleanup(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Merge coincident vertices, drop collapsed or zero-area faces and unreferenced vertices"""
    if len(faces) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    _, first, inverse = np.unique(np.round(vertices, MERGE_DECIMALS), axis=0, return_index=True, return_inverse=True)
    vertices = vertices[first]
    faces = inverse.reshape(-1)[faces]
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    faces = faces[0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1) >= MIN_FACE_AREA]
    used, faces = np.unique(faces, return_inverse=True)
    return vertices[used], faces.reshape(-1, 3).astype(np.int64)


def orient_outward(grid: OccupancyGrid, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip every face when most face normals point up the occupancy gradient"""
    if len(faces) == 0:
        return faces
    gradient = np.stack(np.gradient(grid.values), axis=-1)
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    centroids = (v0 + v1 + v2) / 3.0
    index = np.clip(np.round((centroids - grid.origin) / grid.voxel_size).astype(int), 0, grid.resolution - 1)
    alignment = np.einsum("ij,ij->i", np.cross(v1 - v0, v2 - v0), gradient[index[:, 0], index[:, 1], index[:, 2]])
    if np.count_nonzero(alignment > 0) > np.count_nonzero(alignment < 0):
        return faces[:, ::-1].copy()
    return faces


def marching_cubes(grid: OccupancyGrid, tau: float = 0.5) -> TriangleMesh:
    """Isosurface at tau; the grid is padded with empty space so every surface is closed"""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie strictly between 0 and 1, got {tau}")
    padded = np.pad(grid.values, 1, mode="constant", constant_values=0.0)
    if padded.max() <= tau:
        logger.debug("No occupancy above threshold", extra={"fields": {"tau": tau}})
        return TriangleMesh.empty()
    size = grid.voxel_size
    vertices, faces, _, _ = measure.marching_cubes(padded, level=tau, spacing=(size, size, size),
                                                   gradient_direction="descent")
    # padded index j sits at world coordinate origin + (j - 1) * size
    vertices = vertices.astype(np.float64) + (grid.origin - size)
    vertices, faces = cleanup(vertices, faces.astype(np.int64))
    faces = orient_outward(grid, vertices, faces)
    return TriangleMesh(vertices, faces, vertex_normals(vertices, faces))


def extract_mesh(model: OccupancyPredictor, image, resolution: int = 64, tau: float = 0.5,
                 chunk_size: Optional[int] = 65536) -> TriangleMesh:
    return marching_cubes(evaluate_grid(model, image, resolution, chunk_size), tau)


def sample_surface(mesh: TriangleMesh, n: int, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """n area-weighted uniform surface samples and the unit normal of the face each came from"""
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample the surface of an empty mesh")
    points, face_index = trimesh.sample.sample_surface(mesh.to_trimesh(), n, seed=seed)
    return np.asarray(points, dtype=np.float64), mesh.face_normals()[face_index]


# Topology and volume

def unique_edges(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Undirected edges and how many faces use each"""
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    return np.unique(edges, axis=0, return_counts=True)


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every edge borders exactly two faces"""
    if mesh.is_empty:
        return False
    _, counts = unique_edges(mesh.faces)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    edges, _ = unique_edges(mesh.faces) if not mesh.is_empty else (np.zeros((0, 2)), None)
    return len(mesh.vertices) - len(edges) + len(mesh.faces)


def signed_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume; positive for outward-oriented closed meshes"""
    if mesh.is_empty:
        return 0.0
    v0, v1, v2 = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


# OBJ exchange

def write_obj(path: Union[str, Path], mesh: TriangleMesh) -> None:
    """v / vn / f records, vertices in stored order, 1-based f a//a b//b c//c"""
    path = Path(path)
    if mesh.is_empty:
        path.write_text("# empty mesh\n", encoding="utf-8")
        return
    text = trimesh.exchange.obj.export_obj(mesh.to_trimesh(), include_normals=True, include_texture=False)
    path.write_text(text, encoding="utf-8")


def read_obj(path: Union[str, Path]) -> TriangleMesh:
    path = Path(path)
    if not any(line.startswith("v ") for line in path.read_text(encoding="utf-8").splitlines()):
        return TriangleMesh.empty()
    loaded = trimesh.load(path, file_type="obj", force="mesh", process=False, maintain_order=True)
    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    faces = np.asarray(loaded.faces, dtype=np.int64)
    return TriangleMesh(vertices, faces, vertex_normals(vertices, faces))
