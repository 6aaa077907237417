import numpy as np
import pytest
from scipy import stats

from dmif.errors import DimensionError, EmptyMeshError
from dmif.meshing import (
    OccupancyGrid, TriangleMesh, euler_characteristic, evaluate_grid, extract_mesh, grid_points, is_watertight,
    marching_cubes, read_obj, sample_surface, signed_volume, vertex_normals, write_obj,
)
from dmif.models import PrimitiveKind, ShapeSpec, SphereParams, TorusParams
from dmif.synthdata import ShapeOracle


def mesh_of(vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    return TriangleMesh(vertices, faces, vertex_normals(vertices, faces))


@pytest.fixture(scope="module")
def sphere_mesh():
    spec = ShapeSpec(kind=PrimitiveKind.SPHERE, params=SphereParams(radius=0.3))
    return extract_mesh(ShapeOracle(spec, 64), None, 64)


@pytest.fixture
def unit_square():
    return mesh_of([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


class TestGrid:
    def test_voxel_centers(self):
        points = grid_points(8)
        assert points.shape == (512, 3)
        assert points[0] == pytest.approx([-0.4375] * 3)
        assert points[-1] == pytest.approx([0.4375] * 3)
        # x-major order
        assert points[1] == pytest.approx([-0.4375, -0.4375, -0.3125])

    def test_resolution_bounds(self):
        spec = ShapeSpec(kind=PrimitiveKind.SPHERE, params=SphereParams(radius=0.2))
        with pytest.raises(DimensionError, match="resolution"):
            evaluate_grid(ShapeOracle(spec), None, 4)
        with pytest.raises(DimensionError):
            evaluate_grid(ShapeOracle(spec), None, 512)


class TestMarchingCubes:
    def test_sphere_is_closed(self, sphere_mesh):
        assert is_watertight(sphere_mesh)
        assert euler_characteristic(sphere_mesh) == 2

    def test_sphere_vertices_near_surface(self, sphere_mesh):
        radii = np.linalg.norm(sphere_mesh.vertices, axis=1)
        assert np.max(np.abs(radii - 0.3)) <= 2 * np.sqrt(3) / 64

    def test_outward_orientation(self, sphere_mesh):
        assert signed_volume(sphere_mesh) == pytest.approx(4.0 / 3.0 * np.pi * 0.3 ** 3, rel=0.05)
        centroids = sphere_mesh.vertices[sphere_mesh.faces].mean(axis=1)
        outward = np.einsum("ij,ij->i", sphere_mesh.face_normals(), centroids)
        assert np.mean(outward > 0) > 0.99

    def test_unit_vertex_normals(self, sphere_mesh):
        np.testing.assert_allclose(np.linalg.norm(sphere_mesh.normals, axis=1), 1.0, atol=1e-9)

    def test_torus_genus_one(self):
        spec = ShapeSpec(kind=PrimitiveKind.TORUS, params=TorusParams(major_radius=0.25, minor_radius=0.1))
        mesh = extract_mesh(ShapeOracle(spec, 64), None, 64)
        assert is_watertight(mesh)
        assert euler_characteristic(mesh) == 0

    def test_volume_shrinks_with_threshold(self):
        spec = ShapeSpec(kind=PrimitiveKind.SPHERE, params=SphereParams(radius=0.25))
        grid = evaluate_grid(ShapeOracle(spec, 32), None, 32)
        volumes = [signed_volume(marching_cubes(grid, tau)) for tau in (0.3, 0.5, 0.7)]
        assert volumes[0] > volumes[1] > volumes[2] > 0

    def test_empty_grid(self):
        mesh = marching_cubes(OccupancyGrid(np.zeros((8, 8, 8))))
        assert mesh.is_empty
        assert signed_volume(mesh) == 0.0
        assert not is_watertight(mesh)

    def test_full_grid_is_closed_box(self):
        mesh = marching_cubes(OccupancyGrid(np.ones((8, 8, 8))))
        assert is_watertight(mesh)
        assert euler_characteristic(mesh) == 2

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1])
    def test_threshold_range(self, tau):
        with pytest.raises(ValueError, match="threshold"):
            marching_cubes(OccupancyGrid(np.zeros((8, 8, 8))), tau)


class TestSampleSurface:
    def test_uniform_on_square(self, unit_square):
        points, _ = sample_surface(unit_square, 16_000, seed=0)
        cells = np.clip((points[:, :2] * 4).astype(int), 0, 3)
        counts = np.bincount(cells[:, 0] * 4 + cells[:, 1], minlength=16)
        assert stats.chisquare(counts).pvalue > 1e-4

    def test_normals_are_face_normals(self, unit_square):
        points, normals = sample_surface(unit_square, 100, seed=1)
        np.testing.assert_allclose(points[:, 2], 0.0, atol=1e-12)
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (100, 1)), atol=1e-12)

    def test_single_triangle(self):
        mesh = mesh_of([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        points, _ = sample_surface(mesh, 500, seed=2)
        assert np.all(points[:, 0] >= -1e-12) and np.all(points[:, 1] >= -1e-12)
        assert np.all(points[:, 0] + points[:, 1] <= 1 + 1e-12)
        assert not is_watertight(mesh)

    def test_seeded(self, sphere_mesh):
        a, _ = sample_surface(sphere_mesh, 50, seed=4)
        b, _ = sample_surface(sphere_mesh, 50, seed=4)
        assert np.array_equal(a, b)

    def test_empty_mesh(self):
        with pytest.raises(EmptyMeshError):
            sample_surface(TriangleMesh.empty(), 10)


class TestObj:
    def test_round_trip(self, sphere_mesh, tmp_path):
        path = tmp_path / "sphere.obj"
        write_obj(path, sphere_mesh)
        loaded = read_obj(path)
        assert np.array_equal(loaded.faces, sphere_mesh.faces)
        np.testing.assert_allclose(loaded.vertices, sphere_mesh.vertices, atol=1e-6)

    def test_empty_mesh(self, tmp_path):
        path = tmp_path / "empty.obj"
        write_obj(path, TriangleMesh.empty())
        assert read_obj(path).is_empty
