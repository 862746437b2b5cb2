import numpy as np
import pytest

from conftest import random_rotation
from worknerf.errors import BehindCamera, OutOfBounds
from worknerf.geometry import (
    Aabb, CameraIntrinsics, GridSpec, Pose, Ray,
    bilinear_sample, pixel_to_ray, project_point, ray_aabb_intersect,
    rays_aabb_intersect, trilinear_sample,
)

INTR = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
IDENTITY = Pose.identity()


class TestProjectPoint:
    def test_principal_axis(self):
        u, v, z = project_point(INTR, IDENTITY, (0, 0, 1))
        assert (u, v, z) == (50.0, 50.0, 1.0)

    def test_lateral_offset(self):
        u, v, z = project_point(INTR, IDENTITY, (0.1, 0, 1))
        np.testing.assert_allclose((u, v, z), (60.0, 50.0, 1.0), rtol=0, atol=1e-12)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project_point(INTR, IDENTITY, (0, 0, -1))

    def test_posed_camera(self):
        # Camera translated along +x; point at its own optical axis.
        pose = Pose(np.eye(3), np.array([0.5, 0.0, 0.0]))
        u, v, z = project_point(INTR, pose, (0.5, 0, 2))
        np.testing.assert_allclose((u, v, z), (50.0, 50.0, 2.0), atol=1e-12)


class TestPixelToRay:
    def test_principal_point(self):
        ray = pixel_to_ray(INTR, IDENTITY, 50, 50)
        np.testing.assert_allclose(ray.origin, 0)
        np.testing.assert_allclose(ray.direction, [0, 0, 1])

    def test_off_axis_direction(self):
        ray = pixel_to_ray(INTR, IDENTITY, 150, 50)
        np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2))

    def test_roundtrip_random_pixels(self):
        """Forward-projecting a point on the pixel's ray recovers the pixel."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            pose = Pose(random_rotation(rng), rng.uniform(-1, 1, 3))
            u = rng.uniform(0, INTR.width - 1)
            v = rng.uniform(0, INTR.height - 1)
            ray = pixel_to_ray(INTR, pose, u, v)
            s = rng.uniform(0.1, 10.0)
            u2, v2, z = project_point(INTR, pose, ray.at(s))
            assert z > 0
            assert abs(u2 - u) < 1e-4 and abs(v2 - v) < 1e-4


class TestRayAabbIntersect:
    BOX = Aabb(np.full(3, -0.5), np.full(3, 0.5))

    def test_axis_hit(self):
        hit = ray_aabb_intersect(Ray((0, 0, -1), (0, 0, 1)), self.BOX)
        np.testing.assert_allclose(hit, (0.5, 1.5))

    def test_miss(self):
        assert ray_aabb_intersect(Ray((0, 0, -1), (0, 1, 0)), self.BOX) is None

    def test_origin_inside_clamps_entry(self):
        hit = ray_aabb_intersect(Ray((0, 0, 0), (0, 0, 1)), self.BOX)
        np.testing.assert_allclose(hit, (0.0, 0.5))

    def test_box_behind_origin(self):
        assert ray_aabb_intersect(Ray((0, 0, 2), (0, 0, 1)), self.BOX) is None

    def test_matches_marching_oracle(self):
        """Slab test agrees with stepping a point along the ray."""
        rng = np.random.default_rng(7)
        step = 1e-4
        checked = 0
        for i in range(1000):
            origin = rng.uniform(-2, 2, 3)
            if i % 4 == 0:
                d = rng.normal(size=3)  # arbitrary direction, usually a miss
            else:
                d = rng.uniform(-0.8, 0.8, 3) - origin  # aimed near the box
            d /= np.linalg.norm(d)
            ray = Ray(origin, d)
            ts = np.arange(step, 6.0, step)
            inside = self.BOX.contains(origin[None, :] + ts[:, None] * d[None, :])
            idx = np.nonzero(inside)[0]
            hit = ray_aabb_intersect(ray, self.BOX)
            if idx.size == 0:
                # Grazing hits thinner than the march step are unobservable.
                if hit is not None:
                    assert hit[1] - hit[0] < 2 * step
                continue
            assert hit is not None
            t_entry, t_exit = ts[idx[0]], ts[idx[-1]]
            origin_inside = bool(self.BOX.contains(origin))
            expected_near = 0.0 if origin_inside else t_entry
            assert abs(hit[0] - expected_near) < 2e-4
            assert abs(hit[1] - t_exit) < 2e-4
            checked += 1
        assert checked > 400

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        origin = np.array([0.1, -0.2, -1.5])
        dirs = rng.normal(size=(64, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t_near, t_far, hit = rays_aabb_intersect(origin, dirs, self.BOX)
        for i in range(64):
            scalar = ray_aabb_intersect(Ray(origin, dirs[i]), self.BOX)
            if scalar is None:
                assert not hit[i]
            else:
                assert hit[i]
                np.testing.assert_allclose((t_near[i], t_far[i]), scalar)


class TestBilinearSample:
    def test_integer_coordinates_hit_texels(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(4, 5, 3))
        np.testing.assert_array_equal(bilinear_sample(img, 2, 3), img[3, 2])

    def test_horizontal_midpoint(self):
        img = np.zeros((2, 2, 1))
        img[0, 0] = 1.0
        img[0, 1] = 3.0
        np.testing.assert_allclose(bilinear_sample(img, 0.5, 0.0), [2.0])

    def test_constant_map(self):
        img = np.full((3, 3, 2), 0.7)
        rng = np.random.default_rng(1)
        for _ in range(20):
            u, v = rng.uniform(0, 2, 2)
            np.testing.assert_allclose(bilinear_sample(img, u, v), 0.7)

    def test_out_of_bounds(self):
        img = np.zeros((4, 4, 1))
        with pytest.raises(OutOfBounds):
            bilinear_sample(img, -0.1, 1.0)
        with pytest.raises(OutOfBounds):
            bilinear_sample(img, 1.0, 3.5)


class TestTrilinearSample:
    GRID = GridSpec(origin=np.zeros(3), spacing=0.5, dims=(4, 3, 5))

    def _volume(self, fn):
        nz, ny, nx = self.GRID.nz, self.GRID.ny, self.GRID.nx
        vol = np.zeros((nz, ny, nx, 1))
        for iz in range(nz):
            for iy in range(ny):
                for ix in range(nx):
                    vol[iz, iy, ix, 0] = fn(ix, iy, iz)
        return vol

    def test_voxel_center_exact(self):
        rng = np.random.default_rng(0)
        vol = rng.uniform(size=(5, 3, 4, 2))
        p = self.GRID.origin + self.GRID.spacing * np.array([2, 1, 3])
        np.testing.assert_array_equal(trilinear_sample(vol, self.GRID, p), vol[3, 1, 2])

    def test_constant_cell(self):
        vol = np.full((5, 3, 4, 1), 2.5)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = self.GRID.origin + rng.uniform(0, [3, 2, 4]) * self.GRID.spacing
            np.testing.assert_allclose(trilinear_sample(vol, self.GRID, p), 2.5)

    def test_axis_midpoint(self):
        vol = self._volume(lambda ix, iy, iz: 1.0 if (ix, iy, iz) == (0, 0, 0) else
                           (3.0 if (ix, iy, iz) == (1, 0, 0) else 0.0))
        p = self.GRID.origin + np.array([0.25, 0, 0])
        np.testing.assert_allclose(trilinear_sample(vol, self.GRID, p), [2.0])

    def test_affine_exactness(self):
        """Trilinear interpolation reproduces affine index fields exactly."""
        a, b, c, d = 0.7, -1.3, 2.1, 0.4
        vol = self._volume(lambda ix, iy, iz: a * ix + b * iy + c * iz + d)
        rng = np.random.default_rng(2)
        for _ in range(50):
            idx = rng.uniform(0, [3, 2, 4])
            p = self.GRID.origin + idx * self.GRID.spacing
            expected = a * idx[0] + b * idx[1] + c * idx[2] + d
            np.testing.assert_allclose(trilinear_sample(vol, self.GRID, p),
                                       [expected], atol=1e-9)

    def test_out_of_bounds(self):
        vol = np.zeros((5, 3, 4, 1))
        with pytest.raises(OutOfBounds):
            trilinear_sample(vol, self.GRID, self.GRID.origin - 0.1)


class TestPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(r, np.zeros(3))

    def test_composition_preserves_orthonormality(self):
        rng = np.random.default_rng(5)
        pose = Pose.identity()
        for _ in range(50):
            pose = pose.compose(Pose(random_rotation(rng), rng.uniform(-1, 1, 3)))
        r = pose.rotation
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(6)
        pose = Pose(random_rotation(rng), rng.uniform(-1, 1, 3))
        back = pose.compose(pose.inverse())
        np.testing.assert_allclose(back.matrix(), np.eye(4), atol=1e-12)

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(7)
        pose = Pose(random_rotation(rng), rng.uniform(-1, 1, 3))
        again = Pose.from_matrix(pose.matrix())
        np.testing.assert_array_equal(again.rotation, pose.rotation)
        np.testing.assert_array_equal(again.translation, pose.translation)


class TestTypesValidation:
    def test_intrinsics_invariants(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=5, cy=1, width=4, height=4)

    def test_aabb_invariants(self):
        with pytest.raises(ValueError):
            Aabb(np.zeros(3), np.array([1.0, -1.0, 1.0]))

    def test_ray_requires_unit_direction(self):
        with pytest.raises(ValueError):
            Ray((0, 0, 0), (0, 0, 2))

    def test_gridspec_invariants(self):
        with pytest.raises(ValueError):
            GridSpec(np.zeros(3), -0.1, (4, 4, 4))
        with pytest.raises(ValueError):
            GridSpec(np.zeros(3), 0.1, (4, 0, 4))

    def test_gridspec_from_workspace(self):
        ws = Aabb(np.array([-0.48, -0.48, 0.0]), np.array([0.48, 0.48, 0.48]))
        grid = GridSpec.from_workspace(ws, 0.01)
        assert grid.dims == (96, 96, 48)
        np.testing.assert_allclose(grid.origin, [-0.475, -0.475, 0.005])
        hull = grid.center_bounds()
        np.testing.assert_allclose(hull.min, [-0.475, -0.475, 0.005])
        np.testing.assert_allclose(hull.max, [0.475, 0.475, 0.475])
        np.testing.assert_allclose(grid.cell_bounds().min, ws.min)
        np.testing.assert_allclose(grid.cell_bounds().max, ws.max)

    def test_voxel_centers_layout(self):
        grid = GridSpec(np.array([1.0, 2.0, 3.0]), 0.5, (2, 3, 4))
        centers = grid.voxel_centers()
        assert centers.shape == (4, 3, 2, 3)
        np.testing.assert_allclose(centers[0, 0, 0], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(centers[1, 2, 1], [1.5, 3.0, 3.5])
