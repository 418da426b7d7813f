import tempfile
import unittest
from pathlib import Path

import numpy as np
import scipy.sparse

from rectifier.exceptions import ProjectionDomainError, ShapeMismatchError
from rectifier.hand_prior import (NUM_KEYPOINTS, NUM_VERTICES, DepthMap, FixtureMeshProvider, HandMesh,
                                  KeypointRegressor, Keypoints2D, MeshKeypointDetector, OverrideMaskLocalizer,
                                  PinholeCamera, StaticMeshProvider, image_mpjpe, load_mesh, load_regressor,
                                  localize_hands, mpjpe, project, project_points, rasterize_depth,
                                  regress_keypoints, render_depth, save_mesh)

CAMERA = PinholeCamera(64.0, 32.0, 32.0, 64, 64)


def square_mesh(left: float, top: float, size: float, depth, camera: PinholeCamera = CAMERA) -> HandMesh:
    """
    Квадрат на экране из двух треугольников; глубина по углам задаётся числом или четвёркой.
    """
    depths = np.broadcast_to(np.asarray(depth, dtype=np.float64), (4,))
    corners = [(left, top), (left + size, top), (left + size, top + size), (left, top + size)]
    vertices = [((u - camera.cx) * z / camera.focal, (v - camera.cy) * z / camera.focal, z)
                for (u, v), z in zip(corners, depths)]
    return HandMesh.padded(np.asarray(vertices), np.array([[0, 1, 2], [0, 2, 3]]))


def brute_force_zbuffer(mesh: HandMesh, camera: PinholeCamera) -> np.ndarray:
    """
    Независимый оракул: обход всех пикселей и треугольников с барицентрическими координатами.
    """
    uv = project_points(mesh.vertices, camera)
    zbuffer = np.full((camera.height, camera.width), np.inf)
    for face in mesh.faces:
        (ax, ay), (bx, by), (cx, cy) = uv[face]
        za, zb, zc = mesh.vertices[face, 2]
        det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        for y in range(camera.height):
            for x in range(camera.width):
                px, py = x + 0.5, y + 0.5
                l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det
                l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det
                l3 = 1.0 - l1 - l2
                if min(l1, l2, l3) > 1e-9:
                    z = 1.0 / (l1 / za + l2 / zb + l3 / zc)
                    zbuffer[y, x] = min(zbuffer[y, x], z)
    return zbuffer


class MeshTests(unittest.TestCase):
    """
    Тесты для меша, файловых форматов и регрессора ключевых точек.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        rng = np.random.default_rng(0)
        self.mesh = HandMesh(rng.uniform(0.5, 1.5, (NUM_VERTICES, 3)), rng.integers(0, NUM_VERTICES, (20, 3)))

    def test_vertex_count_is_checked(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            HandMesh(np.ones((10, 3)), np.zeros((0, 3)))

    def test_padding(self) -> None:
        mesh = square_mesh(0, 0, 10, 2.0)
        self.assertEqual(mesh.vertices.shape, (NUM_VERTICES, 3))
        self.assertTrue(np.array_equal(mesh.vertices[4:], np.repeat(mesh.vertices[3:4], NUM_VERTICES - 4, axis=0)))

    def test_fixture_round_trip(self) -> None:
        """
        Тестирование записи и чтения меша в JSON и в текстовом формате v/f.
        """
        with tempfile.TemporaryDirectory() as directory:
            for name in ('hand.json', 'hand.obj'):
                path = save_mesh(self.mesh, Path(directory) / name)
                restored = load_mesh(path)
                self.assertTrue(np.array_equal(restored.vertices, self.mesh.vertices))
                self.assertTrue(np.array_equal(restored.faces, self.mesh.faces))

    def test_selector_row(self) -> None:
        regressor = KeypointRegressor.selector(range(NUM_KEYPOINTS))
        keypoints = regress_keypoints(self.mesh, regressor)
        self.assertTrue(np.array_equal(keypoints, self.mesh.vertices[:NUM_KEYPOINTS]))

    def test_uniform_row_gives_midpoint(self) -> None:
        rows = list(range(NUM_KEYPOINTS)) * 2
        cols = list(range(NUM_KEYPOINTS)) + list(range(NUM_KEYPOINTS, 2 * NUM_KEYPOINTS))
        regressor = KeypointRegressor(scipy.sparse.csr_matrix((np.full(2 * NUM_KEYPOINTS, 0.5), (rows, cols)),
                                                              shape=(NUM_KEYPOINTS, NUM_VERTICES)))
        expected = (self.mesh.vertices[:NUM_KEYPOINTS] + self.mesh.vertices[NUM_KEYPOINTS:2 * NUM_KEYPOINTS]) / 2
        np.testing.assert_allclose(regress_keypoints(self.mesh, regressor), expected, atol=1e-12)

    def test_random_sparse_regressor_matches_dense_product(self) -> None:
        rng = np.random.default_rng(1)
        dense = np.where(rng.random((NUM_KEYPOINTS, NUM_VERTICES)) < 0.02,
                         rng.random((NUM_KEYPOINTS, NUM_VERTICES)), 0.0)
        dense[:, 0] += 1e-3
        dense /= dense.sum(axis=1, keepdims=True)
        regressor = KeypointRegressor(scipy.sparse.csr_matrix(dense))
        np.testing.assert_allclose(regress_keypoints(self.mesh, regressor), dense @ self.mesh.vertices, atol=1e-6)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'j.json'
            path.write_text(regressor.to_json(), encoding='utf-8')
            np.testing.assert_allclose(load_regressor(path).matrix.toarray(), dense, atol=1e-15)

    def test_regressor_rows_must_sum_to_one(self) -> None:
        with self.assertRaises(ValueError):
            KeypointRegressor(scipy.sparse.csr_matrix(np.zeros((NUM_KEYPOINTS, NUM_VERTICES))))


class ProjectionTests(unittest.TestCase):
    """
    Тесты для проекции pinhole-камерой и MPJPE.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.camera = PinholeCamera(100.0, 256.0, 256.0, 512, 512)

    def test_optical_axis(self) -> None:
        np.testing.assert_array_equal(project_points(np.array([[0.0, 0.0, 3.0]]), self.camera), [[256.0, 256.0]])

    def test_hand_arithmetic(self) -> None:
        np.testing.assert_allclose(project_points(np.array([[1.0, 2.0, 2.0]]), self.camera), [[306.0, 356.0]])

    def test_scale_invariance(self) -> None:
        points = np.random.default_rng(2).uniform(0.5, 2.0, (NUM_KEYPOINTS, 3))
        np.testing.assert_allclose(project(points, self.camera).points, project(points * 2, self.camera).points)

    def test_nonpositive_depth(self) -> None:
        with self.assertRaises(ProjectionDomainError):
            project_points(np.array([[0.0, 0.0, 0.0]]), self.camera)

    def test_default_camera(self) -> None:
        camera = PinholeCamera.for_image(640, 480)
        self.assertEqual((camera.focal, camera.cx, camera.cy), (640.0, 320.0, 240.0))
        self.assertEqual(PinholeCamera.from_dict(camera.to_dict()), camera)

    def test_mpjpe_examples(self) -> None:
        """
        Тестирование MPJPE: ноль, сдвиг (3, 4) → 5, среднее по двум рукам.
        """
        keypoints = Keypoints2D(np.random.default_rng(3).uniform(0, 100, (NUM_KEYPOINTS, 2)))
        self.assertEqual(mpjpe(keypoints, keypoints), 0.0)
        self.assertEqual(mpjpe(keypoints, Keypoints2D(keypoints.points + [3.0, 4.0])), 5.0)
        self.assertEqual(image_mpjpe([2.0, 4.0]), 3.0)

    def test_mpjpe_matches_loop(self) -> None:
        rng = np.random.default_rng(4)
        first, second = rng.normal(size=(NUM_KEYPOINTS, 2)), rng.normal(size=(NUM_KEYPOINTS, 2))
        expected = sum(((a - c) ** 2 + (b - d) ** 2) ** 0.5 for (a, b), (c, d) in zip(first, second)) / 21
        self.assertAlmostEqual(mpjpe(Keypoints2D(first), Keypoints2D(second)), expected, delta=1e-10)

    def test_mpjpe_shape(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            Keypoints2D(np.zeros((20, 2)))


class DepthRenderingTests(unittest.TestCase):
    """
    Тесты для рендеринга нормированной карты глубины.
    """

    def assert_depth_invariant(self, depth: DepthMap) -> None:
        values = depth.values
        self.assertTrue(bool(((values == 0) | ((values >= 0.2 - 1e-12) & (values <= 1.0 + 1e-12))).all()))

    def test_constant_depth_square(self) -> None:
        depth = render_depth([square_mesh(10, 10, 20, 2.0)], CAMERA)
        self.assert_depth_invariant(depth)
        self.assertEqual(depth.coverage.sum(), 400)
        self.assertTrue(bool((depth.values[depth.coverage] == 1.0).all()))
        self.assertEqual(depth.values[0, 0], 0.0)

    def test_two_hands_are_normalized_separately(self) -> None:
        """
        Тестирование двух рук на глубинах z и 2z: у каждой своя нормировка.
        """
        near = square_mesh(4, 4, 16, 2.0)
        far = square_mesh(40, 40, 16, 4.0)
        depth = render_depth([near, far], CAMERA)
        self.assertTrue(bool((depth.values[4:20, 4:20] == 1.0).all()))
        self.assertTrue(bool((depth.values[40:56, 40:56] == 1.0).all()))

    def test_tilted_square_spans_range(self) -> None:
        depth = render_depth([square_mesh(8, 8, 48, [1.0, 3.0, 3.0, 1.0])], CAMERA)
        self.assert_depth_invariant(depth)
        surface = depth.values[depth.coverage]
        self.assertEqual(surface.max(), 1.0)
        self.assertLess(surface.min(), 0.2 + 1e-3 + 0.05)

    def test_nearer_surface_wins(self) -> None:
        back = square_mesh(10, 10, 30, 4.0)
        front = square_mesh(20, 20, 30, 2.0)
        zbuffer = np.minimum(rasterize_depth(back, CAMERA), rasterize_depth(front, CAMERA))
        depth = render_depth([back, front], CAMERA)
        overlap = np.isfinite(rasterize_depth(back, CAMERA)) & np.isfinite(rasterize_depth(front, CAMERA))
        self.assertTrue(overlap.any())
        np.testing.assert_allclose(zbuffer[overlap], 2.0)
        self.assertTrue(bool((depth.values[overlap] == 1.0).all()))

    def test_rasterizer_matches_brute_force(self) -> None:
        """
        Тестирование z-буфера против попиксельного оракула на сцене 64×64.
        """
        rng = np.random.default_rng(5)
        vertices = np.column_stack([rng.uniform(-0.5, 0.5, 6), rng.uniform(-0.5, 0.5, 6), rng.uniform(1.0, 2.0, 6)])
        mesh = HandMesh.padded(vertices, np.array([[0, 1, 2], [3, 4, 5]]))
        fast = rasterize_depth(mesh, CAMERA)
        slow = brute_force_zbuffer(mesh, CAMERA)
        both = np.isfinite(fast) & np.isfinite(slow)
        np.testing.assert_allclose(fast[both], slow[both], rtol=1e-6)
        # пиксели ровно на ребре решаются правилом заполнения
        self.assertLessEqual(int((np.isfinite(fast) ^ np.isfinite(slow)).sum()), 8)

    def test_png_round_trip(self) -> None:
        depth = render_depth([square_mesh(8, 8, 48, [1.0, 3.0, 3.0, 1.0])], CAMERA)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'depth.png'
            path.write_bytes(depth.to_png_bytes())
            restored = DepthMap.from_png(path)
        np.testing.assert_allclose(restored.values, depth.values, atol=1.0 / 65535)


class ProviderTests(unittest.TestCase):
    """
    Тесты для поставщиков мешей, локализации и детектора по мешам.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.image = np.zeros((64, 64, 3), dtype=np.uint8)
        self.region = np.zeros((64, 64), dtype=bool)
        self.region[10:30, 10:30] = True
        self.mesh = square_mesh(10, 10, 20, [1.0, 2.0, 2.0, 1.0])

    def test_fixture_provider(self) -> None:
        """
        Тестирование чтения фикстуры и ошибки для области без фикстуры.
        """
        with tempfile.TemporaryDirectory() as directory:
            path = save_mesh(self.mesh, Path(directory) / 'hand.json')
            hands = FixtureMeshProvider([path], CAMERA).reconstruct(self.image, [self.region, self.region])
        self.assertTrue(hands[0].ok)
        self.assertTrue(np.array_equal(hands[0].mesh.vertices, self.mesh.vertices))
        self.assertFalse(hands[1].ok)
        self.assertIn('no mesh', hands[1].error)

    def test_unreadable_fixture(self) -> None:
        hands = FixtureMeshProvider(['/nonexistent/hand.json']).reconstruct(self.image, [self.region])
        self.assertFalse(hands[0].ok)

    def test_static_provider(self) -> None:
        hands = StaticMeshProvider([self.mesh]).reconstruct(self.image, [self.region, self.region])
        self.assertIs(hands[0].mesh, self.mesh)
        self.assertFalse(hands[1].ok)

    def test_override_masks_win(self) -> None:
        localizer = OverrideMaskLocalizer([np.ones((64, 64), dtype=bool)])
        masks = localize_hands(self.image, localizer, [self.region])
        self.assertEqual(len(masks), 1)
        self.assertTrue(np.array_equal(masks[0], self.region))

    def test_no_hands(self) -> None:
        self.assertEqual(localize_hands(self.image, None), [])
        self.assertEqual(localize_hands(self.image, OverrideMaskLocalizer([np.zeros((64, 64), dtype=bool)])), [])

    def test_mesh_detector_reproduces_keypoints(self) -> None:
        regressor = KeypointRegressor.selector([0, 1, 2, 3] + [0] * 17)
        detector = MeshKeypointDetector(StaticMeshProvider([self.mesh], CAMERA), regressor)
        detection = detector.detect(self.image, [self.region])[0]
        expected = project(regress_keypoints(self.mesh, regressor), CAMERA)
        self.assertTrue(detection.found)
        self.assertEqual(mpjpe(expected, detection.keypoints), 0.0)
        self.assertFalse(detector.detect(self.image, [self.region, self.region])[1].found)
