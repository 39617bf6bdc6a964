import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import binary_erosion

import oracles
from agetrbm import geometry
from agetrbm.datagen import frame_template
from agetrbm.errors import DegenerateShapeError, InputError
from agetrbm.geometry import SimilarityTransform, Triangulation


@pytest.fixture(scope="module")
def template():
    return frame_template()


@pytest.fixture(scope="module")
def tri(template):
    return geometry.delaunay(template)


def _random_similarity(rng):
    return SimilarityTransform.from_params(rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi),
                                           rng.normal(0, 10, 2))


def _complex_lstsq(src, dst):
    """Similarity fit as complex least squares: dst ~ alpha * src + beta."""
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    M = np.column_stack([zs, np.ones_like(zs)])
    (alpha, beta), *_ = np.linalg.lstsq(M, zd, rcond=None)
    return abs(alpha), np.angle(alpha), np.array([beta.real, beta.imag])


def _linear_ramp(shape=(95, 95)):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    return 0.3 + 0.002 * cols + 0.003 * rows


def _radial(shape=(95, 95)):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    r2 = ((cols - 47.0) ** 2 + (rows - 47.0) ** 2) / 40.0 ** 2
    return 0.5 + 0.3 * np.exp(-r2) + 0.1 * np.cos(3 * np.sqrt(r2))


class TestSimilarityTransform:
    def test_inverse_composes_to_identity(self, rng):
        T = _random_similarity(rng)
        I = T.compose(T.inverse())
        assert I.scale == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(I.rotation, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(I.translation, 0.0, atol=1e-10)

    def test_compose_order(self, rng):
        T1, T2 = _random_similarity(rng), _random_similarity(rng)
        pts = rng.normal(size=(5, 2))
        np.testing.assert_allclose(T2.compose(T1).apply(pts), T2.apply(T1.apply(pts)),
                                   atol=1e-10)

    def test_rejects_reflection_and_bad_scale(self):
        with pytest.raises(InputError):
            SimilarityTransform(1.0, np.diag([1.0, -1.0]), np.zeros(2))
        with pytest.raises(InputError):
            SimilarityTransform(0.0, np.eye(2), np.zeros(2))


class TestProcrustesPair:
    def test_identity(self, template):
        T = geometry.procrustes_pair(template, template)
        assert T.scale == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(T.rotation, np.eye(2), atol=1e-12)
        assert geometry.residual(template, template, T) < 1e-18

    def test_recovers_rotation_and_scale(self, template):
        dst = 2.0 * template @ np.array([[0.0, -1.0], [1.0, 0.0]]).T
        T = geometry.procrustes_pair(template, dst)
        assert T.scale == pytest.approx(2.0, rel=1e-12)
        assert T.angle == pytest.approx(np.pi / 2, abs=1e-12)
        assert geometry.residual(template, dst, T) < 1e-10

    @given(st.integers(0, 10_000))
    def test_matches_closed_form_oracle(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(68, 2)) * 20
        dst = rng.normal(size=(68, 2)) * 20
        T = geometry.procrustes_pair(src, dst)
        scale, angle, shift = _complex_lstsq(src, dst)
        assert T.scale == pytest.approx(scale, rel=1e-8)
        assert np.angle(np.exp(1j * (T.angle - angle))) == pytest.approx(0.0, abs=1e-8)
        np.testing.assert_allclose(T.translation, shift, atol=1e-8 * max(1, abs(shift).max()))

    @given(st.integers(0, 10_000))
    def test_pre_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(20, 2)) * 10
        dst = rng.normal(size=(20, 2)) * 10
        S = _random_similarity(rng)
        direct = geometry.procrustes_pair(src, dst)
        composite = geometry.procrustes_pair(S.apply(src), dst).compose(S)
        np.testing.assert_allclose(composite.apply(src), direct.apply(src), atol=1e-8)

    def test_degenerate_rejected(self):
        line = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
        with pytest.raises(DegenerateShapeError):
            geometry.procrustes_pair(line, line)
        with pytest.raises(DegenerateShapeError):
            geometry.procrustes_pair(np.ones((5, 2)), np.ones((5, 2)))

    def test_point_count_mismatch(self, rng):
        with pytest.raises(InputError):
            geometry.procrustes_pair(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))


class TestGeneralizedProcrustes:
    def test_identical_copies(self, template):
        res = geometry.generalized_procrustes([template] * 4)
        assert res.converged and res.n_iter == 1
        np.testing.assert_allclose(res.reference, geometry.normalize_shape(template),
                                   atol=1e-12)
        np.testing.assert_allclose(res.reference.mean(axis=0), 0.0, atol=1e-12)
        assert geometry.centroid_size(res.reference) == pytest.approx(1.0)

    def test_similarity_copies_align_exactly(self, template, rng):
        shapes = [_random_similarity(rng).apply(template) for _ in range(6)]
        res = geometry.generalized_procrustes(shapes)
        for a in res.aligned:
            assert np.sum((a - res.reference) ** 2) < 1e-8

    @given(st.integers(0, 10_000))
    def test_residual_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        base = frame_template()
        shapes = [_random_similarity(rng).apply(base + rng.normal(0, 2.0, base.shape))
                  for _ in range(5)]
        res = geometry.generalized_procrustes(shapes, tol=1e-14, max_iter=20)
        r = np.array(res.residuals)
        assert np.all(np.diff(r) <= 1e-12 * r[0])

    def test_non_convergence_reported(self, template, rng):
        shapes = [template + rng.normal(0, 3.0, template.shape) for _ in range(4)]
        res = geometry.generalized_procrustes(shapes, tol=0.0, max_iter=2)
        assert not res.converged
        assert res.n_iter == 2
        assert len(res.aligned) == 4

    def test_needs_two_shapes(self, template):
        with pytest.raises(InputError):
            geometry.generalized_procrustes([template])


class TestMeanShape:
    def test_single(self, template):
        np.testing.assert_array_equal(geometry.mean_shape([template]), template)

    def test_reflection_about_centroid_is_degenerate(self, template):
        c = template.mean(axis=0)
        with pytest.raises(DegenerateShapeError):
            geometry.mean_shape([template, 2 * c - template])

    def test_arithmetic(self, rng):
        shapes = [rng.normal(size=(10, 2)) for _ in range(3)]
        expected = [[sum(s[i, d] for s in shapes) / 3 for d in range(2)] for i in range(10)]
        np.testing.assert_allclose(geometry.mean_shape(shapes), expected, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(InputError):
            geometry.mean_shape([])


class TestTriangulation:
    def test_delaunay_on_template_is_valid(self, template, tri):
        assert tri.triangles.min() >= 0 and tri.triangles.max() < 68
        assert np.all(np.abs(geometry.triangle_areas(template, tri)) > 1e-9)
        edges = np.sort(tri.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert counts.max() == 2
        # Euler: interior edges are shared twice, hull edges once
        n_hull = np.sum(counts == 1)
        assert len(tri) == 2 * 68 - 2 - n_hull

    def test_validate_rejects_bad_meshes(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(InputError):
            Triangulation([[0, 1, 5]]).validate(pts)
        with pytest.raises(InputError):
            Triangulation([[0, 1, 3]]).validate(pts)
        fan = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 1.0]])
        with pytest.raises(InputError):
            Triangulation([[0, 1, 2], [0, 1, 3], [0, 1, 4]]).validate(fan)


class TestBilinear:
    def test_matches_scalar_oracle(self, rng):
        img = rng.random((7, 9))
        xs, ys = rng.uniform(-1, 10, 50), rng.uniform(-1, 8, 50)
        np.testing.assert_allclose(geometry.bilinear_sample(img, xs, ys),
                                   [oracles.bilinear(img, x, y) for x, y in zip(xs, ys)],
                                   rtol=1e-14)

    def test_exact_at_integer_points(self, rng):
        img = rng.random((5, 6))
        r, c = np.mgrid[:5, :6]
        np.testing.assert_array_equal(
            geometry.bilinear_sample(img, c.ravel().astype(float), r.ravel().astype(float)),
            img.ravel())


class TestWarp:
    def test_identity_warp(self, template, tri):
        img = _radial()
        out, mask = geometry.piecewise_affine_warp(img, template, template, tri,
                                                   return_mask=True)
        assert np.max(np.abs(out[mask] - img[mask])) < 1e-6
        np.testing.assert_array_equal(out[~mask], 0.0)

    def test_translation(self, template, tri):
        img = _linear_ramp()
        shift = np.array([2.3, -1.7])
        out, mask = geometry.piecewise_affine_warp(img, template, template + shift, tri,
                                                   return_mask=True)
        rows, cols = np.nonzero(mask)
        expected = 0.3 + 0.002 * (cols - shift[0]) + 0.003 * (rows - shift[1])
        assert np.max(np.abs(out[rows, cols] - expected)) < 1e-6

    def test_round_trip_psnr(self, template, tri, rng):
        img = _radial()
        moved = template + rng.normal(0, 1.0, template.shape)
        there = geometry.piecewise_affine_warp(img, template, moved, tri)
        back, mask = geometry.piecewise_affine_warp(there, moved, template, tri,
                                                    return_mask=True)
        interior = binary_erosion(mask, iterations=3)
        assert oracles.psnr(back[interior], img[interior]) > 40.0

    def test_every_covered_pixel_has_one_owner(self, template, tri):
        owner, bary = geometry.triangle_index_map(template, tri, (95, 95))
        rows, cols = np.nonzero(owner >= 0)
        corners = template[tri.triangles[owner[rows, cols]]]
        xy = np.einsum("nk,nkd->nd", bary[rows, cols], corners)
        np.testing.assert_allclose(xy, np.column_stack([cols, rows]), atol=1e-9)
        assert np.all(bary[rows, cols] >= -1e-9)

    def test_shared_edge_ties_go_to_lowest_index(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]])
        t = Triangulation([[0, 1, 2], [0, 2, 3]])
        owner, _ = geometry.triangle_index_map(pts, t, (5, 5))
        for k in range(5):
            assert owner[k, k] == 0
        t_swapped = Triangulation([[0, 2, 3], [0, 1, 2]])
        owner, _ = geometry.triangle_index_map(pts, t_swapped, (5, 5))
        for k in range(5):
            assert owner[k, k] == 0

    def test_degenerate_destination(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [2.0, 3.0], [6.0, 3.0]])
        flat = pts.copy()
        flat[2] = [2.0, 0.0]
        t = Triangulation([[0, 1, 2], [1, 3, 2]])
        with pytest.raises(InputError):
            geometry.piecewise_affine_warp(np.zeros((8, 8)), pts, flat, t)

    def test_precomputed_index_map(self, template, tri, rng):
        img = _radial()
        moved = template + rng.normal(0, 1.0, template.shape)
        index_map = geometry.triangle_index_map(moved, tri, (95, 95))
        np.testing.assert_array_equal(
            geometry.piecewise_affine_warp(img, template, moved, tri, index_map=index_map),
            geometry.piecewise_affine_warp(img, template, moved, tri))
        with pytest.raises(InputError):
            geometry.piecewise_affine_warp(img, template, moved, tri, out_shape=(90, 90),
                                           index_map=index_map)


def _dot_image(points, shape=(95, 95), sigma=1.2):
    rows, cols = np.mgrid[:shape[0], :shape[1]]
    img = np.zeros(shape)
    for x, y in points:
        img += np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * sigma ** 2))
    return img


def _centroid(img, x, y, radius=4):
    r0, c0 = int(round(y)), int(round(x))
    win = img[r0 - radius:r0 + radius + 1, c0 - radius:c0 + radius + 1]
    rows, cols = np.mgrid[r0 - radius:r0 + radius + 1, c0 - radius:c0 + radius + 1]
    return np.sum(win * cols) / win.sum(), np.sum(win * rows) / win.sum()


class TestShapeAdjust:
    # interior calibration points, well away from the hull and from each other
    DOTS = (27, 33, 39, 45, 51, 57)

    def test_identity_target(self, template, tri):
        img = _radial()
        out, mask = geometry.piecewise_affine_warp(img, template, template, tri,
                                                   return_mask=True)
        adjusted = geometry.shape_adjust(img, template, template, tri)
        assert np.max(np.abs(adjusted[mask] - img[mask])) < 1e-6

    def test_uniform_scaling_moves_dots(self, template, tri):
        centre = template.mean(axis=0)
        target = centre + 0.9 * (template - centre)
        pts = template[list(self.DOTS)]
        out = geometry.shape_adjust(_dot_image(pts), template, target, tri)
        for x, y in target[list(self.DOTS)]:
            cx, cy = _centroid(out, x, y)
            assert abs(cx - x) < 0.5 and abs(cy - y) < 0.5

    def test_elongation_dot_tracking(self, template, tri):
        centre = template.mean(axis=0)
        target = template.copy()
        target[:, 1] = centre[1] + 1.08 * (template[:, 1] - centre[1])
        pts = template[list(self.DOTS)]
        out = geometry.shape_adjust(_dot_image(pts), template, target, tri)
        for x, y in target[list(self.DOTS)]:
            cx, cy = _centroid(out, x, y)
            assert abs(cx - x) < 0.5 and abs(cy - y) < 0.5


class TestFrameFitting:
    def test_fit_respects_margin(self, rng):
        fitted = geometry.fit_to_frame(rng.normal(size=(68, 2)))
        lo, hi = fitted.min(axis=0), fitted.max(axis=0)
        assert np.all(lo >= 0.05 * 94 - 1e-9) and np.all(hi <= 94 - 0.05 * 94 + 1e-9)
        assert np.isclose(lo, 0.05 * 94).any()

    def test_landmark_validation(self):
        with pytest.raises(InputError):
            geometry.check_landmarks(np.zeros((68, 3)))
        with pytest.raises(InputError):
            geometry.check_landmarks(np.random.default_rng(0).normal(size=(67, 2)), 68)
        bad = np.random.default_rng(0).normal(size=(68, 2))
        bad[3, 0] = np.inf
        with pytest.raises(InputError):
            geometry.check_landmarks(bad)
