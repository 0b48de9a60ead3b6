import numpy as np
import pytest

from cuboidlift import geometry as g
from cuboidlift import heatmap as hm


def local(points):
    return g.PointSet2D(points=np.asarray(points, dtype=float), frame=g.LOCAL)


def test_center_point_peak_exact():
    stack = hm.render(local([[0.5, 0.5]]))
    assert stack.shape == (1, 64, 64)
    assert stack[0, 32, 32] == 1.0
    assert stack[0].max() == 1.0


def test_outside_point_renders_zero_channel():
    stack = hm.render(local([[1.2, 0.5], [-0.01, 0.5], [0.5, 0.5]]))
    assert not stack[0].any()
    assert not stack[1].any()
    assert stack[2].any()


def test_channel_sum_matches_gaussian_integral():
    # interior point, sigma=1: discrete sum approximates 2*pi*sigma^2
    rng = np.random.default_rng(0)
    for _ in range(10):
        stack = hm.render(local([rng.uniform(0.2, 0.8, size=2)]))
        assert stack[0].sum() == pytest.approx(2 * np.pi, rel=1e-6)


def test_render_values_elementwise():
    u, v = 0.3, 0.6
    stack = hm.render(local([[u, v]]), grid=64, sigma=1.5)
    rows, cols = np.mgrid[0:64, 0:64]
    expected = np.exp(-((cols - u * 64) ** 2 + (rows - v * 64) ** 2) / (2 * 1.5**2))
    np.testing.assert_allclose(stack[0], expected, rtol=1e-12)


def test_render_requires_local_frame():
    with pytest.raises(ValueError, match="local"):
        hm.render(g.PointSet2D(points=np.zeros((1, 2)), frame=g.GLOBAL))


def test_mse_loss_hand_values():
    a = np.zeros((2, 8, 8))
    assert hm.mse_loss(a, a) == 0.0
    assert hm.mse_loss(a + 0.25, a) == pytest.approx(0.0625)
    rng = np.random.default_rng(1)
    p, q = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert hm.mse_loss(p, q) == pytest.approx(np.mean((p - q) ** 2))
    with pytest.raises(ValueError):
        hm.mse_loss(np.zeros((1, 8, 8)), np.zeros((2, 8, 8)))


def test_decode_roundtrip_interior_half_cell():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0.05, 0.95, size=(200, 2))
    stack = hm.render(local(pts))
    decoded, missing = hm.decode(stack)
    assert not missing.any()
    err_cells = np.abs(decoded.points - pts).max() * 64
    assert err_cells <= 0.5 + 1e-12


def test_decode_missing_flag():
    stack = hm.render(local([[2.0, 2.0], [0.4, 0.4]]))
    decoded, missing = hm.decode(stack)
    assert missing.tolist() == [True, False]
    assert np.isnan(decoded.points[0]).all()
    assert np.isfinite(decoded.points[1]).all()


def test_decode_tie_breaks_row_major():
    stack = np.zeros((1, 64, 64))
    stack[0, 10, 40] = 1.0
    stack[0, 30, 5] = 1.0  # equal peak, higher row-major index
    decoded, _ = hm.decode(stack)
    col, row = decoded.points[0] * 64
    assert (round(row), round(col)) == (10, 40)


def test_decode_quarter_pixel_refinement_direction():
    stack = np.zeros((1, 64, 64))
    stack[0, 20, 20] = 1.0
    stack[0, 20, 21] = 0.6  # pull decode toward +u
    stack[0, 19, 20] = 0.6  # pull decode toward -v
    decoded, _ = hm.decode(stack)
    np.testing.assert_allclose(decoded.points[0] * 64, [20.25, 19.75])


def test_decode_shape_validation():
    with pytest.raises(ValueError):
        hm.decode(np.zeros((64, 64)))
    with pytest.raises(ValueError):
        hm.decode(np.zeros((1, 64, 32)))


def test_render_translation_covariant_at_grid_resolution():
    # shifting the point by whole cells rolls the heatmap
    base = hm.render(local([[20.0 / 64, 24.0 / 64]]))
    shifted = hm.render(local([[23.0 / 64, 24.0 / 64]]))
    np.testing.assert_allclose(shifted[0][:, 3:], base[0][:, :-3], rtol=1e-12)
