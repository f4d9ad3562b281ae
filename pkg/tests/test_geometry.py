import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotkd.geometry import (
    RotatedBox, box_to_gaussian, box_to_quad, boxes_to_gaussians, boxes_to_quads,
    decode_deltas, encode_deltas, iou_matrix, normalize_boxes, quad_to_box, rotated_iou,
)

from oracles import axis_aligned_iou, monte_carlo_iou, shoelace

sides = st.floats(0.5, 50.0)
angles = st.floats(-10.0, 10.0)
coords = st.floats(-100.0, 100.0)
boxes = st.builds(RotatedBox, coords, coords, sides, sides, angles)


def same_box(a: RotatedBox, b: RotatedBox, tol=1e-9):
    a, b = a.normalized(), b.normalized()
    assert a.cx == pytest.approx(b.cx, abs=tol)
    assert a.cy == pytest.approx(b.cy, abs=tol)
    assert a.w == pytest.approx(b.w, rel=tol)
    assert a.h == pytest.approx(b.h, rel=tol)
    # angles equal modulo pi (pi/2 for squares)
    period = math.pi / 2 if abs(a.w - a.h) <= tol * a.w else math.pi
    d = (a.theta - b.theta) % period
    assert min(d, period - d) == pytest.approx(0.0, abs=1e-7)


class TestRotatedBox:
    def test_rejects_non_positive_sides(self):
        with pytest.raises(ValueError):
            RotatedBox(0, 0, 0, 1)
        with pytest.raises(ValueError):
            RotatedBox(0, 0, 1, -2)

    @given(boxes)
    def test_normalized_is_long_edge(self, b):
        n = b.normalized()
        assert n.w >= n.h
        assert -math.pi / 2 <= n.theta < math.pi / 2
        assert n.area == pytest.approx(b.area)

    def test_square_ties_break_to_non_negative_angle(self):
        n = RotatedBox(0, 0, 3, 3, -0.2).normalized()
        assert n.theta == pytest.approx(math.pi / 2 - 0.2)
        assert RotatedBox(0, 0, 3, 3, -math.pi / 2).normalized().theta == pytest.approx(0.0)

    def test_vectorized_normalization_matches_scalar(self):
        rng = np.random.default_rng(3)
        arr = np.column_stack([rng.normal(size=(50, 2)), rng.uniform(1, 5, (50, 2)),
                               rng.uniform(-7, 7, 50)])
        arr[:5, 3] = arr[:5, 2]
        vec = normalize_boxes(arr)
        for row, v in zip(arr, vec):
            n = RotatedBox.from_array(row).normalized()
            np.testing.assert_allclose(v, n.as_array(), atol=1e-12)


class TestGaussian:
    @pytest.mark.parametrize("theta", [0.0, 0.4, -1.2, math.pi / 3])
    def test_square_gives_identity(self, theta):
        g = box_to_gaussian(RotatedBox(0, 0, 2, 2, theta))
        np.testing.assert_allclose(g.mu, [0, 0])
        np.testing.assert_allclose(g.sigma, np.eye(2), atol=1e-15)

    def test_closed_form_examples(self):
        np.testing.assert_allclose(box_to_gaussian(RotatedBox(0, 0, 4, 2, 0)).sigma,
                                   np.diag([4.0, 1.0]), atol=1e-15)
        np.testing.assert_allclose(box_to_gaussian(RotatedBox(0, 0, 4, 2, math.pi / 2)).sigma,
                                   np.diag([1.0, 4.0]), atol=1e-15)

    @given(boxes)
    def test_eigenvalues_independent_of_angle(self, b):
        s = box_to_gaussian(b).sigma
        assert np.max(np.abs(s - s.T)) <= 1e-12
        ev = np.sort(np.linalg.eigvalsh(s))
        expected = np.sort([b.w ** 2 / 4, b.h ** 2 / 4])
        np.testing.assert_allclose(ev, expected, rtol=1e-9, atol=1e-9 * expected.max())

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        arr = np.column_stack([rng.normal(size=(20, 2)), rng.uniform(1, 5, (20, 2)),
                               rng.uniform(-3, 3, 20)])
        mu, sig = boxes_to_gaussians(arr)
        for row, m, s in zip(arr, mu, sig):
            g = box_to_gaussian(RotatedBox.from_array(row))
            np.testing.assert_allclose(m, g.mu)
            np.testing.assert_allclose(s, g.sigma, atol=1e-12)


class TestQuad:
    def test_axis_aligned_square(self):
        q = box_to_quad(RotatedBox(0, 0, 2, 2, 0))
        assert {tuple(p) for p in q.round(12)} == {(-1, -1), (1, -1), (1, 1), (-1, 1)}

    def test_quarter_turn_swaps_sides(self):
        a = box_to_quad(RotatedBox(0, 0, 2, 1, math.pi / 2)).round(12) + 0.0
        b = box_to_quad(RotatedBox(0, 0, 1, 2, 0)).round(12) + 0.0
        assert {tuple(p) for p in a} == {tuple(p) for p in b}

    @given(boxes)
    def test_area_and_winding(self, b):
        q = box_to_quad(b)
        area = shoelace(q.tolist())
        assert area > 0
        assert area == pytest.approx(b.w * b.h, rel=1e-9)

    def test_vectorized_matches_scalar(self):
        bs = [RotatedBox(1, 2, 3, 1, 0.3), RotatedBox(-4, 0, 2, 2, 2.0)]
        arr = boxes_to_quads(np.array([b.as_array() for b in bs]))
        for b, q in zip(bs, arr):
            np.testing.assert_allclose(q, box_to_quad(b))

    def test_round_trip_examples(self):
        same_box(quad_to_box(box_to_quad(RotatedBox(0, 0, 2, 2, 0))), RotatedBox(0, 0, 2, 2, 0))
        got = quad_to_box(box_to_quad(RotatedBox(5, 5, 4, 2, 0.3)))
        same_box(got, RotatedBox(5, 5, 4, 2, 0.3))
        assert got.w >= got.h

    @given(boxes)
    def test_round_trip(self, b):
        got = quad_to_box(box_to_quad(b))
        same_box(got, b, tol=1e-8)

    def test_clockwise_input_accepted(self):
        q = box_to_quad(RotatedBox(3, 4, 5, 2, 0.7))[::-1]
        same_box(quad_to_box(q), RotatedBox(3, 4, 5, 2, 0.7))

    @pytest.mark.parametrize("pts", [
        [[0, 0], [1, 1], [2, 2], [3, 3]],
        [[1, 1]] * 4,
    ])
    def test_degenerate_quad(self, pts):
        with pytest.raises(ValueError, match="degenerate"):
            quad_to_box(pts)


class TestRotatedIoU:
    def test_identical(self):
        b = RotatedBox(3, -2, 7, 2, 0.9)
        assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-9)

    def test_shifted_unit_squares(self):
        assert rotated_iou(RotatedBox(0, 0, 1, 1), RotatedBox(0.5, 0, 1, 1)) == pytest.approx(1 / 3, abs=1e-12)

    def test_crossed_rectangles(self):
        iou = rotated_iou(RotatedBox(0, 0, 2, 1, 0), RotatedBox(0, 0, 2, 1, math.pi / 2))
        assert iou == pytest.approx(1 / 3, abs=1e-12)

    def test_disjoint(self):
        assert rotated_iou(RotatedBox(0, 0, 1, 1), RotatedBox(5, 5, 1, 1, 0.3)) == 0.0

    def test_contained(self):
        assert rotated_iou(RotatedBox(0, 0, 4, 4), RotatedBox(0, 0, 2, 2, 0.5)) == pytest.approx(0.25)

    @given(boxes, boxes)
    @settings(max_examples=300)
    def test_symmetric_and_bounded(self, a, b):
        x, y = rotated_iou(a, b), rotated_iou(b, a)
        assert 0.0 <= x <= 1.0
        assert x == pytest.approx(y, abs=1e-12)

    @given(boxes, st.floats(-5, 5), st.floats(-5, 5))
    def test_axis_aligned_closed_form(self, a, dx, dy):
        a = RotatedBox(a.cx, a.cy, a.w, a.h, 0.0)
        b = RotatedBox(a.cx + dx, a.cy + dy, a.h, a.w, 0.0)
        ref = axis_aligned_iou(a.as_array(), b.as_array())
        assert rotated_iou(a, b) == pytest.approx(ref, abs=1e-9)

    def test_monte_carlo_sample(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = RotatedBox(0, 0, *rng.uniform(1, 4, 2), rng.uniform(-3, 3))
            b = RotatedBox(*rng.uniform(-1, 1, 2), *rng.uniform(1, 4, 2), rng.uniform(-3, 3))
            mc = monte_carlo_iou(a.as_array(), b.as_array(), 200_000, rng)
            assert rotated_iou(a, b) == pytest.approx(mc, abs=1e-2)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(5)
        a = np.column_stack([rng.uniform(0, 10, (8, 2)), rng.uniform(1, 4, (8, 2)), rng.uniform(-2, 2, 8)])
        b = np.column_stack([rng.uniform(0, 10, (5, 2)), rng.uniform(1, 4, (5, 2)), rng.uniform(-2, 2, 5)])
        m = iou_matrix(a, b)
        for i in range(8):
            for j in range(5):
                assert m[i, j] == rotated_iou(RotatedBox.from_array(a[i]), RotatedBox.from_array(b[j]))
        assert iou_matrix(a, np.zeros((0, 5))).shape == (8, 0)


class TestDeltas:
    def test_identity_is_zero(self):
        a = RotatedBox(3, 4, 5, 2, 0.0)
        np.testing.assert_array_equal(encode_deltas(a, a), np.zeros(5))

    def test_worked_example(self):
        d = encode_deltas(RotatedBox(0, 0, 2, 2, 0), RotatedBox(1, 0, 4, 2, 0))
        np.testing.assert_allclose(d, [0.5, 0.0, math.log(2), 0.0, 0.0], atol=1e-15)
        same_box(decode_deltas(RotatedBox(0, 0, 2, 2, 0), [0.5, 0.0, math.log(2), 0.0, 0.0]),
                 RotatedBox(1, 0, 4, 2, 0))

    def test_angle_delta_wrapped(self):
        d = encode_deltas(RotatedBox(0, 0, 2, 1, 0), RotatedBox(0, 0, 2, 1, 3.0))
        assert -math.pi / 2 <= d[4] < math.pi / 2
        assert d[4] == pytest.approx(3.0 - math.pi)

    @given(boxes, st.floats(-20, 20), st.floats(-20, 20), st.floats(0.2, 5), st.floats(0.2, 5), angles)
    def test_round_trip(self, t, ax, ay, aw, ah, at):
        anchor = RotatedBox(t.cx + ax, t.cy + ay, t.w * aw, t.h * ah, at)
        got = decode_deltas(anchor, encode_deltas(anchor, t))
        same_box(got, t)

    def test_decode_clamps_log_sizes(self):
        b = decode_deltas(RotatedBox(0, 0, 1, 1, 0), [0, 0, 50.0, -50.0, 0])
        assert b.w == pytest.approx(math.exp(4))
        assert b.h == pytest.approx(math.exp(-4))
