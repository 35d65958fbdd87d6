import numpy as np
import pytest

from rmps.geometry import (
    Box,
    Halfspace,
    Obstacle,
    SafeSet,
    box_contains,
    box_from_points,
    erode_box,
    erode_safe_set,
    safe_contains,
)


def test_box_from_points_envelope():
    box = box_from_points([(0, 0), (1, 2), (-1, 1)])
    assert np.array_equal(box.lo, [-1, 0])
    assert np.array_equal(box.hi, [1, 2])


def test_box_from_single_point_is_degenerate():
    box = box_from_points([(3, 3)])
    assert np.array_equal(box.lo, [3, 3])
    assert np.array_equal(box.hi, [3, 3])


def test_box_from_points_rejects_empty():
    with pytest.raises(ValueError):
        box_from_points([])


def test_box_from_uniform_samples_stays_in_support():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(1000, 2))
    box = box_from_points(pts)
    assert np.all(box.lo >= -1) and np.all(box.hi <= 1)
    for p in pts[::37]:
        assert box_contains(box, p)
    assert all(box_contains(box, p) for p in pts)


def test_box_contains_boundary_and_outside():
    box = Box([0, 0], [1, 1])
    assert box_contains(box, (0.5, 0.5))
    assert box_contains(box, (1, 1))
    assert not box_contains(box, (1.0001, 0))
    with pytest.raises(ValueError):
        box_contains(box, (0.5, 0.5, 0.5))


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        Box([1.0], [0.0])


def test_erode_box_interval_arithmetic():
    eroded = erode_box(Box([0.0], [10.0]), Box([-1.0], [2.0]))
    assert np.allclose(eroded.lo, [1.0]) and np.allclose(eroded.hi, [8.0])


def test_erode_box_empty_signal():
    assert erode_box(Box([0.0], [1.0]), Box([-2.0], [2.0])) is None


def test_erode_box_zero_margin_identity():
    outer = Box([0.0, -1.0], [1.0, 3.0])
    eroded = erode_box(outer, Box.zero(2))
    assert np.array_equal(eroded.lo, outer.lo) and np.array_equal(eroded.hi, outer.hi)


def _state_margin(lo, hi):
    return Box(np.array(lo), np.array(hi))


def test_erode_safe_set_halfspace_support():
    safe = SafeSet(2, (Halfspace(np.array([1.0, 0.0]), 5.0),), (), (0, 1))
    margin = _state_margin([-1.0, 0.0], [1.0, 0.0])
    tightened = erode_safe_set(safe, margin)
    assert tightened.halfspaces[0].offset == pytest.approx(4.0)


def test_erode_safe_set_zero_margin_keeps_radius():
    safe = SafeSet(2, (), (Obstacle(np.zeros(2), 1.0),), (0, 1))
    tightened = erode_safe_set(safe, Box.zero(2))
    assert tightened.obstacles[0].radius == pytest.approx(1.0)


def test_erode_safe_set_inflates_radius_by_position_norm():
    safe = SafeSet(2, (), (Obstacle(np.zeros(2), 1.0),), (0, 1))
    margin = _state_margin([-0.3, -0.4], [0.3, 0.4])
    tightened = erode_safe_set(safe, margin)
    assert tightened.obstacles[0].radius == pytest.approx(1.5)
    # every original-disk point plus any margin offset stays in the inflated disk
    rng = np.random.default_rng(1)
    for _ in range(300):
        theta = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0, 1.0)
        p = r * np.array([np.cos(theta), np.sin(theta)])
        off = rng.uniform([-0.3, -0.4], [0.3, 0.4])
        assert np.linalg.norm(p + off) <= 1.5 + 1e-12


def test_safe_contains_examples():
    disk = SafeSet(2, (), (Obstacle(np.zeros(2), 1.0),), (0, 1))
    assert safe_contains(disk, (2, 0))
    assert not safe_contains(disk, (0.5, 0))
    assert safe_contains(disk, (1.0, 0.0))  # boundary is safe
    theta_cap = SafeSet(1, (Halfspace(np.array([1.0]), 0.2),), (), ())
    assert not safe_contains(theta_cap, (0.3,))


def _random_box(rng, n, center_scale=1.0):
    lo = rng.uniform(-center_scale, center_scale, n)
    hi = lo + rng.uniform(0, center_scale, n)
    return Box(lo, hi)


def test_erosion_containment_duality_sampled():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = rng.integers(1, 4)
        outer = _random_box(rng, n, 3.0)
        margin = _random_box(rng, n, 0.8)
        eroded = erode_box(outer, margin)
        if eroded is None:
            continue
        c = rng.uniform(eroded.lo, eroded.hi)
        for m in margin.corners():
            assert box_contains(outer, c + m)


def _random_safe_set(rng):
    halfspaces = []
    for _ in range(rng.integers(1, 4)):
        a = rng.normal(size=4)
        a /= np.linalg.norm(a)
        halfspaces.append(Halfspace(a, rng.uniform(0.5, 4.0)))
    obstacles = [
        Obstacle(rng.uniform(-3, 3, 2), rng.uniform(0.2, 1.0))
        for _ in range(rng.integers(0, 3))
    ]
    return SafeSet(4, tuple(halfspaces), tuple(obstacles), (0, 1))


def test_erode_safe_set_soundness_sampled():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(400):
        safe = _random_safe_set(rng)
        margin = _random_box(rng, 4, 0.5)
        tightened = erode_safe_set(safe, margin)
        for _ in range(5):
            x = rng.uniform(-4, 4, 4)
            if not safe_contains(tightened, x):
                continue
            checked += 1
            for m in margin.corners():
                assert safe_contains(safe, x + m)
    assert checked > 200


def test_erosion_monotonicity_sampled():
    rng = np.random.default_rng(4)
    for _ in range(300):
        safe = _random_safe_set(rng)
        small = _random_box(rng, 4, 0.3)
        grow = rng.uniform(0, 0.3, 4)
        large = Box(small.lo - grow, small.hi + grow)
        t_small = erode_safe_set(safe, small)
        t_large = erode_safe_set(safe, large)
        for _ in range(5):
            x = rng.uniform(-4, 4, 4)
            if safe_contains(t_large, x):
                assert safe_contains(t_small, x)
